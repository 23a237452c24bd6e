//! Multiply-accumulate accounting.
//!
//! One multiply-accumulate is counted as one FLOP. Only matrix products and
//! convolutions are counted; normalisation, activations and element-wise
//! arithmetic are not.

use alloc::collections::BTreeMap;
use alloc::string::String;

/// Human-readable statement of the counting convention, embedded in reports.
pub const FLOP_CONVENTION: &str = "1 FLOP = 1 multiply-accumulate (matmul, attention products, conv, deconv)";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    total_macs: u64,
    per_layer: BTreeMap<String, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, layer: &str, macs: u64) {
        self.total_macs += macs;
        *self.per_layer.entry(String::from(layer)).or_insert(0) += macs;
    }

    pub fn total_macs(&self) -> u64 {
        self.total_macs
    }

    pub fn gflops(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn per_layer(&self) -> &BTreeMap<String, u64> {
        &self.per_layer
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn macs_with_prefix(&self, prefix: &str) -> u64 {
        self.per_layer
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (k, v) in &other.per_layer {
            self.add(k, *v);
        }
    }

    pub fn reset(&mut self) {
        self.total_macs = 0;
        self.per_layer.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_sum_of_layers_and_resets() {
        let mut c = FlopCounter::new();
        c.add("a", 10);
        c.add("b", 5);
        c.add("a", 1);
        assert_eq!(c.total_macs(), 16);
        assert_eq!(c.per_layer().values().sum::<u64>(), c.total_macs());
        assert_eq!(c.per_layer()["a"], 11);
        c.reset();
        assert_eq!(c.total_macs(), 0);
        assert!(c.per_layer().is_empty());
    }
}
