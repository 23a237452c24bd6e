//! JSON reports, CSV traces and the published reference figures that
//! `stats` compares against.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vitpose_core::nn::{AttentionMode, ModelConfig};

use crate::error::{Error, Result};

/// Envelope written around every command's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<R> {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    #[serde(flatten)]
    pub body: R,
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

/// Writes `rows` as CSV with a header row taken from the field names.
pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Io {
        path: path.into(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Io {
        path: path.into(),
        source: std::io::Error::other(e),
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Published size of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Millions of parameters, when published.
    pub params_m: Option<f64>,
    pub gflops: f64,
}

/// Published figures for the named preset at 256x192, if there are any.
pub fn reference(name: &str, cfg: &ModelConfig) -> Option<Reference> {
    let b = &cfg.backbone;
    if b.input_hw != (256, 192) || b.patch_size != 16 {
        return None;
    }
    let r = |params_m, gflops| Some(Reference { params_m, gflops });
    match (name, b.stride, b.attention, b.window) {
        ("vit_s", 16, AttentionMode::Full, _) => r(Some(22.0), 5.3),
        ("vit_b", 16, AttentionMode::Full, _) => r(Some(86.0), 17.1),
        ("vit_l", 16, AttentionMode::Full, _) => r(Some(307.0), 59.8),
        ("vit_h", 16, AttentionMode::Full, _) => r(Some(632.0), 122.9),
        ("vit_b", 8, AttentionMode::Full, _) => r(None, 76.59),
        ("vit_b", 8, AttentionMode::Window | AttentionMode::WindowShift, (8, 8)) => r(None, 66.31),
        ("vit_b", 8, AttentionMode::WindowPool | AttentionMode::WindowShiftPool, (8, 8)) => r(None, 66.39),
        ("vit_b", 8, AttentionMode::WindowShiftPool, (16, 12)) => r(None, 68.46),
        _ => None,
    }
}

/// Relative deviation of `measured` from `reference`.
pub fn rel_dev(measured: f64, reference: f64) -> f64 {
    (measured - reference).abs() / reference
}

#[cfg(test)]
mod tests {
    use super::*;
    use vitpose_core::train::TraceRow;

    #[test]
    fn trace_csv_has_a_header_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![
            TraceRow {
                step: 0,
                epoch: 0,
                loss: 0.5,
                lr_scale: 1.0,
            },
            TraceRow {
                step: 1,
                epoch: 0,
                loss: 0.25,
                lr_scale: 0.1,
            },
        ];
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,epoch,loss,lr_scale\n"), "{text}");
        assert_eq!(read_csv::<TraceRow>(&p).unwrap(), rows);
    }

    #[test]
    fn references_only_for_published_settings() {
        let mut c = ModelConfig::preset("vit_b").unwrap();
        assert_eq!(reference("vit_b", &c).unwrap().gflops, 17.1);
        c.backbone.stride = 8;
        c.backbone.attention = AttentionMode::WindowPool;
        assert_eq!(reference("vit_b", &c).unwrap().gflops, 66.39);
        c.backbone.input_hw = (384, 288);
        assert!(reference("vit_b", &c).is_none());
        assert!(reference("tiny_desk", &ModelConfig::preset("tiny_desk").unwrap()).is_none());
    }

    #[test]
    fn reports_flatten_their_body() {
        #[derive(Serialize)]
        struct Body {
            ap: f64,
        }
        let r = Report {
            command: "eval".into(),
            config_digest: "abc".into(),
            seed: 3,
            body: Body { ap: 1.0 },
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["ap"], 1.0);
        assert_eq!(v["seed"], 3);
    }
}
