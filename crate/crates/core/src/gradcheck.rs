//! Central finite-difference checks of analytic gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::{Error, Result, Rng, Tensor};

/// Below this magnitude gradients are compared absolutely rather than
/// relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// A scalar function of several tensors together with a claimed gradient.
pub trait ScalarFunction {
    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
}

/// Adapts a graph-building closure; the gradient comes from the tape.
pub struct GraphFunction<F>(pub F);

impl<F> GraphFunction<F>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn build(&self, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.0)(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::invalid("grad_check", "function output is not a scalar"));
        }
        Ok((g, vars, out))
    }
}

impl<F> ScalarFunction for GraphFunction<F>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let (g, _, out) = self.build(inputs)?;
        Ok(g.value(out).item())
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let (g, vars, out) = self.build(inputs)?;
        let grads = g.backward(out)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of `f` at `inputs` with central
/// differences of step `eps` over every coordinate of every input.
pub fn grad_check(f: &impl ScalarFunction, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |i| (ti, i)))
        .collect();
    check_coordinates(f, inputs, eps, &coords)
}

/// Like [`grad_check`] but probes at most `per_input` random coordinates of
/// each input; small inputs are checked exhaustively.
pub fn grad_check_sampled(
    f: &impl ScalarFunction,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let mut coords = Vec::new();
    for (ti, t) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.numel()).collect();
        if idx.len() > per_input {
            rng.shuffle(&mut idx);
            idx.truncate(per_input);
        }
        coords.extend(idx.into_iter().map(|i| (ti, i)));
    }
    check_coordinates(f, inputs, eps, &coords)
}

fn check_coordinates(
    f: &impl ScalarFunction,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let analytic = f.gradient(inputs)?;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for &(ti, i) in coords {
        let orig = inputs[ti].data()[i];
        probe[ti].data_mut()[i] = orig + eps;
        let plus = f.value(&probe)?;
        probe[ti].data_mut()[i] = orig - eps;
        let minus = f.value(&probe)?;
        probe[ti].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[ti].data()[i];
        let err = relative_error(a, numeric);
        report.coordinates += 1;
        if err > report.max_rel_error || report.coordinates == 1 {
            report.max_rel_error = err;
            report.worst = (ti, i);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sum_sq() -> GraphFunction<impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> {
        GraphFunction(|g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
    }

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = sum_sq();
        let grad = f.gradient(std::slice::from_ref(&x)).unwrap();
        assert_eq!(grad[0].data(), &[2.0, 4.0, 6.0]);
        let r = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    struct Corrupted;

    impl ScalarFunction for Corrupted {
        fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
            Ok(inputs[0].data().iter().map(|v| v * v).sum())
        }
        fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            // drops the factor 2
            Ok(vec![inputs[0].clone()])
        }
    }

    #[test]
    fn detects_corrupted_backward() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let r = grad_check(&Corrupted, &[x], 1e-5).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn rejects_non_scalar_output() {
        let f = GraphFunction(|_g: &mut Graph<f64>, v: &[Var]| Ok(v[0]));
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(&f, &[x], 1e-5).is_err());
    }
}
