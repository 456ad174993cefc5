//! Central finite-difference gradient checks.
//!
//! Coordinates whose ±step perturbation flips any ReLU mask or max-pool
//! argmax are skipped: those straddle a non-differentiable point and the
//! difference quotient is meaningless there.

use super::{with_branch_trace, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol && self.inputs.iter().any(|c| c.checked > 0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Check at most this many evenly strided coordinates per input.
    pub max_coords: Option<usize>,
}

impl GradCheckOptions {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheckOptions { step, tol, floor: 1e-8, max_coords: None }
    }
}

pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    grad_check_with(f, inputs, GradCheckOptions::new(step, tol))
}

fn eval<F>(f: &F, vals: &[Vec<f64>], shapes: &[Vec<usize>]) -> Result<(Tensor, Vec<Tensor>, u64)>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves = vals
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::param(v.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let (out, hash) = with_branch_trace(|| f(&leaves));
    let out = out?;
    if out.len() != 1 {
        return Err(Error::NotScalar(out.shape().to_vec()));
    }
    if !out.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok((out, leaves, hash))
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if inputs.iter().flat_map(|t| t.values()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grad_check inputs".into()));
    }
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut vals: Vec<Vec<f64>> = inputs.iter().map(Tensor::to_vec).collect();

    let (out, leaves, base_hash) = eval(&f, &vals, &shapes)?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut report = GradCheckReport { inputs: Vec::new(), tol: opts.tol };
    for i in 0..vals.len() {
        let n = vals[i].len();
        let stride = match opts.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut check = InputCheck { index: i, max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
        for j in (0..n).step_by(stride) {
            let orig = vals[i][j];
            vals[i][j] = orig + opts.step;
            let (plus, _, h_plus) = eval(&f, &vals, &shapes)?;
            vals[i][j] = orig - opts.step;
            let (minus, _, h_minus) = eval(&f, &vals, &shapes)?;
            vals[i][j] = orig;
            if h_plus != base_hash || h_minus != base_hash {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.item() - minus.item()) / (2.0 * opts.step);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("grad_check input {i} coordinate {j}")));
            }
            check.max_rel_err = check.max_rel_err.max(err);
            check.checked += 1;
        }
        report.inputs.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::param(v.to_vec(), s).unwrap()
    }

    #[test]
    fn relu_linear_region() {
        let x = t(&[0.5, 1.0, 2.5], &[3]);
        let r = grad_check(|x| Ok(x[0].relu().sum_all()), &[x], 1e-5, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn kink_is_skipped_not_failed() {
        let x = t(&[1e-7, 1.0], &[2]);
        let r = grad_check(|x| Ok(x[0].relu().sum_all()), &[x], 1e-5, 1e-8).unwrap();
        assert_eq!(r.inputs[0].skipped_kinks, 1);
        assert!(r.passed());
    }

    #[test]
    fn detects_wrong_backward() {
        // A deliberately broken op: forward x^2, backward claims 3x.
        let broken = |x: &[Tensor]| -> Result<Tensor> {
            let v: Vec<f64> = x[0].values().iter().map(|a| a * a).collect();
            Ok(Tensor::from_op(
                "broken_square",
                v,
                x[0].shape().to_vec(),
                vec![x[0].clone()],
                Box::new(|g, _, p| {
                    vec![Some(g.iter().zip(p[0].values()).map(|(g, x)| 3.0 * g * x).collect())]
                }),
            )
            .sum_all())
        };
        let r = grad_check(broken, &[t(&[1.0, -2.0], &[2])], 1e-5, 1e-6).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_err() > 0.1);
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = t(&[-1.0], &[1]);
        assert!(grad_check(|x| Ok(x[0].log().sum_all()), &[x], 1e-5, 1e-6).is_err());
    }
}
