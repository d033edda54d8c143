//! Central finite-difference gradient checking on `f64` tensors.

use ndarray::ArrayD;

use super::{grad, Var};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares `grad(f)` against central differences for every element of every
/// input (or every `stride`-th element for large inputs).
///
/// `floor` keeps the relative error meaningful when both gradients are ~0.
pub fn check<F>(f: F, inputs: &[ArrayD<f64>], eps: f64, floor: f64, stride: usize) -> GradCheck
where
    F: Fn(&[Var<f64>]) -> Var<f64>,
{
    let vars: Vec<Var<f64>> = inputs.iter().map(|a| Var::leaf(a.clone())).collect();
    let out = f(&vars);
    let refs: Vec<&Var<f64>> = vars.iter().collect();
    let analytic = grad(&out, &refs, false);

    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let vs: Vec<Var<f64>> = arrays.iter().map(|a| Var::constant(a.clone())).collect();
        f(&vs).item()
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let zeros = ArrayD::zeros(inputs[i].raw_dim());
        let a = a.as_ref().map(|v| v.value().as_standard_layout().into_owned()).unwrap_or(zeros);
        let n = inputs[i].len();
        for j in (0..n).step_by(stride.max(1)) {
            let orig = inputs[i].as_slice().expect("contiguous input")[j];
            work[i].as_slice_mut().unwrap()[j] = orig + eps;
            let plus = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig - eps;
            let minus = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let an = a.as_slice().unwrap()[j];
            let denom = an.abs().max(numeric.abs()).max(floor);
            worst = worst.max((an - numeric).abs() / denom);
            checked += 1;
        }
    }
    GradCheck { max_rel_error: worst, checked }
}
