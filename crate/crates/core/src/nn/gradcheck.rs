//! Central finite-difference gradient checking.
//!
//! Relative error is `|a - n| / max(|a|, |n|, SCALE_FLOOR)`. The floor keeps
//! entries whose true gradient is (near) zero from reporting the O(h²)
//! truncation noise as a large relative error.

use super::model::ModelParams;
use super::tensor::Tensor2;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const SCALE_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn with_flat(template: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut m = template.clone();
    let mut it = flat.iter();
    for t in m.tensors_mut() {
        for v in t.iter_mut() {
            *v = *it.next().expect("flat vector sized like the model");
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub params_max_rel_error: f64,
    pub input_max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.params_max_rel_error.max(self.input_max_rel_error)
    }
}

/// Compare the analytic parameter and input gradients of
/// `loss(model(batch))` with central differences.
pub fn check_model(
    params: &ModelParams,
    batch: &Tensor2,
    from_classifier_only: bool,
    h: f64,
    loss: impl Fn(&Tensor2) -> Result<(f64, Tensor2)>,
) -> Result<GradCheck> {
    let trace = params.forward_trace(batch, from_classifier_only)?;
    let (_, grad_logits) = loss(trace.logits())?;
    let bp = params.backward_trace(&trace, &grad_logits)?;

    let eval_params = |flat: &[f64]| {
        let m = with_flat(params, flat);
        let logits = m.forward(batch, from_classifier_only).expect("shape checked above");
        loss(&logits).expect("loss accepted these logits above").0
    };
    let flat = params.flatten();
    let numeric = numeric_gradient(&flat, h, eval_params);
    let analytic = bp.grads.flatten();

    // Only the evaluated layers carry gradient.
    let skip: usize = if from_classifier_only {
        params.layers()[..params.split_index()]
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    } else {
        0
    };
    let params_err = max_relative_error(&analytic[skip..], &numeric[skip..]);

    let (rows, cols) = batch.shape();
    let eval_input = |flat: &[f64]| {
        let x = Tensor2::from_vec(rows, cols, flat.to_vec()).expect("same shape");
        let logits = params.forward(&x, from_classifier_only).expect("shape checked above");
        loss(&logits).expect("loss accepted these logits above").0
    };
    let numeric_in = numeric_gradient(batch.data(), h, eval_input);
    let input_err = max_relative_error(bp.grad_input.data(), &numeric_in);

    Ok(GradCheck {
        params_max_rel_error: params_err,
        input_max_rel_error: input_err,
        checked: analytic.len() - skip + numeric_in.len(),
    })
}
