use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Supervision for [`softmax_ce_loss`].
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// One class id per row.
    Hard(&'a [usize]),
    /// One probability row per logit row; each row sums to one.
    Soft(&'a Tensor2),
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Row-wise `softmax(logits / temperature)`, max-shifted.
pub fn softmax(logits: &Tensor2, temperature: f64) -> Result<Tensor2> {
    check_temperature(temperature)?;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_row_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

/// Row-wise `log softmax(logits / temperature)`.
pub fn log_softmax(logits: &Tensor2, temperature: f64) -> Result<Tensor2> {
    check_temperature(temperature)?;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let lse = row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v = *v / temperature - lse;
        }
    }
    Ok(out)
}

fn softmax_row_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean cross-entropy of `softmax(logits / temperature)` against `targets`,
/// with its exact gradient with respect to `logits`:
/// `(softmax(logits / T) - targets) / (T * rows)`.
pub fn softmax_ce_loss(logits: &Tensor2, targets: Targets<'_>, temperature: f64) -> Result<(f64, Tensor2)> {
    check_temperature(temperature)?;
    let (rows, cols) = logits.shape();
    if rows == 0 {
        return Err(Error::Parameter("cross-entropy over an empty batch".into()));
    }
    match targets {
        Targets::Hard(labels) => {
            if labels.len() != rows {
                return Err(Error::shape(None, format!("{rows} labels"), labels.len()));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
                return Err(Error::Parameter(format!("label {bad} out of range for {cols} classes")));
            }
        }
        Targets::Soft(t) => {
            if t.shape() != logits.shape() {
                return Err(Error::shape(None, format!("{:?}", logits.shape()), format!("{:?}", t.shape())));
            }
            for (r, row) in t.iter_rows().enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Parameter(format!("target row {r} sums to {s}")));
                }
            }
        }
    }

    let log_p = log_softmax(logits, temperature)?;
    let mut grad = softmax(logits, temperature)?;
    let scale = 1.0 / (temperature * rows as f64);
    let mut total = 0.0;
    for r in 0..rows {
        let lp = log_p.row(r);
        let g = grad.row_mut(r);
        match targets {
            Targets::Hard(labels) => {
                let y = labels[r];
                total -= lp[y];
                g[y] -= 1.0;
            }
            Targets::Soft(t) => {
                for ((gv, &tv), &lv) in g.iter_mut().zip(t.row(r)).zip(lp) {
                    if tv != 0.0 {
                        total -= tv * lv;
                    }
                    *gv -= tv;
                }
            }
        }
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total / rows as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor2::from_vec(3, 10, vec![0.7; 30]).unwrap();
        let (loss, _) = softmax_ce_loss(&logits, Targets::Hard(&[0, 4, 9]), 1.0).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn own_distribution_has_zero_gradient() {
        let logits = Tensor2::from_rows(&[vec![1.0, -0.5, 2.0], vec![0.0, 3.0, -1.0]]).unwrap();
        let tau = 2.0;
        let p = softmax(&logits, tau).unwrap();
        let (_, g) = softmax_ce_loss(&logits, Targets::Soft(&p), tau).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-16), "{g:?}");
    }

    #[test]
    fn finite_difference_tempered_ce() {
        let mut rng = seed::rng(21);
        for _ in 0..20 {
            let logits = Tensor2::from_vec(4, 3, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let (_, g) = softmax_ce_loss(&logits, Targets::Hard(&labels), 2.0).unwrap();
            let h = 1e-5;
            for i in 0..12 {
                let mut up = logits.clone();
                up.data_mut()[i] += h;
                let mut dn = logits.clone();
                dn.data_mut()[i] -= h;
                let fu = softmax_ce_loss(&up, Targets::Hard(&labels), 2.0).unwrap().0;
                let fd = softmax_ce_loss(&dn, Targets::Hard(&labels), 2.0).unwrap().0;
                let num = (fu - fd) / (2.0 * h);
                let a = g.data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
                assert!(rel < 1e-6, "analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let logits = Tensor2::zeros(2, 3);
        assert!(matches!(
            softmax_ce_loss(&logits, Targets::Hard(&[0, 1]), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(softmax_ce_loss(&logits, Targets::Hard(&[0, 3]), 1.0).is_err());
        let t = Tensor2::from_vec(2, 3, vec![0.5, 0.5, 0.5, 1.0, 0.0, 0.0]).unwrap();
        assert!(softmax_ce_loss(&logits, Targets::Soft(&t), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            vals in prop::collection::vec(-50.0f64..50.0, 12),
            tau in 0.05f64..20.0,
        ) {
            let logits = Tensor2::from_vec(3, 4, vals).unwrap();
            let p = softmax(&logits, tau).unwrap();
            for row in p.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn hard_label_ce_is_nonnegative(
            vals in prop::collection::vec(-30.0f64..30.0, 10),
            label in 0usize..5,
        ) {
            let logits = Tensor2::from_vec(2, 5, vals).unwrap();
            let (loss, _) = softmax_ce_loss(&logits, Targets::Hard(&[label, 4 - label]), 1.0).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
