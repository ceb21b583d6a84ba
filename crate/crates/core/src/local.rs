//! Client-side training.
//!
//! Each step minimizes cross-entropy on a real batch, plus a tempered
//! distillation term towards the teacher on the same batch, plus
//! cross-entropy of generator-synthesized features pushed through the
//! classifier part only. Terms whose weight is zero, or whose component is
//! absent, are skipped outright so the remaining arithmetic is identical to
//! plain FedAvg local training.

use serde::{Deserialize, Serialize};

use crate::data::{batches_of, Dataset};
use crate::error::{Error, Result};
use crate::generator::SyntheticStream;
use crate::nn::{check_temperature, softmax, softmax_ce_loss, ModelParams, OptimizerState, Targets, Tensor2};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_kd: f64,
    pub lambda_gen: f64,
    pub tau: f64,
    /// Multiply the distillation term by `tau²`.
    pub kd_tau_squared: bool,
    /// Draw a fresh synthetic batch for every real batch instead of one per
    /// epoch.
    pub syn_per_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            lambda_kd: 0.5,
            lambda_gen: lambda_gen_for_beta(0.5),
            tau: 2.0,
            kd_tau_squared: false,
            syn_per_batch: false,
        }
    }
}

const LAMBDA_GEN_PRESETS: [(f64, f64); 3] = [(0.1, 0.01), (0.5, 1.0), (5.0, 0.01)];

/// Preset generator-loss weight for a Dirichlet concentration; values between
/// presets take the nearest one on a log scale.
pub fn lambda_gen_for_beta(beta: f64) -> f64 {
    LAMBDA_GEN_PRESETS
        .iter()
        .min_by(|a, b| {
            let da = (a.0.ln() - beta.ln()).abs();
            let db = (b.0.ln() - beta.ln()).abs();
            da.total_cmp(&db)
        })
        .map(|p| p.1)
        .expect("presets are non-empty")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::key("batch_size", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::key("tau", "must be positive"));
        }
        for (key, v) in [("lambda_kd", self.lambda_kd), ("lambda_gen", self.lambda_gen), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::key(key, "must be non-negative"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::key("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::key("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `lambda * mean_rows CE(softmax(student/τ), softmax(teacher/τ))` and its
/// gradient with respect to the student logits.
pub fn kd_loss(student: &Tensor2, teacher: &Tensor2, tau: f64, lambda: f64) -> Result<(f64, Tensor2)> {
    check_temperature(tau)?;
    if student.shape() != teacher.shape() {
        return Err(Error::shape(None, format!("{:?}", student.shape()), format!("{:?}", teacher.shape())));
    }
    if lambda == 0.0 {
        return Ok((0.0, Tensor2::zeros(student.rows(), student.cols())));
    }
    let target = softmax(teacher, tau)?;
    let (loss, mut grad) = softmax_ce_loss(student, Targets::Soft(&target), tau)?;
    grad.scale(lambda);
    Ok((lambda * loss, grad))
}

/// The same objective written as `lambda * mean_rows KL(P_teacher ‖ Q_student)`
/// with the gradient taken through the log-softmax Jacobian.
pub fn kd_loss_kl(student: &Tensor2, teacher: &Tensor2, tau: f64, lambda: f64) -> Result<(f64, Tensor2)> {
    check_temperature(tau)?;
    if student.shape() != teacher.shape() {
        return Err(Error::shape(None, format!("{:?}", student.shape()), format!("{:?}", teacher.shape())));
    }
    let (rows, cols) = student.shape();
    let p = softmax(teacher, tau)?;
    let q = softmax(student, tau)?;
    let mut grad = Tensor2::zeros(rows, cols);
    let mut loss = 0.0;
    for r in 0..rows {
        let (pr, qr) = (p.row(r), q.row(r));
        for j in 0..cols {
            if pr[j] > 0.0 {
                loss += pr[j] * (pr[j].ln() - qr[j].ln());
            }
        }
        // d/ds_i Σ_j -P_j log Q_j = Σ_j -P_j (δ_ij - Q_i) / τ
        let g = grad.row_mut(r);
        for i in 0..cols {
            let mut acc = 0.0;
            for j in 0..cols {
                let delta = if i == j { 1.0 } else { 0.0 };
                acc -= pr[j] * (delta - qr[i]);
            }
            g[i] = lambda * acc / (tau * rows as f64);
        }
    }
    Ok((lambda * loss / rows as f64, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub steps: usize,
    /// Batch-mean loss terms, already multiplied by their weights.
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub loss_gen: f64,
}

/// Batch shuffling seed for `epoch` of a local update keyed by `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed::derive(seed, Stream::LocalTraining, &[epoch as u64])
}

/// Train a copy of `global` on the client samples `indices` of `ds`.
///
/// `teacher` enables the distillation term and `synthetic` the generator
/// term; either is ignored when its weight is zero.
pub fn local_update(
    global: &ModelParams,
    teacher: Option<&ModelParams>,
    synthetic: Option<&SyntheticStream>,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::Configuration("local update on a client without samples".into()));
    }
    let teacher = teacher.filter(|_| cfg.lambda_kd > 0.0);
    let synthetic = synthetic.filter(|_| cfg.lambda_gen > 0.0);
    if let Some(s) = synthetic {
        if s.epochs.len() < cfg.epochs || s.epochs.iter().take(cfg.epochs).any(|e| e.is_empty()) {
            return Err(Error::Configuration(format!(
                "synthetic stream covers {} epochs, need {}",
                s.epochs.len(),
                cfg.epochs
            )));
        }
    }
    let kd_scale = if cfg.kd_tau_squared { cfg.lambda_kd * cfg.tau * cfg.tau } else { cfg.lambda_kd };

    let mut params = global.clone();
    let mut opt = OptimizerState::sgd(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let (mut ce_sum, mut kd_sum, mut gen_sum) = (0.0, 0.0, 0.0);
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        let real = batches_of(ds, indices, cfg.batch_size, epoch_seed(seed, epoch))?;
        for (b, batch) in real.iter().enumerate() {
            let trace = params.forward_trace(&batch.features, false)?;
            let (ce, mut grad_logits) = softmax_ce_loss(trace.logits(), Targets::Hard(&batch.labels), 1.0)?;
            ce_sum += ce;
            if let Some(t) = teacher {
                let t_logits = t.forward(&batch.features, false)?;
                let (kd, g) = kd_loss(trace.logits(), &t_logits, cfg.tau, kd_scale)?;
                grad_logits.add_scaled(1.0, &g)?;
                kd_sum += kd;
            }
            let mut grads = params.backward_trace(&trace, &grad_logits)?.grads;
            if let Some(s) = synthetic {
                let epoch_batches = &s.epochs[epoch];
                let syn = &epoch_batches[b % epoch_batches.len()];
                let c_trace = params.forward_trace(&syn.features, true)?;
                let (l, mut g) = softmax_ce_loss(c_trace.logits(), Targets::Hard(&syn.labels), 1.0)?;
                g.scale(cfg.lambda_gen);
                grads.add_scaled(1.0, &params.backward_trace(&c_trace, &g)?.grads)?;
                gen_sum += cfg.lambda_gen * l;
            }
            opt.step(&mut params, &grads)?;
            steps += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("local model parameters".into()));
    }
    let n = steps.max(1) as f64;
    Ok(LocalOutcome {
        params,
        steps,
        loss_ce: ce_sum / n,
        loss_kd: kd_sum / n,
        loss_gen: gen_sum / n,
    })
}

/// Argmax class per row; ties go to the lowest index.
pub fn predict(params: &ModelParams, features: &Tensor2) -> Result<Vec<usize>> {
    let logits = params.forward(features, false)?;
    Ok(logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(params, &ds.features)?;
    let hits = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, Batch, BlobSpec};
    use crate::nn::Layer;
    use proptest::prelude::*;

    fn logits(rows: usize, cols: usize, seed_: u64, scale: f64) -> Tensor2 {
        use rand::Rng;
        let mut rng = seed::rng(seed_);
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn kd_stationary_when_equal() {
        let s = logits(4, 5, 1, 3.0);
        let (_, g) = kd_loss(&s, &s, 2.0, 0.5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
        let (l, g) = kd_loss(&s, &logits(4, 5, 2, 3.0), 2.0, 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(kd_loss(&s, &s, 0.0, 1.0).is_err());
        assert!(kd_loss(&s, &logits(3, 5, 2, 1.0), 1.0, 1.0).is_err());
    }

    #[test]
    fn kl_and_ce_forms_agree() {
        for i in 0..30 {
            for tau in [1.0, 2.0, 5.0] {
                let s = logits(3, 6, 10 + i, 4.0);
                let t = logits(3, 6, 100 + i, 4.0);
                let (ce, g1) = kd_loss(&s, &t, tau, 0.7).unwrap();
                let (kl, g2) = kd_loss_kl(&s, &t, tau, 0.7).unwrap();
                for (a, b) in g1.data().iter().zip(g2.data()) {
                    assert!((a - b).abs() < 1e-10);
                }
                // CE = KL + H(P) ≥ KL
                assert!(ce >= kl - 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn kd_gradient_linear_in_lambda(seed_ in 0u64..1000, c in 0.1f64..10.0) {
            let s = logits(3, 4, seed_, 2.0);
            let t = logits(3, 4, seed_ + 1, 2.0);
            let (_, g1) = kd_loss(&s, &t, 2.0, 0.5).unwrap();
            let (_, gc) = kd_loss(&s, &t, 2.0, 0.5 * c).unwrap();
            for (a, b) in g1.data().iter().zip(gc.data()) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    fn tiny_task() -> Dataset {
        make_blobs(&BlobSpec {
            n_classes: 3,
            samples_per_class: 20,
            d_in: 4,
            spread: 1.0,
            separation: 3.0,
            seed: 5,
        })
        .unwrap()
    }

    fn net(seed_: u64) -> ModelParams {
        ModelParams::mlp(&[4, 8, 3], 1, &mut seed::rng(seed_)).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    fn stream(n_classes_features: usize, epochs: usize) -> SyntheticStream {
        SyntheticStream {
            pool_len: 8,
            epochs: (0..epochs)
                .map(|e| {
                    vec![Batch {
                        features: logits(8, n_classes_features, 500 + e as u64, 1.0).map(f64::abs),
                        labels: (0..8).map(|i| i % 3).collect(),
                    }]
                })
                .collect(),
        }
    }

    #[test]
    fn zero_epochs_returns_global() {
        let ds = tiny_task();
        let g = net(1);
        let out = local_update(&g, Some(&net(2)), None, &ds, &[0, 1, 2], &cfg(0), 3).unwrap();
        assert_eq!(out.params, g);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn empty_client_rejected() {
        let ds = tiny_task();
        assert!(matches!(
            local_update(&net(1), None, None, &ds, &[], &cfg(1), 0),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn deterministic_and_frozen_inputs() {
        let ds = tiny_task();
        let idx: Vec<usize> = (0..ds.len()).step_by(2).collect();
        let (g, t) = (net(1), net(2));
        let s = stream(8, 3);
        let (t0, s0) = (t.clone(), s.clone());
        let a = local_update(&g, Some(&t), Some(&s), &ds, &idx, &cfg(3), 9).unwrap();
        let b = local_update(&g, Some(&t), Some(&s), &ds, &idx, &cfg(3), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(t, t0);
        assert_eq!(s, s0);
        assert_ne!(a.params, g);
        assert!(a.loss_kd > 0.0 && a.loss_gen > 0.0);
        let c = local_update(&g, Some(&t), Some(&s), &ds, &idx, &cfg(3), 10).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_weights_match_plain_training() {
        let ds = tiny_task();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let g = net(4);
        let zero = TrainConfig {
            lambda_kd: 0.0,
            lambda_gen: 0.0,
            ..cfg(2)
        };
        let with = local_update(&g, Some(&net(5)), Some(&stream(8, 2)), &ds, &idx, &zero, 1).unwrap();
        let without = local_update(&g, None, None, &ds, &idx, &zero, 1).unwrap();
        assert_eq!(with.params, without.params);
        assert_eq!(with.loss_kd, 0.0);
    }

    #[test]
    fn loss_decomposes_into_terms() {
        let ds = tiny_task();
        let idx: Vec<usize> = (0..16).collect();
        let (g, t) = (net(1), net(2));
        let s = stream(8, 1);
        let one = TrainConfig {
            batch_size: 16,
            ..cfg(1)
        };
        let out = local_update(&g, Some(&t), Some(&s), &ds, &idx, &one, 2).unwrap();
        assert_eq!(out.steps, 1);
        let batch = ds.subset(&idx);
        let sl = g.forward(&batch.features, false).unwrap();
        let ce = softmax_ce_loss(&sl, Targets::Hard(&batch.labels), 1.0).unwrap().0;
        let kd = kd_loss(&sl, &t.forward(&batch.features, false).unwrap(), 2.0, 0.5).unwrap().0;
        let syn = &s.epochs[0][0];
        let gl = g.forward(&syn.features, true).unwrap();
        let gen = one.lambda_gen * softmax_ce_loss(&gl, Targets::Hard(&syn.labels), 1.0).unwrap().0;
        assert!((out.loss_ce - ce).abs() < 1e-12);
        assert!((out.loss_kd - kd).abs() < 1e-12);
        assert!((out.loss_gen - gen).abs() < 1e-12);
    }

    /// One step on a 1 -> 2 linear model, every quantity written out by hand.
    #[test]
    fn single_step_scalar_oracle() {
        let (w, bias) = ([0.3, -0.2], [0.05, -0.1]);
        let model = ModelParams::new(
            vec![Layer {
                weight: Tensor2::from_vec(1, 2, w.to_vec()).unwrap(),
                bias: bias.to_vec(),
            }],
            0,
        )
        .unwrap();
        let (tw, tb) = ([-0.4, 0.6], [0.0, 0.2]);
        let teacher = ModelParams::new(
            vec![Layer {
                weight: Tensor2::from_vec(1, 2, tw.to_vec()).unwrap(),
                bias: tb.to_vec(),
            }],
            0,
        )
        .unwrap();
        let x = 1.5;
        let ds = Dataset::new(Tensor2::from_vec(1, 1, vec![x]).unwrap(), vec![1], 2).unwrap();
        let zs = -0.7;
        let syn = SyntheticStream {
            pool_len: 1,
            epochs: vec![vec![Batch {
                features: Tensor2::from_vec(1, 1, vec![zs]).unwrap(),
                labels: vec![0],
            }]],
        };
        let c = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            lambda_kd: 0.5,
            lambda_gen: 0.3,
            tau: 2.0,
            kd_tau_squared: false,
            syn_per_batch: false,
        };
        let out = local_update(&model, Some(&teacher), Some(&syn), &ds, &[0], &c, 0).unwrap();

        let sm = |a: f64, b: f64| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        };
        let s = [w[0] * x + bias[0], w[1] * x + bias[1]];
        let t = [tw[0] * x + tb[0], tw[1] * x + tb[1]];
        let p1 = sm(s[0], s[1]);
        let q = sm(s[0] / 2.0, s[1] / 2.0);
        let pt = sm(t[0] / 2.0, t[1] / 2.0);
        let y = [0.0, 1.0];
        let dz: Vec<f64> = (0..2).map(|j| (p1[j] - y[j]) + 0.5 * (q[j] - pt[j]) / 2.0).collect();
        let gs = [w[0] * zs + bias[0], w[1] * zs + bias[1]];
        let pg = sm(gs[0], gs[1]);
        let dg: Vec<f64> = (0..2).map(|j| 0.3 * (pg[j] - [1.0, 0.0][j])).collect();
        for j in 0..2 {
            let gw = dz[j] * x + dg[j] * zs + 0.01 * w[j];
            let gb = dz[j] + dg[j] + 0.01 * bias[j];
            let l = &out.params.layers()[0];
            assert!((l.weight.get(0, j) - (w[j] - 0.1 * gw)).abs() < 1e-14);
            assert!((l.bias[j] - (bias[j] - 0.1 * gb)).abs() < 1e-14);
        }
    }

    #[test]
    fn evaluate_examples() {
        let ds = make_blobs(&BlobSpec {
            n_classes: 10,
            samples_per_class: 7,
            d_in: 3,
            spread: 1.0,
            separation: 2.0,
            seed: 1,
        })
        .unwrap();
        let constant = ModelParams::new(vec![Layer::zeros(3, 10)], 0).unwrap();
        assert!((evaluate(&constant, &ds).unwrap() - 0.1).abs() < 1e-15);

        let m = ModelParams::mlp(&[3, 5, 10], 1, &mut seed::rng(3)).unwrap();
        let logits = m.forward(&ds.features, false).unwrap();
        let mut hits = 0;
        for r in 0..ds.len() {
            let row = logits.row(r);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == ds.labels[r]);
        }
        assert_eq!(evaluate(&m, &ds).unwrap(), hits as f64 / ds.len() as f64);
    }

    #[test]
    fn memorizing_model_scores_one() {
        // Inputs are one-hot rows; an identity layer reproduces the label.
        let n = 4;
        let ds = Dataset::new(Tensor2::identity(n), (0..n).collect(), n).unwrap();
        let m = ModelParams::new(
            vec![Layer {
                weight: Tensor2::identity(n),
                bias: vec![0.0; n],
            }],
            0,
        )
        .unwrap();
        assert_eq!(evaluate(&m, &ds).unwrap(), 1.0);
    }

    #[test]
    fn lambda_gen_presets() {
        assert_eq!(lambda_gen_for_beta(0.1), 0.01);
        assert_eq!(lambda_gen_for_beta(0.5), 1.0);
        assert_eq!(lambda_gen_for_beta(5.0), 0.01);
        assert_eq!(lambda_gen_for_beta(0.4), 1.0);
        assert_eq!(lambda_gen_for_beta(50.0), 0.01);
    }
}
