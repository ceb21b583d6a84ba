//! Post-hoc analyses: generated-vs-real feature similarity, weight-vector
//! variance series and the finite-difference gradient suite.

use rand::Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::generator::{diversity_loss, gen_forward, sample_noise, GeneratorParams};
use crate::harness::config::ExperimentConfig;
use crate::ledger::FreqWeights;
use crate::local::{kd_loss, local_update, TrainConfig};
use crate::nn::gradcheck::{check_model, max_relative_error, numeric_gradient, DEFAULT_STEP};
use crate::nn::{softmax, softmax_ce_loss, ModelParams, Targets, Tensor2};
use crate::orchestrator::{init_task_model, population_variance, RoundMetrics};
use crate::seed::{self, Rng as SeedRng, Stream};

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = crate::nn::dot(a, a).sqrt();
    let nb = crate::nn::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    crate::nn::dot(a, b) / (na * nb)
}

fn unit_row_sum(x: &Tensor2) -> Vec<f64> {
    let mut sum = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        let n = crate::nn::dot(row, row).sqrt();
        if n > 0.0 {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v / n;
            }
        }
    }
    sum
}

/// Mean of the full `rows(a) × rows(b)` cosine-similarity matrix.
pub fn mean_pairwise_similarity(a: &Tensor2, b: &Tensor2) -> f64 {
    if a.rows() == 0 || b.rows() == 0 {
        return f64::NAN;
    }
    // Σ_ij <â_i, b̂_j> = <Σ_i â_i, Σ_j b̂_j>
    crate::nn::dot(&unit_row_sum(a), &unit_row_sum(b)) / (a.rows() * b.rows()) as f64
}

/// Per-class mean similarity between real features (from `reference`'s
/// extractor) and an equal number of generated features. Classes without
/// samples yield `NaN`.
pub fn feature_similarity(gen: &GeneratorParams, reference: &ModelParams, ds: &Dataset, seed_: u64) -> Result<Vec<f64>> {
    let mut rng = seed::rng(seed_);
    let mut out = Vec::with_capacity(ds.n_classes);
    for c in 0..ds.n_classes {
        let idx = ds.indices_of_class(c);
        if idx.is_empty() {
            out.push(f64::NAN);
            continue;
        }
        let real = reference.extract_features(&ds.features.select_rows(&idx))?;
        let noise = sample_noise(idx.len(), gen.noise_dim(), &mut rng);
        let fake = gen_forward(gen, &noise, &vec![c; idx.len()])?;
        out.push(mean_pairwise_similarity(&real, &fake));
    }
    Ok(out)
}

/// A task model trained on all of `train` with plain cross-entropy.
pub fn train_centralized(cfg: &ExperimentConfig, train: &Dataset, epochs: usize, seed_: u64) -> Result<ModelParams> {
    let init = init_task_model(cfg, seed_)?;
    let tc = TrainConfig {
        epochs,
        lambda_kd: 0.0,
        lambda_gen: 0.0,
        ..cfg.train.clone()
    };
    let all: Vec<usize> = (0..train.len()).collect();
    Ok(local_update(&init, None, None, train, &all, &tc, seed::derive(seed_, Stream::Analysis, &[]))?.params)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VarianceTrack {
    pub intv: Vec<f64>,
    pub part: Vec<f64>,
    pub num: Vec<f64>,
}

/// Population variance of each frequency vector, one entry per round.
pub fn variance_track<'a>(rounds: impl IntoIterator<Item = &'a FreqWeights>) -> VarianceTrack {
    let mut t = VarianceTrack::default();
    for w in rounds {
        t.intv.push(population_variance(&w.f_intv));
        t.part.push(population_variance(&w.f_part));
        t.num.push(population_variance(&w.f_num));
    }
    t
}

impl VarianceTrack {
    pub fn from_metrics(m: &[RoundMetrics]) -> Self {
        VarianceTrack {
            intv: m.iter().map(|r| r.var_f_intv).collect(),
            part: m.iter().map(|r| r.var_f_part).collect(),
            num: m.iter().map(|r| r.var_f_num).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-5;

fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut SeedRng) -> Tensor2 {
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).expect("sized")
}

fn random_labels(rows: usize, classes: usize, rng: &mut SeedRng) -> Vec<usize> {
    (0..rows).map(|_| rng.random_range(0..classes)).collect()
}

/// Smallest |pre-activation| across the hidden layers of `m` on `x`.
fn kink_margin(m: &ModelParams, x: &Tensor2) -> Result<f64> {
    let trace = m.forward_trace(x, false)?;
    let pre = trace.pre_activations();
    Ok(pre[..pre.len() - 1]
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

/// Central-difference checks of every analytic gradient in the engine, over
/// `instances` random cases each.
pub fn gradcheck_suite(instances: usize, seed_: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = seed::stream_rng(seed_, Stream::Analysis, &[1]);
    let h = DEFAULT_STEP;
    let mut dense = 0.0f64;
    let mut relu = 0.0f64;
    let mut ce = 0.0f64;
    let mut kd = 0.0f64;
    let mut div = 0.0f64;

    for _ in 0..instances {
        // Dense: a single affine layer.
        let m = ModelParams::mlp(&[5, 4], 0, &mut rng)?;
        let x = random_tensor(3, 5, 1.0, &mut rng);
        let y = random_labels(3, 4, &mut rng);
        let r = check_model(&m, &x, false, h, |z| softmax_ce_loss(z, Targets::Hard(&y), 1.0))?;
        dense = dense.max(r.max_rel_error());

        // ReLU network, redrawn until no hidden unit sits near its kink.
        let (m, x) = loop {
            let m = ModelParams::mlp(&[4, 6, 5, 3], 1, &mut rng)?;
            let x = random_tensor(3, 4, 1.0, &mut rng);
            if kink_margin(&m, &x)? > 1e-3 {
                break (m, x);
            }
        };
        let y = random_labels(3, 3, &mut rng);
        let r = check_model(&m, &x, false, h, |z| softmax_ce_loss(z, Targets::Hard(&y), 1.0))?;
        relu = relu.max(r.max_rel_error());
        let r = check_model(&m, &m.extract_features(&x)?, true, h, |z| softmax_ce_loss(z, Targets::Hard(&y), 1.0))?;
        relu = relu.max(r.max_rel_error());

        // Tempered softmax cross-entropy with hard and soft targets.
        let tau = [0.5, 1.0, 2.0, 5.0][rng.random_range(0..4)];
        let z = random_tensor(4, 5, 3.0, &mut rng);
        let y = random_labels(4, 5, &mut rng);
        let soft = softmax(&random_tensor(4, 5, 2.0, &mut rng), 1.0)?;
        for targets in [Targets::Hard(&y), Targets::Soft(&soft)] {
            let (_, g) = softmax_ce_loss(&z, targets, tau)?;
            let num = numeric_gradient(z.data(), h, |v| {
                let t = Tensor2::from_vec(4, 5, v.to_vec()).expect("sized");
                softmax_ce_loss(&t, targets, tau).expect("valid").0
            });
            ce = ce.max(max_relative_error(g.data(), &num));
        }

        // Distillation term.
        let t_logits = random_tensor(4, 5, 3.0, &mut rng);
        let lambda = rng.random_range(0.1..2.0);
        let (_, g) = kd_loss(&z, &t_logits, tau, lambda)?;
        let num = numeric_gradient(z.data(), h, |v| {
            let s = Tensor2::from_vec(4, 5, v.to_vec()).expect("sized");
            kd_loss(&s, &t_logits, tau, lambda).expect("valid").0
        });
        kd = kd.max(max_relative_error(g.data(), &num));

        // Diversity regularizer.
        let noise = random_tensor(6, 3, 1.0, &mut rng);
        let feats = random_tensor(6, 4, 1.0, &mut rng);
        let (_, g) = diversity_loss(&noise, &feats, 1e-5)?;
        let num = numeric_gradient(feats.data(), h, |v| {
            let f = Tensor2::from_vec(6, 4, v.to_vec()).expect("sized");
            diversity_loss(&noise, &f, 1e-5).expect("valid").0
        });
        div = div.max(max_relative_error(g.data(), &num));
    }

    let row = |name, max_rel_error, threshold| GradcheckResult {
        name,
        instances,
        max_rel_error,
        threshold,
    };
    Ok(vec![
        row("dense", dense, LAYER_TOLERANCE),
        row("relu", relu, LAYER_TOLERANCE),
        row("softmax_ce", ce, LOSS_TOLERANCE),
        row("kd", kd, LOSS_TOLERANCE),
        row("diversity", div, LOSS_TOLERANCE),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn pairwise_matches_brute_force() {
        let mut rng = seed::rng(2);
        let a = random_tensor(7, 5, 1.0, &mut rng);
        let b = random_tensor(4, 5, 1.0, &mut rng);
        let mut brute = 0.0;
        for i in 0..7 {
            for j in 0..4 {
                brute += cosine_similarity(a.row(i), b.row(j));
            }
        }
        assert!((mean_pairwise_similarity(&a, &b) - brute / 28.0).abs() < 1e-12);
        assert!(mean_pairwise_similarity(&Tensor2::zeros(0, 5), &b).is_nan());
    }

    #[test]
    fn identical_and_orthogonal_sets() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]]).unwrap();
        assert!((mean_pairwise_similarity(&a, &a) - 1.0).abs() < 1e-15);
        let b = Tensor2::from_rows(&[vec![0.0, 0.0, 3.0]]).unwrap();
        assert_eq!(mean_pairwise_similarity(&a, &b), 0.0);
    }

    #[test]
    fn random_features_are_near_orthogonal() {
        let mut rng = seed::rng(11);
        let a = sample_noise(1000, 64, &mut rng);
        let b = sample_noise(1000, 64, &mut rng);
        let pairs: f64 = (0..1000).map(|i| cosine_similarity(a.row(i), b.row(i))).sum::<f64>() / 1000.0;
        assert!(pairs.abs() < 0.1);
        assert!(mean_pairwise_similarity(&a, &b).abs() < 0.1);
    }

    #[test]
    fn suite_passes() {
        for r in gradcheck_suite(5, 0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
