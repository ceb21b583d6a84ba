//! Conditional feature generator.
//!
//! The generator maps `(Gaussian noise, one-hot label)` to a vector in the
//! task model's classifier-input space. The server trains it against the
//! data-weighted ensemble of the round's client classifiers, which stay
//! frozen; clients then use the frozen generator to synthesize
//! class-balanced auxiliary features.
//!
//! Labels are never drawn per batch. A pool is sampled up front and consumed
//! in contiguous windows, reshuffled at every epoch (server) or every pass
//! over the pool (client), so each epoch sees a near-uniform label mix.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{softmax_ce_loss, ModelParams, OptimizerState, Targets, Tensor2};
use crate::seed::{self, Rng as SeedRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainConfig {
    pub epochs: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub diversity_weight: f64,
    pub diversity_epsilon: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Scale the ensemble logits by `1/K` in addition to the `p_k` weights.
    pub ensemble_mean: bool,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            epochs: 10,
            batches: 200,
            batch_size: 64,
            noise_dim: 100,
            diversity_weight: 1.0,
            diversity_epsilon: 1e-5,
            learning_rate: 0.001,
            weight_decay: 1e-5,
            ensemble_mean: false,
        }
    }
}

impl GenTrainConfig {
    /// Length of the server-side label pool: one label per planned batch
    /// across all epochs.
    pub fn server_pool_len(&self) -> usize {
        self.epochs * self.batches
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("gen_epochs", self.epochs),
            ("gen_batches", self.batches),
            ("gen_batch_size", self.batch_size),
            ("noise_dim", self.noise_dim),
        ] {
            if v == 0 {
                return Err(Error::key(key, "must be at least 1"));
            }
        }
        if !(self.diversity_epsilon > 0.0) {
            return Err(Error::key("diversity_epsilon", "must be positive"));
        }
        if !(self.diversity_weight >= 0.0) {
            return Err(Error::key("diversity_weight", "must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::key("gen_lr", "must be positive"));
        }
        Ok(())
    }
}

/// Generator network: input width `noise_dim + n_classes`, output width equal
/// to the task model's classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    model: ModelParams,
    noise_dim: usize,
    n_classes: usize,
}

impl GeneratorParams {
    pub fn new(noise_dim: usize, n_classes: usize, hidden: &[usize], feature_dim: usize, rng: &mut SeedRng) -> Result<Self> {
        let mut widths = vec![noise_dim + n_classes];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let model = ModelParams::mlp(&widths, 0, rng)?;
        Ok(GeneratorParams {
            model,
            noise_dim,
            n_classes,
        })
    }

    pub fn from_model(model: ModelParams, noise_dim: usize, n_classes: usize) -> Result<Self> {
        if model.input_width() != noise_dim + n_classes {
            return Err(Error::shape(
                Some(0),
                format!("input width {}", noise_dim + n_classes),
                model.input_width(),
            ));
        }
        Ok(GeneratorParams {
            model,
            noise_dim,
            n_classes,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelParams {
        &mut self.model
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.model.output_width()
    }

    /// `[noise | one_hot(labels)]`.
    pub fn input(&self, noise: &Tensor2, labels: &[usize]) -> Result<Tensor2> {
        if noise.cols() != self.noise_dim {
            return Err(Error::shape(Some(0), format!("noise width {}", self.noise_dim), noise.cols()));
        }
        if noise.rows() != labels.len() {
            return Err(Error::shape(None, format!("{} labels", noise.rows()), labels.len()));
        }
        let mut one_hot = Tensor2::zeros(labels.len(), self.n_classes);
        for (r, &l) in labels.iter().enumerate() {
            if l >= self.n_classes {
                return Err(Error::Parameter(format!("label {l} out of range for {} classes", self.n_classes)));
            }
            one_hot.set(r, l, 1.0);
        }
        noise.hconcat(&one_hot)
    }
}

pub fn gen_forward(gen: &GeneratorParams, noise: &Tensor2, labels: &[usize]) -> Result<Tensor2> {
    gen.model.forward(&gen.input(noise, labels)?, false)
}

pub fn sample_noise(rows: usize, dim: usize, rng: &mut SeedRng) -> Tensor2 {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor2::from_vec(rows, dim, data).expect("sized by construction")
}

/// Pre-sampled uniform labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPool {
    labels: Vec<usize>,
    n_classes: usize,
}

pub fn sample_label_pool(length: usize, n_classes: usize, seed: u64) -> Result<LabelPool> {
    if length == 0 || n_classes == 0 {
        return Err(Error::Parameter("label pool needs a positive length and class count".into()));
    }
    let mut rng = seed::rng(seed);
    Ok(LabelPool {
        labels: (0..length).map(|_| rng.random_range(0..n_classes)).collect(),
        n_classes,
    })
}

impl LabelPool {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn shuffle(&mut self, rng: &mut SeedRng) {
        self.labels.shuffle(rng);
    }

    /// `len` labels starting at `start`, wrapping around the pool.
    pub fn window(&self, start: usize, len: usize) -> Vec<usize> {
        let n = self.labels.len();
        (0..len).map(|i| self.labels[(start + i) % n]).collect()
    }
}

/// Mean over index-paired halves of `‖ε₁ - ε₂‖ / (‖z₁ - z₂‖ + eps)` and its
/// gradient with respect to `features`. An odd final row is ignored.
pub fn diversity_loss(noise: &Tensor2, features: &Tensor2, eps: f64) -> Result<(f64, Tensor2)> {
    if noise.rows() != features.rows() {
        return Err(Error::shape(None, format!("{} rows", noise.rows()), features.rows()));
    }
    let mut grad = Tensor2::zeros(features.rows(), features.cols());
    let half = features.rows() / 2;
    if half == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    let mut diff = vec![0.0; features.cols()];
    for i in 0..half {
        let j = i + half;
        let a = dist(noise.row(i), noise.row(j));
        for ((d, x), y) in diff.iter_mut().zip(features.row(i)).zip(features.row(j)) {
            *d = x - y;
        }
        let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = d + eps;
        total += a / denom;
        if d > 0.0 && a > 0.0 {
            // ∂/∂z_i (a / (‖z_i - z_j‖ + eps)) = -a / denom² · (z_i - z_j) / ‖z_i - z_j‖
            let c = -a / (denom * denom * d * half as f64);
            for (k, &dv) in diff.iter().enumerate() {
                let g = c * dv;
                grad.row_mut(i)[k] += g;
                grad.row_mut(j)[k] -= g;
            }
        }
    }
    Ok((total / half as f64, grad))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Weighted ensemble of classifier logits on `features`; the scale applied to
/// each classifier is returned alongside so backward can reuse it.
pub fn ensemble_logits(classifiers: &[&ModelParams], p: &[f64], features: &Tensor2, ensemble_mean: bool) -> Result<(Tensor2, Vec<f64>)> {
    if classifiers.is_empty() || classifiers.len() != p.len() {
        return Err(Error::Protocol(format!(
            "{} classifiers with {} weights",
            classifiers.len(),
            p.len()
        )));
    }
    let k_scale = if ensemble_mean { 1.0 / classifiers.len() as f64 } else { 1.0 };
    let scales: Vec<f64> = p.iter().map(|w| w * k_scale).collect();
    let mut out: Option<Tensor2> = None;
    for (c, &s) in classifiers.iter().zip(&scales) {
        let logits = c.forward(features, true)?;
        match out.as_mut() {
            None => {
                let mut l = logits;
                l.scale(s);
                out = Some(l);
            }
            Some(acc) => acc.add_scaled(s, &logits)?,
        }
    }
    Ok((out.expect("nonempty"), scales))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GenTrainStats {
    pub steps: usize,
    pub first_ce: f64,
    pub mean_ce: f64,
    pub last_ce: f64,
    pub mean_diversity: f64,
}

/// Train `gen` against the frozen `classifiers` (full task models; only their
/// classifier part is used) weighted by `p`. `optimizer` carries Adam state
/// across calls.
pub fn train_generator(
    gen: &mut GeneratorParams,
    optimizer: &mut OptimizerState,
    classifiers: &[&ModelParams],
    p: &[f64],
    cfg: &GenTrainConfig,
    seed: u64,
) -> Result<GenTrainStats> {
    cfg.validate()?;
    if cfg.noise_dim != gen.noise_dim {
        return Err(Error::shape(None, format!("noise dim {}", gen.noise_dim), cfg.noise_dim));
    }
    for (i, c) in classifiers.iter().enumerate() {
        if c.classifier_input_width() != gen.feature_dim() {
            return Err(Error::shape(
                Some(c.split_index()),
                format!("classifier {i} input width {}", gen.feature_dim()),
                c.classifier_input_width(),
            ));
        }
    }
    let mut rng = seed::rng(seed);
    let mut pool = sample_label_pool(cfg.server_pool_len(), gen.n_classes, rng.random())?;
    let mut stats = GenTrainStats::default();
    let mut ce_sum = 0.0;
    let mut div_sum = 0.0;

    for _ in 0..cfg.epochs {
        pool.shuffle(&mut rng);
        for b in 0..cfg.batches {
            let labels = pool.window(b * cfg.batch_size, cfg.batch_size);
            let noise = sample_noise(cfg.batch_size, cfg.noise_dim, &mut rng);
            let input = gen.input(&noise, &labels)?;
            let trace = gen.model.forward_trace(&input, false)?;
            let features = trace.logits();

            let (logits, scales) = ensemble_logits(classifiers, p, features, cfg.ensemble_mean)?;
            let (ce, grad_logits) = softmax_ce_loss(&logits, Targets::Hard(&labels), 1.0)?;
            let mut grad_features = Tensor2::zeros(features.rows(), features.cols());
            for (c, &s) in classifiers.iter().zip(&scales) {
                let mut g = grad_logits.clone();
                g.scale(s);
                let bp = c.backward(features, &g, true)?;
                grad_features.add_scaled(1.0, &bp.grad_input)?;
            }
            if cfg.diversity_weight > 0.0 {
                let (div, g_div) = diversity_loss(&noise, features, cfg.diversity_epsilon)?;
                grad_features.add_scaled(cfg.diversity_weight, &g_div)?;
                div_sum += div;
            }
            let bp = gen.model.backward_trace(&trace, &grad_features)?;
            optimizer.step(&mut gen.model, &bp.grads)?;

            if stats.steps == 0 {
                stats.first_ce = ce;
            }
            stats.last_ce = ce;
            stats.steps += 1;
            ce_sum += ce;
        }
    }
    if !gen.model.is_finite() {
        return Err(Error::NonFinite("generator parameters".into()));
    }
    if stats.steps > 0 {
        stats.mean_ce = ce_sum / stats.steps as f64;
        stats.mean_diversity = div_sum / stats.steps as f64;
    }
    Ok(stats)
}

/// Local label-pool length: a client smaller than one batch gets
/// `epochs * n_k` labels so every epoch sees fresh synthetic samples.
pub fn local_pool_len(n_k: usize, epochs: usize, batch_size: usize) -> usize {
    if n_k < batch_size {
        epochs * n_k
    } else {
        n_k
    }
}

/// Synthetic feature batches for one local update, grouped by epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub pool_len: usize,
    pub epochs: Vec<Vec<Batch>>,
}

/// Draw the synthetic stream for a client with `n_k` samples. Each epoch gets
/// one batch, or one per real batch when `per_batch` is set. Batches hold
/// `min(batch_size, n_k)` samples taken in order from the shuffled pool,
/// which is reshuffled whenever it has been consumed.
pub fn synthesize_local(
    gen: &GeneratorParams,
    n_k: usize,
    epochs: usize,
    batch_size: usize,
    per_batch: bool,
    seed: u64,
) -> Result<SyntheticStream> {
    if n_k == 0 || batch_size == 0 {
        return Err(Error::Configuration("synthesis needs a non-empty client and batch".into()));
    }
    let pool_len = local_pool_len(n_k, epochs, batch_size);
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(epochs);
    if pool_len == 0 {
        return Ok(SyntheticStream { pool_len, epochs: out });
    }
    let mut pool = sample_label_pool(pool_len, gen.n_classes, rng.random())?;
    pool.shuffle(&mut rng);
    let size = batch_size.min(n_k);
    let per_epoch = if per_batch { n_k.div_ceil(batch_size) } else { 1 };
    let mut cursor = 0;
    for _ in 0..epochs {
        let mut epoch = Vec::with_capacity(per_epoch);
        for _ in 0..per_epoch {
            if cursor >= pool_len {
                pool.shuffle(&mut rng);
                cursor = 0;
            }
            let labels = pool.window(cursor, size);
            cursor += size;
            let noise = sample_noise(size, gen.noise_dim, &mut rng);
            let features = gen_forward(gen, &noise, &labels)?;
            epoch.push(Batch { features, labels });
        }
        out.push(epoch);
    }
    Ok(SyntheticStream { pool_len, epochs: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_relative_error, numeric_gradient};
    use crate::nn::Layer;

    fn small_gen(seed_: u64) -> GeneratorParams {
        GeneratorParams::new(3, 2, &[6], 4, &mut seed::rng(seed_)).unwrap()
    }

    #[test]
    fn pool_range_and_determinism() {
        for s in 0..10 {
            let pool = sample_label_pool(10, 10, s).unwrap();
            assert!(pool.labels().iter().all(|&l| l < 10));
            assert_eq!(pool, sample_label_pool(10, 10, s).unwrap());
        }
        assert!(sample_label_pool(0, 3, 0).is_err());
    }

    #[test]
    fn pool_chi_square() {
        let pool = sample_label_pool(12800, 10, 2024).unwrap();
        let expected = 1280.0;
        let chi2: f64 = pool
            .class_counts()
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 27.88, "chi-square {chi2}");
        let bound = 4.0 * expected.sqrt();
        assert!(pool.class_counts().iter().all(|&c| (c as f64 - expected).abs() < bound));
    }

    #[test]
    fn shuffle_preserves_counts() {
        let mut pool = sample_label_pool(500, 7, 1).unwrap();
        let before = pool.class_counts();
        pool.shuffle(&mut seed::rng(9));
        assert_eq!(pool.class_counts(), before);
        assert_eq!(pool.window(498, 4).len(), 4);
        assert_eq!(pool.window(499, 2)[1], pool.labels()[0]);
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let mut gen = small_gen(1);
        gen.model_mut().tensors_mut().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        let noise = sample_noise(5, 3, &mut seed::rng(2));
        let z = gen_forward(&gen, &noise, &[0, 1, 0, 1, 1]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), (5, 4));
    }

    #[test]
    fn identical_rows_and_label_sensitivity() {
        let gen = small_gen(3);
        let row: Vec<f64> = vec![0.3, -1.2, 0.8];
        let noise = Tensor2::from_rows(&[row.clone(), row.clone()]).unwrap();
        let same = gen_forward(&gen, &noise, &[1, 1]).unwrap();
        assert_eq!(same.row(0), same.row(1));
        let flipped = gen_forward(&gen, &noise, &[0, 1]).unwrap();
        assert_ne!(flipped.row(0), flipped.row(1));
        assert!(gen_forward(&gen, &Tensor2::zeros(2, 4), &[0, 1]).is_err());
        assert!(gen_forward(&gen, &noise, &[0, 2]).is_err());
    }

    #[test]
    fn diversity_examples() {
        let half = Tensor2::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let feats = Tensor2::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(diversity_loss(&half, &feats, 1e-5).unwrap().0, 0.0);

        let noise = Tensor2::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let feats = Tensor2::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(diversity_loss(&noise, &feats, 0.0).unwrap().0, 1.0);

        // odd row dropped
        let noise = Tensor2::from_rows(&[vec![1.0], vec![0.0], vec![9.0]]).unwrap();
        let feats = Tensor2::from_rows(&[vec![1.0], vec![0.0], vec![3.0]]).unwrap();
        let (l, g) = diversity_loss(&noise, &feats, 0.0).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.row(2), &[0.0]);
    }

    #[test]
    fn diversity_gradient_matches_finite_differences() {
        let mut rng = seed::rng(5);
        for _ in 0..10 {
            let noise = sample_noise(6, 3, &mut rng);
            let feats = sample_noise(6, 4, &mut rng);
            let (_, g) = diversity_loss(&noise, &feats, 1e-5).unwrap();
            let num = numeric_gradient(feats.data(), 1e-5, |x| {
                let f = Tensor2::from_vec(6, 4, x.to_vec()).unwrap();
                diversity_loss(&noise, &f, 1e-5).unwrap().0
            });
            assert!(max_relative_error(g.data(), &num) < 1e-5);
        }
    }

    fn separating_classifier() -> ModelParams {
        // features (4) -> 2 classes; feature 0 votes class 0, feature 1 class 1.
        let w = Tensor2::from_rows(&[vec![4.0, -4.0], vec![-4.0, 4.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        ModelParams::new(vec![Layer { weight: w, bias: vec![0.0, 0.0] }], 0).unwrap()
    }

    #[test]
    fn single_classifier_ensemble_is_identity() {
        let c = separating_classifier();
        let z = sample_noise(3, 4, &mut seed::rng(1));
        let (e, _) = ensemble_logits(&[&c], &[1.0], &z, false).unwrap();
        assert_eq!(e, c.forward(&z, true).unwrap());
        let (lit, _) = ensemble_logits(&[&c, &c], &[0.5, 0.5], &z, true).unwrap();
        let mut half = e.clone();
        half.scale(0.5);
        for (a, b) in lit.data().iter().zip(half.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn quick_cfg() -> GenTrainConfig {
        GenTrainConfig {
            epochs: 2,
            batches: 30,
            batch_size: 16,
            noise_dim: 3,
            ..GenTrainConfig::default()
        }
    }

    #[test]
    fn dead_classifier_gives_constant_ln_c() {
        let zero = ModelParams::new(vec![Layer::zeros(4, 2)], 0).unwrap();
        let mut gen = small_gen(7);
        let mut opt = OptimizerState::adam(gen.model(), 0.001, 0.0);
        let cfg = GenTrainConfig {
            diversity_weight: 0.0,
            weight_decay: 0.0,
            ..quick_cfg()
        };
        let before = gen.clone();
        let stats = train_generator(&mut gen, &mut opt, &[&zero], &[1.0], &cfg, 3).unwrap();
        assert!((stats.first_ce - 2f64.ln()).abs() < 1e-12);
        assert!((stats.last_ce - 2f64.ln()).abs() < 1e-12);
        assert_eq!(gen, before);
    }

    #[test]
    fn training_lowers_ensemble_loss_and_leaves_classifier() {
        let c = separating_classifier();
        let frozen = c.clone();
        for s in 0..3 {
            let mut gen = small_gen(100 + s);
            let mut opt = OptimizerState::adam(gen.model(), 0.01, 1e-5);
            let cfg = GenTrainConfig {
                diversity_weight: 0.1,
                ..quick_cfg()
            };
            let eval = |g: &GeneratorParams| {
                let mut rng = seed::rng(999);
                let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
                let noise = sample_noise(64, 3, &mut rng);
                let z = gen_forward(g, &noise, &labels).unwrap();
                let logits = c.forward(&z, true).unwrap();
                softmax_ce_loss(&logits, Targets::Hard(&labels), 1.0).unwrap().0
            };
            let start = eval(&gen);
            train_generator(&mut gen, &mut opt, &[&c], &[1.0], &cfg, s).unwrap();
            let end = eval(&gen);
            assert!(end < start, "seed {s}: {start} -> {end}");
            assert_eq!(c, frozen);
        }
    }

    #[test]
    fn local_pool_sizes() {
        assert_eq!(local_pool_len(10, 10, 64), 100);
        assert_eq!(local_pool_len(500, 10, 64), 500);
        let gen = small_gen(2);
        let small = synthesize_local(&gen, 10, 10, 64, false, 4).unwrap();
        assert_eq!(small.pool_len, 100);
        assert_eq!(small.epochs.len(), 10);
        assert!(small.epochs.iter().all(|e| e.len() == 1 && e[0].labels.len() == 10));
        let big = synthesize_local(&gen, 500, 3, 64, true, 4).unwrap();
        assert_eq!(big.pool_len, 500);
        assert!(big.epochs.iter().all(|e| e.len() == 8 && e[0].features.shape() == (64, 4)));
        assert_eq!(big, synthesize_local(&gen, 500, 3, 64, true, 4).unwrap());
        assert_ne!(big, synthesize_local(&gen, 500, 3, 64, true, 5).unwrap());
    }

    #[test]
    fn small_client_pool_covered_once() {
        let gen = small_gen(2);
        let s = synthesize_local(&gen, 10, 10, 64, false, 8).unwrap();
        let mut counts = vec![0usize; 2];
        for e in &s.epochs {
            for &l in &e[0].labels {
                counts[l] += 1;
            }
        }
        // All 100 pool labels are consumed exactly once.
        assert_eq!(counts.iter().sum::<usize>(), 100);
    }
}
