//! Server round loop.
//!
//! Per round: sample clients, run their local updates from the current
//! student and teacher, record participation, derive the round's weights,
//! store the uploads, aggregate the student from the uploads and the teacher
//! from every stored snapshot, train the generator on the uploaded
//! classifiers, and evaluate both models.

use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_student, aggregate_teacher, ModelRegistry};
use crate::data::{dirichlet_partition, make_blobs, stratified_split, Dataset, Partition};
use crate::error::{Error, Result};
use crate::generator::{synthesize_local, train_generator, GeneratorParams, SyntheticStream};
use crate::harness::config::{ExperimentConfig, ModelConfig};
use crate::ledger::Ledger;
use crate::local::{evaluate, local_update, LocalOutcome};
use crate::nn::{checkpoint, ModelParams, OptimizerState};
use crate::seed::{self, Stream};

/// `max(1, round_half_up(n * ratio))`.
pub fn clients_per_round(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// Uniform sample of `clients_per_round(n, ratio)` distinct clients, sorted.
pub fn sample_clients(n: usize, ratio: f64, round_seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Configuration("no clients to sample".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::key("sample_ratio", format!("must lie in (0, 1], got {ratio}")));
    }
    let k = clients_per_round(n, ratio);
    let mut picked = sample(&mut seed::rng(round_seed), n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Population variance.
pub fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub student_acc: f64,
    pub teacher_acc: f64,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub loss_gen: f64,
    pub var_f_intv: f64,
    pub var_f_part: f64,
    pub var_f_num: f64,
    pub selected: Vec<usize>,
}

/// The data side of an experiment, fully determined by config and seed.
#[derive(Debug, Clone)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
}

pub fn build_task(cfg: &ExperimentConfig, master: u64) -> Result<Task> {
    let all = make_blobs(&cfg.data.blob_spec(seed::derive(master, Stream::Data, &[])))?;
    let (train, test) = stratified_split(&all, cfg.data.test_fraction, seed::derive(master, Stream::Split, &[]))?;
    let partition = dirichlet_partition(&train, cfg.n_clients, cfg.beta, seed::derive(master, Stream::Partition, &[]))?;
    Ok(Task { train, test, partition })
}

pub fn init_task_model(cfg: &ExperimentConfig, master: u64) -> Result<ModelParams> {
    let widths = cfg.model.task_widths(cfg.data.d_in, cfg.data.n_classes);
    ModelParams::mlp(&widths, ModelConfig::TASK_SPLIT, &mut seed::stream_rng(master, Stream::ModelInit, &[]))
}

/// Seed of client `k`'s local update in round `t`.
pub fn local_seed(master: u64, t: usize, k: usize) -> u64 {
    seed::derive(master, Stream::LocalTraining, &[t as u64, k as u64])
}

pub fn sampling_seed(master: u64, t: usize) -> u64 {
    seed::derive(master, Stream::Sampling, &[t as u64])
}

/// All mutable server-side state.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub cfg: ExperimentConfig,
    pub master_seed: u64,
    pub task: Task,
    pub ledger: Ledger,
    pub registry: ModelRegistry,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub generator: Option<GeneratorParams>,
    generator_opt: Option<OptimizerState>,
    /// True once the generator has been trained at least once.
    generator_ready: bool,
}

impl ServerState {
    pub fn new(cfg: &ExperimentConfig, master_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let task = build_task(cfg, master_seed)?;
        let student = init_task_model(cfg, master_seed)?;
        let ledger = Ledger::new(&task.partition.sizes())?;
        let registry = ModelRegistry::new(&student, cfg.n_clients)?;
        let (generator, generator_opt) = if cfg.use_generator() {
            let g = GeneratorParams::new(
                cfg.gen.noise_dim,
                cfg.data.n_classes,
                &[cfg.model.gen_hidden_dim],
                cfg.model.feature_dim,
                &mut seed::stream_rng(master_seed, Stream::GeneratorInit, &[]),
            )?;
            let opt = OptimizerState::adam(g.model(), cfg.gen.learning_rate, cfg.gen.weight_decay);
            (Some(g), Some(opt))
        } else {
            (None, None)
        };
        Ok(ServerState {
            cfg: cfg.clone(),
            master_seed,
            task,
            ledger,
            teacher: student.clone(),
            student,
            registry,
            generator,
            generator_opt,
            generator_ready: false,
        })
    }

    fn client_update(&self, t: usize, k: usize) -> Result<LocalOutcome> {
        let cfg = &self.cfg;
        let idx = &self.task.partition.client_indices[k];
        let stream: Option<SyntheticStream> = match &self.generator {
            Some(g) if self.generator_ready => Some(synthesize_local(
                g,
                idx.len(),
                cfg.train.epochs,
                cfg.train.batch_size,
                cfg.train.syn_per_batch,
                seed::derive(self.master_seed, Stream::Synthesis, &[t as u64, k as u64]),
            )?),
            _ => None,
        };
        let teacher = cfg.use_teacher().then_some(&self.teacher);
        local_update(
            &self.student,
            teacher,
            stream.as_ref(),
            &self.task.train,
            idx,
            &cfg.train,
            local_seed(self.master_seed, t, k),
        )
    }

    pub fn run_round(&mut self, t: usize) -> Result<RoundMetrics> {
        let selected = sample_clients(self.cfg.n_clients, self.cfg.sample_ratio, sampling_seed(self.master_seed, t))?;

        let outcomes: Vec<Result<LocalOutcome>> = if self.cfg.parallel {
            selected.par_iter().map(|&k| self.client_update(t, k)).collect()
        } else {
            selected.iter().map(|&k| self.client_update(t, k)).collect()
        };
        let mut uploads = Vec::with_capacity(selected.len());
        let (mut ce, mut kd, mut gen) = (0.0, 0.0, 0.0);
        for (&k, out) in selected.iter().zip(outcomes) {
            let out = out?;
            ce += out.loss_ce;
            kd += out.loss_kd;
            gen += out.loss_gen;
            uploads.push((k, out.params));
        }
        let n_sel = selected.len() as f64;

        self.ledger.record_round(&selected, t as u64)?;
        let w = self.ledger.weights(&selected, t as u64, self.cfg.mode, self.cfg.part_floor)?;
        for (k, params) in &uploads {
            self.registry.update(*k, params.clone())?;
        }
        self.student = aggregate_student(&uploads, &w.p)?;
        self.teacher = aggregate_teacher(&self.registry, &w.f)?;

        if let (Some(g), Some(opt)) = (self.generator.as_mut(), self.generator_opt.as_mut()) {
            let classifiers: Vec<&ModelParams> = uploads.iter().map(|(_, m)| m).collect();
            train_generator(
                g,
                opt,
                &classifiers,
                &w.p,
                &self.cfg.gen,
                seed::derive(self.master_seed, Stream::GeneratorTraining, &[t as u64]),
            )?;
            self.generator_ready = true;
        }

        Ok(RoundMetrics {
            round: t,
            student_acc: evaluate(&self.student, &self.task.test)?,
            teacher_acc: evaluate(&self.teacher, &self.task.test)?,
            loss_ce: ce / n_sel,
            loss_kd: kd / n_sel,
            loss_gen: gen / n_sel,
            var_f_intv: population_variance(&w.f_intv),
            var_f_part: population_variance(&w.f_part),
            var_f_num: population_variance(&w.f_num),
            selected,
        })
    }

    fn write_checkpoints(&self, dir: &Path, t: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.student, dir.join(format!("student_{t:04}.kdia")))?;
        checkpoint::save(&self.teacher, dir.join(format!("teacher_{t:04}.kdia")))?;
        if let Some(g) = &self.generator {
            checkpoint::save(g.model(), dir.join(format!("generator_{t:04}.kdia")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Student,
    Teacher,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub best_student_acc: f64,
    pub best_student_round: usize,
    pub best_teacher_acc: f64,
    pub best_teacher_round: usize,
    pub final_choice: ModelChoice,
    /// The better of the best student and best teacher snapshots.
    pub final_model: ModelParams,
    pub last_student: ModelParams,
    pub last_teacher: ModelParams,
    pub generator: Option<GeneratorParams>,
}

impl RunReport {
    pub fn final_acc(&self) -> f64 {
        self.best_student_acc.max(self.best_teacher_acc)
    }

    pub fn student_curve(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.student_acc).collect()
    }

    pub fn teacher_curve(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.teacher_acc).collect()
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunReport> {
    run_experiment_with(cfg, seed, |_| {})
}

/// [`run_experiment`] with a callback invoked after every round.
pub fn run_experiment_with(cfg: &ExperimentConfig, seed: u64, mut on_round: impl FnMut(&RoundMetrics)) -> Result<RunReport> {
    let mut state = ServerState::new(cfg, seed)?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut best_student = (f64::NEG_INFINITY, 0, state.student.clone());
    let mut best_teacher = (f64::NEG_INFINITY, 0, state.teacher.clone());
    for t in 0..cfg.rounds {
        let m = state.run_round(t)?;
        if m.student_acc > best_student.0 {
            best_student = (m.student_acc, t, state.student.clone());
        }
        if m.teacher_acc > best_teacher.0 {
            best_teacher = (m.teacher_acc, t, state.teacher.clone());
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
                state.write_checkpoints(dir, t)?;
            }
        }
        on_round(&m);
        metrics.push(m);
    }
    let (final_choice, final_model) = if best_teacher.0 > best_student.0 {
        (ModelChoice::Teacher, best_teacher.2)
    } else {
        (ModelChoice::Student, best_student.2)
    };
    Ok(RunReport {
        seed,
        metrics,
        best_student_acc: best_student.0.max(0.0),
        best_student_round: best_student.1,
        best_teacher_acc: best_teacher.0.max(0.0),
        best_teacher_round: best_teacher.1,
        final_choice,
        final_model,
        last_student: state.student,
        last_teacher: state.teacher,
        generator: state.generator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sizes() {
        assert_eq!(sample_clients(100, 0.1, 1).unwrap().len(), 10);
        assert_eq!(sample_clients(7, 1.0, 1).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(sample_clients(20, 0.01, 1).unwrap().len(), 1);
        assert_eq!(clients_per_round(25, 0.1), 3);
        assert_eq!(clients_per_round(15, 0.1), 2);
        assert!(sample_clients(10, 0.0, 1).is_err());
        assert!(sample_clients(10, 1.2, 1).is_err());
        assert_eq!(sample_clients(50, 0.2, 9).unwrap(), sample_clients(50, 0.2, 9).unwrap());
    }

    #[test]
    fn sampling_frequency_concentrates() {
        let mut counts = [0usize; 100];
        for t in 0..2000 {
            for k in sample_clients(100, 0.1, sampling_seed(42, t)).unwrap() {
                counts[k] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / 2000.0;
            assert!((0.05..=0.15).contains(&f), "{f}");
        }
    }

    #[test]
    fn variance_basics() {
        assert_eq!(population_variance(&[0.25; 4]), 0.0);
        assert!((population_variance(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
