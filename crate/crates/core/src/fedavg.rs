//! Plain FedAvg, written independently of the distillation code path.
//!
//! Shares the task construction, client sampling and seed streams with the
//! orchestrator so the two can be compared run for run, but owns its local
//! loop and its averaging loop.

use crate::data::batches_of;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::local::{epoch_seed, evaluate};
use crate::nn::{softmax_ce_loss, ModelParams, OptimizerState, Targets};
use crate::orchestrator::{build_task, init_task_model, local_seed, sample_clients, sampling_seed};

#[derive(Debug, Clone)]
pub struct FedAvgReport {
    pub model: ModelParams,
    pub accuracies: Vec<f64>,
}

impl FedAvgReport {
    pub fn best_acc(&self) -> f64 {
        self.accuracies.iter().copied().fold(0.0, f64::max)
    }
}

pub fn run_fedavg(cfg: &ExperimentConfig, master: u64) -> Result<FedAvgReport> {
    cfg.validate()?;
    let task = build_task(cfg, master)?;
    let mut global = init_task_model(cfg, master)?;
    let tc = &cfg.train;
    let mut accuracies = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let selected = sample_clients(cfg.n_clients, cfg.sample_ratio, sampling_seed(master, t))?;
        let mut uploads = Vec::with_capacity(selected.len());
        for &k in &selected {
            let idx = &task.partition.client_indices[k];
            let mut local = global.clone();
            let mut opt = OptimizerState::sgd(&local, tc.learning_rate, tc.momentum, tc.weight_decay);
            let s = local_seed(master, t, k);
            for e in 0..tc.epochs {
                for b in batches_of(&task.train, idx, tc.batch_size, epoch_seed(s, e))? {
                    let trace = local.forward_trace(&b.features, false)?;
                    let (_, g) = softmax_ce_loss(trace.logits(), Targets::Hard(&b.labels), 1.0)?;
                    let grads = local.backward_trace(&trace, &g)?.grads;
                    opt.step(&mut local, &grads)?;
                }
            }
            uploads.push((idx.len(), local));
        }

        let total: f64 = uploads.iter().map(|(n, _)| *n as f64).sum();
        let mut next = global.zeros_like();
        for (n, m) in &uploads {
            let w = *n as f64 / total;
            for (dst, src) in next.tensors_mut().zip(m.tensors()) {
                for i in 0..dst.len() {
                    dst[i] += w * src[i];
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("FedAvg model after round {t}")));
        }
        global = next;
        accuracies.push(evaluate(&global, &task.test)?);
    }
    Ok(FedAvgReport { model: global, accuracies })
}
