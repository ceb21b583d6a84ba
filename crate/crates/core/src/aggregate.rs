//! The server's per-client model store and weighted averaging.

use crate::error::{Error, Result};
use crate::nn::ModelParams;

/// Tolerance on `Σ weights = 1` accepted by [`weighted_aggregate`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// The most recent upload of every client. Clients that never participated
/// hold a copy of the initial global model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRegistry {
    stored: Vec<ModelParams>,
}

impl ModelRegistry {
    pub fn new(initial: &ModelParams, n_clients: usize) -> Result<Self> {
        if n_clients == 0 {
            return Err(Error::Configuration("registry needs at least one client".into()));
        }
        Ok(ModelRegistry {
            stored: vec![initial.clone(); n_clients],
        })
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn get(&self, client: usize) -> Option<&ModelParams> {
        self.stored.get(client)
    }

    pub fn models(&self) -> &[ModelParams] {
        &self.stored
    }

    /// Replace one client's snapshot; every other entry is untouched.
    pub fn update(&mut self, client: usize, params: ModelParams) -> Result<()> {
        let n = self.stored.len();
        let slot = self
            .stored
            .get_mut(client)
            .ok_or_else(|| Error::Configuration(format!("client {client} out of range for {n}")))?;
        slot.check_same_shape(&params)?;
        *slot = params;
        Ok(())
    }
}

/// `Σ_k weights[k] * models[k]`, summed per parameter in the order given.
pub fn weighted_aggregate(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Protocol("nothing to aggregate".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Protocol(format!("{} models but {} weights", models.len(), weights.len())));
    }
    let sum: f64 = weights.iter().sum();
    if !((sum - 1.0).abs() <= WEIGHT_SUM_TOLERANCE) {
        return Err(Error::Protocol(format!("aggregation weights sum to {sum}")));
    }
    let mut out = models[0].zeros_like();
    for (m, &w) in models.iter().zip(weights) {
        out.check_same_shape(m)?;
        for (acc, src) in out.tensors_mut().zip(m.tensors()) {
            for (a, &s) in acc.iter_mut().zip(src) {
                *a += w * s;
            }
        }
    }
    Ok(out)
}

/// Student aggregate over the round's uploads, `(client id, params)` pairs in
/// ascending id order with matching weights `p`.
pub fn aggregate_student(uploads: &[(usize, ModelParams)], p: &[f64]) -> Result<ModelParams> {
    let models: Vec<&ModelParams> = uploads.iter().map(|(_, m)| m).collect();
    weighted_aggregate(&models, p)
}

/// Teacher aggregate over every stored snapshot with client weights `f`.
pub fn aggregate_teacher(registry: &ModelRegistry, f: &[f64]) -> Result<ModelParams> {
    let models: Vec<&ModelParams> = registry.models().iter().collect();
    weighted_aggregate(&models, f)
}
