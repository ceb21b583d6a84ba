//! Synthetic classification data and Dirichlet client partitioning.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor2;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(None, format!("{} labels", features.rows()), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Parameter(format!("label {bad} out of range for {n_classes} classes")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// Parameters of [`make_blobs`]. Class centers are random unit directions
/// scaled by `separation`; samples add isotropic Gaussian noise of standard
/// deviation `spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    pub separation: f64,
    pub seed: u64,
}

pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.samples_per_class == 0 || spec.d_in == 0 {
        return Err(Error::Parameter("blob counts must all be at least 1".into()));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::Parameter(format!("spread must be non-negative, got {}", spec.spread)));
    }
    let mut rng = seed::rng(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.d_in).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.into_iter().map(|v| spec.separation * v / norm).collect()
        })
        .collect();

    let n = spec.n_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.d_in);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spec.spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor2::from_vec(n, spec.d_in, data)?, labels, spec.n_classes)
}

/// Per-class split into `(train, test)`; each class contributes
/// `round(test_fraction * class size)` samples to the test side.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Parameter(format!("test fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut rng = seed::rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..ds.n_classes {
        let mut idx = ds.indices_of_class(c);
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Disjoint per-client sample index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub beta: f64,
    pub seed: u64,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    pub fn class_histogram(&self, ds: &Dataset, client: usize) -> Vec<usize> {
        let mut h = vec![0; ds.n_classes];
        for &i in &self.client_indices[client] {
            h[ds.labels[i]] += 1;
        }
        h
    }

    /// Client id to sample indices, as JSON.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            beta: f64,
            seed: u64,
            clients: BTreeMap<usize, &'a [usize]>,
        }
        let export = Export {
            beta: self.beta,
            seed: self.seed,
            clients: self.client_indices.iter().map(Vec::as_slice).enumerate().collect(),
        };
        serde_json::to_string_pretty(&export).expect("plain data serializes")
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Split every class across clients by a Dir(beta) proportion vector.
///
/// For each class, per-client Gamma(beta, 1) draws are normalized to the
/// simplex and the shuffled class samples are cut at the cumulative shares.
/// Clients left empty afterwards receive one sample each from the currently
/// largest client.
pub fn dirichlet_partition(ds: &Dataset, n_clients: usize, beta: f64, seed: u64) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::Configuration("need at least one client".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    if ds.len() < n_clients {
        return Err(Error::Configuration(format!(
            "{} samples cannot cover {n_clients} clients",
            ds.len()
        )));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let mut clients = vec![Vec::new(); n_clients];

    for c in 0..ds.n_classes {
        let mut idx = ds.indices_of_class(c);
        idx.shuffle(&mut rng);
        let mut shares: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = shares.iter().sum();
        if total > 0.0 && total.is_finite() {
            shares.iter_mut().for_each(|s| *s /= total);
        } else {
            shares.iter_mut().for_each(|s| *s = 1.0 / n_clients as f64);
        }
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (k, share) in shares.iter().enumerate() {
            cum += share;
            let end = if k + 1 == n_clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            clients[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }

    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..n_clients)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = clients[donor].pop().expect("largest client holds at least two samples");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition {
        client_indices: clients,
        beta,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor2,
    pub labels: Vec<usize>,
}

/// Shuffle a client's samples with `epoch_seed` and cut them into batches of
/// `batch_size`; the last batch may be short.
pub fn batches(part: &Partition, ds: &Dataset, client_id: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    let idx = part
        .client_indices
        .get(client_id)
        .ok_or_else(|| Error::Parameter(format!("client {client_id} out of range for {}", part.n_clients())))?;
    batches_of(ds, idx, batch_size, epoch_seed)
}

pub(crate) fn batches_of(ds: &Dataset, idx: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order = idx.to_vec();
    order.shuffle(&mut seed::rng(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            features: ds.features.select_rows(chunk),
            labels: chunk.iter().map(|&i| ds.labels[i]).collect(),
        })
        .collect())
}
