//! Per-client participation bookkeeping and the aggregation weights derived
//! from it.
//!
//! Three frequencies are tracked for every client `k`:
//!
//! * participation interval: `exp(-(t - t_k)) / Σ_j exp(-(t - t_j))`, where
//!   `t_k` is the last round the client was selected (`-1` before that);
//! * participation count: `n_part[k] / Σ_j n_part[j]`;
//! * data volume: `n_num[k] / Σ_j n_num[j]`.
//!
//! The teacher weight is their normalized geometric mean (or one of the
//! alternative [`WeightingMode`]s); the student weight is data volume over
//! the round's selected clients only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientLedgerEntry {
    /// Last round the client was selected, `-1` if never.
    pub last_round: i64,
    pub participations: u64,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightingMode {
    #[serde(rename = "intv")]
    Intv,
    #[serde(rename = "part")]
    Part,
    #[serde(rename = "num")]
    Num,
    #[serde(rename = "tri-am")]
    TriAm,
    #[default]
    #[serde(rename = "tri-gm")]
    TriGm,
}

impl WeightingMode {
    pub const ALL: [WeightingMode; 5] = [
        WeightingMode::Intv,
        WeightingMode::Part,
        WeightingMode::Num,
        WeightingMode::TriAm,
        WeightingMode::TriGm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightingMode::Intv => "intv",
            WeightingMode::Part => "part",
            WeightingMode::Num => "num",
            WeightingMode::TriAm => "tri-am",
            WeightingMode::TriGm => "tri-gm",
        }
    }
}

impl fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::key("mode", format!("unknown weighting mode `{s}` (intv, part, num, tri-am, tri-gm)")))
    }
}

/// One round's weight vectors. `p` is indexed like the selected set, the
/// others by client id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqWeights {
    pub mode: WeightingMode,
    pub f_intv: Vec<f64>,
    pub f_part: Vec<f64>,
    pub f_num: Vec<f64>,
    /// Unnormalized combination, before the final normalization.
    pub f_tri: Vec<f64>,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    entries: Vec<ClientLedgerEntry>,
}

impl Ledger {
    /// A fresh ledger for clients holding `sample_counts[k]` samples each.
    pub fn new(sample_counts: &[usize]) -> Result<Self> {
        if sample_counts.is_empty() {
            return Err(Error::Configuration("ledger needs at least one client".into()));
        }
        if let Some(k) = sample_counts.iter().position(|&n| n == 0) {
            return Err(Error::Configuration(format!("client {k} holds no samples")));
        }
        Ok(Ledger {
            entries: sample_counts
                .iter()
                .map(|&n| ClientLedgerEntry {
                    last_round: -1,
                    participations: 0,
                    samples: n as u64,
                })
                .collect(),
        })
    }

    pub fn entries(&self) -> &[ClientLedgerEntry] {
        &self.entries
    }

    pub fn n_clients(&self) -> usize {
        self.entries.len()
    }

    pub fn total_participations(&self) -> u64 {
        self.entries.iter().map(|e| e.participations).sum()
    }

    fn latest_round(&self) -> i64 {
        self.entries.iter().map(|e| e.last_round).max().unwrap_or(-1)
    }

    /// Mark `selected` as having participated in round `t`.
    pub fn record_round(&mut self, selected: &[usize], t: u64) -> Result<()> {
        if selected.is_empty() {
            return Err(Error::Configuration("a round needs at least one selected client".into()));
        }
        let n = self.entries.len();
        let mut seen = vec![false; n];
        for &k in selected {
            if k >= n {
                return Err(Error::Configuration(format!("client {k} out of range for {n} clients")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Configuration(format!("client {k} selected twice in round {t}")));
            }
        }
        let t = t as i64;
        if t < self.latest_round() {
            return Err(Error::Precondition(format!(
                "round {t} is earlier than already recorded round {}",
                self.latest_round()
            )));
        }
        for &k in selected {
            let e = &mut self.entries[k];
            e.last_round = t;
            e.participations += 1;
        }
        Ok(())
    }

    /// Participation-interval frequency at round `t`.
    ///
    /// Computed as `exp(t_k - max_j t_j)` normalized, which equals the
    /// textbook form but cannot underflow to an all-zero denominator.
    pub fn compute_intv(&self, t: u64) -> Result<Vec<f64>> {
        let latest = self.latest_round();
        if (t as i64) < latest {
            return Err(Error::Precondition(format!("round {t} precedes recorded round {latest}")));
        }
        let exps: Vec<f64> = self
            .entries
            .iter()
            .map(|e| ((e.last_round - latest) as f64).exp())
            .collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|v| v / sum).collect())
    }

    /// Participation-count frequency. Undefined before any participation.
    pub fn compute_part(&self) -> Result<Vec<f64>> {
        let total = self.total_participations();
        if total == 0 {
            return Err(Error::Precondition(
                "participation frequency needs at least one recorded round".into(),
            ));
        }
        Ok(self
            .entries
            .iter()
            .map(|e| e.participations as f64 / total as f64)
            .collect())
    }

    /// Data-volume proportion; constant for the life of the ledger.
    pub fn compute_num(&self) -> Vec<f64> {
        let total: u64 = self.entries.iter().map(|e| e.samples).sum();
        self.entries
            .iter()
            .map(|e| e.samples as f64 / total as f64)
            .collect()
    }

    /// All weight vectors for round `t` with selected set `selected`.
    pub fn weights(&self, selected: &[usize], t: u64, mode: WeightingMode, part_floor: f64) -> Result<FreqWeights> {
        let f_intv = self.compute_intv(t)?;
        let f_part = self.compute_part()?;
        let f_num = self.compute_num();
        let f_tri = combine_raw(&f_intv, &f_part, &f_num, mode, part_floor)?;
        let f = normalize(&f_tri)?;
        let p = student_weights(selected, self)?;
        Ok(FreqWeights {
            mode,
            f_intv,
            f_part,
            f_num,
            f_tri,
            f,
            p,
        })
    }

    /// The ledger as JSON, tagged with the round it describes.
    pub fn snapshot_json(&self, round: u64) -> String {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            round: u64,
            clients: &'a [ClientLedgerEntry],
        }
        serde_json::to_string(&Snapshot {
            round,
            clients: &self.entries,
        })
        .expect("plain data serializes")
    }
}

fn combine_raw(f_intv: &[f64], f_part: &[f64], f_num: &[f64], mode: WeightingMode, part_floor: f64) -> Result<Vec<f64>> {
    let n = f_intv.len();
    if f_part.len() != n || f_num.len() != n {
        return Err(Error::shape(None, format!("{n} clients"), format!("{} / {}", f_part.len(), f_num.len())));
    }
    if f_intv.iter().chain(f_part).chain(f_num).any(|&v| !(v >= 0.0)) {
        return Err(Error::Parameter("frequency vectors must be non-negative".into()));
    }
    let part = |k: usize| f_part[k].max(part_floor);
    Ok(match mode {
        WeightingMode::Intv => f_intv.to_vec(),
        WeightingMode::Part => f_part.to_vec(),
        WeightingMode::Num => f_num.to_vec(),
        WeightingMode::TriAm => (0..n).map(|k| (f_intv[k] + part(k) + f_num[k]) / 3.0).collect(),
        WeightingMode::TriGm => (0..n).map(|k| (f_intv[k] * part(k) * f_num[k]).cbrt()).collect(),
    })
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::Protocol(format!("cannot normalize weights summing to {sum}")));
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

/// Teacher weights: combine the three frequencies per `mode`, then normalize.
/// `part_floor` lower-bounds the participation-count factor in the two
/// combined modes; `0.0` keeps never-selected clients at weight zero under
/// the geometric mean.
pub fn combine(f_intv: &[f64], f_part: &[f64], f_num: &[f64], mode: WeightingMode, part_floor: f64) -> Result<Vec<f64>> {
    normalize(&combine_raw(f_intv, f_part, f_num, mode, part_floor)?)
}

/// Data-volume weights over the selected clients, in `selected` order.
pub fn student_weights(selected: &[usize], ledger: &Ledger) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Configuration("student weights need a selected client".into()));
    }
    let entries = ledger.entries();
    let mut sizes = Vec::with_capacity(selected.len());
    for &k in selected {
        let e = entries
            .get(k)
            .ok_or_else(|| Error::Configuration(format!("client {k} out of range")))?;
        sizes.push(e.samples as f64);
    }
    let total: f64 = sizes.iter().sum();
    Ok(sizes.into_iter().map(|s| s / total).collect())
}
