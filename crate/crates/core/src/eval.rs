//! Unsupervised accuracy under the best one-to-one cluster↔class mapping,
//! and the imbalanced-data experiment driver.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{assign_clusters, ClusterConfig, ClusterTrainer, HeadRole};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::mix_seed;
use crate::tensor::Tensor;

/// Minimum-cost perfect matching on a square matrix: `result[row] = column`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument(
            "assignment cost matrix must be square".into(),
        ));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "assignment cost matrix must be finite".into(),
        ));
    }
    // potentials formulation, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// `counts[cluster][class]`, padded square.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot score an empty labelling".into(),
        ));
    }
    let k = pred.iter().chain(truth).max().unwrap() + 1;
    let mut c = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        c[p][t] += 1;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub n: usize,
    /// `mapping[cluster] = class`.
    pub mapping: Vec<usize>,
    /// Fraction of each true class assigned to it under the mapping.
    pub per_class: Vec<f64>,
    /// `confusion[true][mapped prediction]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<EvalReport> {
    let counts = contingency(pred, truth)?;
    let k = counts.len();
    let max = counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().map(|&c| max - c as f64).collect())
        .collect();
    let mapping = hungarian_match(&cost)?;
    let matched: u64 = (0..k).map(|c| counts[c][mapping[c]]).sum();
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][mapping[p]] += 1;
    }
    let classes = truth.iter().max().unwrap() + 1;
    let per_class = (0..classes)
        .map(|t| {
            let total: u64 = confusion[t].iter().sum();
            if total == 0 {
                0.0
            } else {
                confusion[t][t] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        acc: matched as f64 / pred.len() as f64,
        n: pred.len(),
        mapping,
        per_class,
        confusion,
    })
}

/// Feature quality probe: assign each row to the nearest class mean (means
/// from the true labels) and report the fraction that lands on its own class.
pub fn nearest_centroid_accuracy(features: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::shape("nearest_centroid_accuracy", s, &[0, 0])),
    };
    if n != labels.len() || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} rows for {} labels",
            labels.len()
        )));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut means = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (row, &l) in features.data().chunks(d).zip(labels) {
        counts[l] += 1;
        for (m, &v) in means[l * d..(l + 1) * d].iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        for m in &mut means[c * d..(c + 1) * d] {
            *m /= cnt.max(1) as f64;
        }
    }
    let hits = features
        .data()
        .chunks(d)
        .zip(labels)
        .filter(|(row, &l)| {
            let dist = |c: usize| -> f64 {
                row.iter()
                    .zip(&means[c * d..(c + 1) * d])
                    .map(|(&v, &m)| (v as f64 - m).powi(2))
                    .sum()
            };
            let best = (0..k)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .unwrap_or(0);
            best == l
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Which tolerance values the imbalance experiment uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaSchedule {
    /// `δ = 1e-4` for primary heads and `1e-2` for overcluster heads at every
    /// drop level.
    Constant,
    /// Tolerances that grow with the drop level.
    Variable,
}

impl DeltaSchedule {
    /// `(primary δ, overcluster δ)` at a drop fraction.
    pub fn deltas(self, drop: f64) -> (f64, f64) {
        match self {
            DeltaSchedule::Constant => (1e-4, 1e-2),
            DeltaSchedule::Variable => {
                let pct = (drop * 100.0).round() as u32;
                match pct {
                    0..=10 => (1e-4, 2e-2),
                    11..=20 => (1e-3, 2e-2),
                    21..=30 => (1e-3, 5e-2),
                    _ => (2e-3, 5e-2),
                }
            }
        }
    }
}

/// Classes to thin out and the fractions to drop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSpec {
    pub classes: Vec<usize>,
    pub fractions: Vec<f64>,
}

/// Indices kept after removing `fraction` of each listed class, chosen at
/// random with `seed`.
pub fn drop_indices(
    labels: &[usize],
    classes: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "drop fraction {fraction} would empty a class"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; labels.len()];
    for &c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let remove = (idx.len() as f64 * fraction).round() as usize;
        if remove >= idx.len() && !idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "dropping {fraction} empties class {c}"
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..remove] {
            dropped[i] = true;
        }
    }
    Ok((0..labels.len()).filter(|&i| !dropped[i]).collect())
}

/// Train a bank on `features` for `config.epochs` epochs, regenerating the
/// dropout view each epoch, and score its best primary head.
pub fn fit_and_score(
    features: &FeatureMatrix,
    labels: &[usize],
    config: &ClusterConfig,
    feature_dropout: f64,
) -> Result<(EvalReport, ClusterTrainer<f32>)> {
    let mut tr = ClusterTrainer::<f32>::new(features.dim(), config.clone())?;
    for e in 0..config.epochs {
        let prime = features.with_dropout(feature_dropout, mix_seed(config.seed, e as u64))?;
        tr.train_epoch(&features.values, &prime.values)?;
    }
    let head = tr.best_head()?;
    let pred = assign_clusters(&tr.bank, head, &features.values)?;
    Ok((clustering_accuracy(&pred, labels)?, tr))
}

/// One row of the imbalance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRow {
    pub drop: f64,
    pub schedule: DeltaSchedule,
    /// Seed-averaged accuracy per true class.
    pub per_class: Vec<f64>,
    pub overall: f64,
}

/// For each drop fraction and schedule: drop, retrain, score; averaged over
/// seeds. The zero-drop level is run once with the constant schedule.
pub fn imbalance_experiment(
    features: &FeatureMatrix,
    labels: &[usize],
    drop: &DropSpec,
    base: &ClusterConfig,
    feature_dropout: f64,
    seeds: &[u64],
) -> Result<Vec<ImbalanceRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "imbalance experiment needs at least one seed".into(),
        ));
    }
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut rows = Vec::new();
    for &fraction in &drop.fractions {
        let schedules: &[DeltaSchedule] = if fraction == 0.0 {
            &[DeltaSchedule::Constant]
        } else {
            &[DeltaSchedule::Constant, DeltaSchedule::Variable]
        };
        for &schedule in schedules {
            let (dp, dover) = schedule.deltas(fraction);
            let mut per_class = vec![0.0; classes];
            let mut overall = 0.0;
            for &seed in seeds {
                let keep = drop_indices(labels, &drop.classes, fraction, mix_seed(seed, 77))?;
                let sub = FeatureMatrix {
                    values: features.values.gather_rows(&keep),
                    ..features.clone()
                };
                let sub_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
                let mut cfg = base.clone();
                cfg.seed = seed;
                for h in cfg.heads.iter_mut() {
                    h.delta = if h.role == HeadRole::Primary {
                        dp
                    } else {
                        dover
                    };
                }
                let (rep, _) = fit_and_score(&sub, &sub_labels, &cfg, feature_dropout)?;
                overall += rep.acc / seeds.len() as f64;
                for (a, v) in per_class.iter_mut().zip(&rep.per_class) {
                    *a += v / seeds.len() as f64;
                }
            }
            rows.push(ImbalanceRow {
                drop: fraction,
                schedule,
                per_class,
                overall,
            });
        }
    }
    Ok(rows)
}

/// `drop_pct,schedule,class,accuracy`, with an `overall` pseudo-class.
pub fn imbalance_csv(rows: &[ImbalanceRow]) -> String {
    let mut s = String::from("drop_pct,schedule,class,accuracy\n");
    for r in rows {
        let sched = match r.schedule {
            DeltaSchedule::Constant => "constant",
            DeltaSchedule::Variable => "variable",
        };
        let pct = (r.drop * 100.0).round() as u32;
        for (c, a) in r.per_class.iter().enumerate() {
            let _ = writeln!(s, "{pct},{sched},{c},{a:.6}");
        }
        let _ = writeln!(s, "{pct},{sched},overall,{:.6}", r.overall);
    }
    s
}
