// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{dot, DatasetPartition, EntityId, Matrix};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScale {
    /// Zero mean, unit variance per column.
    #[default]
    Standardized,
    /// Zero mean, unit Euclidean norm per column, which keeps the spectrum
    /// of `XᵀX` near one for sum-of-squares objectives.
    UnitNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Samples held by both parties.
    pub n_samples: usize,
    pub n_features_a: usize,
    pub n_features_b: usize,
    /// Length `n_features_a + n_features_b`, A's features first.
    pub true_weights: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Samples only A holds.
    pub extra_a: usize,
    /// Samples only B holds.
    pub extra_b: usize,
    pub feature_scale: FeatureScale,
}

impl SyntheticSpec {
    /// Weights `1, -0.5, 1.5, -1, ...`.
    pub fn default_weights(n: usize) -> Vec<f64> {
        (0..n)
            .map(|j| {
                let magnitude = 1.0 + 0.5 * (j / 2) as f64;
                if j % 2 == 0 { magnitude } else { -magnitude / 2.0 }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let n = self.n_features_a + self.n_features_b;
        if self.n_features_a == 0 || self.n_features_b == 0 {
            return Err(HarnessError::InvalidSpec("each party needs at least one feature".into()));
        }
        if self.true_weights.len() != n {
            return Err(HarnessError::InvalidSpec(format!(
                "{} weights for {n} features",
                self.true_weights.len()
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(HarnessError::InvalidSpec("noise_sigma must be nonnegative".into()));
        }
        if self.true_weights.iter().any(|w| !w.is_finite()) {
            return Err(HarnessError::InvalidSpec("weights must be finite".into()));
        }
        Ok(())
    }
}

fn normalize_columns(rows: &mut [Vec<f64>], scale: FeatureScale) {
    let Some(cols) = rows.first().map(Vec::len) else {
        return;
    };
    let n = rows.len() as f64;
    for j in 0..cols {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        for r in rows.iter_mut() {
            r[j] -= mean;
        }
        let ss = rows.iter().map(|r| r[j] * r[j]).sum::<f64>();
        let norm = match scale {
            FeatureScale::Standardized => (ss / n).sqrt(),
            FeatureScale::UnitNorm => ss.sqrt(),
        };
        if norm > 0.0 {
            for r in rows.iter_mut() {
                r[j] /= norm;
            }
        }
    }
}

/// Party A's partition (features only) and party B's (features and labels),
/// with `y = x·w + N(0, σ²)` on the scaled features. Row order differs
/// between the parties, so they must be aligned before training.
pub fn generate(spec: &SyntheticSpec) -> Result<(DatasetPartition, DatasetPartition), HarnessError> {
    spec.validate()?;
    let (na, nb) = (spec.n_features_a, spec.n_features_b);
    let total = spec.n_samples + spec.extra_a + spec.extra_b;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, "synthetic"));
    let mut rows: Vec<Vec<f64>> = (0..total)
        .map(|_| (0..na + nb).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    normalize_columns(&mut rows, spec.feature_scale);
    let labels: Vec<f64> = rows
        .iter()
        .map(|r| dot(r, &spec.true_weights) + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let ids: Vec<EntityId> = (0..total).map(|i| format!("entity-{i:06}").into()).collect();

    // Rows [0, n) are common, then A's extras, then B's extras.
    let common = 0..spec.n_samples;
    let only_a = spec.n_samples..spec.n_samples + spec.extra_a;
    let only_b = spec.n_samples + spec.extra_a..total;
    let mut rows_a: Vec<usize> = common.clone().chain(only_a).collect();
    let mut rows_b: Vec<usize> = common.chain(only_b).collect();
    rows_a.shuffle(&mut rng);
    rows_b.shuffle(&mut rng);

    let build = |sel: &[usize], cols: std::ops::Range<usize>, prefix: &str, with_labels: bool| {
        let names: Vec<String> = (0..cols.len()).map(|j| format!("{prefix}{j}")).collect();
        let data: Vec<f64> = sel.iter().flat_map(|&i| rows[i][cols.clone()].to_vec()).collect();
        DatasetPartition::new(
            sel.iter().map(|&i| ids[i].clone()).collect(),
            Matrix::from_vec(sel.len(), cols.len(), data),
            with_labels.then(|| sel.iter().map(|&i| labels[i]).collect()),
            names,
        )
        .expect("generated data is well formed")
    };
    Ok((
        build(&rows_a, 0..na, "a", false),
        build(&rows_b, na..na + nb, "b", true),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    #[default]
    Iid,
    /// Clients receive contiguous ranges of the label-sorted rows.
    LabelSkew,
}

/// `k` parts with the same schema and disjoint ids whose union is `data`.
/// Rows keep their original relative order within each part.
pub fn partition_horizontal(
    data: &DatasetPartition,
    k: usize,
    scheme: SplitScheme,
    seed: u64,
) -> Result<Vec<DatasetPartition>, HarnessError> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(HarnessError::InvalidSplit(format!("cannot split {n} rows into {k} parts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    match scheme {
        SplitScheme::Iid => {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "partition-iid"));
            order.shuffle(&mut rng);
        }
        SplitScheme::LabelSkew => {
            let labels = data
                .labels()
                .ok_or_else(|| HarnessError::InvalidSplit("label skew needs labels".into()))?;
            order.sort_by(|&i, &j| labels[i].total_cmp(&labels[j]).then(i.cmp(&j)));
        }
    }
    Ok((0..k)
        .map(|c| {
            let mut rows = order[c * n / k..(c + 1) * n / k].to_vec();
            rows.sort_unstable();
            data.select_rows(&rows)
        })
        .collect())
}

/// Splits columns: A gets `feature_split`, B gets the rest plus the labels.
pub fn partition_vertical(
    data: &DatasetPartition,
    feature_split: &[usize],
) -> Result<(DatasetPartition, DatasetPartition), HarnessError> {
    let n = data.n_features();
    let set: HashSet<usize> = feature_split.iter().copied().collect();
    if set.len() != feature_split.len() || feature_split.iter().any(|&j| j >= n) {
        return Err(HarnessError::InvalidSplit("feature indices must be unique and in range".into()));
    }
    if set.is_empty() || set.len() == n {
        return Err(HarnessError::InvalidSplit("both sides need at least one feature".into()));
    }
    let labels = data
        .labels()
        .ok_or_else(|| HarnessError::InvalidSplit("vertical split needs labels for B".into()))?;
    let cols_a: Vec<usize> = feature_split.to_vec();
    let cols_b: Vec<usize> = (0..n).filter(|j| !set.contains(j)).collect();
    let side = |cols: &[usize], labels: Option<Vec<f64>>| {
        DatasetPartition::new(
            data.ids().to_vec(),
            data.features().select_cols(cols),
            labels,
            cols.iter().map(|&j| data.feature_names()[j].clone()).collect(),
        )
        .expect("columns of a valid partition")
    };
    Ok((side(&cols_a, None), side(&cols_b, Some(labels.to_vec()))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Horizontal,
    Vertical,
    Transfer,
}

impl std::fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartitionKind::Horizontal => "horizontal",
            PartitionKind::Vertical => "vertical",
            PartitionKind::Transfer => "transfer",
        })
    }
}

/// Federated-learning category of a set of partitions: shared schema with
/// disjoint ids is horizontal, shared ids with disjoint schemas is vertical,
/// and disjoint in both is transfer.
pub fn classify_partition(parts: &[DatasetPartition]) -> Result<PartitionKind, HarnessError> {
    if parts.len() < 2 {
        return Err(HarnessError::Mixed("need at least two partitions".into()));
    }
    let id_sets: Vec<HashSet<&EntityId>> = parts.iter().map(|p| p.ids().iter().collect()).collect();
    let name_sets: Vec<HashSet<&String>> =
        parts.iter().map(|p| p.feature_names().iter().collect()).collect();
    let all_pairs = |f: &dyn Fn(usize, usize) -> bool| {
        (0..parts.len()).all(|i| (i + 1..parts.len()).all(|j| f(i, j)))
    };
    let ids_equal = all_pairs(&|i, j| id_sets[i] == id_sets[j]);
    let ids_disjoint = all_pairs(&|i, j| id_sets[i].is_disjoint(&id_sets[j]));
    let names_equal = all_pairs(&|i, j| parts[i].feature_names() == parts[j].feature_names());
    let names_disjoint = all_pairs(&|i, j| name_sets[i].is_disjoint(&name_sets[j]));
    match (names_equal, names_disjoint, ids_equal, ids_disjoint) {
        (true, _, _, true) => Ok(PartitionKind::Horizontal),
        (_, true, true, _) => Ok(PartitionKind::Vertical),
        (_, true, _, true) => Ok(PartitionKind::Transfer),
        _ => Err(HarnessError::Mixed(format!(
            "ids {} and feature schemas {}",
            if ids_equal { "shared" } else if ids_disjoint { "disjoint" } else { "partially overlapping" },
            if names_equal { "shared" } else if names_disjoint { "disjoint" } else { "partially overlapping" },
        ))),
    }
}
