//! Selection machinery: the knockoff threshold, its multi-copy
//! generalization, group aggregation of coefficient importances, and the
//! Benjamini-Hochberg step-up rule for resampling p-values.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::knockoff::GroupPartition;

fn validate_level(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("q = {q} must lie in (0, 1]")));
    }
    Ok(())
}

/// Per-entity importance scores: one original column followed by `copies`
/// knockoff columns. Entities are features or groups depending on the caller.
#[derive(Debug, Clone)]
pub struct ImportanceTable {
    copies: usize,
    values: DMatrix<f64>,
}

impl ImportanceTable {
    pub fn new(copies: usize, values: DMatrix<f64>) -> Result<Self> {
        if copies < 1 {
            return Err(Error::invalid("importance table needs at least one knockoff copy"));
        }
        if values.ncols() != copies + 1 {
            return Err(Error::invalid(format!(
                "importance table has {} columns but copies = {copies} requires {}",
                values.ncols(),
                copies + 1
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("importance table contains a non-finite value"));
        }
        Ok(ImportanceTable { copies, values })
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn n_entities(&self) -> usize {
        self.values.nrows()
    }

    pub fn original(&self, entity: usize) -> f64 {
        self.values[(entity, 0)]
    }

    /// Winner index among the original and its knockoff copies (0 = original,
    /// ties break toward the smaller index) and the margin between the winner
    /// and the median of the other `copies` scores.
    pub fn kappa_tau(&self, entity: usize) -> (usize, f64) {
        let row = self.values.row(entity);
        let mut kappa = 0usize;
        for l in 1..=self.copies {
            if row[l] > row[kappa] {
                kappa = l;
            }
        }
        let mut rest: Vec<f64> = (0..=self.copies).filter(|&l| l != kappa).map(|l| row[l]).collect();
        rest.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = rest.len();
        let median = if m % 2 == 1 {
            rest[m / 2]
        } else {
            0.5 * (rest[m / 2 - 1] + rest[m / 2])
        };
        (kappa, row[kappa] - median)
    }
}

/// Outcome of a selection rule. `threshold` is `+inf` when no candidate
/// satisfied the ratio bound (empty selection). Indices are 0-based.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub threshold: f64,
    pub q: f64,
    /// Single-knockoff contrast W, or the tau margins for the multi rule.
    pub w: Vec<f64>,
    /// Winner index per entity; absent for the single-contrast rule.
    pub kappa: Option<Vec<usize>>,
}

/// Knockoff selection threshold for signed contrasts W.
///
/// T is the smallest t among the nonzero |W_j| with
/// (1 + #{W_j <= -t}) / max(#{W_j >= t}, 1) <= q, and +inf when none
/// qualifies; the selection is {j : W_j >= T}.
pub fn knockoff_threshold(w: &[f64], q: f64) -> Result<(f64, Vec<usize>)> {
    validate_level(q)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("W contains a non-finite value"));
    }
    let mut sorted: Vec<f64> = w.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates: Vec<f64> = w.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut threshold = f64::INFINITY;
    for &t in &candidates {
        // sorted is ascending: count entries <= -t and >= t by binary search.
        let neg = sorted.partition_point(|&v| v <= -t);
        let pos = sorted.len() - sorted.partition_point(|&v| v < t);
        let ratio = (1.0 + neg as f64) / (pos.max(1) as f64);
        if ratio <= q {
            threshold = t;
            break;
        }
    }
    let selected = if threshold.is_finite() {
        w.iter()
            .enumerate()
            .filter(|(_, &v)| v >= threshold)
            .map(|(j, _)| j)
            .collect()
    } else {
        Vec::new()
    };
    Ok((threshold, selected))
}

/// Selection rule for one or more knockoff copies per entity.
///
/// Each entity is summarized by (kappa, tau); an entity is selectable only
/// when the original beats every copy (kappa = 0). The threshold is the
/// smallest positive tau with
/// (1/M + (1/M) #{kappa >= 1, tau >= t}) / max(#{kappa = 0, tau >= t}, 1) <= q.
/// With M = 1 this is exactly `knockoff_threshold` on W = Z0 - Z1.
pub fn multi_knockoff_filter(table: &ImportanceTable, q: f64) -> Result<SelectionResult> {
    validate_level(q)?;
    let n = table.n_entities();
    let m = table.copies() as f64;
    let mut kappa = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    for j in 0..n {
        let (k, t) = table.kappa_tau(j);
        kappa.push(k);
        tau.push(t);
    }
    let mut candidates: Vec<f64> = tau.iter().copied().filter(|&t| t > 0.0).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut threshold = f64::INFINITY;
    for &t in &candidates {
        let mut wins = 0usize;
        let mut losses = 0usize;
        for j in 0..n {
            if tau[j] >= t {
                if kappa[j] == 0 {
                    wins += 1;
                } else {
                    losses += 1;
                }
            }
        }
        let ratio = (1.0 / m + losses as f64 / m) / wins.max(1) as f64;
        if ratio <= q {
            threshold = t;
            break;
        }
    }
    let selected = if threshold.is_finite() {
        (0..n)
            .filter(|&j| kappa[j] == 0 && tau[j] >= threshold)
            .collect()
    } else {
        Vec::new()
    };
    Ok(SelectionResult {
        selected,
        threshold,
        q,
        w: tau,
        kappa: Some(kappa),
    })
}

/// Sums |beta| within each group, separately for the original block and each
/// knockoff block of a stacked coefficient vector
/// [original | copy 1 | ... | copy M].
pub fn group_aggregate(
    beta: &DVector<f64>,
    partition: &GroupPartition,
    copies: usize,
) -> Result<ImportanceTable> {
    let p = partition.n_features();
    if copies < 1 {
        return Err(Error::invalid("group aggregation needs at least one knockoff copy"));
    }
    if beta.len() != (copies + 1) * p {
        return Err(Error::invalid(format!(
            "coefficient vector has length {} but {} features with {copies} copies require {}",
            beta.len(),
            p,
            (copies + 1) * p
        )));
    }
    let mut values = DMatrix::zeros(partition.n_groups(), copies + 1);
    for (g, members) in partition.groups().iter().enumerate() {
        for block in 0..=copies {
            values[(g, block)] = members.iter().map(|&i| beta[block * p + i].abs()).sum();
        }
    }
    ImportanceTable::new(copies, values)
}

/// Benjamini-Hochberg step-up rule: rejects the k smallest p-values where
/// k = max{i : p_(i) <= q i/m}, returning their 0-based indices.
pub fn benjamini_hochberg(pvals: &[f64], q: f64) -> Result<Vec<usize>> {
    validate_level(q)?;
    for (j, &p) in pvals.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("p-value {p} at index {j} is outside [0, 1]")));
        }
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].partial_cmp(&pvals[b]).unwrap());
    let mut cutoff = None;
    for (rank, &j) in order.iter().enumerate() {
        if pvals[j] <= q * (rank + 1) as f64 / m as f64 {
            cutoff = Some(pvals[j]);
        }
    }
    match cutoff {
        Some(t) => Ok((0..m).filter(|&j| pvals[j] <= t).collect()),
        None => Ok(Vec::new()),
    }
}
