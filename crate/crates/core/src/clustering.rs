//! Affinity propagation, centroid-linkage agglomerative clustering and
//! k-means over one category's entity vectors, plus the parameter sweeps
//! that produce candidate runs for model selection.
//!
//! A sweep attempts every grid value, keeps only partitions whose cluster
//! count `k` satisfies `min_clusters <= k < n`, and attaches the silhouette
//! to each kept run.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::normalize_rows;
use crate::evaluation::{silhouette, DissimilarityMatrix, EvaluationError, Separation};
use crate::scalar::{dot, norm, squared_distance, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("no points to cluster")]
    Empty,
    #[error("similarity matrix is not square")]
    NotSquare,
    #[error("similarity matrix is asymmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("damping must lie in [0.5, 1), got {0}")]
    InvalidDamping(f64),
    #[error("preference must be finite")]
    InvalidPreference,
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("zero or non-finite vector at row {0}")]
    ZeroVector(usize),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

// ---------------------------------------------------------------------------
// Partition

/// Cluster label per entity. Labels are dense `0..k` and numbered in order
/// of first appearance, so equal groupings compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPartition", into = "RawPartition")]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct RawPartition {
    labels: Vec<usize>,
}

impl TryFrom<RawPartition> for Partition {
    type Error = String;

    fn try_from(raw: RawPartition) -> Result<Self, String> {
        let p = Partition::from_labels(&raw.labels);
        if p.labels != raw.labels {
            return Err("labels must be dense and numbered by first appearance".into());
        }
        Ok(p)
    }
}

impl From<Partition> for RawPartition {
    fn from(p: Partition) -> Self {
        RawPartition { labels: p.labels }
    }
}

impl Partition {
    /// Canonicalizes arbitrary labels.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<usize> = raw
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self { k: map.len(), labels }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Member indices of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Runs

/// Algorithm tag; the derive order is the tie-break order used in selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ap,
    Agglomerative,
    Kmeans,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Ap, Algorithm::Agglomerative, Algorithm::Kmeans];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Ap => "ap",
            Algorithm::Agglomerative => "agglomerative",
            Algorithm::Kmeans => "kmeans",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ap" => Ok(Algorithm::Ap),
            "agglomerative" => Ok(Algorithm::Agglomerative),
            "kmeans" => Ok(Algorithm::Kmeans),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunParams<T> {
    Preference { preference: T, damping: T },
    /// Every cut level that produced the same partition.
    SimilarityLevel { levels: Vec<T> },
    K { k: usize, seed: u64, restarts: usize },
}

impl<T: Scalar> RunParams<T> {
    /// Swept value used for ordering and plotting.
    pub fn sort_key(&self) -> f64 {
        match self {
            RunParams::Preference { preference, .. } => preference.to_f64_lossy(),
            RunParams::SimilarityLevel { levels } => {
                levels.first().map_or(f64::NAN, |l| l.to_f64_lossy())
            }
            RunParams::K { k, .. } => *k as f64,
        }
    }

    /// All swept values this run stands for.
    pub fn values(&self) -> Vec<f64> {
        match self {
            RunParams::SimilarityLevel { levels } => levels.iter().map(|l| l.to_f64_lossy()).collect(),
            _ => vec![self.sort_key()],
        }
    }
}

/// One recorded clustering of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRun<T> {
    pub category: String,
    pub algorithm: Algorithm,
    pub params: RunParams<T>,
    pub k: usize,
    pub mean_silhouette: T,
    pub converged: bool,
    pub iterations: usize,
    pub partition: Partition,
    pub silhouettes: Vec<T>,
}

/// Keeps runs with `min_clusters <= k < n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    pub min_clusters: usize,
}

impl Default for RecordFilter {
    fn default() -> Self {
        Self { min_clusters: 10 }
    }
}

impl RecordFilter {
    pub fn admits(&self, k: usize, n: usize) -> bool {
        k >= self.min_clusters && k < n
    }

    fn rejection(&self, k: usize, n: usize) -> String {
        if k < self.min_clusters {
            format!("k = {k} < {}", self.min_clusters)
        } else {
            format!("k = {k} >= n = {n}")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Recorded,
    Filtered(String),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAttempt {
    pub algorithm: Algorithm,
    pub parameter: f64,
    pub k: Option<usize>,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep<T> {
    pub attempts: Vec<SweepAttempt>,
    pub runs: Vec<ClusterRun<T>>,
}

/// Shared inputs for sweeping one category.
#[derive(Debug, Clone, Copy)]
pub struct SweepContext<'a, T> {
    pub category: &'a str,
    pub dissimilarity: &'a DissimilarityMatrix<T>,
    pub separation: Separation,
    pub filter: RecordFilter,
}

impl<T: Scalar> SweepContext<'_, T> {
    fn n(&self) -> usize {
        self.dissimilarity.len()
    }

    fn record(
        &self,
        algorithm: Algorithm,
        params: RunParams<T>,
        partition: Partition,
        converged: bool,
        iterations: usize,
    ) -> Result<ClusterRun<T>, ClusteringError> {
        let report = silhouette(&partition, self.dissimilarity, self.separation)?;
        Ok(ClusterRun {
            category: self.category.to_string(),
            algorithm,
            k: partition.k(),
            params,
            mean_silhouette: report.mean,
            converged,
            iterations,
            partition,
            silhouettes: report.values,
        })
    }
}

/// `start, start + step, …, stop` with values formed as exact ratios to
/// avoid accumulated rounding (`0.15`, not `0.15000000000000002`).
pub fn grid<T: Scalar>(start: f64, stop: f64, step: f64) -> Vec<T> {
    assert!(step > 0.0 && stop >= start, "grid needs step > 0 and stop >= start");
    let intervals = ((stop - start) / step).round() as usize;
    (0..=intervals)
        .map(|i| T::lit(start + (stop - start) * i as f64 / intervals.max(1) as f64))
        .collect()
}

/// Preference values `0.00, 0.05, …, 1.00`.
pub fn default_preferences<T: Scalar>() -> Vec<T> {
    grid(0.0, 1.0, 0.05)
}

/// Cut levels `0.00, 0.02, …, 1.00`.
pub fn default_levels<T: Scalar>() -> Vec<T> {
    grid(0.0, 1.0, 0.02)
}

/// Cluster counts `10, 20, …, 120`.
pub fn default_ks() -> Vec<usize> {
    (10..=120).step_by(10).collect()
}

// ---------------------------------------------------------------------------
// Affinity propagation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApParams<T> {
    pub damping: T,
    pub max_iter: usize,
    /// Consecutive iterations with an unchanged exemplar set that count as
    /// convergence.
    pub stable_iters: usize,
}

impl<T: Scalar> Default for ApParams<T> {
    fn default() -> Self {
        Self {
            damping: T::lit(0.9),
            max_iter: 1000,
            stable_iters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApOutcome {
    pub partition: Partition,
    pub exemplars: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

fn check_symmetric<T: Scalar>(s: &Array2<T>) -> Result<usize, ClusteringError> {
    let n = s.nrows();
    if n == 0 {
        return Err(ClusteringError::Empty);
    }
    if s.ncols() != n {
        return Err(ClusteringError::NotSquare);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if s[[i, j]] != s[[j, i]] {
                return Err(ClusteringError::Asymmetric(i, j));
            }
        }
    }
    Ok(n)
}

/// Affinity propagation on a similarity matrix whose diagonal is replaced
/// by `preference`.
///
/// Responsibilities and availabilities are updated with damping. A point is
/// an exemplar when its self-responsibility plus self-availability is
/// positive; the run has converged once the exemplar set stays unchanged
/// for `stable_iters` consecutive iterations. Every other point joins its
/// most similar exemplar.
///
/// Exactly tied similarities (duplicate points) make the message updates
/// symmetric, so a fixed-seed perturbation on the order of machine epsilon
/// is added to the working copy of the matrix. Final assignments use the
/// unperturbed similarities.
pub fn ap_cluster<T: Scalar>(
    similarity: &Array2<T>,
    preference: T,
    params: &ApParams<T>,
) -> Result<ApOutcome, ClusteringError> {
    let n = check_symmetric(similarity)?;
    let damping = params.damping;
    if !(damping >= T::lit(0.5) && damping < T::one()) {
        return Err(ClusteringError::InvalidDamping(damping.to_f64_lossy()));
    }
    if !preference.is_finite() {
        return Err(ClusteringError::InvalidPreference);
    }
    if n == 1 {
        return Ok(ApOutcome {
            partition: Partition::from_labels(&[0]),
            exemplars: vec![0],
            converged: true,
            iterations: 0,
        });
    }

    let mut s: Vec<T> = similarity.iter().copied().collect();
    for i in 0..n {
        s[i * n + i] = preference;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tiny = T::min_positive_value() * T::lit(100.0);
    for x in s.iter_mut() {
        // Wide enough to survive rounding at unit magnitude.
        let noise = T::lit(rng.random_range(-2.0..2.0));
        *x += (T::epsilon() * x.abs() + tiny) * noise;
    }

    let keep = damping;
    let take = T::one() - damping;
    let mut r = vec![T::zero(); n * n];
    let mut a = vec![T::zero(); n * n];
    let mut col_pos = vec![T::zero(); n];
    let mut exemplars: Vec<usize> = Vec::new();
    let mut stable = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=params.max_iter {
        iterations = it;
        for i in 0..n {
            let row = i * n;
            let (mut best, mut best_k, mut second) = (T::neg_infinity(), 0, T::neg_infinity());
            for k in 0..n {
                let v = a[row + k] + s[row + k];
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let competitor = if k == best_k { second } else { best };
                let fresh = s[row + k] - competitor;
                r[row + k] = keep * r[row + k] + take * fresh;
            }
        }

        col_pos.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    col_pos[k] += r[i * n + k].max(T::zero());
                }
            }
        }
        for i in 0..n {
            for k in 0..n {
                let idx = i * n + k;
                let fresh = if i == k {
                    col_pos[k]
                } else {
                    (r[k * n + k] + col_pos[k] - r[idx].max(T::zero())).min(T::zero())
                };
                a[idx] = keep * a[idx] + take * fresh;
            }
        }

        let current: Vec<usize> = (0..n)
            .filter(|&k| r[k * n + k] + a[k * n + k] > T::zero())
            .collect();
        if current == exemplars {
            stable += 1;
        } else {
            stable = 1;
            exemplars = current;
        }
        if stable >= params.stable_iters && !exemplars.is_empty() {
            converged = true;
            break;
        }
    }

    if exemplars.is_empty() {
        let best = (0..n)
            .max_by(|&x, &y| {
                (r[x * n + x] + a[x * n + x])
                    .partial_cmp(&(r[y * n + y] + a[y * n + y]))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| y.cmp(&x))
            })
            .expect("n > 0");
        exemplars = vec![best];
        converged = false;
    }

    let labels = assign_to_exemplars(similarity, &exemplars);
    Ok(ApOutcome {
        partition: Partition::from_labels(&labels),
        exemplars,
        converged,
        iterations,
    })
}

/// Exemplars label themselves; everyone else takes the most similar
/// exemplar, ties to the lower index.
fn assign_to_exemplars<T: Scalar>(similarity: &Array2<T>, exemplars: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = exemplars.iter().copied().collect();
    (0..similarity.nrows())
        .map(|i| {
            if set.contains(&i) {
                return i;
            }
            let mut best = exemplars[0];
            for &e in &exemplars[1..] {
                if similarity[[i, e]] > similarity[[i, best]] {
                    best = e;
                }
            }
            best
        })
        .collect()
}

/// Runs affinity propagation at every preference in `preferences`.
pub fn sweep_ap<T: Scalar>(
    ctx: &SweepContext<'_, T>,
    similarity: &Array2<T>,
    preferences: &[T],
    params: &ApParams<T>,
) -> Result<Sweep<T>, ClusteringError> {
    let n = ctx.n();
    let outcomes: Vec<Result<ApOutcome, ClusteringError>> = preferences
        .par_iter()
        .map(|&p| ap_cluster(similarity, p, params))
        .collect();
    let mut attempts = Vec::with_capacity(preferences.len());
    let mut runs = Vec::new();
    for (&p, outcome) in preferences.iter().zip(outcomes) {
        let outcome = outcome?;
        let k = outcome.partition.k();
        let status = if ctx.filter.admits(k, n) {
            runs.push(ctx.record(
                Algorithm::Ap,
                RunParams::Preference {
                    preference: p,
                    damping: params.damping,
                },
                outcome.partition,
                outcome.converged,
                outcome.iterations,
            )?);
            AttemptOutcome::Recorded
        } else {
            AttemptOutcome::Filtered(ctx.filter.rejection(k, n))
        };
        attempts.push(SweepAttempt {
            algorithm: Algorithm::Ap,
            parameter: p.to_f64_lossy(),
            k: Some(k),
            outcome: status,
        });
    }
    Ok(Sweep { attempts, runs })
}

// ---------------------------------------------------------------------------
// Agglomerative

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge<T> {
    /// Node ids: leaves are `0..n`, the node created by merge `m` is `n + m`.
    pub left: usize,
    pub right: usize,
    pub similarity: T,
    pub size: usize,
    pub centroid: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram<T> {
    pub leaves: usize,
    pub merges: Vec<Merge<T>>,
}

fn pair_key(x: usize, y: usize) -> (usize, usize) {
    (x.min(y), x.max(y))
}

/// Candidate `(similarity, pair)` is better than the incumbent when more
/// similar, or equally similar with a lexicographically smaller node pair.
fn better<T: Scalar>(sim: T, pair: (usize, usize), incumbent: Option<(T, (usize, usize))>) -> bool {
    match incumbent {
        None => true,
        Some((s, p)) => sim > s || (sim == s && pair < p),
    }
}

/// Centroid-linkage agglomerative clustering under cosine similarity.
///
/// Every step merges the two clusters whose centroids (member means) are
/// most cosine-similar; ties go to the smallest `(left, right)` node pair.
/// Centroid linkage can produce inversions, so merge similarities are not
/// necessarily monotone.
pub fn agglomerative<T: Scalar>(vectors: &Array2<T>) -> Result<Dendrogram<T>, ClusteringError> {
    let n = vectors.nrows();
    if n == 0 {
        return Err(ClusteringError::Empty);
    }
    for (i, row) in vectors.rows().into_iter().enumerate() {
        let nr = norm(row.as_slice().expect("standard layout"));
        if nr == T::zero() || !nr.is_finite() {
            return Err(ClusteringError::ZeroVector(i));
        }
    }

    // Slot-indexed state. A merge writes the new cluster into the lower
    // slot and retires the higher one.
    let mut node: Vec<usize> = (0..n).collect();
    let mut sums: Vec<Vec<T>> = vectors.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut sizes = vec![1usize; n];
    let mut units: Vec<Vec<T>> = sums.iter().map(|s| unit(s)).collect();
    let mut active: Vec<bool> = vec![true; n];
    let mut sim = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = cosine_of_units(&units[i], &units[j]);
            sim[i * n + j] = c;
            sim[j * n + i] = c;
        }
    }
    // Best partner of each slot.
    let mut best: Vec<Option<(T, usize)>> = vec![None; n];
    let row_best = |slot: usize, sim: &[T], node: &[usize], active: &[bool]| {
        let mut out: Option<(T, (usize, usize), usize)> = None;
        for other in 0..n {
            if other == slot || !active[other] {
                continue;
            }
            let s = sim[slot * n + other];
            let pair = pair_key(node[slot], node[other]);
            if better(s, pair, out.map(|(s, p, _)| (s, p))) {
                out = Some((s, pair, other));
            }
        }
        out.map(|(s, _, o)| (s, o))
    };
    for slot in 0..n {
        best[slot] = row_best(slot, &sim, &node, &active);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut chosen: Option<(T, (usize, usize), usize, usize)> = None;
        for slot in 0..n {
            if !active[slot] {
                continue;
            }
            if let Some((s, other)) = best[slot] {
                let pair = pair_key(node[slot], node[other]);
                if better(s, pair, chosen.map(|(s, p, _, _)| (s, p))) {
                    chosen = Some((s, pair, slot, other));
                }
            }
        }
        let (similarity, (left, right), x, y) = chosen.expect("at least two active clusters");
        let (keep, drop) = (x.min(y), x.max(y));

        let merged: Vec<T> = sums[keep].iter().zip(&sums[drop]).map(|(&a, &b)| a + b).collect();
        sizes[keep] += sizes[drop];
        sums[keep] = merged;
        units[keep] = unit(&sums[keep]);
        active[drop] = false;
        node[keep] = n + step;
        let size = sizes[keep];
        let scale = T::from_usize_lossy(size);
        merges.push(Merge {
            left,
            right,
            similarity,
            size,
            centroid: sums[keep].iter().map(|&v| v / scale).collect(),
        });

        for other in 0..n {
            if other != keep && active[other] {
                let c = cosine_of_units(&units[keep], &units[other]);
                sim[keep * n + other] = c;
                sim[other * n + keep] = c;
            }
        }
        best[drop] = None;
        best[keep] = row_best(keep, &sim, &node, &active);
        for other in 0..n {
            if other == keep || !active[other] {
                continue;
            }
            match best[other] {
                Some((_, b)) if b == keep || b == drop => {
                    best[other] = row_best(other, &sim, &node, &active);
                }
                Some((s, b)) => {
                    let cand = sim[other * n + keep];
                    let cand_pair = pair_key(node[other], node[keep]);
                    if better(cand, cand_pair, Some((s, pair_key(node[other], node[b])))) {
                        best[other] = Some((cand, keep));
                    }
                }
                None => best[other] = row_best(other, &sim, &node, &active),
            }
        }
    }
    debug_assert_eq!(merges.len(), n - 1);
    Ok(Dendrogram { leaves: n, merges })
}

/// Unit vector of `v`, or all zeros when the members cancel out exactly.
fn unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let nv = norm(v);
    if nv == T::zero() {
        vec![T::zero(); v.len()]
    } else {
        v.iter().map(|&x| x / nv).collect()
    }
}

/// Cosine of two unit vectors; a zero centroid compares as 0.
fn cosine_of_units<T: Scalar>(u: &[T], v: &[T]) -> T {
    dot(u, v).max(-T::one()).min(T::one())
}

/// Applies merges in order while their similarity is at least `level` and
/// stops at the first one below it.
pub fn cut_dendrogram<T: Scalar>(dendrogram: &Dendrogram<T>, level: T) -> Partition {
    let applied = dendrogram
        .merges
        .iter()
        .take_while(|m| m.similarity >= level)
        .count();
    cut_after(dendrogram, applied)
}

/// Partition after the first `applied` merges.
pub fn cut_after<T>(dendrogram: &Dendrogram<T>, applied: usize) -> Partition {
    let n = dendrogram.leaves;
    let mut parent: Vec<usize> = (0..n + applied).collect();
    for (m, merge) in dendrogram.merges.iter().take(applied).enumerate() {
        parent[merge.left] = n + m;
        parent[merge.right] = n + m;
    }
    let root = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let labels: Vec<usize> = (0..n).map(root).collect();
    Partition::from_labels(&labels)
}

/// Cuts the dendrogram at every level. Levels yielding an identical
/// partition share one run that lists all of them.
pub fn sweep_agglomerative<T: Scalar>(
    ctx: &SweepContext<'_, T>,
    dendrogram: &Dendrogram<T>,
    levels: &[T],
) -> Result<Sweep<T>, ClusteringError> {
    let n = ctx.n();
    let mut attempts = Vec::with_capacity(levels.len());
    let mut groups: Vec<(Partition, Vec<T>, usize)> = Vec::new();
    for &level in levels {
        let applied = dendrogram
            .merges
            .iter()
            .take_while(|m| m.similarity >= level)
            .count();
        let partition = cut_after(dendrogram, applied);
        let k = partition.k();
        let status = if ctx.filter.admits(k, n) {
            match groups.iter_mut().find(|(p, _, _)| *p == partition) {
                Some((_, lv, _)) => lv.push(level),
                None => groups.push((partition, vec![level], applied)),
            }
            AttemptOutcome::Recorded
        } else {
            AttemptOutcome::Filtered(ctx.filter.rejection(k, n))
        };
        attempts.push(SweepAttempt {
            algorithm: Algorithm::Agglomerative,
            parameter: level.to_f64_lossy(),
            k: Some(k),
            outcome: status,
        });
    }
    let runs = groups
        .into_par_iter()
        .map(|(partition, levels, applied)| {
            ctx.record(
                Algorithm::Agglomerative,
                RunParams::SimilarityLevel { levels },
                partition,
                true,
                applied,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sweep { attempts, runs })
}

// ---------------------------------------------------------------------------
// K-means

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome<T> {
    pub partition: Partition,
    pub rounds: usize,
    pub sse: T,
    /// SSE after each round's center update.
    pub sse_history: Vec<T>,
    pub converged: bool,
}

/// Lloyd's algorithm with k-means++ seeding on L2-normalized vectors under
/// squared Euclidean distance.
///
/// A round reassigns every point to its nearest center (keeping its current
/// cluster on ties), repairs empty clusters by moving in the point farthest
/// from its center, and recomputes centers as member means. Iteration stops
/// when no assignment changes or after `max_rounds` rounds.
pub fn kmeans<T: Scalar>(
    vectors: &Array2<T>,
    k: usize,
    seed: u64,
    max_rounds: usize,
) -> Result<KMeansOutcome<T>, ClusteringError> {
    let n = vectors.nrows();
    if n == 0 {
        return Err(ClusteringError::Empty);
    }
    if k == 0 || k > n {
        return Err(ClusteringError::InvalidK { k, n });
    }
    let points = normalize_rows(vectors).map_err(|_| {
        let bad = vectors
            .rows()
            .into_iter()
            .position(|r| {
                let nr = norm(r.as_slice().expect("standard layout"));
                nr == T::zero() || !nr.is_finite()
            })
            .unwrap_or(0);
        ClusteringError::ZeroVector(bad)
    })?;
    let row = |i: usize| points.row(i).to_slice().expect("standard layout");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(&points, k, &mut rng);

    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    while rounds < max_rounds {
        let mut changed = false;
        for i in 0..n {
            let current = labels[i];
            let mut best = current;
            let mut best_d = if current == usize::MAX {
                T::infinity()
            } else {
                squared_distance(row(i), &centers[current])
            };
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(row(i), center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best != current {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            converged = true;
            break;
        }
        rounds += 1;

        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        while let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let far = (0..n)
                .filter(|&i| sizes[labels[i]] > 1)
                .max_by(|&x, &y| {
                    squared_distance(row(x), &centers[labels[x]])
                        .partial_cmp(&squared_distance(row(y), &centers[labels[y]]))
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| y.cmp(&x))
                })
                .expect("k <= n leaves a cluster with two members");
            sizes[labels[far]] -= 1;
            labels[far] = empty;
            sizes[empty] = 1;
            centers[empty] = row(far).to_vec();
        }

        for center in centers.iter_mut() {
            center.iter_mut().for_each(|x| *x = T::zero());
        }
        for i in 0..n {
            for (acc, &x) in centers[labels[i]].iter_mut().zip(row(i)) {
                *acc += x;
            }
        }
        for (center, &size) in centers.iter_mut().zip(&sizes) {
            let s = T::from_usize_lossy(size);
            center.iter_mut().for_each(|x| *x /= s);
        }
        sse_history.push(sse(&points, &labels, &centers));
    }
    let sse = sse_history
        .last()
        .copied()
        .unwrap_or_else(|| sse(&points, &labels, &centers));
    Ok(KMeansOutcome {
        partition: Partition::from_labels(&labels),
        rounds,
        sse,
        sse_history,
        converged,
    })
}

fn sse<T: Scalar>(points: &Array2<T>, labels: &[usize], centers: &[Vec<T>]) -> T {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(points.row(i).as_slice().expect("standard layout"), &centers[l]))
        .sum()
}

/// D²-weighted seeding. When every remaining point coincides with a chosen
/// center, the next center is drawn uniformly from the unchosen points.
fn kmeans_plus_plus<T: Scalar>(points: &Array2<T>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = points.nrows();
    let row = |i: usize| points.row(i).to_slice().expect("standard layout");
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(row(i), row(chosen[0])).to_f64_lossy())
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(row(i), row(next)).to_f64_lossy());
        }
    }
    chosen.into_iter().map(|i| row(i).to_vec()).collect()
}

/// Runs k-means at each `k`, keeping the lowest-SSE of `restarts` seeded
/// restarts. Values of `k` above `n` are skipped.
pub fn sweep_kmeans<T: Scalar>(
    ctx: &SweepContext<'_, T>,
    vectors: &Array2<T>,
    ks: &[usize],
    seed: u64,
    restarts: usize,
    max_rounds: usize,
) -> Result<Sweep<T>, ClusteringError> {
    let n = vectors.nrows();
    let restarts = restarts.max(1);
    let results: Vec<Result<Option<KMeansOutcome<T>>, ClusteringError>> = ks
        .par_iter()
        .map(|&k| {
            if k > n || k == 0 {
                return Ok(None);
            }
            let mut best: Option<KMeansOutcome<T>> = None;
            for r in 0..restarts {
                let out = kmeans(vectors, k, restart_seed(seed, k, r), max_rounds)?;
                if best.as_ref().map_or(true, |b| out.sse < b.sse) {
                    best = Some(out);
                }
            }
            Ok(best)
        })
        .collect();
    let mut attempts = Vec::with_capacity(ks.len());
    let mut runs = Vec::new();
    for (&k, result) in ks.iter().zip(results) {
        let (found_k, outcome) = match result? {
            None => (
                None,
                AttemptOutcome::Skipped(if k == 0 { "k = 0".into() } else { "k > n".into() }),
            ),
            Some(best) => {
                let got = best.partition.k();
                if ctx.filter.admits(got, n) {
                    runs.push(ctx.record(
                        Algorithm::Kmeans,
                        RunParams::K { k, seed, restarts },
                        best.partition,
                        best.converged,
                        best.rounds,
                    )?);
                    (Some(got), AttemptOutcome::Recorded)
                } else {
                    (Some(got), AttemptOutcome::Filtered(ctx.filter.rejection(got, n)))
                }
            }
        };
        attempts.push(SweepAttempt {
            algorithm: Algorithm::Kmeans,
            parameter: k as f64,
            k: found_k,
            outcome,
        });
    }
    Ok(Sweep { attempts, runs })
}

/// Seed of restart `r` at cluster count `k`.
pub fn restart_seed(seed: u64, k: usize, r: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((k as u64) << 20)
        .wrapping_add(r as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::similarity_from_vectors;
    use crate::evaluation::{pairwise_dissimilarity, Dissimilarity};
    use ndarray::array;

    #[test]
    fn partition_canonicalizes_labels() {
        let p = Partition::from_labels(&[7, 7, 3, 9, 3]);
        assert_eq!(p.labels(), &[0, 0, 1, 2, 1]);
        assert_eq!(p.k(), 3);
        assert_eq!(p.sizes(), vec![2, 2, 1]);
        assert_eq!(p.clusters(), vec![vec![0, 1], vec![2, 4], vec![3]]);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "{\"labels\":[0,0,1,2,1]}");
        assert_eq!(serde_json::from_str::<Partition>(&json).unwrap(), p);
        assert!(serde_json::from_str::<Partition>("{\"labels\":[1,0]}").is_err());
    }

    #[test]
    fn grids_have_the_documented_shape() {
        let p: Vec<f64> = default_preferences();
        assert_eq!(p.len(), 21);
        assert_eq!(p[3], 0.15);
        assert_eq!(*p.last().unwrap(), 1.0);
        let l: Vec<f64> = default_levels();
        assert_eq!(l.len(), 51);
        assert_eq!(l[25], 0.5);
        assert_eq!(default_ks(), vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120]);
    }

    #[test]
    fn ap_single_point() {
        let out = ap_cluster(&array![[1.0]], 0.3, &ApParams::default()).unwrap();
        assert_eq!(out.partition.k(), 1);
        assert_eq!(out.exemplars, vec![0]);
    }

    #[test]
    fn ap_rejects_bad_input() {
        let p = ApParams::<f64>::default();
        assert_eq!(
            ap_cluster(&Array2::<f64>::zeros((0, 0)), 0.5, &p),
            Err(ClusteringError::Empty)
        );
        assert_eq!(
            ap_cluster(&array![[1.0, 0.2], [0.3, 1.0]], 0.5, &p),
            Err(ClusteringError::Asymmetric(0, 1))
        );
        let bad = ApParams { damping: 0.2, ..p };
        assert!(ap_cluster(&array![[1.0]], 0.5, &bad).is_err());
    }

    fn duplicate_pairs() -> Array2<f64> {
        array![
            [1.0, 1.0, -1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
            [-1.0, -1.0, 1.0, 1.0],
            [-1.0, -1.0, 1.0, 1.0]
        ]
    }

    /// Exhaustive search over exemplar subsets for the maximal net
    /// similarity: each point's similarity to its best exemplar plus the
    /// preference of every exemplar.
    fn best_exemplar_subset(s: &Array2<f64>, pref: f64) -> (Vec<usize>, f64) {
        let n = s.nrows();
        let mut best = (vec![], f64::NEG_INFINITY);
        for mask in 1u32..(1 << n) {
            let ex: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut net = pref * ex.len() as f64;
            for i in (0..n).filter(|i| !ex.contains(i)) {
                net += ex.iter().map(|&e| s[[i, e]]).fold(f64::NEG_INFINITY, f64::max);
            }
            if net > best.1 {
                best = (ex, net);
            }
        }
        best
    }

    #[test]
    fn ap_matches_exhaustive_optimum_on_duplicate_pairs() {
        let s = duplicate_pairs();
        let (opt, _) = best_exemplar_subset(&s, 0.5);
        assert_eq!(opt.len(), 2);
        let out = ap_cluster(&s, 0.5, &ApParams::default()).unwrap();
        assert_eq!(out.partition.k(), 2);
        assert_eq!(out.partition.labels(), &[0, 0, 1, 1]);
        assert_eq!(out.exemplars.len(), 2);
        assert!(out.exemplars.iter().filter(|&&e| e < 2).count() == 1);
        let again = ap_cluster(&s, 0.5, &ApParams::default()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn agglomerative_two_points() {
        let d = agglomerative(&array![[1.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(d.merges.len(), 1);
        assert!((d.merges[0].similarity - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
    }

    /// Three unit vectors in 3-D with cos(a,b)=0.9, cos(a,c)=0.1,
    /// cos(b,c)=0.2, from the Cholesky factor of their Gram matrix.
    fn three_vectors() -> Array2<f64> {
        let l21 = 0.9;
        let l22 = (1.0f64 - 0.81).sqrt();
        let l31 = 0.1;
        let l32 = (0.2 - l21 * l31) / l22;
        let l33 = (1.0 - l31 * l31 - l32 * l32).sqrt();
        array![[1.0, 0.0, 0.0], [l21, l22, 0.0], [l31, l32, l33]]
    }

    fn brute_force_centroid_merges(v: &Array2<f64>) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
        let mut clusters: Vec<Vec<usize>> = (0..v.nrows()).map(|i| vec![i]).collect();
        let centroid = |members: &[usize]| -> Vec<f64> {
            let mut c = vec![0.0; v.ncols()];
            for &m in members {
                for (j, x) in c.iter_mut().enumerate() {
                    *x += v[[m, j]] / members.len() as f64;
                }
            }
            c
        };
        let mut out = vec![];
        while clusters.len() > 1 {
            let mut best = (0, 1, f64::NEG_INFINITY);
            for i in 0..clusters.len() {
                for j in (i + 1)..clusters.len() {
                    let (ci, cj) = (centroid(&clusters[i]), centroid(&clusters[j]));
                    let dotp: f64 = ci.iter().zip(&cj).map(|(a, b)| a * b).sum();
                    let s = dotp / (norm(&ci) * norm(&cj));
                    if s > best.2 {
                        best = (i, j, s);
                    }
                }
            }
            let (i, j, s) = best;
            let right = clusters.remove(j);
            let left = clusters[i].clone();
            clusters[i].extend(right.iter().copied());
            out.push((left, right, s));
        }
        out
    }

    #[test]
    fn agglomerative_three_vector_fixture() {
        let v = three_vectors();
        let s = similarity_from_vectors(&v).unwrap();
        assert!((s[[0, 1]] - 0.9).abs() < 1e-12);
        assert!((s[[0, 2]] - 0.1).abs() < 1e-12);
        assert!((s[[1, 2]] - 0.2).abs() < 1e-12);
        let d = agglomerative(&v).unwrap();
        let oracle = brute_force_centroid_merges(&v);
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
        assert!((d.merges[0].similarity - 0.9).abs() < 1e-12);
        assert!((d.merges[1].similarity - oracle[1].2).abs() < 1e-12);
        assert_eq!((d.merges[1].left, d.merges[1].right), (2, 3));
        // cos(centroid(a,b), c) = (0.1 + 0.2) / |a + b| = 0.3 / sqrt(3.8)
        assert!((oracle[1].2 - 0.3 / 3.8f64.sqrt()).abs() < 1e-12);
        assert_eq!(cut_dendrogram(&d, 0.5).labels(), &[0, 0, 1]);
        assert_eq!(cut_dendrogram(&d, 0.0).k(), 1);
        assert_eq!(cut_dendrogram(&d, 0.95).k(), 3);
    }

    #[test]
    fn agglomerative_identical_vectors() {
        let v = Array2::<f64>::from_elem((5, 3), 0.7);
        let d = agglomerative(&v).unwrap();
        assert_eq!(d.merges.len(), 4);
        assert!(d.merges.iter().all(|m| (m.similarity - 1.0).abs() < 1e-12));
        assert!(agglomerative(&array![[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn agglomerative_matches_brute_force_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let v = Array2::from_shape_simple_fn((12, 4), || rng.random_range(-1.0..1.0));
            let d = agglomerative(&v).unwrap();
            let oracle = brute_force_centroid_merges(&v);
            for (m, o) in d.merges.iter().zip(&oracle) {
                assert!((m.similarity - o.2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kmeans_edge_cases() {
        let v: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let all = kmeans(&v, 3, 0, 100).unwrap();
        assert_eq!(all.partition.k(), 3);
        assert!(all.sse.abs() < 1e-15);
        let one = kmeans(&v, 1, 0, 100).unwrap();
        // center = mean of the unit vectors = (0, 1/3)
        let expected = (1.0 + 1.0 / 9.0) + (4.0 / 9.0) + (1.0 + 1.0 / 9.0);
        assert!((one.sse - expected).abs() < 1e-12);
        assert_eq!(kmeans(&v, 0, 0, 10), Err(ClusteringError::InvalidK { k: 0, n: 3 }));
        assert_eq!(kmeans(&v, 4, 0, 10), Err(ClusteringError::InvalidK { k: 4, n: 3 }));
    }

    #[test]
    fn kmeans_handles_duplicates() {
        let v = Array2::from_elem((6, 2), 1.0);
        let out = kmeans(&v, 3, 1, 50).unwrap();
        assert_eq!(out.partition.k(), 3);
    }

    fn sweep_fixture(n: usize) -> (Array2<f64>, DissimilarityMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let v = Array2::from_shape_simple_fn((n, 6), || rng.random_range(-1.0..1.0));
        let d = pairwise_dissimilarity(&v, Dissimilarity::Cosine).unwrap();
        (v, d)
    }

    #[test]
    fn kmeans_sweep_skips_large_k() {
        let (v, d) = sweep_fixture(15);
        let ctx = SweepContext {
            category: "c",
            dissimilarity: &d,
            separation: Separation::default(),
            filter: RecordFilter::default(),
        };
        let sweep = sweep_kmeans(&ctx, &v, &default_ks(), 3, 2, 100).unwrap();
        assert_eq!(sweep.attempts.len(), 12);
        assert_eq!(sweep.attempts[0].outcome, AttemptOutcome::Recorded);
        for a in &sweep.attempts[1..] {
            assert_eq!(a.outcome, AttemptOutcome::Skipped("k > n".into()));
        }
        assert_eq!(sweep.runs.len(), 1);
    }

    #[test]
    fn filter_boundaries() {
        let f = RecordFilter::default();
        assert!(f.admits(49, 50));
        assert!(!f.admits(9, 50));
        assert!(!f.admits(50, 50));
    }

    #[test]
    fn agglomerative_sweep_merges_duplicate_partitions() {
        let (v, d) = sweep_fixture(30);
        let dendro = agglomerative(&v).unwrap();
        let ctx = SweepContext {
            category: "c",
            dissimilarity: &d,
            separation: Separation::default(),
            filter: RecordFilter::default(),
        };
        let sweep = sweep_agglomerative(&ctx, &dendro, &default_levels()).unwrap();
        assert_eq!(sweep.attempts.len(), 51);
        let recorded = sweep
            .attempts
            .iter()
            .filter(|a| a.outcome == AttemptOutcome::Recorded)
            .count();
        let listed: usize = sweep.runs.iter().map(|r| r.params.values().len()).sum();
        assert_eq!(recorded, listed);
        let distinct: BTreeSet<Vec<usize>> =
            sweep.runs.iter().map(|r| r.partition.labels().to_vec()).collect();
        assert_eq!(distinct.len(), sweep.runs.len());
    }
}
