//! Internal validation of partitions and selection among clustering runs.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{Algorithm, ClusterRun, Partition};
use crate::embedding::{cosine_similarity, normalize_rows, EmbeddingError};
use crate::scalar::{squared_distance, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("silhouette undefined: partition has {0} cluster(s), need at least 2")]
    TooFewClusters(usize),
    #[error("partition covers {partition} entities but the matrix is {matrix}×{matrix}")]
    SizeMismatch { partition: usize, matrix: usize },
    #[error("dissimilarity matrix is not square")]
    NotSquare,
    #[error("dissimilarity matrix is asymmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("dissimilarity matrix has a non-zero diagonal at {0}")]
    NonZeroDiagonal(usize),
    #[error("dissimilarity matrix has a negative or non-finite entry at ({0}, {1})")]
    InvalidEntry(usize, usize),
    #[error("zero or missing vector")]
    ZeroVector,
    #[error("no admissible runs")]
    NoAdmissibleRuns,
}

impl From<EmbeddingError> for EvaluationError {
    fn from(_: EmbeddingError) -> Self {
        EvaluationError::ZeroVector
    }
}

/// How pairwise dissimilarities were derived.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissimilarity {
    /// `1 - cos(u, v)`.
    #[default]
    Cosine,
    /// Euclidean distance between the unit-normalized vectors.
    EuclideanNormalized,
    /// Supplied directly by the caller.
    Precomputed,
}

/// Separation term of the silhouette.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separation {
    /// Smallest mean dissimilarity to the members of another cluster.
    #[default]
    NearestClusterMean,
    /// Smallest dissimilarity to any single point of another cluster.
    NearestPoint,
}

/// A validated symmetric, zero-diagonal, non-negative matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix<T> {
    kind: Dissimilarity,
    values: Array2<T>,
}

impl<T: Scalar> DissimilarityMatrix<T> {
    pub fn new(kind: Dissimilarity, values: Array2<T>) -> Result<Self, EvaluationError> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(EvaluationError::NotSquare);
        }
        for i in 0..n {
            if values[[i, i]] != T::zero() {
                return Err(EvaluationError::NonZeroDiagonal(i));
            }
            for j in (i + 1)..n {
                let v = values[[i, j]];
                if v != values[[j, i]] {
                    return Err(EvaluationError::Asymmetric(i, j));
                }
                if !(v.is_finite() && v >= T::zero()) {
                    return Err(EvaluationError::InvalidEntry(i, j));
                }
            }
        }
        Ok(Self { kind, values })
    }

    pub fn precomputed(values: Array2<T>) -> Result<Self, EvaluationError> {
        Self::new(Dissimilarity::Precomputed, values)
    }

    pub fn kind(&self) -> Dissimilarity {
        self.kind
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Dissimilarities between the rows of `vectors`.
pub fn pairwise_dissimilarity<T: Scalar>(
    vectors: &Array2<T>,
    kind: Dissimilarity,
) -> Result<DissimilarityMatrix<T>, EvaluationError> {
    let n = vectors.nrows();
    let unit = normalize_rows(vectors)?;
    let mut d = Array2::<T>::zeros((n, n));
    let kind = match kind {
        Dissimilarity::EuclideanNormalized => kind,
        Dissimilarity::Cosine | Dissimilarity::Precomputed => Dissimilarity::Cosine,
    };
    for i in 0..n {
        let ri = vectors.row(i);
        let ri = ri.as_slice().expect("standard layout");
        for j in (i + 1)..n {
            let rj = vectors.row(j);
            let rj = rj.as_slice().expect("standard layout");
            let v = match kind {
                Dissimilarity::EuclideanNormalized => squared_distance(
                    unit.row(i).as_slice().expect("standard layout"),
                    unit.row(j).as_slice().expect("standard layout"),
                )
                .sqrt(),
                _ => (T::one() - cosine_similarity(ri, rj)?).max(T::zero()),
            };
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    DissimilarityMatrix::new(kind, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteReport<T> {
    /// Per-entity coefficients, in entity order.
    pub values: Vec<T>,
    pub mean: T,
    pub dissimilarity: Dissimilarity,
    pub separation: Separation,
}

/// Silhouette coefficient of every entity: `(b - a) / max(a, b)`, where `a`
/// is the mean dissimilarity to the rest of its own cluster and `b` the
/// separation from the nearest other cluster. Members of singleton clusters
/// and entities with `max(a, b) = 0` score 0.
pub fn silhouette<T: Scalar>(
    partition: &Partition,
    dissimilarity: &DissimilarityMatrix<T>,
    separation: Separation,
) -> Result<SilhouetteReport<T>, EvaluationError> {
    let n = partition.len();
    if dissimilarity.len() != n {
        return Err(EvaluationError::SizeMismatch {
            partition: n,
            matrix: dissimilarity.len(),
        });
    }
    let k = partition.k();
    if k < 2 {
        return Err(EvaluationError::TooFewClusters(k));
    }
    let labels = partition.labels();
    let sizes = partition.sizes();
    let d = dissimilarity.values();
    let mut values = Vec::with_capacity(n);
    let mut acc = vec![T::zero(); k];
    for i in 0..n {
        let own = labels[i];
        if sizes[own] == 1 {
            values.push(T::zero());
            continue;
        }
        let row = d.row(i);
        let row = row.as_slice().expect("standard layout");
        let own_size = T::from_usize_lossy(sizes[own] - 1);
        let (a, b) = match separation {
            Separation::NearestClusterMean => {
                acc.iter_mut().for_each(|x| *x = T::zero());
                for (j, &dij) in row.iter().enumerate() {
                    if j != i {
                        acc[labels[j]] += dij;
                    }
                }
                let b = (0..k)
                    .filter(|&c| c != own)
                    .map(|c| acc[c] / T::from_usize_lossy(sizes[c]))
                    .fold(T::infinity(), T::min);
                (acc[own] / own_size, b)
            }
            Separation::NearestPoint => {
                let mut a_sum = T::zero();
                let mut b = T::infinity();
                for (j, &dij) in row.iter().enumerate() {
                    if labels[j] != own {
                        b = b.min(dij);
                    } else if j != i {
                        a_sum += dij;
                    }
                }
                (a_sum / own_size, b)
            }
        };
        values.push(coefficient(a, b));
    }
    let mean = values.iter().copied().sum::<T>() / T::from_usize_lossy(n);
    Ok(SilhouetteReport {
        values,
        mean,
        dissimilarity: dissimilarity.kind(),
        separation,
    })
}

fn coefficient<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::zero() {
        T::zero()
    } else {
        ((b - a) / m).max(-T::one()).min(T::one())
    }
}

/// The run with the largest mean silhouette. Ties prefer fewer clusters,
/// then the algorithm order ap < agglomerative < kmeans, then the smaller
/// parameter value.
pub fn select_best<T: Scalar>(runs: &[ClusterRun<T>]) -> Result<&ClusterRun<T>, EvaluationError> {
    runs.iter()
        .filter(|r| r.mean_silhouette.is_finite())
        .min_by(|x, y| {
            y.mean_silhouette
                .partial_cmp(&x.mean_silhouette)
                .expect("finite")
                .then_with(|| x.k.cmp(&y.k))
                .then_with(|| x.algorithm.cmp(&y.algorithm))
                .then_with(|| x.params.sort_key().total_cmp(&y.params.sort_key()))
        })
        .ok_or(EvaluationError::NoAdmissibleRuns)
}

/// Summary of the best run of one algorithm in one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRunSummary {
    pub parameter: f64,
    pub k: usize,
    pub mean_silhouette: f64,
}

impl BestRunSummary {
    pub fn of<T: Scalar>(run: &ClusterRun<T>) -> Self {
        Self {
            parameter: run.params.sort_key(),
            k: run.k,
            mean_silhouette: run.mean_silhouette.to_f64_lossy(),
        }
    }
}

/// Best run per algorithm for one category; a missing algorithm had no
/// admissible run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBests {
    pub category: String,
    pub best: BTreeMap<Algorithm, BestRunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub category: String,
    /// Best mean silhouette per algorithm; `None` marks an absent cell.
    pub cells: BTreeMap<Algorithm, Option<f64>>,
    pub winner: Option<Algorithm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub wins: usize,
    pub categories: usize,
    pub mean_of_means: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub algorithms: Vec<AlgorithmSummary>,
    /// Algorithms ordered by category wins, then mean of means.
    pub ranking: Vec<Algorithm>,
    pub winner: Option<Algorithm>,
}

/// Tabulates per-category best silhouettes and ranks the algorithms.
pub fn compare_algorithms(categories: &[CategoryBests]) -> ComparisonReport {
    let mut rows = Vec::with_capacity(categories.len());
    let mut wins: BTreeMap<Algorithm, usize> = Algorithm::ALL.iter().map(|&a| (a, 0)).collect();
    let mut sums: BTreeMap<Algorithm, (f64, usize)> = BTreeMap::new();
    for cat in categories {
        let cells: BTreeMap<Algorithm, Option<f64>> = Algorithm::ALL
            .iter()
            .map(|&a| (a, cat.best.get(&a).map(|b| b.mean_silhouette)))
            .collect();
        let winner = cells
            .iter()
            .filter_map(|(&a, v)| v.map(|v| (a, v)))
            .fold(None::<(Algorithm, f64)>, |best, (a, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((a, v)),
            })
            .map(|(a, _)| a);
        if let Some(w) = winner {
            *wins.entry(w).or_default() += 1;
        }
        for (&a, v) in &cells {
            if let Some(v) = v {
                let e = sums.entry(a).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        rows.push(ComparisonRow {
            category: cat.category.clone(),
            cells,
            winner,
        });
    }
    let algorithms: Vec<AlgorithmSummary> = Algorithm::ALL
        .iter()
        .map(|&a| {
            let (sum, count) = sums.get(&a).copied().unwrap_or((0.0, 0));
            AlgorithmSummary {
                algorithm: a,
                wins: wins[&a],
                categories: count,
                mean_of_means: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect();
    let mut ranking: Vec<&AlgorithmSummary> = algorithms.iter().collect();
    ranking.sort_by(|x, y| {
        y.wins
            .cmp(&x.wins)
            .then_with(|| match (x.mean_of_means, y.mean_of_means) {
                (Some(a), Some(b)) => b.total_cmp(&a),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            })
            .then_with(|| x.algorithm.cmp(&y.algorithm))
    });
    let ranking: Vec<Algorithm> = ranking.into_iter().map(|s| s.algorithm).collect();
    let winner = ranking
        .first()
        .copied()
        .filter(|a| algorithms.iter().any(|s| s.algorithm == *a && s.categories > 0));
    ComparisonReport {
        rows,
        algorithms,
        ranking,
        winner,
    }
}

/// Plot data: one line per recorded run.
pub fn write_runs_csv<T: Scalar, W: Write>(runs: &[ClusterRun<T>], mut w: W) -> std::io::Result<()> {
    writeln!(w, "category,algorithm,parameter,k,mean_silhouette")?;
    for run in runs {
        let category = if run.category.contains([',', '"', '\n']) {
            format!("\"{}\"", run.category.replace('"', "\"\""))
        } else {
            run.category.clone()
        };
        for p in run.params.values() {
            writeln!(
                w,
                "{},{},{},{},{}",
                category,
                run.algorithm,
                p,
                run.k,
                run.mean_silhouette
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::RunParams;
    use ndarray::array;
    use proptest::prelude::*;

    fn fixture() -> DissimilarityMatrix<f64> {
        DissimilarityMatrix::precomputed(array![[0.0, 0.2, 0.8], [0.2, 0.0, 0.6], [0.8, 0.6, 0.0]])
            .unwrap()
    }

    #[test]
    fn hand_fixture() {
        let p = Partition::from_labels(&[0, 0, 1]);
        let r = silhouette(&p, &fixture(), Separation::NearestClusterMean).unwrap();
        assert!((r.values[0] - 0.75).abs() < 1e-12);
        assert!((r.values[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.values[2], 0.0);
        assert!((r.mean - (0.75 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_in_two_clusters() {
        let d = DissimilarityMatrix::precomputed(array![
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0],
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0]
        ])
        .unwrap();
        let r = silhouette(&Partition::from_labels(&[0, 0, 1, 1]), &d, Separation::default()).unwrap();
        assert_eq!(r.values, vec![1.0; 4]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn all_singletons_score_zero() {
        let r = silhouette(&Partition::from_labels(&[0, 1, 2]), &fixture(), Separation::default()).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            silhouette(&Partition::from_labels(&[0, 0, 0]), &fixture(), Separation::default()),
            Err(EvaluationError::TooFewClusters(1))
        );
        assert_eq!(
            DissimilarityMatrix::precomputed(array![[0.0, 0.1], [0.2, 0.0]]),
            Err(EvaluationError::Asymmetric(0, 1))
        );
        assert!(DissimilarityMatrix::precomputed(array![[0.5, 0.1], [0.1, 0.0]]).is_err());
        assert!(DissimilarityMatrix::precomputed(array![[0.0, -0.1], [-0.1, 0.0]]).is_err());
    }

    #[test]
    fn nearest_point_separation() {
        let d = DissimilarityMatrix::<f64>::precomputed(array![
            [0.0, 0.2, 0.5, 0.9],
            [0.2, 0.0, 0.7, 0.6],
            [0.5, 0.7, 0.0, 0.1],
            [0.9, 0.6, 0.1, 0.0]
        ])
        .unwrap();
        let p = Partition::from_labels(&[0, 0, 1, 1]);
        let r = silhouette(&p, &d, Separation::NearestPoint).unwrap();
        assert!((r.values[0] - (0.5 - 0.2) / 0.5).abs() < 1e-12);
        let m = silhouette(&p, &d, Separation::NearestClusterMean).unwrap();
        assert!((m.values[0] - (0.7 - 0.2) / 0.7).abs() < 1e-12);
    }

    #[test]
    fn dissimilarity_kinds() {
        let v: Array2<f64> = array![[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]];
        let d = pairwise_dissimilarity(&v, Dissimilarity::Cosine).unwrap();
        assert_eq!(d.values()[[0, 1]], 0.0);
        assert!((d.values()[[0, 2]] - 1.0).abs() < 1e-15);
        assert!((d.values()[[0, 3]] - 2.0).abs() < 1e-15);
        let e = pairwise_dissimilarity(&v, Dissimilarity::EuclideanNormalized).unwrap();
        assert!((e.values()[[0, 2]] - 2f64.sqrt()).abs() < 1e-15);
        assert!(pairwise_dissimilarity(&array![[0.0, 0.0], [1.0, 0.0]], Dissimilarity::Cosine).is_err());
    }

    fn run(mean: f64, k: usize, algorithm: Algorithm, p: f64) -> ClusterRun<f64> {
        ClusterRun {
            category: "c".into(),
            algorithm,
            params: match algorithm {
                Algorithm::Ap => RunParams::Preference { preference: p, damping: 0.9 },
                Algorithm::Agglomerative => RunParams::SimilarityLevel { levels: vec![p] },
                Algorithm::Kmeans => RunParams::K { k, seed: 0, restarts: 1 },
            },
            k,
            partition: Partition::from_labels(&(0..k).collect::<Vec<_>>()),
            mean_silhouette: mean,
            silhouettes: vec![],
            converged: true,
            iterations: 1,
        }
    }

    #[test]
    fn select_best_rules() {
        let runs = vec![
            run(0.31, 10, Algorithm::Ap, 0.1),
            run(0.58, 11, Algorithm::Ap, 0.2),
            run(0.44, 12, Algorithm::Ap, 0.3),
        ];
        assert_eq!(select_best(&runs).unwrap().mean_silhouette, 0.58);
        let tied = vec![run(0.58, 40, Algorithm::Ap, 0.1), run(0.58, 12, Algorithm::Ap, 0.9)];
        assert_eq!(select_best(&tied).unwrap().k, 12);
        let tied_alg = vec![
            run(0.5, 12, Algorithm::Kmeans, 12.0),
            run(0.5, 12, Algorithm::Agglomerative, 0.4),
            run(0.5, 12, Algorithm::Agglomerative, 0.2),
        ];
        let best = select_best(&tied_alg).unwrap();
        assert_eq!(best.algorithm, Algorithm::Agglomerative);
        assert_eq!(best.params.sort_key(), 0.2);
        assert_eq!(select_best::<f64>(&[]), Err(EvaluationError::NoAdmissibleRuns));
    }

    proptest! {
        #[test]
        fn select_best_invariant_to_positive_scaling(
            means in proptest::collection::vec(-1.0f64..1.0, 1..10),
            scale in 0.01f64..10.0,
        ) {
            let runs: Vec<_> = means.iter().enumerate()
                .map(|(i, &m)| run(m, 10 + i, Algorithm::Ap, i as f64 / 20.0)).collect();
            let scaled: Vec<_> = runs.iter().cloned().map(|mut r| { r.mean_silhouette *= scale; r }).collect();
            prop_assert_eq!(select_best(&runs).unwrap().k, select_best(&scaled).unwrap().k);
        }

        #[test]
        fn silhouette_bounded_and_label_invariant(
            points in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4..20),
            seed_labels in proptest::collection::vec(0usize..4, 20),
            shift in 1usize..4,
        ) {
            let n = points.len();
            let mut d = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
                    d[[i, j]] = (dx * dx + dy * dy).sqrt();
                }
            }
            let d = DissimilarityMatrix::precomputed(d).unwrap();
            let labels: Vec<usize> = seed_labels[..n].to_vec();
            let p = Partition::from_labels(&labels);
            prop_assume!(p.k() >= 2);
            let permuted: Vec<usize> = labels.iter().map(|l| (l + shift) % 4).collect();
            let a = silhouette(&p, &d, Separation::default()).unwrap();
            let b = silhouette(&Partition::from_labels(&permuted), &d, Separation::default()).unwrap();
            prop_assert!(a.values.iter().all(|s| (-1.0..=1.0).contains(s)));
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn comparison_table_and_absent_cells() {
        let mk = |cat: &str, vals: &[(Algorithm, f64)]| CategoryBests {
            category: cat.into(),
            best: vals
                .iter()
                .map(|&(a, m)| (a, BestRunSummary { parameter: 0.5, k: 12, mean_silhouette: m }))
                .collect(),
        };
        let cats: Vec<CategoryBests> = (0..9)
            .map(|i| {
                mk(
                    &format!("c{i}"),
                    &[
                        (Algorithm::Ap, 0.5),
                        (Algorithm::Agglomerative, 0.52 + i as f64 * 0.001),
                        (Algorithm::Kmeans, 0.2),
                    ],
                )
            })
            .collect();
        let report = compare_algorithms(&cats);
        let cells: usize = report.rows.iter().map(|r| r.cells.len()).sum();
        assert_eq!(cells, 27);
        assert_eq!(report.winner, Some(Algorithm::Agglomerative));
        assert_eq!(report.ranking, vec![Algorithm::Agglomerative, Algorithm::Ap, Algorithm::Kmeans]);

        let partial = compare_algorithms(&[mk("x", &[(Algorithm::Ap, 0.3), (Algorithm::Kmeans, 0.4)])]);
        assert_eq!(partial.rows[0].cells[&Algorithm::Agglomerative], None);
        assert_eq!(partial.rows[0].winner, Some(Algorithm::Kmeans));
    }

    #[test]
    fn csv_lists_every_producing_parameter() {
        let mut r = run(0.5, 12, Algorithm::Agglomerative, 0.4);
        r.params = RunParams::SimilarityLevel { levels: vec![0.4, 0.42] };
        let mut buf = Vec::new();
        write_runs_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("c,agglomerative,0.42,12,0.5"));
    }
}
