//! Semi-automatic construction of a methodology taxonomy from a labelled
//! full-text corpus.
//!
//! The pipeline runs in stages, each a module here:
//!
//! * [`corpus`]: sentence segmentation, entity-aware tokenization, ingestion.
//! * [`embedding`]: skip-gram with negative sampling, cosine similarity.
//! * [`assignment`]: chi-square association between entities and base
//!   categories; argmax assignment and eligibility.
//! * [`clustering`]: affinity propagation, centroid-linkage agglomerative
//!   clustering with prefix cuts, k-means++ / Lloyd, and the parameter sweeps.
//! * [`evaluation`]: silhouette coefficient, run selection, algorithm comparison.
//! * [`taxonomy`]: cluster impact ranking, tagging, five-level assembly, export.
//! * [`pipeline`]: configuration, persisted stage artifacts and run manifests.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the pipeline.

pub mod assignment;
pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod pipeline;
pub mod scalar;
pub mod synthetic;
pub mod taxonomy;

pub use scalar::Scalar;

/// Precision used by the pipeline and the persisted artifacts.
pub type Real = f64;

pub type EmbeddingModel = embedding::EmbeddingModel<Real>;
pub type EmbeddingModel32 = embedding::EmbeddingModel<f32>;
pub type ClusterRun = clustering::ClusterRun<Real>;
pub type Dendrogram = clustering::Dendrogram<Real>;
pub type SilhouetteReport = evaluation::SilhouetteReport<Real>;
pub type Matrix = ndarray::Array2<Real>;
