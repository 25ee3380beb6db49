//! Coreset selection by Correlation of Loss Differences (CLD).
//!
//! The crate is organised around the pipeline a user runs:
//!
//! * [`losslog`] holds per-sample loss trajectories recorded at training
//!   checkpoints, their CSV/JSON on-disk format, and checkpoint subsampling.
//! * [`scoring`] turns trajectories into loss differences and scores every
//!   training sample by its Pearson correlation with the (class-specific)
//!   mean validation trajectory.
//! * [`selection`] builds class-balanced top-k coresets, the stratified
//!   CCS-style baseline, and score-driven validation sets.
//! * [`trainer`] is a small deterministic softmax-regression trainer on
//!   synthetic Gaussian mixtures that produces loss logs and exact gradients.
//! * [`theory`] measures the alignment, approximation and convergence
//!   quantities behind the coreset guarantee on trainer runs.
//! * [`costmodel`] evaluates the closed-form compute and storage overhead of
//!   sixteen coreset methods plus CLD.
//! * [`attribution`] contains Spearman correlation, the linear datamodeling
//!   score and prediction brittleness studies.

pub mod attribution;
pub mod costmodel;
pub mod losslog;
pub mod numfmt;
pub mod scoring;
pub mod selection;
pub mod theory;
pub mod trainer;

pub use losslog::{CheckpointGrid, LossLog, Manifest, Split, SubsamplePlan};
pub use scoring::{DeltaMatrix, ScoreMode, ScoreTable};
pub use selection::{Coreset, Provenance};
