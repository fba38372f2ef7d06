//! Style-embedding profiling of image datasets.
//!
//! Images are passed through a truncated residual backbone, summarized by
//! channel Gram statistics, projected to a compact style embedding and
//! trained with a center + contrastive objective. Trained embeddings are
//! compared between a candidate dataset and a real reference with a
//! center distance (`sedd1`) and a Gaussian-kernel MMD estimate (`sedd2`).

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod ingest;
pub mod metric;
pub mod optim;
pub mod plot;
pub mod run;
pub mod sedd;
pub mod store;
pub mod style;
pub mod toy;
pub mod train;
pub mod tsne;

pub use error::{Error, Result};
