//! Monozygotic-twin iris verification.
//!
//! The crate covers the whole offline pipeline:
//!
//! * [`quality`] — per-capture quality metrics and manifest screening,
//! * [`pairing`] — balanced MZ/NMZ pair construction and seeded splits,
//! * [`preprocess`] — the `original`, `iris_only` and `non_iris_only`
//!   input variants and model-input normalization,
//! * [`encoder`] — the Siamese ResNet encoder and the contrastive loss,
//! * [`trainer`] — seeded multi-run training with checkpointing,
//! * [`eval`] — confusion metrics, threshold sweeps, dilation analysis and
//!   run aggregation,
//! * [`report`] — SVG plots and the summary table,
//! * [`io`] and [`fixtures`] — file formats and synthetic test captures.
//!
//! The guide in `book/` walks through each stage; its examples are compiled
//! and run as doctests.

pub mod encoder;
pub mod eval;
pub mod fixtures;
pub mod io;
pub mod pairing;
pub mod preprocess;
pub mod quality;
pub mod report;
pub mod trainer;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/quality.md")]
    mod quality {}
    #[doc = include_str!("../../../book/src/pairing.md")]
    mod pairing {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
