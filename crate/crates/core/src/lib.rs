//! Post-hoc out-of-distribution detection over precomputed feature banks.
//!
//! The central score is nearest-neighbor guidance: a classifier confidence
//! `S_base(x)` multiplied by the mean of the `k` largest confidence-scaled
//! cosine similarities between the test feature and a small bank of
//! training features,
//!
//! ```text
//! S(x) = S_base(x) * (1/k) * sum_{i<=k} s_(i) * sim(z_(i), z)
//! ```
//!
//! where the order `(i)` sorts bank rows by `s_i * sim(z_i, z)` descending.
//!
//! Around it sit the comparison detectors (MSP, MaxLogit, KL, Energy,
//! GradNorm, KNN, Mahalanobis, SSD, ViM), the ablation variants, ReAct
//! clipping, detection metrics, the `OODB` bank file format and a synthetic
//! 2-D lab.

pub mod bank;
pub mod confidence;
pub mod detector;
pub mod distance;
mod error;
pub mod format;
pub mod guidance;
pub mod kernel;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod toy;
pub mod truncation;

pub use bank::{ClassifierHead, FeatureBank};
pub use confidence::{ConfidenceKind, ScoreReport};
pub use detector::{Detector, DetectorConfig, ReactConfig, ScoreName};
pub use error::{Error, Result};
pub use guidance::GuidanceIndex;
pub use metrics::{EvalRow, EvalTable};
