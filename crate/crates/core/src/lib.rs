//! Localized visual-text alignment for zero-shot classification.
//!
//! `lago` classifies an image from a precomputed patch-embedding grid, a
//! global image embedding, a few box proposals and per-class text
//! embeddings. It searches for boxes whose pooled embedding agrees with the
//! whole image (and, once a first prediction is confident, with a soft text
//! prototype), then fuses the crops with random context views and the
//! full-image logits.
//!
//! ```
//! use lago::{classify, make_scene, BoundingBox, PipelineConfig, SceneObject, SceneSpec};
//!
//! let spec = SceneSpec {
//!     image_id: None,
//!     grid_h: 8,
//!     grid_w: 8,
//!     dim: 16,
//!     num_classes: 5,
//!     descriptions_per_class: 3,
//!     objects: vec![SceneObject { class: 3, bbox: BoundingBox::new(0.25, 0.25, 0.5, 0.5)? }],
//!     noise_sigma: 0.05,
//!     seed: 7,
//! };
//! let bundle = make_scene(&spec)?;
//! let result = classify(&bundle, &PipelineConfig::default(), 0)?;
//! assert_eq!(result.predicted, 3);
//! # Ok::<(), lago::LagoError>(())
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod calibrate;
mod error;
pub mod features;
pub mod geometry;
pub mod math;
pub mod rng;
pub mod search;
pub mod synth;
pub mod textbank;
pub mod two_stage;

pub use aggregation::{
    aggregate, channel_weights, classify, classify_with_strategy, complete_views,
    AggregationConfig, InferenceResult, PipelineConfig, Strategy, ViewSet,
};
pub use calibrate::{grid_search, CalibrationGrid, CalibrationResult, ScoreCache};
pub use error::{DecodeError, LagoError, Result};
pub use features::{
    cosine, decode_bundle, encode_bundle, full_image_embedding, load_bundle, pool_crop_embedding,
    save_bundle, Embedding, FeatureBundle, PatchGrid,
};
pub use geometry::{clamp_to_image, diverse_top_k, generate_neighbors, iou, BoundingBox};
pub use search::{search_top_k_crops, ScoredCrop, SearchConfig};
pub use synth::{brute_force_best_box, make_scene, SceneObject, SceneSpec};
pub use textbank::{ClassText, ClassTextBank};
pub use two_stage::{gamma_map, predict_confidence, run_two_stage, GammaPolicy, TwoStageConfig};

// The guide under book/ is compiled and run as doc tests, one module per
// chapter so a failure points at its page.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/bundles.md")]
    mod bundles {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/two_stage.md")]
    mod two_stage {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
