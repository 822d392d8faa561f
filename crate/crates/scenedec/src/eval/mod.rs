//! Automatic evaluation: prompt/identity similarity metrics, the fixed
//! prompt-template suite, and COCO-format scene harvesting.

pub mod coco;
pub mod metrics;
pub mod suite;
pub mod toy;

pub use coco::harvest_scenes;
pub use metrics::{identity_similarity, prompt_similarity, Embedder, Segmenter};
pub use suite::{build_eval_suite, evaluate_run, EvalConfig, EvalPair, PairReport, Report, SceneRef};
pub use toy::{ToyEmbedder, ToySegmenter};

/// The fixed evaluation prompt formats; `{tokens}` is replaced by the
/// handle (or class-word) list.
pub const PROMPT_TEMPLATES: [&str; 10] = [
    "a photo of {tokens} at the beach",
    "a photo of {tokens} in the jungle",
    "a photo of {tokens} in the snow",
    "a photo of {tokens} in the street",
    "a photo of {tokens} on top of a pink fabric",
    "a photo of {tokens} on top of a wooden floor",
    "a photo of {tokens} with a city in the background",
    "a photo of {tokens} with a mountain in the background",
    "a photo of {tokens} with the Eiffel tower in the background",
    "a photo of {tokens} floating on top of water",
];
