//! Caption quality, neighbourhood retrieval and redundancy statistics.

mod caption;
mod redundancy;
mod report;
mod retrieval;

pub use caption::{cider, cider_per_pair, lcs_len, rouge_l, CiderConfig, ROUGE_BETA};
pub use redundancy::{movie_contrast, redundancy_contrast, REDUNDANCY_WINDOW};
pub use report::{distinctive_words, evaluate, recall_key, ClipScore, EvalConfig, Evaluation, MetricsReport};
pub use retrieval::{
    neighbour_window, recall_at_k_within_n, recall_hits, EvalPair, SimilarityFn, SimilarityKind,
};
