//! Loss terms of the multi-expert objective.
//!
//! Everything here is a pure function of its inputs and runs in `f64`.
//! Each loss comes in a value-only form and a `_grad` form that also returns
//! the analytic gradient with respect to the logits or embeddings; the
//! gradient forms are what the trainer uses.
//!
//! Batch reductions are means: over samples for the classification terms,
//! over unordered sample pairs for the metric terms, and over ordered branch
//! pairs and samples for the distillation terms.

mod classification;
mod distill;
mod metric;
mod objective;
mod softmax;
mod types;

pub use classification::{
    arb_loss, arb_loss_grad, cross_entropy, cross_entropy_grad, hard_category_set,
    hard_category_sets, hcm_loss, hcm_loss_with_sets, topn_from_fraction,
};
pub use distill::{kd_all_loss, kd_all_loss_grad, kd_hard_loss, kd_hard_loss_with_sets, kd_hard_sets};
pub use metric::{center_loss, center_loss_grad, contrastive_loss, contrastive_loss_grad, DISTANCE_EPS};
pub use objective::{objective, total_loss, BranchGradients, ClassificationLoss, LossTerms};
pub use softmax::{balanced_softmax, softmax};
pub use types::{
    ClassCountTable, EmbeddingBatch, HardCategorySet, LabelBatch, LogitBatch, LossBreakdown,
    LossWeights,
};
