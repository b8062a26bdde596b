//! Zero-shot accuracy, translation retrieval and 2-D projections.

mod alignment;
mod eval;
pub mod projection;

pub use alignment::{alignment_retrieval, cosine, nearest_neighbours, AlignmentReport, LanguageAlignment};
pub use eval::{evaluate_accuracy, format_accuracy, predict, EvalReport, LanguageAccuracy, EVAL_BATCH};
pub use projection::{project_embeddings, write_projection_csv, write_projection_svg, Method, ProjectedPoint};
