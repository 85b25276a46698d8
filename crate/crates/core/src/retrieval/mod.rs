//! Global document search and attention-based sentence localization.

mod highlight;
mod index;
mod locate;

pub use highlight::{highlight_report, strip_markers, top_token_spans, HighlightReport, MARK_CLOSE, MARK_OPEN};
pub use index::{build_index, EmbeddingIndex, Hit, SearchResult};
pub use locate::{locate, locate_all_layers, rank_sentences, token_scores, Aggregation, LocalRanking, LocateConfig};
