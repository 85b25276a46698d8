use std::fmt::Write;

use super::locate::LocalRanking;
use crate::text::{Document, Span};

pub const MARK_OPEN: char = '⟦';
pub const MARK_CLOSE: char = '⟧';

/// Annotated views of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct HighlightReport {
    /// Byte spans of the marked tokens, in text order.
    pub marked: Vec<Span>,
    /// Document text with marked tokens wrapped in `⟦ ⟧`.
    pub annotated: String,
    pub text: String,
    pub html: String,
}

/// Spans of the `n` highest-scoring non-special tokens; ties go to the
/// earlier token.
pub fn top_token_spans(ranking: &LocalRanking, n: usize) -> Vec<Span> {
    let mut cands: Vec<(usize, f64, Span)> = ranking
        .token_offsets
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.map(|s| (i, ranking.token_scores.get(i).copied().unwrap_or(0.0), s)))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut spans: Vec<Span> = cands.into_iter().take(n).map(|c| c.2).collect();
    spans.sort_by_key(|s| s.start);
    spans.dedup();
    spans
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Weaves `open`/`close` around each span, transforming the text between.
fn weave(text: &str, spans: &[Span], open: &str, close: &str, f: impl Fn(&str) -> String) -> String {
    let mut out = String::new();
    let mut at = 0;
    for s in spans {
        out.push_str(&f(&text[at..s.start]));
        out.push_str(open);
        out.push_str(&f(s.slice(text)));
        out.push_str(close);
        at = s.end;
    }
    out.push_str(&f(&text[at..]));
    out
}

/// Removes the `⟦ ⟧` markers.
pub fn strip_markers(annotated: &str) -> String {
    annotated.chars().filter(|&c| c != MARK_OPEN && c != MARK_CLOSE).collect()
}

/// Plain-text and HTML reports marking the top `top_n` tokens and listing
/// the ranked sentences.
pub fn highlight_report(doc: &Document, ranking: &LocalRanking, top_n: usize) -> HighlightReport {
    let top_n = top_n.max(1);
    let marked = top_token_spans(ranking, top_n);
    let annotated = weave(&doc.text, &marked, &MARK_OPEN.to_string(), &MARK_CLOSE.to_string(), str::to_string);
    let body_html = weave(&doc.text, &marked, "<mark>", "</mark>", escape_html);

    let mut text = format!("document: {}\n\n{annotated}\n\nranked sentences:\n", doc.id);
    let mut rows = String::new();
    for (rank, &s) in ranking.ranking.iter().enumerate() {
        let score = ranking.sentence_scores[s].unwrap_or(0.0);
        let _ = writeln!(text, "{:>3}. [{s}] {score:.6} {}", rank + 1, doc.sentence(s));
        let _ = writeln!(
            rows,
            "<tr><td>{}</td><td>{s}</td><td>{score:.6}</td><td>{}</td></tr>",
            rank + 1,
            escape_html(doc.sentence(s))
        );
    }
    for &s in &ranking.excluded {
        let _ = writeln!(text, "  -. [{s}] truncated {}", doc.sentence(s));
    }
    let html = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{id}</title></head><body>\n\
         <h1>{id}</h1>\n<p>{body_html}</p>\n<table>\n<tr><th>rank</th><th>sentence</th><th>score</th><th>text</th></tr>\n\
         {rows}</table>\n</body></html>\n",
        id = escape_html(&doc.id)
    );
    HighlightReport { marked, annotated, text, html }
}
