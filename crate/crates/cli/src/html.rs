//! Static HTML gallery for `search --html`.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use prkt_core::retrieval::Hit;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Page showing the query next to its ranked hits, images at native size.
pub fn report(query: &Path, image_root: &Path, hits: &[Hit], reranked: bool) -> String {
    let mut cells = String::new();
    for (i, h) in hits.iter().enumerate() {
        let src = absolute(&image_root.join(&h.image_path));
        let _ = write!(
            cells,
            "<figure><img src=\"{}\" alt=\"{}\"><figcaption>#{} {}<br>{:.4}</figcaption></figure>\n",
            escape(&src.to_string_lossy()),
            escape(&h.image_path),
            i + 1,
            escape(&h.patent_id),
            h.score
        );
    }
    format!(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>prkt search</title>\n\
         <style>body{{font-family:sans-serif}}figure{{display:inline-block;margin:6px;text-align:center}}\
         img{{image-rendering:pixelated;border:1px solid #ccc}}</style></head><body>\n\
         <h1>Query</h1><figure><img src=\"{}\"><figcaption>{}</figcaption></figure>\n\
         <h1>Top {} {}</h1>\n{cells}</body></html>\n",
        escape(&absolute(query).to_string_lossy()),
        escape(&query.to_string_lossy()),
        hits.len(),
        if reranked { "(re-ranked)" } else { "(cosine)" },
    )
}
