//! Knowledge-base retrieval: source ingestion, chunking, BM25 and FAQ lookup.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use crate::model::{Diagnostic, FaqEntry};

pub const CHUNK_CHARS: usize = 1200;
pub const CHUNK_OVERLAP: usize = 200;
pub const TOP_K: usize = 3;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KbError {
    #[error("source `{0}` does not exist")]
    SourceMissing(String),
    #[error("cannot read source `{source_id}`: {reason}")]
    Unreadable { source_id: String, reason: String },
}

impl KbError {
    pub fn code(&self) -> &'static str {
        match self {
            KbError::SourceMissing(_) => "E_SOURCE_MISSING",
            KbError::Unreadable { .. } => "E_SOURCE_UNREADABLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub source: String,
    pub text: String,
    term_freq: HashMap<String, u32>,
    len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KbIndex {
    pub chunks: Vec<Chunk>,
    pub faq: Vec<FaqEntry>,
    doc_freq: HashMap<String, u32>,
    avg_len: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a> {
    pub score: f64,
    pub chunk: &'a Chunk,
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Windows of `CHUNK_CHARS` characters advancing by `CHUNK_CHARS - CHUNK_OVERLAP`.
pub fn chunk_text(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    let stride = CHUNK_CHARS - CHUNK_OVERLAP;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + CHUNK_CHARS).min(chars.len());
        out.push(chars[start..end].iter().collect());
        if end == chars.len() {
            return out;
        }
        start += stride;
    }
}

/// Lowercase, trim, collapse whitespace, strip terminal punctuation.
pub fn normalize_question(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

impl KbIndex {
    pub fn build(documents: Vec<(String, String)>, faq: Vec<FaqEntry>) -> Self {
        let mut chunks = Vec::new();
        for (source, text) in documents {
            for piece in chunk_text(&text) {
                let tokens = tokenize(&piece);
                let mut term_freq = HashMap::new();
                for t in &tokens {
                    *term_freq.entry(t.clone()).or_insert(0) += 1;
                }
                chunks.push(Chunk {
                    source: source.clone(),
                    text: piece,
                    term_freq,
                    len: tokens.len(),
                });
            }
        }
        let mut doc_freq = HashMap::new();
        for c in &chunks {
            for t in c.term_freq.keys() {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let avg_len = if chunks.is_empty() {
            0.0
        } else {
            chunks.iter().map(|c| c.len as f64).sum::<f64>() / chunks.len() as f64
        };
        Self {
            chunks,
            faq,
            doc_freq,
            avg_len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty() && self.faq.is_empty()
    }

    pub fn faq_answer(&self, query: &str) -> Option<&str> {
        let q = normalize_question(query);
        self.faq
            .iter()
            .find(|e| normalize_question(&e.q) == q)
            .map(|e| e.a.as_str())
    }

    /// BM25 over the distinct query terms.
    pub fn score(&self, query: &str, chunk: &Chunk) -> f64 {
        let n = self.chunks.len() as f64;
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        terms
            .iter()
            .map(|t| {
                let tf = *chunk.term_freq.get(t).unwrap_or(&0) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                let df = *self.doc_freq.get(t).unwrap_or(&0) as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                let norm = 1.0 - BM25_B + BM25_B * chunk.len as f64 / self.avg_len.max(1e-9);
                idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
            })
            .sum()
    }

    /// Up to `k` chunks with positive score, best first; ties keep index order.
    pub fn search(&self, query: &str, k: usize) -> Vec<Hit<'_>> {
        let mut hits: Vec<Hit> = self
            .chunks
            .iter()
            .map(|chunk| Hit {
                score: self.score(query, chunk),
                chunk,
            })
            .filter(|h| h.score > 0.0)
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score));
        hits.truncate(k);
        hits
    }
}

fn is_url(source: &str) -> bool {
    source.starts_with("http://") || source.starts_with("https://") || source.starts_with("www.")
}

fn csv_text(path: &Path, id: &str) -> Result<String, KbError> {
    let unreadable = |e: csv::Error| KbError::Unreadable {
        source_id: id.to_string(),
        reason: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(unreadable)?;
    let headers = reader.headers().map_err(unreadable)?.clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(unreadable)?;
        let cells: Vec<String> = headers
            .iter()
            .zip(record.iter())
            .map(|(h, v)| format!("{h}={v}"))
            .collect();
        rows.push(cells.join("; "));
    }
    Ok(rows.join("\n"))
}

fn fetch_url(url: &str) -> Result<String, String> {
    let url = if url.starts_with("www.") {
        format!("https://{url}")
    } else {
        url.to_string()
    };
    let mut resp = ureq::get(&url).call().map_err(|e| e.to_string())?;
    let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    let tags = regex::Regex::new(r"(?s)<script.*?</script>|<style.*?</style>|<[^>]*>").expect("static regex");
    Ok(tags.replace_all(&body, " ").into_owned())
}

/// Reads knowledge sources relative to `base_dir`.
///
/// Plain text and CSV are read directly; PDF and Word documents are used only
/// through a `.txt` sidecar with the same stem. A directory contributes every
/// file inside it. URLs are fetched only when `fetch_urls` is set; skipped
/// sources produce `W_SOURCE_SKIPPED`.
pub fn ingest_sources(
    sources: &[String],
    faq: &[FaqEntry],
    base_dir: &Path,
    fetch_urls: bool,
) -> Result<(KbIndex, Vec<Diagnostic>), KbError> {
    let mut docs = Vec::new();
    let mut diags = Vec::new();
    for source in sources {
        if is_url(source) {
            if !fetch_urls {
                diags.push(skipped(source, "URL fetching is disabled"));
                continue;
            }
            match fetch_url(source) {
                Ok(text) => docs.push((source.clone(), text)),
                Err(e) => diags.push(skipped(source, &e)),
            }
            continue;
        }
        let path: PathBuf = base_dir.join(source);
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&path)
                .map_err(|e| KbError::Unreadable {
                    source_id: source.clone(),
                    reason: e.to_string(),
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for entry in &entries {
                let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let id = format!("{}/{name}", source.trim_end_matches('/'));
                // sidecars are read through their document
                if is_sidecar(entry) {
                    continue;
                }
                if let Some(text) = read_file(entry, &id, &mut diags)? {
                    docs.push((id, text));
                }
            }
            continue;
        }
        if let Some(text) = read_file(&path, source, &mut diags)? {
            docs.push((source.clone(), text));
        }
    }
    Ok((KbIndex::build(docs, faq.to_vec()), diags))
}

fn skipped(id: &str, why: &str) -> Diagnostic {
    Diagnostic::warning("W_SOURCE_SKIPPED", format!("source `{id}` skipped: {why}"), None)
}

fn is_document(ext: &str) -> bool {
    matches!(ext, "pdf" | "doc" | "docx")
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

fn is_sidecar(path: &Path) -> bool {
    extension(path) == "txt"
        && ["pdf", "doc", "docx"]
            .iter()
            .any(|ext| path.with_extension(ext).is_file())
}

fn read_file(path: &Path, id: &str, diags: &mut Vec<Diagnostic>) -> Result<Option<String>, KbError> {
    let ext = extension(path);
    if is_document(&ext) {
        let sidecar = path.with_extension("txt");
        if sidecar.is_file() {
            return read_text(&sidecar, id).map(Some);
        }
        if path.exists() {
            diags.push(skipped(id, "no .txt sidecar with extracted text"));
            return Ok(None);
        }
        return Err(KbError::SourceMissing(id.to_string()));
    }
    if !path.is_file() {
        return Err(KbError::SourceMissing(id.to_string()));
    }
    if ext == "csv" {
        return csv_text(path, id).map(Some);
    }
    read_text(path, id).map(Some)
}

fn read_text(path: &Path, id: &str) -> Result<String, KbError> {
    std::fs::read_to_string(path).map_err(|e| KbError::Unreadable {
        source_id: id.to_string(),
        reason: e.to_string(),
    })
}

/// Chunk boundaries and scores of an index, for determinism checks.
pub fn fingerprint(index: &KbIndex, query: &str) -> BTreeMap<usize, String> {
    index
        .chunks
        .iter()
        .enumerate()
        .map(|(i, c)| (i, format!("{}:{}:{:.12}", c.source, c.text.len(), index.score(query, c))))
        .collect()
}
