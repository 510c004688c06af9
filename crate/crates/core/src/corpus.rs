//! Markdown ingestion, section-based chunking and the JSON-lines chunk store.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::tokenize::count_tokens;

pub const DEFAULT_MAX_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub source_path: String,
    pub raw: String,
}

impl Document {
    pub fn new(source_path: impl Into<String>, raw: impl Into<String>) -> Self {
        Self {
            source_path: source_path.into(),
            raw: raw.into(),
        }
    }
}

/// One documentation section: the unit of indexing, retrieval and citation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub source_path: String,
    /// Section titles from the document root down to this chunk's heading.
    pub heading_path: Vec<String>,
    /// Body including the heading line.
    pub text: String,
    pub token_count: usize,
}

impl Chunk {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty chunk id".into());
        }
        if self.text.is_empty() {
            return Err(format!("chunk `{}` has empty text", self.id));
        }
        if self.heading_path.is_empty() {
            return Err(format!("chunk `{}` has empty heading_path", self.id));
        }
        let expected = count_tokens(&self.text);
        if self.token_count != expected {
            return Err(format!(
                "chunk `{}` token_count {} does not match text ({expected})",
                self.id, self.token_count
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segmentation {
    pub chunks: Vec<Chunk>,
    pub warnings: Vec<String>,
}

/// Splits a markdown document into one chunk per heading of depth
/// `<= max_depth`. Deeper headings stay inside their parent chunk. Text
/// before the first heading becomes a chunk whose heading path is the
/// source path. Lines inside fenced code blocks are never headings.
pub fn segment_markdown(doc: &Document, max_depth: usize) -> Vec<Chunk> {
    let seg = segment_markdown_with_warnings(doc, max_depth);
    for w in &seg.warnings {
        log::warn!("{w}");
    }
    seg.chunks
}

pub fn segment_markdown_with_warnings(doc: &Document, max_depth: usize) -> Segmentation {
    let max_depth = max_depth.max(1);
    let mut out = Segmentation::default();
    let mut ids = IdAllocator::default();

    // Open headings, shallowest first. Level 0 is the synthetic root that
    // adopts headings which have no shallower parent.
    let mut stack: Vec<(usize, String)> = Vec::new();
    let mut path = vec![doc.source_path.clone()];
    let mut body: Vec<&str> = Vec::new();
    let mut fence: Option<(char, usize)> = None;
    let mut warned_preamble = false;

    for (lineno, line) in doc.raw.lines().enumerate() {
        if let Some(open) = fence {
            if closes_fence(line, open) {
                fence = None;
            }
            body.push(line);
            continue;
        }
        if let Some(open) = opens_fence(line) {
            fence = Some(open);
            body.push(line);
            continue;
        }

        if let Some((level, title)) = parse_atx_heading(line) {
            if level <= max_depth {
                flush(doc, &path, &body, &mut ids, &mut out.chunks);
                body.clear();

                while stack.last().is_some_and(|(l, _)| *l >= level) {
                    stack.pop();
                }
                if level == 1 && stack.first().is_some_and(|(l, _)| *l == 0) {
                    stack.clear();
                }
                if stack.is_empty() && level > 1 {
                    out.warnings.push(format!(
                        "{}:{}: heading level {level} `{title}` has no parent section; attached under synthetic root",
                        doc.source_path,
                        lineno + 1
                    ));
                    stack.push((0, doc.source_path.clone()));
                }
                stack.push((level, title));
                path = stack.iter().map(|(_, t)| t.clone()).collect();
            } else if stack.is_empty() && !warned_preamble {
                warned_preamble = true;
                out.warnings.push(format!(
                    "{}:{}: heading level {level} `{title}` appears before any section heading",
                    doc.source_path,
                    lineno + 1
                ));
            }
        }
        body.push(line);
    }
    flush(doc, &path, &body, &mut ids, &mut out.chunks);
    out
}

fn flush(
    doc: &Document,
    path: &[String],
    body: &[&str],
    ids: &mut IdAllocator,
    out: &mut Vec<Chunk>,
) {
    let text = body.join("\n");
    let text = text.trim();
    if text.is_empty() {
        return;
    }
    out.push(Chunk {
        id: ids.allocate(&doc.source_path, path),
        source_path: doc.source_path.clone(),
        heading_path: path.to_vec(),
        text: text.to_string(),
        token_count: count_tokens(text),
    });
}

/// `(level, title)` for an ATX heading line.
fn parse_atx_heading(line: &str) -> Option<(usize, String)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let level = rest.bytes().take_while(|&b| b == b'#').count();
    if level == 0 || level > 6 {
        return None;
    }
    let after = &rest[level..];
    if !(after.is_empty() || after.starts_with(' ') || after.starts_with('\t')) {
        return None;
    }
    let mut title = after.trim();
    // optional closing sequence
    let stripped = title.trim_end_matches('#');
    if stripped.len() != title.len() && (stripped.is_empty() || stripped.ends_with([' ', '\t'])) {
        title = stripped.trim_end();
    }
    Some((level, title.to_string()))
}

fn opens_fence(line: &str) -> Option<(char, usize)> {
    let t = line.trim_start_matches(' ');
    if line.len() - t.len() > 3 {
        return None;
    }
    let ch = t.chars().next()?;
    if ch != '`' && ch != '~' {
        return None;
    }
    let n = t.chars().take_while(|&c| c == ch).count();
    if n < 3 {
        return None;
    }
    if ch == '`' && t[n..].contains('`') {
        return None;
    }
    Some((ch, n))
}

fn closes_fence(line: &str, (ch, len): (char, usize)) -> bool {
    let t = line.trim_start_matches(' ');
    if line.len() - t.len() > 3 {
        return false;
    }
    let n = t.chars().take_while(|&c| c == ch).count();
    n >= len && t[n * ch.len_utf8()..].trim().is_empty()
}

pub fn slugify(s: &str) -> String {
    let mut out = String::new();
    let mut dash = false;
    for ch in s.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            if dash && !out.is_empty() {
                out.push('-');
            }
            dash = false;
            out.extend(ch.to_lowercase());
        } else {
            dash = true;
        }
    }
    if out.is_empty() {
        out.push_str("section");
    }
    out
}

#[derive(Default)]
struct IdAllocator {
    seen: HashMap<String, usize>,
}

impl IdAllocator {
    fn allocate(&mut self, source_path: &str, path: &[String]) -> String {
        let slug: Vec<String> = path.iter().map(|p| slugify(p)).collect();
        let base = format!("{source_path}#{}", slug.join("/"));
        let n = self.seen.entry(base.clone()).or_insert(0);
        *n += 1;
        if *n == 1 {
            base
        } else {
            format!("{base}-{n}")
        }
    }
}

/// Reads every `*.md` file under `dir` (sorted by relative path) and chunks it.
pub fn ingest_dir(dir: &Path, max_depth: usize) -> Result<Segmentation> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e
                .path()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| dir.to_path_buf());
            Error::io(path, e.into())
        })?;
        let p = entry.path();
        if entry.file_type().is_file()
            && p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("md") || e.eq_ignore_ascii_case("markdown"))
        {
            files.push(p.to_path_buf());
        }
    }

    let mut out = Segmentation::default();
    let mut seen = HashSet::new();
    for p in files {
        let rel = p.strip_prefix(dir).unwrap_or(&p);
        let source_path = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let doc = Document::new(source_path, raw);
        let seg = segment_markdown_with_warnings(&doc, max_depth);
        for c in seg.chunks {
            if !seen.insert(c.id.clone()) {
                return Err(Error::DuplicateChunk(c.id));
            }
            out.chunks.push(c);
        }
        out.warnings.extend(seg.warnings);
    }
    Ok(out)
}

/// Writes chunks as JSON lines via a temporary file renamed into place.
pub fn save_chunks(chunks: &[Chunk], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_chunks(chunks, &mut buf).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &buf)
}

pub fn write_chunks<W: Write>(chunks: &[Chunk], mut w: W) -> std::io::Result<()> {
    for c in chunks {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_chunks(path: &Path) -> Result<Vec<Chunk>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_chunks(f)
}

/// Parses a chunk store. Blank lines are skipped; any invalid record is
/// reported with its 1-based line number.
pub fn read_chunks<R: Read>(r: R) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: Chunk = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        chunk.validate().map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        if !seen.insert(chunk.id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate chunk id `{}`", chunk.id),
            });
        }
        out.push(chunk);
    }
    Ok(out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.flush().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(raw: &str) -> Document {
        Document::new("gpl/README.md", raw)
    }

    #[test]
    fn sections_and_subsections() {
        let d = doc("# A\nintro\n## A.1\none\n## A.2\ntwo\n");
        let chunks = segment_markdown(&d, 2);
        let paths: Vec<_> = chunks.iter().map(|c| c.heading_path.clone()).collect();
        assert_eq!(paths, vec![vec!["A"], vec!["A", "A.1"], vec!["A", "A.2"]]);
        assert_eq!(chunks[0].text, "# A\nintro");
        assert_eq!(chunks[1].id, "gpl/README.md#a/a-1");
        assert_eq!(chunks[2].token_count, 3);
    }

    #[test]
    fn no_headings_single_chunk() {
        let chunks = segment_markdown(&doc("hello"), 2);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].heading_path, vec!["gpl/README.md"]);
        assert_eq!(chunks[0].text, "hello");
    }

    #[test]
    fn empty_document() {
        assert!(segment_markdown(&doc(""), 2).is_empty());
        assert!(segment_markdown(&doc("\n  \n"), 2).is_empty());
    }

    #[test]
    fn deep_headings_stay_inline() {
        let d = doc("# A\n## B\n### C\nbody\n#### D\nmore");
        let chunks = segment_markdown(&d, 2);
        assert_eq!(chunks.len(), 2);
        assert!(chunks[1].text.contains("### C") && chunks[1].text.contains("#### D"));

        let chunks = segment_markdown(&d, 3);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].heading_path, vec!["A", "B", "C"]);
    }

    #[test]
    fn code_fence_comments_are_not_headings() {
        let d =
            doc("# Usage\n```tcl\n# set the clock\ncreate_clock -period 10\n```\n## Options\nx");
        let chunks = segment_markdown(&d, 2);
        assert_eq!(chunks.len(), 2);
        assert!(chunks[0].text.contains("# set the clock"));
    }

    #[test]
    fn orphan_heading_gets_synthetic_root() {
        let d = doc("### early\ntext\n## B\nb\n# C\nc");
        let seg = segment_markdown_with_warnings(&d, 2);
        let paths: Vec<_> = seg.chunks.iter().map(|c| c.heading_path.clone()).collect();
        assert_eq!(
            paths,
            vec![vec!["gpl/README.md"], vec!["gpl/README.md", "B"], vec!["C"]]
        );
        assert_eq!(seg.warnings.len(), 2);
    }

    #[test]
    fn preamble_chunk() {
        let d = doc("preface\n\n# A\nbody");
        let chunks = segment_markdown(&d, 2);
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].heading_path, vec!["gpl/README.md"]);
        assert_eq!(chunks[0].id, "gpl/README.md#gpl-readme-md");
    }

    #[test]
    fn duplicate_headings_get_distinct_ids() {
        let d = doc("# A\n## Example\n1\n## Example\n2");
        let ids: Vec<_> = segment_markdown(&d, 2).into_iter().map(|c| c.id).collect();
        assert_eq!(
            ids,
            [
                "gpl/README.md#a",
                "gpl/README.md#a/example",
                "gpl/README.md#a/example-2"
            ]
        );
    }

    #[test]
    fn heading_parsing() {
        assert_eq!(parse_atx_heading("## Title ##"), Some((2, "Title".into())));
        assert_eq!(parse_atx_heading("#Title"), None);
        assert_eq!(parse_atx_heading("    # code"), None);
        assert_eq!(parse_atx_heading("####### seven"), None);
        assert_eq!(parse_atx_heading("#"), Some((1, "".into())));
        assert_eq!(
            parse_atx_heading("# C# notes"),
            Some((1, "C# notes".into()))
        );
    }

    #[test]
    fn truncated_last_line_is_a_parse_error() {
        let chunks = segment_markdown(&doc("# A\na\n## B\nb\n## C\nc"), 2);
        let mut buf = Vec::new();
        write_chunks(&chunks, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated = &text[..text.len() - 10];
        match read_chunks(truncated.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn token_count_mismatch_rejected() {
        let line =
            r##"{"id":"a#a","source_path":"a","heading_path":["a"],"text":"x y","token_count":5}"##;
        assert!(matches!(
            read_chunks(line.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chunks.jsonl");
        let chunks = segment_markdown(&doc("# A\na\n## B\nb\n## C\nc"), 2);
        save_chunks(&chunks, &path).unwrap();
        assert_eq!(load_chunks(&path).unwrap(), chunks);
    }
}
