//! Documents, queries and relevance judgments, plus the on-disk formats
//! they travel in.
//!
//! * corpus manifest: JSON lines `{"doc_id", "image", "text"}`, image paths
//!   relative to the manifest's directory;
//! * query file: JSON lines `{"query_id", "text", "answers"}`;
//! * judgments: whitespace-separated `query_id 0 doc_id grade` (TREC qrels).

pub mod font;
mod render;
pub mod synth;
mod text;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use render::{render_text_screenshot, visible_char_count};
pub use text::truncate_words;

/// Row-major 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "pixel grid must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!(
                "pixel grid must have 1 or 3 channels, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Grid filled with a single value.
    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: u8) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn read_image(path: &Path) -> std::result::Result<Self, String> {
        let img = image::open(path).map_err(|e| e.to_string())?;
        let grid = match img {
            image::DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                Self::new(h as usize, w as usize, 1, buf.into_raw())
            }
            other => {
                let buf = other.to_rgb8();
                let (w, h) = buf.dimensions();
                Self::new(h as usize, w as usize, 3, buf.into_raw())
            }
        };
        grid.map_err(|e| e.to_string())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// One screenshot document of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub image: PixelGrid,
    pub text_mirror: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub answers: Vec<String>,
}

/// Graded judgments keyed by query id, then doc id.
pub type RelevanceJudgments = BTreeMap<String, BTreeMap<String, u32>>;

/// One line of a corpus manifest, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub image: String,
    pub text: String,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((idx + 1, line));
    }
    Ok(out)
}

fn parse_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            serde_json::from_str(&line)
                .map(|v| (line_no, v))
                .map_err(|e| Error::parse(path, line_no, e.to_string()))
        })
        .collect()
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    let mut dups: Vec<&str> = Vec::new();
    for id in ids {
        if !seen.insert(id) && !dups.contains(&id) {
            dups.push(id);
        }
    }
    if dups.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "duplicate {what} id(s): {}",
            dups.join(", ")
        )))
    }
}

/// Reads manifest lines without decoding images.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = parse_json_lines(path)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    check_unique(entries.iter().map(|e| e.doc_id.as_str()), "document")?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_json_lines(path, entries)
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads a corpus manifest and decodes every referenced image.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<DocumentRecord>> {
    let lines: Vec<(usize, ManifestEntry)> = parse_json_lines(manifest_path)?;
    check_unique(lines.iter().map(|(_, e)| e.doc_id.as_str()), "document")?;
    let base = manifest_dir(manifest_path);
    lines
        .into_iter()
        .map(|(line, entry)| {
            if entry.doc_id.is_empty() {
                return Err(Error::parse(manifest_path, line, "empty doc_id"));
            }
            let image_path = base.join(&entry.image);
            let image = PixelGrid::read_image(&image_path).map_err(|message| Error::Image {
                path: image_path.clone(),
                line,
                message,
            })?;
            Ok(DocumentRecord {
                doc_id: entry.doc_id,
                image,
                text_mirror: entry.text,
            })
        })
        .collect()
}

/// Writes `docs` as PNG files under `image_dir` (relative to the manifest)
/// and a manifest pointing at them.
pub fn save_corpus(manifest_path: &Path, image_dir: &str, docs: &[DocumentRecord]) -> Result<()> {
    let base = manifest_dir(manifest_path);
    let dir = base.join(image_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(docs.len());
    for doc in docs {
        let rel = format!("{image_dir}/{}.png", sanitize_file_stem(&doc.doc_id));
        doc.image.write_png(&base.join(&rel))?;
        entries.push(ManifestEntry {
            doc_id: doc.doc_id.clone(),
            image: rel,
            text: doc.text_mirror.clone(),
        });
    }
    write_manifest(manifest_path, &entries)
}

fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let lines: Vec<(usize, QueryRecord)> = parse_json_lines(path)?;
    for (line, q) in &lines {
        if q.query_id.is_empty() {
            return Err(Error::parse(path, *line, "empty query_id"));
        }
        if q.text.is_empty() {
            return Err(Error::parse(path, *line, "empty query text"));
        }
    }
    let queries: Vec<QueryRecord> = lines.into_iter().map(|(_, q)| q).collect();
    check_unique(queries.iter().map(|q| q.query_id.as_str()), "query")?;
    Ok(queries)
}

pub fn write_queries(path: &Path, queries: &[QueryRecord]) -> Result<()> {
    write_json_lines(path, queries)
}

/// Reads a qrels file. When `queries` is given, every judged query id must
/// appear in it.
pub fn load_qrels(path: &Path, queries: Option<&[QueryRecord]>) -> Result<RelevanceJudgments> {
    let mut out = RelevanceJudgments::new();
    for (line_no, line) in read_lines(path)? {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        }
        let grade: u32 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad grade {:?}", cols[3])))?;
        out.entry(cols[0].to_string())
            .or_default()
            .insert(cols[2].to_string(), grade);
    }
    if let Some(queries) = queries {
        let known: HashSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
        if let Some(missing) = out.keys().find(|q| !known.contains(q.as_str())) {
            return Err(Error::Validation(format!(
                "qrels reference unknown query id {missing}"
            )));
        }
    }
    Ok(out)
}

pub fn write_qrels(path: &Path, qrels: &RelevanceJudgments) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (qid, docs) in qrels {
        for (doc, grade) in docs {
            writeln!(w, "{qid} 0 {doc} {grade}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> DocumentRecord {
        DocumentRecord {
            doc_id: id.into(),
            image: render_text_screenshot(text, 16, 24, 0).unwrap(),
            text_mirror: text.into(),
        }
    }

    #[test]
    fn pixel_grid_rejects_bad_shapes() {
        assert!(PixelGrid::new(0, 3, 1, vec![]).is_err());
        assert!(PixelGrid::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(matches!(
            PixelGrid::new(2, 2, 1, vec![0; 3]),
            Err(Error::Dimension {
                expected: 4,
                actual: 3
            })
        ));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("corpus.jsonl");
        let docs = vec![doc("d1", "abc"), doc("d2", "x y"), doc("d3", "")];
        save_corpus(&manifest, "img", &docs).unwrap();
        let loaded = load_corpus(&manifest).unwrap();
        assert_eq!(loaded, docs);

        let bytes = fs::read(&manifest).unwrap();
        let rewritten = dir.path().join("again.jsonl");
        write_manifest(&rewritten, &read_manifest(&manifest).unwrap()).unwrap();
        assert_eq!(fs::read(&rewritten).unwrap(), bytes);
    }

    #[test]
    fn duplicate_doc_id_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("c.jsonl");
        fs::write(
            &manifest,
            "{\"doc_id\":\"d1\",\"image\":\"a.png\",\"text\":\"\"}\n\
             {\"doc_id\":\"d1\",\"image\":\"b.png\",\"text\":\"\"}\n",
        )
        .unwrap();
        let err = load_corpus(&manifest).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("d1"));
    }

    #[test]
    fn missing_image_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("c.jsonl");
        fs::write(
            &manifest,
            "\n{\"doc_id\":\"d1\",\"image\":\"nope.png\",\"text\":\"\"}\n",
        )
        .unwrap();
        match load_corpus(&manifest).unwrap_err() {
            Error::Image { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("c.jsonl");
        fs::write(&manifest, "").unwrap();
        assert!(load_corpus(&manifest).unwrap().is_empty());
    }

    #[test]
    fn rgb_images_load_with_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let grid = PixelGrid::new(2, 3, 3, (0..18).collect()).unwrap();
        grid.write_png(&dir.path().join("x.png")).unwrap();
        fs::write(
            dir.path().join("c.jsonl"),
            "{\"doc_id\":\"x\",\"image\":\"x.png\",\"text\":\"t\"}\n",
        )
        .unwrap();
        let docs = load_corpus(&dir.path().join("c.jsonl")).unwrap();
        assert_eq!(docs[0].image, grid);
    }

    #[test]
    fn queries_and_qrels() {
        let dir = tempfile::tempdir().unwrap();
        let qpath = dir.path().join("q.jsonl");
        let queries = vec![
            QueryRecord {
                query_id: "q1".into(),
                text: "what".into(),
                answers: vec!["a".into()],
            },
            QueryRecord {
                query_id: "q2".into(),
                text: "who".into(),
                answers: vec![],
            },
        ];
        write_queries(&qpath, &queries).unwrap();
        assert_eq!(load_queries(&qpath).unwrap(), queries);

        let rpath = dir.path().join("qrels.txt");
        fs::write(&rpath, "q1 0 d1 1\nq1 0 d2 0\nq2 0 d9 2\n").unwrap();
        let qrels = load_qrels(&rpath, Some(&queries)).unwrap();
        assert_eq!(qrels["q1"]["d1"], 1);
        assert_eq!(qrels["q2"]["d9"], 2);

        fs::write(&rpath, "q3 0 d1 1\n").unwrap();
        assert!(load_qrels(&rpath, Some(&queries)).is_err());
        fs::write(&rpath, "q1 0 d1 -1\n").unwrap();
        assert!(matches!(
            load_qrels(&rpath, None),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
