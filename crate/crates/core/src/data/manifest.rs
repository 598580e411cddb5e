//! JSON-lines dataset index.
//!
//! The first line is a header `{version, d_text, d_image, split}`; every other
//! non-empty line is one article record whose blob paths are relative to the
//! manifest's directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blob::read_feature_blob;
use super::record::{ArticleRecord, ImageCaptionPair, Label, MAX_PAIRS};
use crate::entity::EntitySet;
use crate::error::{Error, Result};
use crate::par;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub version: u32,
    pub d_text: usize,
    pub d_image: usize,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub pair_id: String,
    pub caption: String,
    pub objects: String,
    #[serde(default)]
    pub caption_entities: Vec<String>,
    /// Tagger types aligned with `caption_entities`, when the extractor records them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_entity_types: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub article_id: String,
    pub label: Label,
    pub sentences: Vec<String>,
    #[serde(default)]
    pub body_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_entity_types: Option<Vec<String>>,
    pub pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<RecordEntry>,
    /// 1-based line number of each record, for diagnostics.
    lines: Vec<usize>,
}

fn schema(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Schema { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Parses and validates a manifest. Blob files must exist; their contents are
/// parsed by [`Manifest::load_records`].
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or_else(|| schema(path, 1, "empty manifest"))?;
    let header: ManifestHeader =
        serde_json::from_str(htext).map_err(|e| schema(path, hline + 1, format!("bad header: {e}")))?;
    if header.version != MANIFEST_VERSION {
        return Err(schema(path, hline + 1, format!("unsupported version {}", header.version)));
    }
    if header.d_text == 0 || header.d_image == 0 {
        return Err(schema(path, hline + 1, "dimensions must be positive"));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut line_numbers = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let rec: RecordEntry = serde_json::from_str(l).map_err(|e| schema(path, line, e.to_string()))?;
        if rec.pairs.is_empty() {
            return Err(schema(path, line, format!("article {} has no image-caption pairs", rec.article_id)));
        }
        if rec.pairs.len() > MAX_PAIRS {
            return Err(schema(
                path,
                line,
                format!(
                    "article {} has {} image-caption pairs; at most {MAX_PAIRS} per article are allowed",
                    rec.article_id,
                    rec.pairs.len()
                ),
            ));
        }
        if rec.sentences.is_empty() {
            return Err(schema(path, line, format!("article {} has no sentences", rec.article_id)));
        }
        let blobs = rec.sentences.iter().chain(rec.pairs.iter().flat_map(|p| [&p.caption, &p.objects]));
        for b in blobs {
            if !dir.join(b).is_file() {
                return Err(schema(path, line, format!("missing blob {}", dir.join(b).display())));
            }
        }
        records.push(rec);
        line_numbers.push(line);
    }
    Ok(Manifest { path: path.to_path_buf(), header, records, lines: line_numbers })
}

impl Manifest {
    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads and validates one record's blobs.
    pub fn load_record(&self, index: usize) -> Result<ArticleRecord> {
        let entry = &self.records[index];
        let line = self.lines[index];
        let dir = self.dir();
        let wrap = |e: Error| match e {
            Error::Validation(msg) => schema(&self.path, line, msg),
            other => other,
        };
        let sentences = entry
            .sentences
            .iter()
            .map(|s| read_feature_blob(&dir.join(s)))
            .collect::<Result<Vec<_>>>()?;
        let pairs = entry
            .pairs
            .iter()
            .map(|p| {
                Ok(ImageCaptionPair {
                    pair_id: p.pair_id.clone(),
                    caption_words: read_feature_blob(&dir.join(&p.caption))?,
                    object_feats: read_feature_blob(&dir.join(&p.objects))?,
                    caption_entities: EntitySet::from_raw(&p.caption_entities),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let record = ArticleRecord {
            article_id: entry.article_id.clone(),
            sentences,
            body_entities: EntitySet::from_raw(&entry.body_entities),
            pairs,
            label: entry.label,
        };
        record.validate(self.header.d_text, self.header.d_image).map_err(wrap)?;
        Ok(record)
    }

    /// Loads every record, in manifest order.
    pub fn load_records(&self) -> Result<Vec<ArticleRecord>> {
        par::map_range(self.records.len(), |i| self.load_record(i)).into_iter().collect()
    }
}

/// Writes a manifest file. Blob paths in `records` must already be relative to `path`'s directory.
pub fn write_manifest(path: &Path, header: &ManifestHeader, records: &[RecordEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut w, header).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
