//! Corpus ingestion (JSONL) and the binary feature-vector store.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::textdata::vocab::{Vocab, VocabMode, EOS_ID};

/// One training item: tokenized context and target joined to a feature vector.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    /// Context token ids, length m >= 0.
    pub context_ids: Vec<u32>,
    /// Target token ids, length n >= 1, always ending with EOS.
    pub target_ids: Vec<u32>,
    /// Feature vector of the corpus-declared dimension.
    pub feature: Vec<f32>,
}

/// id -> feature vector, all rows of one dimension.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, Vec<f32>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            ids: Vec::new(),
            rows: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: &str, row: Vec<f32>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::contract(format!(
                "feature row {id} has dim {} but table dim is {}",
                row.len(),
                self.dim
            )));
        }
        if self.rows.insert(id.to_string(), row).is_some() {
            return Err(Error::contract(format!("duplicate feature id {id}")));
        }
        self.ids.push(id.to_string());
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Vec<f32>> {
        self.rows.get(id)
    }

    /// Ids in insertion order (the order rows are written to disk).
    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

pub const FEAT_MAGIC: &[u8; 8] = b"INLGFEAT";
pub const FEAT_VERSION: u16 = 1;

pub fn write_features(table: &FeatureTable, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEAT_MAGIC)?;
    w.write_all(&FEAT_VERSION.to_le_bytes())?;
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    w.write_all(&(table.dim() as u32).to_le_bytes())?;
    for id in table.ids() {
        let ib = id.as_bytes();
        if ib.len() > u16::MAX as usize {
            return Err(Error::format(format!("feature id too long: {id}")));
        }
        w.write_all(&(ib.len() as u16).to_le_bytes())?;
        w.write_all(ib)?;
        for &v in &table.rows[id] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("feature file too short for magic".to_string()))?;
    if &magic != FEAT_MAGIC {
        return Err(Error::format("bad feature-file magic".to_string()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)
        .map_err(|_| Error::format("truncated feature header".to_string()))?;
    let version = u16::from_le_bytes(b2);
    if version != FEAT_VERSION {
        return Err(Error::format(format!(
            "unknown feature-file version {version}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::format("truncated feature header".to_string()))?;
    let count = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)
        .map_err(|_| Error::format("truncated feature header".to_string()))?;
    let dim = u32::from_le_bytes(b4) as usize;

    let mut table = FeatureTable::new(dim);
    for i in 0..count {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)
            .map_err(|_| Error::format(format!("truncated feature row {i} (id length)")))?;
        let id_len = u16::from_le_bytes(lb) as usize;
        let mut ib = vec![0u8; id_len];
        r.read_exact(&mut ib)
            .map_err(|_| Error::format(format!("truncated feature row {i} (id)")))?;
        let id = String::from_utf8(ib)
            .map_err(|_| Error::format(format!("feature row {i} id is not UTF-8")))?;
        let mut payload = vec![0u8; dim * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(format!("truncated feature row {i} ({id}): payload")))?;
        let row: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        table.insert(&id, row)?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format(
            "trailing bytes after final feature row".to_string(),
        ));
    }
    Ok(table)
}

#[derive(Deserialize)]
struct RawLine {
    id: String,
    context: String,
    target: Option<String>,
    feature_id: Option<String>,
    feature: Option<Vec<f32>>,
}

fn resolve_feature(
    raw: &RawLine,
    features: Option<&FeatureTable>,
    line_no: usize,
) -> Result<Vec<f32>> {
    if let Some(inline) = &raw.feature {
        return Ok(inline.clone());
    }
    let Some(fid) = &raw.feature_id else {
        return Err(Error::Ingest {
            line: line_no,
            msg: format!("example {} carries neither feature nor feature_id", raw.id),
        });
    };
    let Some(table) = features else {
        return Err(Error::Ingest {
            line: line_no,
            msg: format!(
                "example {} references feature_id {fid} but no feature table was supplied",
                raw.id
            ),
        });
    };
    match table.get(fid) {
        Some(row) => Ok(row.clone()),
        None => Err(Error::DanglingFeature {
            example: raw.id.clone(),
            feature_id: fid.clone(),
        }),
    }
}

fn parse_lines(path: &Path) -> Result<Vec<(usize, RawLine)>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push((line_no, raw));
    }
    Ok(out)
}

fn build_example(
    raw: &RawLine,
    vocab: &Vocab,
    features: Option<&FeatureTable>,
    expected_dim: &mut Option<usize>,
    line_no: usize,
) -> Result<Example> {
    let target_text = raw.target.as_deref().unwrap_or("");
    let target_tokens = Vocab::tokenize(vocab.mode(), target_text);
    if target_tokens.is_empty() {
        return Err(Error::Ingest {
            line: line_no,
            msg: format!("example {} has an empty target", raw.id),
        });
    }
    let mut target_ids = vocab.encode_tokens(&target_tokens);
    target_ids.push(EOS_ID);
    let context_ids = vocab.encode_text(&raw.context);
    let feature = resolve_feature(raw, features, line_no)?;
    match expected_dim {
        Some(d) if *d != feature.len() => {
            return Err(Error::Ingest {
                line: line_no,
                msg: format!(
                    "example {} feature dim {} differs from corpus dim {d}",
                    raw.id,
                    feature.len()
                ),
            });
        }
        Some(_) => {}
        None => *expected_dim = Some(feature.len()),
    }
    Ok(Example {
        id: raw.id.clone(),
        context_ids,
        target_ids,
        feature,
    })
}

/// Load a training corpus, building the vocabulary from this file.
pub fn load_corpus(
    path: &Path,
    mode: VocabMode,
    features: Option<&FeatureTable>,
) -> Result<(Vec<Example>, Vocab)> {
    let lines = parse_lines(path)?;
    let mut vocab = Vocab::new(mode);
    for (_, raw) in &lines {
        for tok in Vocab::tokenize(mode, &raw.context) {
            vocab.intern(&tok);
        }
        for tok in Vocab::tokenize(mode, raw.target.as_deref().unwrap_or("")) {
            vocab.intern(&tok);
        }
    }
    let mut expected_dim = features.map(|t| t.dim());
    let mut examples = Vec::with_capacity(lines.len());
    for (line_no, raw) in &lines {
        examples.push(build_example(raw, &vocab, features, &mut expected_dim, *line_no)?);
    }
    Ok((examples, vocab))
}

/// Load an evaluation corpus with an existing vocabulary; out-of-vocabulary
/// tokens become UNK.
pub fn load_corpus_with_vocab(
    path: &Path,
    vocab: &Vocab,
    features: Option<&FeatureTable>,
) -> Result<Vec<Example>> {
    let lines = parse_lines(path)?;
    let mut expected_dim = features.map(|t| t.dim());
    let mut examples = Vec::with_capacity(lines.len());
    for (line_no, raw) in &lines {
        examples.push(build_example(raw, vocab, features, &mut expected_dim, *line_no)?);
    }
    Ok(examples)
}

/// A generation request: context and feature, no target required.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub id: String,
    pub context_ids: Vec<u32>,
    pub feature: Option<Vec<f32>>,
    /// Set when the feature reference could not be resolved; generation
    /// reports it per-example and carries on.
    pub missing_feature: Option<String>,
}

pub fn load_prompts(
    path: &Path,
    vocab: &Vocab,
    features: Option<&FeatureTable>,
) -> Result<Vec<Prompt>> {
    let lines = parse_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (line_no, raw) in &lines {
        let context_ids = vocab.encode_text(&raw.context);
        match resolve_feature(raw, features, *line_no) {
            Ok(feature) => out.push(Prompt {
                id: raw.id.clone(),
                context_ids,
                feature: Some(feature),
                missing_feature: None,
            }),
            Err(Error::DanglingFeature { feature_id, .. }) => out.push(Prompt {
                id: raw.id.clone(),
                context_ids,
                feature: None,
                missing_feature: Some(feature_id),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::Rng;
    use tempfile::tempdir;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    #[test]
    fn tokenization_counts() {
        // context "live show ." -> m=3; target of 6 words -> n=7 including EOS
        let dir = tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            "c.jsonl",
            &[r#"{"id":"a","context":"live show .","target":"tim was in the play .","feature":[0.0,1.0]}"#],
        );
        let (examples, vocab) = load_corpus(&path, VocabMode::Word, None).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].context_ids.len(), 3);
        assert_eq!(examples[0].target_ids.len(), 7);
        assert_eq!(*examples[0].target_ids.last().unwrap(), EOS_ID);
        assert!(vocab.size() > 4);
    }

    #[test]
    fn empty_target_is_an_ingest_error() {
        let dir = tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            "c.jsonl",
            &[r#"{"id":"a","context":"x","target":"","feature":[0.5]}"#],
        );
        match load_corpus(&path, VocabMode::Word, None) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            "c.jsonl",
            &[
                r#"{"id":"a","context":"x","target":"y z","feature":[0.5]}"#,
                r#"{"id":"b" not json"#,
            ],
        );
        match load_corpus(&path, VocabMode::Word, None) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_feature_reference() {
        let dir = tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            "c.jsonl",
            &[r#"{"id":"a","context":"x","target":"y","feature_id":"nope"}"#],
        );
        let table = FeatureTable::new(4);
        match load_corpus(&path, VocabMode::Word, Some(&table)) {
            Err(Error::DanglingFeature { feature_id, .. }) => assert_eq!(feature_id, "nope"),
            other => panic!("expected dangling reference, got {other:?}"),
        }
    }

    #[test]
    fn story_shaped_text_round_trips() {
        // Title + first sentence as context; four sentences as target.
        let dir = tempdir().unwrap();
        let context = "live show . tim was in his school's play .";
        let target = "he was nervous about their first show . he almost dropped out . \
                      the show went smoothly . tim was excited for his second show .";
        let line = format!(
            r#"{{"id":"s1","context":"{context}","target":"{target}","feature":[0.0,0.0,1.0]}}"#
        );
        let path = write_lines(dir.path(), "c.jsonl", &[&line]);
        let (examples, vocab) = load_corpus(&path, VocabMode::Word, None).unwrap();
        let ex = &examples[0];
        // Strip the trailing EOS, decode, re-encode: lossless on in-vocab text.
        let body = &ex.target_ids[..ex.target_ids.len() - 1];
        let decoded = vocab.decode_text(body);
        assert_eq!(vocab.encode_text(&decoded), body);
        assert_eq!(decoded, target);
    }

    #[test]
    fn feature_round_trip_bytes() {
        let dir = tempdir().unwrap();
        let mut table = FeatureTable::new(4);
        for i in 0..3 {
            table
                .insert(&format!("row{i}"), vec![i as f32, 0.5, -1.25, 1e-3])
                .unwrap();
        }
        let p1 = dir.path().join("f1.inlgfeat");
        write_features(&table, &p1).unwrap();
        let back = read_features(&p1).unwrap();
        assert_eq!(back.dim(), 4);
        assert_eq!(back.len(), 3);
        let p2 = dir.path().join("f2.inlgfeat");
        write_features(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn short_row_is_a_format_error() {
        // header says dim=512 but the single row carries 511 floats
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.inlgfeat");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEAT_MAGIC);
        bytes.extend_from_slice(&FEAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&512u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(b"r0");
        for _ in 0..511 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn feature_fuzz_round_trip_bit_exact() {
        let mut rng = Rng::seed_from_u64(1234);
        let dim = 16;
        let mut table = FeatureTable::new(dim);
        for i in 0..10_000 {
            let row: Vec<f32> = (0..dim)
                .map(|_| f32::from_bits(rng.next_u64() as u32 & 0x7F7F_FFFF))
                .collect();
            table.insert(&format!("id{i:05}"), row).unwrap();
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("fuzz.inlgfeat");
        write_features(&table, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.len(), 10_000);
        for id in table.ids() {
            let a = table.get(id).unwrap();
            let b = back.get(id).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
