//! Dataset records, splits and encoding.
//!
//! Records live in a line-delimited UTF-8 file (`records.jsonl`) next to
//! a `splits.json` manifest and a `features/` directory of binary feature
//! files; feature paths inside records are relative to the dataset root.

pub mod features;
pub mod synth;
pub mod vocab;

pub use vocab::{tokenize, Vocabulary};

use crate::error::{Error, Result};
use crate::fvpg::VisualFeatureSet;
use crate::mcot::McotAnnotation;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const FEATURES_DIR: &str = "features";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Fr,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::En, Language::Fr];
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::En => write!(f, "en"),
            Language::Fr => write!(f, "fr"),
        }
    }
}

impl std::str::FromStr for Language {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(Language::En),
            "fr" => Ok(Language::Fr),
            other => Err(Error::data(format!("unknown language tag {:?}", other))),
        }
    }
}

/// One story sample: the remaining dialogues as source, the held-out
/// sentence as target, a feature-file reference and an optional
/// chain-of-thought annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MangaRecord {
    pub id: String,
    pub lang: Language,
    pub source_dialogues: Vec<Vec<String>>,
    pub target: Vec<String>,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcot: Option<McotAnnotation>,
}

impl MangaRecord {
    fn validate(&self, line: usize) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::data(format!("line {}: empty record id", line)));
        }
        if self.source_dialogues.is_empty() {
            return Err(Error::data(format!(
                "line {}: record {} has no source dialogues",
                line, self.id
            )));
        }
        if self.target.is_empty() {
            return Err(Error::data(format!(
                "line {}: record {} has an empty target",
                line, self.id
            )));
        }
        Ok(())
    }
}

/// Parses a line-delimited record file. Errors carry the line number.
pub fn load_records(path: &Path) -> Result<Vec<MangaRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let record: MangaRecord = serde_json::from_str(raw)
            .map_err(|e| Error::data(format!("{} line {}: {}", path.display(), i + 1, e)))?;
        record.validate(i + 1)?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[MangaRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::data(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {}", path.display(), e)))
    }
}

/// A dataset directory loaded into memory. Feature files are validated to
/// exist at load time; their contents are read on demand.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<MangaRecord>,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let records = load_records(&root.join(RECORDS_FILE))?;
        for (i, r) in records.iter().enumerate() {
            let fp = root.join(&r.feature_path);
            if !fp.exists() {
                return Err(Error::data(format!(
                    "line {}: record {} references missing feature file {}",
                    i + 1,
                    r.id,
                    fp.display()
                )));
            }
        }
        let manifest = SplitManifest::read(&root.join(SPLITS_FILE))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            records,
            manifest,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&MangaRecord> {
        let ids = self.manifest.ids(split);
        self.records
            .iter()
            .filter(|r| ids.contains(&r.id))
            .collect()
    }

    pub fn record(&self, id: &str) -> Option<&MangaRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn load_features(&self, record: &MangaRecord) -> Result<VisualFeatureSet> {
        features::read_features(&self.root.join(&record.feature_path))
    }
}

/// Source encoding: dialogues joined with separator tokens, bracketed by
/// begin/end tokens. With `use_mcot` and an annotation present the three
/// hop answers are appended, each behind its own separator, so disabling
/// the flag reproduces the unaugmented sequence exactly.
pub fn encode_source(record: &MangaRecord, vocab: &Vocabulary, use_mcot: bool) -> Vec<u32> {
    let mut ids = vec![vocab::BOS_ID];
    for (i, dialogue) in record.source_dialogues.iter().enumerate() {
        if i > 0 {
            ids.push(vocab::SEP_ID);
        }
        ids.extend(vocab.encode(dialogue));
    }
    if use_mcot {
        if let Some(annotation) = &record.mcot {
            for field in [&annotation.theme, &annotation.opinion, &annotation.future] {
                ids.push(vocab::SEP_ID);
                ids.extend(vocab.encode(&tokenize(field)));
            }
        }
    }
    ids.push(vocab::EOS_ID);
    ids
}

/// Target tokens as ids, without begin/end framing; the model adds those.
pub fn encode_target(record: &MangaRecord, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(&record.target)
}

/// A record encoded and ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub id: String,
    pub lang: Language,
    pub src_ids: Vec<u32>,
    pub tgt_ids: Vec<u32>,
    pub features: VisualFeatureSet,
}

impl PreparedRecord {
    /// Source plus target tokens, the batching currency.
    pub fn token_count(&self) -> usize {
        self.src_ids.len() + self.tgt_ids.len()
    }
}

/// Encodes a split, loading features and fitting them to the configured
/// local count. Returns the records ordered by id together with the
/// number of feature sets that had to be padded or truncated.
pub fn prepare_split(
    dataset: &Dataset,
    split: Split,
    vocab: &Vocabulary,
    use_mcot: bool,
    local_count: usize,
) -> Result<(Vec<PreparedRecord>, usize)> {
    let mut records = dataset.split(split);
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut prepared = Vec::with_capacity(records.len());
    let mut adjusted = 0;
    for r in records {
        let raw = dataset.load_features(r)?;
        let (features, warned) = raw.fit_local_count(local_count);
        if warned {
            adjusted += 1;
        }
        prepared.push(PreparedRecord {
            id: r.id.clone(),
            lang: r.lang,
            src_ids: encode_source(r, vocab, use_mcot),
            tgt_ids: encode_target(r, vocab),
            features,
        });
    }
    Ok((prepared, adjusted))
}

/// Vocabulary text streams for a set of records: dialogues, targets and
/// any annotation fields.
pub fn vocab_streams(records: &[&MangaRecord]) -> Vec<Vec<String>> {
    let mut streams = Vec::new();
    for r in records {
        for d in &r.source_dialogues {
            streams.push(d.clone());
        }
        streams.push(r.target.clone());
        if let Some(a) = &r.mcot {
            for field in [&a.theme, &a.opinion, &a.future] {
                streams.push(tokenize(field));
            }
        }
    }
    streams
}
