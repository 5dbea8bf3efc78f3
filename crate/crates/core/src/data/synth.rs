//! Deterministic toy corpus for desk-scale runs. The target of every
//! record is a pure function of its source tokens and the image style
//! behind its feature file, so the vision path carries signal a model can
//! actually learn: records that share a source but differ in features
//! must differ in target.

use super::features::write_features;
use super::{
    save_records, Language, MangaRecord, SplitManifest, FEATURES_DIR, RECORDS_FILE, SPLITS_FILE,
};
use crate::error::{Error, Result};
use crate::fvpg::make_synthetic_features;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const STYLE_COUNT: u64 = 4;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_records: usize,
    pub vocab_size: usize,
    pub local_count: usize,
    pub vision_width: usize,
    /// (train, valid, test) counts; defaults to roughly 80/10/10.
    pub split: Option<(usize, usize, usize)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_records: 40,
            vocab_size: 24,
            local_count: 6,
            vision_width: 16,
            split: None,
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 step over seed xor salt
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn style_feature_seed(seed: u64, style: u64) -> u64 {
    mix(seed, 0x57_59_4c_45 + style)
}

fn word(i: usize) -> String {
    format!("w{:02}", i)
}

/// Target rule: four tokens mixing the source token indices with the
/// style id (four so 4-gram BLEU sees at least one full n-gram per
/// sentence). Distinct styles shift every output token, so equal sources
/// with different features get different targets.
fn target_tokens(source_indices: &[usize], style: u64, vocab_size: usize) -> Vec<String> {
    let k = vocab_size;
    let sum: usize = source_indices.iter().sum();
    let weighted: usize = source_indices
        .iter()
        .enumerate()
        .map(|(p, &w)| (p + 1) * w)
        .sum();
    let s = style as usize;
    vec![
        word((sum + 3 * s) % k),
        word((weighted + 5 * s) % k),
        word((sum + weighted + 7 * s) % k),
        word((2 * sum + weighted + 11 * s) % k),
    ]
}

/// Writes records.jsonl, splits.json and one feature file per record
/// under `root`. Records come in pairs sharing a source but carrying
/// different styles. Same spec, same bytes.
pub fn generate_synthetic_corpus(root: &Path, spec: &SynthSpec) -> Result<Vec<MangaRecord>> {
    if spec.n_records < 1 {
        return Err(Error::config("synthetic corpus: n_records must be >= 1"));
    }
    if spec.vocab_size < 8 {
        return Err(Error::config("synthetic corpus: vocab_size must be >= 8"));
    }
    std::fs::create_dir_all(root.join(FEATURES_DIR))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_records);

    let mut pair_index = 0u64;
    while records.len() < spec.n_records {
        // two short dialogues of 3..=4 tokens each
        let dialogue = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let len = rng.random_range(3..=4);
            (0..len)
                .map(|_| rng.random_range(0..spec.vocab_size))
                .collect()
        };
        let d1 = dialogue(&mut rng);
        let d2 = dialogue(&mut rng);
        let source_indices: Vec<usize> = d1.iter().chain(&d2).copied().collect();
        let lang = if pair_index.is_multiple_of(2) {
            Language::En
        } else {
            Language::Fr
        };
        let style_a = rng.random_range(0..STYLE_COUNT);
        let style_b = (style_a + rng.random_range(1..STYLE_COUNT)) % STYLE_COUNT;

        for style in [style_a, style_b] {
            if records.len() >= spec.n_records {
                break;
            }
            let id = format!("r{:04}", records.len());
            let feature_path = format!("{}/{}.mfv", FEATURES_DIR, id);
            let features = make_synthetic_features(
                style_feature_seed(spec.seed, style),
                spec.local_count,
                spec.vision_width,
            )?;
            write_features(&root.join(&feature_path), &features)?;
            records.push(MangaRecord {
                id,
                lang,
                source_dialogues: vec![
                    d1.iter().map(|&i| word(i)).collect(),
                    d2.iter().map(|&i| word(i)).collect(),
                ],
                target: target_tokens(&source_indices, style, spec.vocab_size),
                feature_path,
                mcot: None,
            });
        }
        pair_index += 1;
    }

    save_records(&root.join(RECORDS_FILE), &records)?;

    let (n_train, n_valid, n_test) = spec.split.unwrap_or_else(|| {
        let n = spec.n_records;
        let valid = (n / 10).max(if n > 2 { 1 } else { 0 });
        let test = valid;
        (n - valid - test, valid, test)
    });
    if n_train + n_valid + n_test != spec.n_records {
        return Err(Error::config(format!(
            "split {}+{}+{} does not cover {} records",
            n_train, n_valid, n_test, spec.n_records
        )));
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let manifest = SplitManifest {
        train: ids[..n_train].to_vec(),
        valid: ids[n_train..n_train + n_valid].to_vec(),
        test: ids[n_train + n_valid..].to_vec(),
    };
    manifest.write(&root.join(SPLITS_FILE))?;
    Ok(records)
}
