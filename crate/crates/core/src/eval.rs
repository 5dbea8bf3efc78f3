//! Dataset evaluation: beam-search generation, per-language and average
//! BLEU in the En/Fr/Avg layout, a line-delimited report, and the
//! masking-ratio sweep.

use crate::bleu::{bleu_corpus, BleuReport};
use crate::data::vocab::{Vocabulary, MASK_ID};
use crate::data::{Language, PreparedRecord};
use crate::decode::{beam_search, ModelScorer};
use crate::error::{Error, Result};
use crate::model::FvpModel;
use crate::train::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 5,
            alpha: 1.0,
            max_len: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalLine {
    pub record_id: String,
    pub language: Language,
    pub hypothesis: String,
    pub reference: String,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct LanguageScore {
    pub language: Language,
    pub records: usize,
    pub bleu: BleuReport,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub lines: Vec<EvalLine>,
    pub per_language: Vec<LanguageScore>,
    /// Mean over the per-language scores.
    pub average: f64,
    pub overall: BleuReport,
}

fn strip_specials(ids: &[u32]) -> Vec<u32> {
    ids.iter()
        .copied()
        .filter(|&id| !Vocabulary::is_special(id))
        .collect()
}

/// Decodes every record with beam search and scores token-id BLEU per
/// language plus the overall corpus. Records are processed in input
/// order; evaluation is deterministic.
pub fn evaluate(
    model: &FvpModel,
    records: &[PreparedRecord],
    vocab: &Vocabulary,
    opts: DecodeOptions,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::usage("evaluate: no records"));
    }
    let mut lines = Vec::with_capacity(records.len());
    let mut pairs: Vec<(Language, Vec<u32>, Vec<u32>)> = Vec::with_capacity(records.len());
    for record in records {
        let memory = model.encode_memory(&record.src_ids, Some(&record.features))?;
        let scorer = ModelScorer { model, memory };
        let outcome = beam_search(&scorer, opts.beam, opts.alpha, opts.max_len)?;
        let hyp_ids = strip_specials(outcome.best.completion());
        let ref_ids = strip_specials(&record.tgt_ids);
        lines.push(EvalLine {
            record_id: record.id.clone(),
            language: record.lang,
            hypothesis: vocab.decode(&hyp_ids, false).join(" "),
            reference: vocab.decode(&ref_ids, false).join(" "),
            hyp_len: hyp_ids.len(),
            ref_len: ref_ids.len(),
            log_prob: outcome.best.log_prob,
        });
        pairs.push((record.lang, hyp_ids, ref_ids));
    }

    let mut per_language = Vec::new();
    for lang in Language::ALL {
        let hyp: Vec<Vec<u32>> = pairs
            .iter()
            .filter(|(l, _, _)| *l == lang)
            .map(|(_, h, _)| h.clone())
            .collect();
        if hyp.is_empty() {
            continue;
        }
        let refs: Vec<Vec<u32>> = pairs
            .iter()
            .filter(|(l, _, _)| *l == lang)
            .map(|(_, _, r)| r.clone())
            .collect();
        per_language.push(LanguageScore {
            language: lang,
            records: hyp.len(),
            bleu: bleu_corpus(&hyp, &refs)?,
        });
    }
    let average =
        per_language.iter().map(|s| s.bleu.score).sum::<f64>() / per_language.len().max(1) as f64;
    let all_hyp: Vec<Vec<u32>> = pairs.iter().map(|(_, h, _)| h.clone()).collect();
    let all_ref: Vec<Vec<u32>> = pairs.iter().map(|(_, _, r)| r.clone()).collect();
    let overall = bleu_corpus(&all_hyp, &all_ref)?;

    Ok(EvalReport {
        lines,
        per_language,
        average,
        overall,
    })
}

/// Line-delimited report: one JSON object per record, then a summary
/// object with per-language and average scores.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in &report.lines {
        writeln!(
            out,
            "{}",
            serde_json::to_string(line).map_err(|e| Error::data(e.to_string()))?
        )?;
    }
    let summary = serde_json::json!({
        "summary": {
            "languages": report.per_language.iter().map(|s| {
                serde_json::json!({
                    "language": s.language.to_string(),
                    "records": s.records,
                    "bleu": s.bleu.score,
                    "precisions": s.bleu.precisions,
                    "brevity_penalty": s.bleu.brevity_penalty,
                })
            }).collect::<Vec<_>>(),
            "average": report.average,
            "overall_bleu": report.overall.score,
        }
    });
    writeln!(out, "{}", summary)?;
    out.flush()?;
    Ok(())
}

/// Replaces round(ratio * n) of the non-special source tokens with the
/// mask token, n counting only non-special positions. Special tokens are
/// never touched.
pub fn apply_source_mask(src_ids: &[u32], ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!(
            "mask ratio {} outside [0, 1]",
            ratio
        )));
    }
    let maskable: Vec<usize> = src_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| !Vocabulary::is_special(id))
        .map(|(i, _)| i)
        .collect();
    let k = (ratio * maskable.len() as f64).round() as usize;
    let mut order = maskable;
    order.shuffle(rng);
    let mut out = src_ids.to_vec();
    for &pos in order.iter().take(k) {
        out[pos] = MASK_ID;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub language: Language,
    pub ratio: f64,
    pub bleu: f64,
}

/// Evaluates the model under increasing source masking. Ratio 0 is plain
/// evaluation; every run derives its masks from `seed`, so sweeps are
/// reproducible to the bit.
pub fn mask_sweep(
    model: &FvpModel,
    records: &[PreparedRecord],
    vocab: &Vocabulary,
    ratios: &[f64],
    opts: DecodeOptions,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(Error::usage("mask sweep: no ratios"));
    }
    let mut rows = Vec::new();
    for (ri, &ratio) in ratios.iter().enumerate() {
        let mut masked = Vec::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            let mut record = record.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ri as u64, i as u64));
            record.src_ids = apply_source_mask(&record.src_ids, ratio, &mut rng)?;
            masked.push(record);
        }
        let report = evaluate(model, &masked, vocab, opts)?;
        for lang_score in &report.per_language {
            rows.push(SweepRow {
                language: lang_score.language,
                ratio,
                bleu: lang_score.bleu.score,
            });
        }
    }
    Ok(rows)
}

/// CSV with a header and one row per (language, ratio).
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("language,ratio,bleu\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.language, row.ratio, row.bleu));
    }
    std::fs::write(path, out)?;
    Ok(())
}
