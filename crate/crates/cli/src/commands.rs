use crate::config::RunConfig;
use fvp_core::checkpoint::{Checkpoint, TrainState};
use fvp_core::data::synth::{generate_synthetic_corpus, SynthSpec};
use fvp_core::data::{
    load_records, prepare_split, save_records, vocab_streams, Dataset, Split, Vocabulary,
    VOCAB_FILE,
};
use fvp_core::error::{Error, Result};
use fvp_core::eval::{evaluate, mask_sweep, write_report, write_sweep_csv};
use fvp_core::mcot::{annotate_corpus, HttpClient, LlmClient, MockClient, RetryPolicy};
use fvp_core::model::FvpModel;
use fvp_core::train::TrainSession;
use std::path::{Path, PathBuf};

pub fn cmd_synth_data(
    seed: u64,
    n: usize,
    out: &Path,
    vocab_size: usize,
    local_tokens: usize,
    vision_width: usize,
    split: Option<String>,
) -> Result<()> {
    let split = match split {
        None => None,
        Some(raw) => {
            let parts: Vec<usize> = raw
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::usage(format!("bad split component {:?}", p)))
                })
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(Error::usage("split must be train,valid,test counts"));
            }
            Some((parts[0], parts[1], parts[2]))
        }
    };
    let spec = SynthSpec {
        seed,
        n_records: n,
        vocab_size,
        local_count: local_tokens,
        vision_width,
        split,
    };
    let records = generate_synthetic_corpus(out, &spec)?;
    println!("seed = {}", seed);
    println!(
        "wrote {} records and {} feature files under {}",
        records.len(),
        records.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_prepare_vocab(train: &Path, out: &Path, min_count: usize) -> Result<()> {
    let records = if train.is_dir() {
        let dataset = Dataset::load(train)?;
        dataset
            .split(Split::Train)
            .into_iter()
            .cloned()
            .collect::<Vec<_>>()
    } else {
        load_records(train)?
    };
    if records.is_empty() {
        return Err(Error::data(format!(
            "{}: no training records to build a vocabulary from",
            train.display()
        )));
    }
    let refs: Vec<&fvp_core::data::MangaRecord> = records.iter().collect();
    let streams = vocab_streams(&refs);
    let slices: Vec<&[String]> = streams.iter().map(|s| s.as_slice()).collect();
    let vocab = Vocabulary::build(slices.iter().copied(), min_count)?;
    vocab.write_file(out)?;
    println!(
        "vocabulary: {} entries ({} content tokens) -> {}",
        vocab.len(),
        vocab.len() - fvp_core::data::vocab::NUM_SPECIALS as usize,
        out.display()
    );
    Ok(())
}

pub fn cmd_mcot_augment(
    input: &Path,
    out: &Path,
    client_kind: &str,
    config: &RunConfig,
) -> Result<()> {
    let records = load_records(input)?;
    let client: Box<dyn LlmClient> = match client_kind {
        "mock" => Box::new(MockClient),
        "http" => {
            let url = config
                .mcot_url
                .clone()
                .ok_or_else(|| Error::usage("http client needs [mcot] url or FVP_LLM_URL"))?;
            let model = config
                .mcot_model
                .clone()
                .unwrap_or_else(|| "default".to_string());
            Box::new(HttpClient::new(url, model)?)
        }
        other => {
            return Err(Error::usage(format!(
                "unknown client {:?}, expected mock or http",
                other
            )))
        }
    };
    let policy = RetryPolicy {
        max_attempts: config.mcot_max_attempts,
        ..RetryPolicy::default()
    };
    let (annotated, summary) =
        annotate_corpus(&records, client.as_ref(), config.mcot_concurrency, policy);
    save_records(out, &annotated)?;
    println!(
        "annotated {} -> {}: ok {}, failed {}, skipped {}",
        input.display(),
        out.display(),
        summary.ok,
        summary.failed,
        summary.skipped
    );
    if summary.failed > 0 {
        return Err(Error::data(format!(
            "{} records failed annotation",
            summary.failed
        )));
    }
    Ok(())
}

fn load_vocab(data: &Path, vocab_path: Option<&Path>) -> Result<Vocabulary> {
    let path: PathBuf = match vocab_path {
        Some(p) => p.to_path_buf(),
        None => data.join(VOCAB_FILE),
    };
    if !path.exists() {
        return Err(Error::usage(format!(
            "vocabulary {} not found; run prepare-vocab first",
            path.display()
        )));
    }
    Vocabulary::read_file(&path)
}

pub fn cmd_train(
    mut config: RunConfig,
    data: &Path,
    out: &Path,
    vocab_path: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let dataset = Dataset::load(data)?;
    let vocab = load_vocab(data, vocab_path)?;
    config.model.vocab_size = vocab.len();
    print!("{}", config.echo());

    let (train_set, adjusted) = prepare_split(
        &dataset,
        Split::Train,
        &vocab,
        config.use_mcot,
        config.model.local_tokens,
    )?;
    let (valid_set, _) = prepare_split(
        &dataset,
        Split::Valid,
        &vocab,
        config.use_mcot,
        config.model.local_tokens,
    )?;
    if adjusted > 0 {
        eprintln!(
            "warning: {} feature sets padded or truncated to {} local tokens",
            adjusted, config.model.local_tokens
        );
    }
    println!(
        "records: train {}, valid {} ({})",
        train_set.len(),
        valid_set.len(),
        data.display()
    );

    let mut model;
    let outcome = match resume {
        None => {
            model = FvpModel::new(config.model.clone(), config.train.seed)?;
            let mut session = TrainSession::fresh(&mut model, config.train.clone())?;
            session.run(&train_set, &valid_set, Some(out))?
        }
        Some(ck_path) => {
            let ck = Checkpoint::read(ck_path)?;
            if ck.config != config.model {
                return Err(Error::config(format!(
                    "resume: effective model configuration does not match checkpoint {}; \
                     rerun with the original config file",
                    ck_path.display()
                )));
            }
            model = FvpModel::new(ck.config.clone(), ck.train_state.seed)?;
            let mut session = TrainSession::resume(&mut model, config.train.clone(), &ck)?;
            session.run(&train_set, &valid_set, Some(out))?
        }
    };
    println!(
        "trained {} epochs, {} optimizer steps, final train loss {:.6}",
        outcome.epochs_run, outcome.steps, outcome.final_train_loss
    );
    if let Some(best) = outcome.best_valid_loss {
        println!("best selection loss {:.6}", best);
    }
    println!("checkpoints under {}", out.display());
    Ok(())
}

fn restore(checkpoint: &Path) -> Result<(FvpModel, TrainState)> {
    let ck = Checkpoint::read(checkpoint)?;
    let state = ck.train_state.clone();
    Ok((ck.restore_model()?, state))
}

fn checked_vocab(model: &FvpModel, data: &Path, vocab_path: Option<&Path>) -> Result<Vocabulary> {
    let vocab = load_vocab(data, vocab_path)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} entries but the checkpoint was trained with {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok(vocab)
}

pub fn cmd_evaluate(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    vocab_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    print!("{}", config.echo());
    let (model, _) = restore(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let vocab = checked_vocab(&model, data, vocab_path)?;
    let (records, _) = prepare_split(
        &dataset,
        split,
        &vocab,
        config.use_mcot,
        model.config.local_tokens,
    )?;
    if records.is_empty() {
        return Err(Error::data(format!("split {} is empty", split)));
    }
    let report = evaluate(&model, &records, &vocab, config.decode)?;
    println!("split = {}, records = {}", split, records.len());
    for score in &report.per_language {
        println!(
            "{:<4} BLEU = {:>6.2}  (records {}, bp {:.3})",
            score.language.to_string(),
            score.bleu.score,
            score.records,
            score.bleu.brevity_penalty
        );
    }
    println!("avg  BLEU = {:>6.2}", report.average);
    if let Some(path) = out {
        write_report(path, &report)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

pub fn cmd_complete(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    record_id: &str,
    vocab_path: Option<&Path>,
) -> Result<()> {
    eprint!("{}", config.echo());
    let (model, _) = restore(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let vocab = checked_vocab(&model, data, vocab_path)?;
    let record = dataset
        .record(record_id)
        .ok_or_else(|| Error::data(format!("record {:?} not found", record_id)))?;
    let raw = dataset.load_features(record)?;
    let (features, warned) = raw.fit_local_count(model.config.local_tokens);
    if warned {
        eprintln!(
            "warning: feature set adjusted to {} local tokens",
            model.config.local_tokens
        );
    }
    let src_ids = fvp_core::data::encode_source(record, &vocab, config.use_mcot);
    let memory = model.encode_memory(&src_ids, Some(&features))?;
    let scorer = fvp_core::decode::ModelScorer {
        model: &model,
        memory,
    };
    let outcome = fvp_core::decode::beam_search(
        &scorer,
        config.decode.beam,
        config.decode.alpha,
        config.decode.max_len,
    )?;
    let prediction = vocab.decode(outcome.best.completion(), true).join(" ");
    let source = record
        .source_dialogues
        .iter()
        .map(|d| d.join(" "))
        .collect::<Vec<_>>()
        .join(" | ");
    println!("SRC: {}", source);
    println!("PRE: {}", prediction);
    println!("TGT: {}", record.target.join(" "));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_mask_sweep(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    ratios_raw: &str,
    out_csv: &Path,
    vocab_path: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let ratios: Vec<f64> = ratios_raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::usage(format!("bad ratio {:?}", p)))
        })
        .collect::<Result<_>>()?;
    print!("{}", config.echo());
    let (model, _) = restore(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let vocab = checked_vocab(&model, data, vocab_path)?;
    let (records, _) = prepare_split(
        &dataset,
        split,
        &vocab,
        config.use_mcot,
        model.config.local_tokens,
    )?;
    if records.is_empty() {
        return Err(Error::data(format!("split {} is empty", split)));
    }
    println!("seed = {}", seed);
    let rows = mask_sweep(&model, &records, &vocab, &ratios, config.decode, seed)?;
    for row in &rows {
        println!(
            "{:<4} ratio {:>4.2} BLEU {:>6.2}",
            row.language.to_string(),
            row.ratio,
            row.bleu
        );
    }
    write_sweep_csv(out_csv, &rows)?;
    println!("csv -> {}", out_csv.display());
    Ok(())
}
