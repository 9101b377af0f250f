use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use parking_lot::Mutex;
use rayon::prelude::*;

use super::prepare::{clean_text, load_vocabulary, PreparedMode};
use super::{io_err, read, write_atomic, CellKey, CellStatus, Experiment, ExperimentError, Filter, Ledger, Result};
use crate::ablation::{apply_mode, AblationMode, BuiltinTagger, StopList, Tagger};
use crate::corpus::{build_training_sequence, Stripper};
use crate::model::{LanguageModel, ModelSidecar, TokenId};
use crate::tensor::Checkpoint;
use crate::train::{
    attribute_from_losses, chunk_heldout, eval_loss, train_until_threshold, Attribution, EpochRecord, EvalTarget,
    Resume, TrainError, TrainOutcome,
};
use crate::util::derive_seed;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub trained: Vec<CellKey>,
    pub skipped: Vec<CellKey>,
    /// Cells stopped by the session epoch limit; they resume next time.
    pub interrupted: Vec<CellKey>,
    pub failed: Vec<(CellKey, String)>,
    pub not_converged: Vec<CellKey>,
}

impl TrainSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failed.is_empty() && self.interrupted.is_empty()
    }
}

/// Seed for a cell's weight initialisation; shared across ablation modes.
fn init_seed(key: &CellKey) -> u64 {
    derive_seed(key.seed, &["init", &key.author])
}

/// Held-out chunks for every author under one seed.
fn heldout_targets(exp: &Experiment, prep: &PreparedMode, seed: u64) -> Result<Vec<EvalTarget>> {
    let chunk = exp.manifest.train.seq_len;
    prep.books
        .keys()
        .map(|author| {
            let ids = prep.held_out(exp, author, seed)?;
            Ok(EvalTarget { author: author.clone(), chunks: chunk_heldout(ids, chunk)? })
        })
        .collect()
}

/// Trains every pending cell matching `filter`, up to `jobs` at a time.
///
/// `epoch_limit` caps the epochs run per cell in this session; cells that
/// hit it keep their checkpoint and resume on the next call.
pub fn train(exp: &Experiment, filter: &Filter, force: bool, epoch_limit: Option<usize>) -> Result<TrainSummary> {
    let vocab = load_vocabulary(exp)?;
    let grid = exp.grid();
    let ledger_path = exp.ledger_path();
    let ledger = Mutex::new(Ledger::open(&ledger_path, &exp.checksum, &grid)?);
    ledger.lock().save(&ledger_path)?;

    let mut summary = TrainSummary::default();
    let mut todo = Vec::new();
    for key in grid.into_iter().filter(|k| filter.matches(k)) {
        let status = ledger.lock().status(&key);
        if !force && matches!(status, CellStatus::Trained | CellStatus::Evaluated) {
            summary.skipped.push(key);
        } else {
            todo.push(key);
        }
    }
    let mut prepared = BTreeMap::new();
    for key in &todo {
        if let std::collections::btree_map::Entry::Vacant(e) = prepared.entry(key.mode) {
            e.insert(PreparedMode::load(exp, key.mode)?);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.manifest.jobs.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<(CellKey, std::result::Result<TrainOutcome, String>)> = pool.install(|| {
        todo.par_iter()
            .map(|key| {
                let out = train_cell(exp, &prepared[&key.mode], key, vocab.len(), force, epoch_limit);
                let mut l = ledger.lock();
                match &out {
                    Ok(o) => {
                        let ck = exp.run_dir(key).join("checkpoint.bin");
                        l.update(key, force, |e| {
                            e.status = CellStatus::Trained;
                            e.checkpoint = Some(ck);
                            e.epochs = o.epochs_trained();
                            e.final_train_loss = Some(o.final_train_loss());
                            e.converged = Some(o.converged);
                            e.error = None;
                        });
                    }
                    Err(ExperimentError::Train(TrainError::Stopped(epoch))) => {
                        l.update(key, force, |e| {
                            e.status = CellStatus::Pending;
                            e.epochs = *epoch;
                        });
                    }
                    Err(err) => {
                        log::error!("{key}: {err}");
                        l.update(key, true, |e| {
                            e.status = CellStatus::Failed;
                            e.error = Some(err.to_string());
                        });
                    }
                }
                if let Err(e) = l.save(&ledger_path) {
                    log::error!("saving ledger: {e}");
                }
                (key.clone(), out.map_err(|e| e.to_string()))
            })
            .collect()
    });
    for (key, r) in results {
        match r {
            Ok(o) => {
                if !o.converged {
                    summary.not_converged.push(key.clone());
                }
                summary.trained.push(key);
            }
            Err(e) if e.starts_with("training stopped by caller") => summary.interrupted.push(key),
            Err(e) => summary.failed.push((key, e)),
        }
    }
    Ok(summary)
}

fn train_cell(
    exp: &Experiment,
    prep: &PreparedMode,
    key: &CellKey,
    vocab_size: usize,
    force: bool,
    epoch_limit: Option<usize>,
) -> Result<TrainOutcome> {
    let cfg = exp.manifest.train;
    let dir = exp.run_dir(key);
    let ck_path = dir.join("checkpoint.bin");
    if force && ck_path.exists() {
        fs::remove_file(&ck_path).map_err(io_err(&ck_path))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let plan = prep.plan(exp, &key.author, key.seed)?;
    let books: Vec<&[TokenId]> = prep.books[&key.author].iter().map(Vec::as_slice).collect();
    let seq = build_training_sequence(&plan, &books);
    let targets = heldout_targets(exp, prep, key.seed)?;
    let config = exp.model_config(vocab_size);
    let model = LanguageModel::<f32>::init(config, init_seed(key))?;

    let mut resume = None;
    if ck_path.is_file() {
        let ck = Checkpoint::<f32>::load(&ck_path)?;
        let optimizer = model.load_checkpoint(&ck)?;
        let records: Vec<EpochRecord> = serde_json::from_value(ck.meta["records"].clone())?;
        log::info!("{key}: resuming after epoch {}", records.len());
        resume = Some(Resume { records, optimizer });
    }
    let start_epoch = resume.as_ref().map_or(0, |r| r.records.len());
    let every = exp.manifest.checkpoint_every.max(1);
    let outcome = train_until_threshold(&model, &seq.token_ids, &cfg, init_seed(key), &targets, resume, |m, opt, records| {
        let last = records.last().expect("called after an epoch");
        let done = last.train_loss <= cfg.loss_threshold || records.len() >= cfg.max_epochs;
        let ran = records.len() - start_epoch;
        let stop = epoch_limit.is_some_and(|lim| ran >= lim) && !done;
        if done || stop || last.epoch % every == 0 {
            let meta = serde_json::json!({ "cell": key.to_string(), "records": records });
            m.to_checkpoint(Some(opt), last.epoch as u64, meta)
                .save(&ck_path)
                .map_err(TrainError::from)?;
        }
        if stop {
            return Err(TrainError::Stopped(last.epoch));
        }
        Ok(())
    })?;
    if !outcome.converged {
        log::warn!("{key}: no convergence within {} epochs", cfg.max_epochs);
    }
    write_epoch_records(exp, &dir.join("epoch_records.csv"), &outcome.records, prep.books.keys())?;
    let sidecar = ModelSidecar {
        config,
        author_id: key.author.clone(),
        seed: key.seed,
        mode: key.mode.to_string(),
        epochs_trained: outcome.epochs_trained(),
        final_train_loss: outcome.final_train_loss(),
        converged: outcome.converged,
    };
    write_atomic(&dir.join("model.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(outcome)
}

fn write_epoch_records<'a>(
    exp: &Experiment,
    path: &Path,
    records: &[EpochRecord],
    authors: impl Iterator<Item = &'a String>,
) -> Result<()> {
    let authors: Vec<&String> = authors.collect();
    let mut s = exp.csv_header_comment();
    s.push_str("epoch,train_loss");
    for a in &authors {
        let _ = write!(s, ",loss_vs_{a}");
    }
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{}", r.epoch, r.train_loss);
        for a in &authors {
            s.push(',');
            if let Some(v) = r.heldout.get(*a) {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Loads a trained cell's model and its epoch records.
pub(crate) fn load_cell(exp: &Experiment, key: &CellKey, vocab_size: usize) -> Result<(LanguageModel, Vec<EpochRecord>)> {
    let path = exp.run_dir(key).join("checkpoint.bin");
    if !path.is_file() {
        return Err(ExperimentError::MissingStage("train"));
    }
    let ck = Checkpoint::<f32>::from_bytes(&read(&path)?)?;
    let model = LanguageModel::init(exp.model_config(vocab_size), init_seed(key))?;
    model.load_checkpoint(&ck)?;
    let records = serde_json::from_value(ck.meta["records"].clone())?;
    Ok((model, records))
}

/// Token ids of an arbitrary text under one mode's preprocessing.
pub(crate) fn encode_text(exp: &Experiment, path: &Path, strip: bool, mode: AblationMode) -> Result<Vec<TokenId>> {
    let vocab = load_vocabulary(exp)?;
    let stripper = Stripper::new(&exp.corpus.strip)?;
    let raw = super::read_string(path)?;
    let text = clean_text(&raw, strip.then_some(&stripper), 0, 0, &path.display().to_string())?;
    let view = apply_mode(&text, mode, &StopList::builtin(), &Tagger::Builtin(BuiltinTagger::default()))?;
    Ok(vocab.encode(&view))
}

/// Attributes a text among candidate authors: per seed, and on the
/// seed-averaged losses.
pub fn attribute_text(
    exp: &Experiment,
    mode: AblationMode,
    path: &Path,
    strip: bool,
    candidates: &[String],
) -> Result<(Vec<(u64, Attribution)>, Attribution)> {
    if candidates.len() < 2 {
        return Err(TrainError::TooFewCandidates(candidates.len()).into());
    }
    let ids = encode_text(exp, path, strip, mode)?;
    let chunks = chunk_heldout(&ids, exp.manifest.train.seq_len)?;
    let vocab_size = load_vocabulary(exp)?.len();
    let mut per_seed = Vec::new();
    let mut sums = vec![0.0; candidates.len()];
    for &seed in &exp.manifest.seeds {
        let mut losses = Vec::with_capacity(candidates.len());
        for (c, author) in candidates.iter().enumerate() {
            let key = CellKey { mode, author: author.clone(), seed };
            let (model, _) = load_cell(exp, &key, vocab_size)?;
            let mean = eval_loss(&model, &chunks, exp.manifest.train.eval_batch)?.mean;
            sums[c] += mean;
            losses.push((author.clone(), mean));
        }
        per_seed.push((seed, attribute_from_losses(losses)));
    }
    let n = exp.manifest.seeds.len() as f64;
    let overall = attribute_from_losses(candidates.iter().cloned().zip(sums.into_iter().map(|s| s / n)).collect());
    Ok((per_seed, overall))
}
