//! Training to a loss threshold, chunked held-out evaluation, loss matrices
//! and argmin attribution.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LanguageModel, ModelError, TokenId};
use crate::tensor::{AdamW, AdamWConfig, AdamWState, TensorError};
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens is shorter than {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("no result for eval author {eval_author}, model author {model_author}, seed {seed}")]
    MissingCombination { eval_author: String, model_author: String, seed: u64 },
    #[error("attribution needs at least 2 candidate models, got {0}")]
    TooFewCandidates(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training stopped by caller after epoch {0}")]
    Stopped(usize),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub loss_threshold: f64,
    pub max_epochs: usize,
    /// Held-out evaluation stride in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Held-out chunks scored per forward pass.
    pub eval_batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            batches_per_epoch: 40,
            batch_size: 16,
            seq_len: 1024,
            lr: opt.lr,
            loss_threshold: 3.0,
            max_epochs: 500,
            eval_every: 1,
            eval_batch: 4,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
        }
    }
}

impl TrainRunConfig {
    pub fn tokens_per_epoch(&self) -> usize {
        self.batches_per_epoch * self.batch_size * self.seq_len
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs is 0, no training would be performed");
        }
        if self.batches_per_epoch == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch counts must be positive");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean held-out loss per target author; empty on epochs that skip evaluation.
    pub heldout: BTreeMap<String, f64>,
}

/// RNG for one epoch's batch schedule, so a resumed run replays the same
/// windows an uninterrupted one would have drawn.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    rng_for(seed, &["epoch", &epoch.to_string()])
}

/// `batches_per_epoch` flat batches of `batch_size` windows, each window a
/// contiguous `seq_len` slice with a uniform start (with replacement).
pub fn make_epoch_batches(seq: &[TokenId], cfg: &TrainRunConfig, rng: &mut impl Rng) -> Result<Vec<Vec<TokenId>>> {
    if seq.len() < cfg.seq_len {
        return Err(TrainError::TooShort { len: seq.len(), needed: cfg.seq_len });
    }
    let max_start = seq.len() - cfg.seq_len;
    Ok((0..cfg.batches_per_epoch)
        .map(|_| {
            let mut batch = Vec::with_capacity(cfg.batch_size * cfg.seq_len);
            for _ in 0..cfg.batch_size {
                let s = rng.gen_range(0..=max_start);
                batch.extend_from_slice(&seq[s..s + cfg.seq_len]);
            }
            batch
        })
        .collect())
}

/// Consecutive non-overlapping chunks from offset 0; the remainder is dropped.
pub fn chunk_heldout(ids: &[TokenId], chunk_len: usize) -> Result<Vec<Vec<TokenId>>> {
    if chunk_len < 2 || ids.len() < chunk_len {
        return Err(TrainError::TooShort { len: ids.len(), needed: chunk_len.max(2) });
    }
    Ok(ids.chunks_exact(chunk_len).map(<[TokenId]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_chunk: Vec<f64>,
    pub mean: f64,
}

/// Per-chunk mean next-token loss and their unweighted mean.
pub fn eval_loss(model: &LanguageModel, chunks: &[Vec<TokenId>], eval_batch: usize) -> Result<EvalResult> {
    let mut per_chunk = Vec::with_capacity(chunks.len());
    let mut groups: Vec<&[Vec<TokenId>]> = Vec::new();
    // Equal-length chunks can share a forward pass.
    let mut i = 0;
    while i < chunks.len() {
        let mut j = i + 1;
        while j < chunks.len() && j - i < eval_batch.max(1) && chunks[j].len() == chunks[i].len() {
            j += 1;
        }
        groups.push(&chunks[i..j]);
        i = j;
    }
    for g in groups {
        let flat: Vec<TokenId> = g.iter().flatten().copied().collect();
        per_chunk.extend(model.sequence_losses(&flat, g.len())?);
    }
    let mean = if per_chunk.is_empty() { f64::NAN } else { per_chunk.iter().sum::<f64>() / per_chunk.len() as f64 };
    Ok(EvalResult { per_chunk, mean })
}

#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub author: String,
    pub chunks: Vec<Vec<TokenId>>,
}

/// State carried over from an interrupted run.
#[derive(Debug, Clone)]
pub struct Resume {
    pub records: Vec<EpochRecord>,
    pub optimizer: Option<AdamWState<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn epochs_trained(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.train_loss)
    }
}

/// Trains until the epoch-mean training loss is at most the threshold, or
/// `max_epochs` is reached (`converged == false`). `on_epoch` runs after
/// every epoch with the model, optimizer and records so far; it is where
/// callers checkpoint.
pub fn train_until_threshold(
    model: &LanguageModel,
    seq: &[TokenId],
    cfg: &TrainRunConfig,
    seed: u64,
    targets: &[EvalTarget],
    resume: Option<Resume>,
    mut on_epoch: impl FnMut(&LanguageModel, &AdamW<f32>, &[EpochRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if seq.len() < cfg.seq_len {
        return Err(TrainError::TooShort { len: seq.len(), needed: cfg.seq_len });
    }
    let mut opt = AdamW::new(model.parameters(), cfg.adamw());
    let mut records = Vec::new();
    if let Some(r) = resume {
        if let Some(state) = r.optimizer {
            opt.load_state(state)?;
        }
        records = r.records;
    }
    let reached = |r: &[EpochRecord]| r.last().is_some_and(|x| x.train_loss <= cfg.loss_threshold);
    while !reached(&records) && records.len() < cfg.max_epochs {
        let epoch = records.len() + 1;
        let batches = make_epoch_batches(seq, cfg, &mut epoch_rng(seed, epoch))?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let loss = match model.batch_loss(batch, cfg.batch_size) {
                Ok(l) => l,
                Err(ModelError::NonFiniteLoss(loss)) => return Err(TrainError::Diverged { epoch, batch: b, loss }),
                Err(e) => return Err(e.into()),
            };
            total += loss.item() as f64;
            loss.backward()?;
            opt.step()?;
            opt.zero_grad();
        }
        let train_loss = total / batches.len() as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, batch: batches.len(), loss: train_loss });
        }
        let done = train_loss <= cfg.loss_threshold || epoch == cfg.max_epochs;
        let mut heldout = BTreeMap::new();
        if done || epoch % cfg.eval_every.max(1) == 0 {
            for t in targets {
                heldout.insert(t.author.clone(), eval_loss(model, &t.chunks, cfg.eval_batch)?.mean);
            }
        }
        log::debug!("epoch {epoch}: train loss {train_loss:.4}");
        records.push(EpochRecord { epoch, train_loss, heldout });
        on_epoch(model, &opt, &records)?;
    }
    Ok(TrainOutcome { converged: reached(&records), records })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub mean: f64,
    pub n_chunks: usize,
}

/// `L[i][j][s]`: author `i`'s held-out text under author `j`'s model for seed `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub authors: Vec<String>,
    pub seeds: Vec<u64>,
    entries: Vec<Option<LossEntry>>,
}

impl LossMatrix {
    pub fn new(authors: Vec<String>, seeds: Vec<u64>) -> Self {
        let n = authors.len() * authors.len() * seeds.len();
        Self { authors, seeds, entries: vec![None; n] }
    }

    fn idx(&self, i: usize, j: usize, s: usize) -> usize {
        (i * self.authors.len() + j) * self.seeds.len() + s
    }

    pub fn set(&mut self, i: usize, j: usize, s: usize, entry: LossEntry) {
        let k = self.idx(i, j, s);
        self.entries[k] = Some(entry);
    }

    pub fn entry(&self, i: usize, j: usize, s: usize) -> Option<LossEntry> {
        self.entries[self.idx(i, j, s)]
    }

    pub fn get(&self, i: usize, j: usize, s: usize) -> Option<f64> {
        self.entry(i, j, s).map(|e| e.mean)
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    pub fn require_complete(&self) -> Result<()> {
        for i in 0..self.authors.len() {
            for j in 0..self.authors.len() {
                for s in 0..self.seeds.len() {
                    if self.entry(i, j, s).is_none() {
                        return Err(TrainError::MissingCombination {
                            eval_author: self.authors[i].clone(),
                            model_author: self.authors[j].clone(),
                            seed: self.seeds[s],
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Seed-averaged square matrix over the seeds present for each cell.
    pub fn seed_mean(&self) -> Vec<Vec<f64>> {
        let n = self.authors.len();
        let mut out = vec![vec![f64::NAN; n]; n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let vals: Vec<f64> = (0..self.seeds.len()).filter_map(|s| self.get(i, j, s)).collect();
                if !vals.is_empty() {
                    *cell = vals.iter().sum::<f64>() / vals.len() as f64;
                }
            }
        }
        out
    }
}

/// Evaluates model `(j, s)` on held-out chunks `(i, s)` for every cell;
/// cross-author evaluations pair seeds by index.
pub fn build_loss_matrix(
    authors: &[String],
    seeds: &[u64],
    models: &HashMap<(String, u64), LanguageModel>,
    heldout: &HashMap<(String, u64), Vec<Vec<TokenId>>>,
    eval_batch: usize,
) -> Result<LossMatrix> {
    let mut m = LossMatrix::new(authors.to_vec(), seeds.to_vec());
    for (s, &seed) in seeds.iter().enumerate() {
        for (j, model_author) in authors.iter().enumerate() {
            for (i, eval_author) in authors.iter().enumerate() {
                let missing = || TrainError::MissingCombination {
                    eval_author: eval_author.clone(),
                    model_author: model_author.clone(),
                    seed,
                };
                let model = models.get(&(model_author.clone(), seed)).ok_or_else(missing)?;
                let chunks = heldout.get(&(eval_author.clone(), seed)).ok_or_else(missing)?;
                let r = eval_loss(model, chunks, eval_batch)?;
                m.set(i, j, s, LossEntry { mean: r.mean, n_chunks: chunks.len() });
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// All minimizers; more than one means the result is ambiguous.
    pub winners: Vec<String>,
    pub losses: Vec<(String, f64)>,
}

impl Attribution {
    pub fn is_ambiguous(&self) -> bool {
        self.winners.len() > 1
    }
}

/// Argmin over per-model mean losses, reporting every tied minimizer.
pub fn attribute_from_losses(losses: Vec<(String, f64)>) -> Attribution {
    let min = losses.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    let winners = losses.iter().filter(|(_, l)| *l == min).map(|(a, _)| a.clone()).collect();
    Attribution { winners, losses }
}

pub fn attribute(
    ids: &[TokenId],
    chunk_len: usize,
    models: &[(String, &LanguageModel)],
    eval_batch: usize,
) -> Result<Attribution> {
    if models.len() < 2 {
        return Err(TrainError::TooFewCandidates(models.len()));
    }
    let chunks = chunk_heldout(ids, chunk_len)?;
    let mut losses = Vec::with_capacity(models.len());
    for (author, model) in models {
        losses.push((author.clone(), eval_loss(model, &chunks, eval_batch)?.mean));
    }
    Ok(attribute_from_losses(losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(v: usize, ctx: usize) -> LanguageModel {
        LanguageModel::init(ModelConfig { context_window: ctx, d_model: 16, n_layers: 1, n_heads: 2, vocab_size: v }, 3)
            .unwrap()
    }

    #[test]
    fn batches_cover_whole_sequence_when_tight() {
        let seq: Vec<TokenId> = (0..8).collect();
        let cfg = TrainRunConfig { batches_per_epoch: 3, batch_size: 2, seq_len: 8, ..Default::default() };
        let b = make_epoch_batches(&seq, &cfg, &mut epoch_rng(0, 1)).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x[..8] == seq[..] && x[8..] == seq[..]));
        assert!(make_epoch_batches(&seq[..7], &cfg, &mut epoch_rng(0, 1)).is_err());
    }

    #[test]
    fn default_tokens_per_epoch() {
        assert_eq!(TrainRunConfig::default().tokens_per_epoch(), 655_360);
    }

    #[test]
    fn batch_schedule_is_seeded() {
        let seq: Vec<TokenId> = (0..500).collect();
        let cfg = TrainRunConfig { batches_per_epoch: 4, batch_size: 3, seq_len: 16, ..Default::default() };
        let a = make_epoch_batches(&seq, &cfg, &mut epoch_rng(7, 2)).unwrap();
        assert_eq!(a, make_epoch_batches(&seq, &cfg, &mut epoch_rng(7, 2)).unwrap());
        assert_ne!(a, make_epoch_batches(&seq, &cfg, &mut epoch_rng(7, 3)).unwrap());
    }

    #[test]
    fn chunking() {
        let ids = vec![0; 2500];
        assert_eq!(chunk_heldout(&ids[..2048], 1024).unwrap().len(), 2);
        assert_eq!(chunk_heldout(&ids, 1024).unwrap().len(), 2);
        assert!(matches!(chunk_heldout(&ids[..1000], 1024), Err(TrainError::TooShort { .. })));
    }

    #[test]
    fn zero_epochs_rejected() {
        let m = tiny(8, 8);
        let cfg = TrainRunConfig { max_epochs: 0, seq_len: 4, ..Default::default() };
        let err = train_until_threshold(&m, &[0; 16], &cfg, 0, &[], None, |_, _, _| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::InvalidConfig(_)));
    }

    #[test]
    fn huge_threshold_stops_after_one_epoch() {
        let m = tiny(8, 8);
        let cfg = TrainRunConfig {
            batches_per_epoch: 2,
            batch_size: 2,
            seq_len: 8,
            loss_threshold: 1e9,
            ..Default::default()
        };
        let seq: Vec<TokenId> = (0..40).map(|i| i % 8).collect();
        let out = train_until_threshold(&m, &seq, &cfg, 0, &[], None, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.epochs_trained(), 1);
        assert!(out.converged);
    }

    #[test]
    fn eval_is_grouping_and_order_invariant() {
        let m = tiny(16, 8);
        let chunks: Vec<Vec<TokenId>> = (0..5).map(|k| (0..8).map(|i| (i * 3 + k) % 16).collect()).collect();
        let a = eval_loss(&m, &chunks, 1).unwrap();
        let b = eval_loss(&m, &chunks, 4).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-6);
        let mut rev = chunks.clone();
        rev.reverse();
        let c = eval_loss(&m, &rev, 2).unwrap();
        assert!((a.mean - c.mean).abs() < 1e-6);
        let single = eval_loss(&m, &chunks[..1], 1).unwrap();
        assert_eq!(single.mean, single.per_chunk[0]);
    }

    #[test]
    fn attribution_rules() {
        let a = attribute_from_losses(vec![("baum".into(), 4.2), ("thompson".into(), 3.9)]);
        assert_eq!(a.winners, ["thompson"]);
        let tie = attribute_from_losses(vec![("a".into(), 1.0), ("b".into(), 1.0)]);
        assert!(tie.is_ambiguous());
        assert_eq!(tie.winners, ["a", "b"]);
    }

    #[test]
    fn loss_matrix_reports_missing() {
        let mut m = LossMatrix::new(vec!["a".into(), "b".into()], vec![0]);
        m.set(0, 0, 0, LossEntry { mean: 1.0, n_chunks: 1 });
        assert!(!m.is_complete());
        assert!(matches!(m.require_complete(), Err(TrainError::MissingCombination { .. })));
    }
}
