//! Manifest-driven experiment grid: prepare corpora, train every
//! (mode, author, seed) cell, evaluate, and render reports.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! prepared/tokenizer/{vocab.json,merges.txt,specials.json}
//! prepared/<mode>/<author>/<book>.{txt,ids}    normalized text and u32 LE token ids
//! prepared/<mode>/<author>/plan_seed<k>.json
//! prepared/<mode>/{budget.json,corpus_stats.csv}
//! prepared/checksums.json
//! runs/<mode>/<author>/<seed>/{checkpoint.bin,model.json,epoch_records.csv}
//! ledger.json
//! results/<mode>/{loss_matrix.csv,table1.csv,t_curves.csv,normalized_loss.csv,
//!                 distances.csv,mds.csv,attribution_report.csv,summary.json}
//! figures/<mode>/*.svg
//! ```

mod evaluate;
mod ledger;
mod prepare;
mod report;
mod run;
mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ablation::AblationMode;
use crate::corpus::StripConfig;
use crate::distance::{CorrTransform, Correlation};
use crate::model::ModelConfig;
use crate::train::TrainRunConfig;
use crate::util::sha256_hex;

pub use evaluate::{accuracy, evaluate, load_results, min_margin, overall_test, table1, Accuracy, EvalSummary, MdsSummary, ModeResults, SpecialResult, Table1Row};
pub use ledger::{CellKey, CellStatus, Ledger, LedgerEntry};
pub use prepare::{prepare, PreparedMode};
pub use report::report;
pub use run::{attribute_text, train, TrainSummary};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} has not been run yet")]
    MissingStage(&'static str),
    #[error("bad filter {0:?}; expected comma-separated key=value with keys mode, author, seed")]
    Filter(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Ablation(#[from] crate::ablation::AblationError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error(transparent)]
    Distance(#[from] crate::distance::DistanceError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub(crate) fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a sibling temp file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Trim {
    pub head_lines: usize,
    pub tail_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookEntry {
    pub title: String,
    pub path: PathBuf,
    #[serde(default)]
    pub trim: Trim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub authors: BTreeMap<String, Vec<BookEntry>>,
    #[serde(default)]
    pub budget_override: Option<usize>,
    #[serde(default)]
    pub strip: StripConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOverrides {
    pub context_window: Option<usize>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, vocab_size: usize) -> ModelConfig {
        let base = ModelConfig::full_scale(vocab_size);
        ModelConfig {
            context_window: self.context_window.unwrap_or(base.context_window),
            d_model: self.d_model.unwrap_or(base.d_model),
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    /// BPE trained on the intact training books.
    Train { target_vocab: usize },
    /// Published GPT-2 style files.
    Files { vocab: PathBuf, merges: PathBuf },
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self::Train { target_vocab: 4096 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaggerSpec {
    #[default]
    Builtin,
    /// Directory holding `<author>/<book index>.tags` files.
    External { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialEvaluation {
    pub name: String,
    pub text: PathBuf,
    pub candidates: Vec<String>,
    /// Apply Gutenberg stripping before normalizing.
    #[serde(default = "yes")]
    pub strip: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdsInput {
    #[default]
    Distance,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_level: f64,
    pub correlation: Correlation,
    pub corr_transform: CorrTransform,
    pub mds_input: MdsInput,
    pub mds_dim: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            bootstrap_resamples: 10_000,
            bootstrap_level: 0.95,
            correlation: Correlation::Pearson,
            corr_transform: CorrTransform::OneMinusR,
            mds_input: MdsInput::Distance,
            mds_dim: 3,
        }
    }
}

fn default_modes() -> Vec<AblationMode> {
    vec![AblationMode::Intact]
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub corpus: PathBuf,
    #[serde(default = "default_modes")]
    pub modes: Vec<AblationMode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainRunConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub jobs: usize,
    /// Checkpoint stride in epochs; the final epoch is always saved.
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub special_evaluations: Vec<SpecialEvaluation>,
    #[serde(default)]
    pub pos_tagger: TaggerSpec,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// A parsed experiment with paths resolved against the manifest directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub manifest: ExperimentManifest,
    pub corpus: CorpusManifest,
    /// Directory of the corpus manifest; book paths are relative to it.
    pub corpus_dir: PathBuf,
    /// SHA-256 over the experiment and corpus manifest bytes.
    pub checksum: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let bad = |msg: String| ExperimentError::Manifest { path: path.to_path_buf(), msg };
        let mut manifest: ExperimentManifest = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.corpus = resolve(base, &manifest.corpus);
        manifest.output_dir = resolve(base, &manifest.output_dir);
        if let TokenizerSpec::Files { vocab, merges } = &mut manifest.tokenizer {
            *vocab = resolve(base, vocab);
            *merges = resolve(base, merges);
        }
        if let TaggerSpec::External { dir } = &mut manifest.pos_tagger {
            *dir = resolve(base, dir);
        }
        for s in &mut manifest.special_evaluations {
            s.text = resolve(base, &s.text);
        }
        let corpus_bytes = read(&manifest.corpus)?;
        let corpus: CorpusManifest = serde_json::from_slice(&corpus_bytes).map_err(|e| ExperimentError::Manifest {
            path: manifest.corpus.clone(),
            msg: e.to_string(),
        })?;
        let mut all = bytes.clone();
        all.extend_from_slice(&corpus_bytes);
        let corpus_dir = manifest.corpus.parent().unwrap_or(Path::new(".")).to_path_buf();
        let exp = Self { manifest, corpus, corpus_dir, checksum: sha256_hex(&all) };
        exp.validate().map_err(bad)?;
        Ok(exp)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let m = &self.manifest;
        if m.seeds.is_empty() {
            return Err("seeds must be nonempty".into());
        }
        if m.modes.is_empty() {
            return Err("modes must be nonempty".into());
        }
        if self.corpus.authors.is_empty() {
            return Err("corpus manifest lists no authors".into());
        }
        for books in self.corpus.authors.values() {
            for b in books {
                let p = self.book_path(b);
                if !p.is_file() {
                    return Err(format!("book file {} does not exist", p.display()));
                }
            }
        }
        for s in &m.special_evaluations {
            if !s.text.is_file() {
                return Err(format!("special evaluation text {} does not exist", s.text.display()));
            }
            if let Some(c) = s.candidates.iter().find(|c| !self.corpus.authors.contains_key(*c)) {
                return Err(format!("special evaluation {} names unknown author {c}", s.name));
            }
        }
        if m.train.seq_len > self.model_config(usize::MAX).context_window {
            return Err("train.seq_len exceeds the model context window".into());
        }
        Ok(())
    }

    pub fn book_path(&self, b: &BookEntry) -> PathBuf {
        resolve(&self.corpus_dir, &b.path)
    }

    pub fn authors(&self) -> Vec<String> {
        self.corpus.authors.keys().cloned().collect()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        self.manifest.model.apply(vocab_size)
    }

    pub fn out(&self) -> &Path {
        &self.manifest.output_dir
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.out().join("prepared")
    }

    pub fn mode_dir(&self, mode: AblationMode) -> PathBuf {
        self.prepared_dir().join(mode.as_str())
    }

    pub fn run_dir(&self, key: &CellKey) -> PathBuf {
        self.out().join("runs").join(key.mode.as_str()).join(&key.author).join(key.seed.to_string())
    }

    pub fn results_dir(&self, mode: AblationMode) -> PathBuf {
        self.out().join("results").join(mode.as_str())
    }

    pub fn figures_dir(&self, mode: AblationMode) -> PathBuf {
        self.out().join("figures").join(mode.as_str())
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.out().join("ledger.json")
    }

    /// First line of every CSV output.
    pub fn csv_header_comment(&self) -> String {
        format!("# predcomp {TOOL_VERSION} manifest={}\n", self.checksum)
    }

    pub fn grid(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &mode in &self.manifest.modes {
            for author in self.corpus.authors.keys() {
                for &seed in &self.manifest.seeds {
                    cells.push(CellKey { mode, author: author.clone(), seed });
                }
            }
        }
        cells
    }
}

/// Grid filter such as `author=baum,seed=0`; empty matches everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filter {
    pub modes: Vec<AblationMode>,
    pub authors: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Filter {
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| ExperimentError::Filter(s.into()))?;
            match k.trim() {
                "mode" => f.modes.push(v.trim().parse().map_err(|_| ExperimentError::Filter(s.into()))?),
                "author" => f.authors.push(v.trim().to_string()),
                "seed" => f.seeds.push(v.trim().parse().map_err(|_| ExperimentError::Filter(s.into()))?),
                _ => return Err(ExperimentError::Filter(s.into())),
            }
        }
        Ok(f)
    }

    pub fn with_mode(mut self, mode: Option<AblationMode>) -> Self {
        self.modes.extend(mode);
        self
    }

    pub fn matches(&self, key: &CellKey) -> bool {
        (self.modes.is_empty() || self.modes.contains(&key.mode))
            && (self.authors.is_empty() || self.authors.contains(&key.author))
            && (self.seeds.is_empty() || self.seeds.contains(&key.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_semantics() {
        let f = Filter::parse("author=baum,seed=0").unwrap();
        let key = |a: &str, s| CellKey { mode: AblationMode::Intact, author: a.into(), seed: s };
        assert!(f.matches(&key("baum", 0)));
        assert!(!f.matches(&key("baum", 1)));
        assert!(!f.matches(&key("twain", 0)));
        assert!(Filter::parse("").unwrap().matches(&key("x", 9)));
        assert!(Filter::parse("colour=red").is_err());
        assert!(Filter::parse("seed=x").is_err());
    }
}
