use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read, read_string, write_atomic, Experiment, Result, TaggerSpec, TokenizerSpec, TOOL_VERSION};
use crate::ablation::{all_specials, apply_mode, parse_tag_file, AblationMode, BuiltinTagger, StopList, Tagger};
use crate::corpus::{
    budget_from_lengths, choose_held_out, corpus_stats, make_sampling_plan, normalize, trim_lines, write_stats_csv,
    AuthorCorpus, Book, CorpusError, SamplingPlan, Stripper,
};
use crate::model::TokenId;
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::util::{derive_seed, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BookInfo {
    title: String,
    tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BudgetFile {
    tool_version: String,
    manifest_sha256: String,
    mode: AblationMode,
    budget: usize,
    authors: BTreeMap<String, Vec<BookInfo>>,
}

pub(crate) fn ids_to_bytes(ids: &[TokenId]) -> Vec<u8> {
    ids.iter().flat_map(|i| i.to_le_bytes()).collect()
}

pub(crate) fn ids_from_bytes(bytes: &[u8]) -> Vec<TokenId> {
    bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn tokenizer_dir(exp: &Experiment) -> PathBuf {
    exp.prepared_dir().join("tokenizer")
}

pub(crate) fn load_vocabulary(exp: &Experiment) -> Result<Vocabulary> {
    let dir = tokenizer_dir(exp);
    if !dir.join("vocab.json").is_file() {
        return Err(super::ExperimentError::MissingStage("prepare"));
    }
    let specials = all_specials();
    Ok(Vocabulary::load(&dir.join("vocab.json"), &dir.join("merges.txt"), &specials)?)
}

/// Reads, strips, trims and normalizes one book or special-evaluation text.
pub(crate) fn clean_text(raw: &str, stripper: Option<&Stripper>, head: usize, tail: usize, label: &str) -> Result<String> {
    let mut text = raw.to_string();
    if let Some(s) = stripper {
        let out = s.strip(raw)?;
        if let Some(w) = out.warning {
            log::warn!("{label}: {w}");
        }
        text = out.text;
    }
    Ok(normalize(&trim_lines(&text, head, tail)))
}

fn tagger_for(exp: &Experiment, author: &str, book: usize) -> Result<Tagger> {
    Ok(match &exp.manifest.pos_tagger {
        TaggerSpec::Builtin => Tagger::Builtin(BuiltinTagger::default()),
        TaggerSpec::External { dir } => {
            let path = dir.join(author).join(format!("{book}.tags"));
            Tagger::External(parse_tag_file(&read_string(&path)?)?)
        }
    })
}

/// Writes tokenizer, per-mode token ids, budgets and sampling plans.
/// Reruns on an unchanged manifest reproduce every file byte for byte.
pub fn prepare(exp: &Experiment) -> Result<BTreeMap<AblationMode, usize>> {
    let stripper = Stripper::new(&exp.corpus.strip)?;
    let mut intact: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for (author, books) in &exp.corpus.authors {
        if books.len() < 2 {
            return Err(CorpusError::Insufficient {
                author: author.clone(),
                reason: format!("{} book(s); at least 2 are required", books.len()),
            }
            .into());
        }
        let mut cleaned = Vec::with_capacity(books.len());
        for b in books {
            let path = exp.book_path(b);
            let raw = read_string(&path)?;
            let label = path.display().to_string();
            cleaned.push((b.title.clone(), clean_text(&raw, Some(&stripper), b.trim.head_lines, b.trim.tail_lines, &label)?));
        }
        intact.insert(author.clone(), cleaned);
    }

    let specials = all_specials();
    let vocab = match &exp.manifest.tokenizer {
        TokenizerSpec::Train { target_vocab } => {
            let joined: Vec<&str> = intact.values().flatten().map(|(_, t)| t.as_str()).collect();
            let mut v = train_bpe(&joined.join("\n"), *target_vocab);
            v.add_specials(&specials);
            v
        }
        TokenizerSpec::Files { vocab, merges } => Vocabulary::load(vocab, merges, &specials)?,
    };
    let tok_dir = tokenizer_dir(exp);
    let mut written: Vec<PathBuf> = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<()> {
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(tok_dir.join("vocab.json"), vocab.vocab_json().as_bytes())?;
    put(tok_dir.join("merges.txt"), vocab.merges_txt().as_bytes())?;
    put(tok_dir.join("specials.json"), serde_json::to_string_pretty(vocab.specials())?.as_bytes())?;
    log::info!("vocabulary: {} tokens", vocab.len());

    let stop = StopList::builtin();
    let mut budgets = BTreeMap::new();
    for &mode in &exp.manifest.modes {
        let dir = exp.mode_dir(mode);
        let mut corpora = Vec::new();
        for (author, books) in &intact {
            let mut out = Vec::with_capacity(books.len());
            for (idx, (title, text)) in books.iter().enumerate() {
                let tagger = if mode == AblationMode::PosOnly { tagger_for(exp, author, idx)? } else { Tagger::Builtin(BuiltinTagger::default()) };
                let view = apply_mode(text, mode, &stop, &tagger)?;
                let ids = vocab.encode(&view);
                put(dir.join(author).join(format!("{idx}.txt")), view.as_bytes())?;
                put(dir.join(author).join(format!("{idx}.ids")), &ids_to_bytes(&ids))?;
                out.push(Book { author_id: author.clone(), title: title.clone(), normalized_text: String::new(), token_ids: ids });
            }
            corpora.push(AuthorCorpus { author_id: author.clone(), books: out });
        }
        let lengths: Vec<(&str, Vec<usize>)> = corpora.iter().map(|c| (c.author_id.as_str(), c.lengths())).collect();
        let computed = budget_from_lengths(&lengths)?;
        let budget = exp.corpus.budget_override.unwrap_or(computed);
        log::info!("{mode}: token budget {budget} (computed {computed})");

        let mut stats = exp.csv_header_comment().into_bytes();
        write_stats_csv(&corpus_stats(&corpora), &mut stats).expect("writing to memory");
        put(dir.join("corpus_stats.csv"), &stats)?;

        for c in &corpora {
            for &seed in &exp.manifest.seeds {
                let held_out = choose_held_out(c.books.len(), seed, &c.author_id);
                let plan = make_sampling_plan(&c.lengths(), held_out, budget, derive_seed(seed, &["plan", &c.author_id]))
                    .map_err(|e| match e {
                        CorpusError::Insufficient { reason, .. } => {
                            CorpusError::Insufficient { author: c.author_id.clone(), reason }
                        }
                        other => other,
                    })?;
                put(plan_path(&dir, &c.author_id, seed), serde_json::to_string_pretty(&plan)?.as_bytes())?;
            }
        }
        let file = BudgetFile {
            tool_version: TOOL_VERSION.into(),
            manifest_sha256: exp.checksum.clone(),
            mode,
            budget,
            authors: corpora
                .iter()
                .map(|c| {
                    let books = c.books.iter().map(|b| BookInfo { title: b.title.clone(), tokens: b.token_ids.len() }).collect();
                    (c.author_id.clone(), books)
                })
                .collect(),
        };
        put(dir.join("budget.json"), serde_json::to_string_pretty(&file)?.as_bytes())?;
        budgets.insert(mode, budget);
    }

    let root = exp.prepared_dir();
    let mut sums = BTreeMap::new();
    for p in &written {
        let rel = p.strip_prefix(&root).unwrap_or(p).to_string_lossy().replace('\\', "/");
        sums.insert(rel, sha256_hex(&read(p)?));
    }
    let manifest = serde_json::json!({
        "tool_version": TOOL_VERSION,
        "manifest_sha256": exp.checksum,
        "files": sums,
    });
    write_atomic(&root.join("checksums.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(budgets)
}

fn plan_path(mode_dir: &Path, author: &str, seed: u64) -> PathBuf {
    mode_dir.join(author).join(format!("plan_seed{seed}.json"))
}

/// One mode's prepared corpus, loaded back from disk.
#[derive(Debug, Clone)]
pub struct PreparedMode {
    pub mode: AblationMode,
    pub budget: usize,
    /// Token ids per author, per book.
    pub books: BTreeMap<String, Vec<Vec<TokenId>>>,
    pub titles: BTreeMap<String, Vec<String>>,
}

impl PreparedMode {
    pub fn load(exp: &Experiment, mode: AblationMode) -> Result<Self> {
        let dir = exp.mode_dir(mode);
        let budget_path = dir.join("budget.json");
        if !budget_path.is_file() {
            return Err(super::ExperimentError::MissingStage("prepare"));
        }
        let file: BudgetFile = serde_json::from_slice(&read(&budget_path)?)?;
        let mut books = BTreeMap::new();
        let mut titles = BTreeMap::new();
        for (author, infos) in &file.authors {
            let mut ids = Vec::with_capacity(infos.len());
            for idx in 0..infos.len() {
                ids.push(ids_from_bytes(&read(&dir.join(author).join(format!("{idx}.ids")))?));
            }
            books.insert(author.clone(), ids);
            titles.insert(author.clone(), infos.iter().map(|b| b.title.clone()).collect());
        }
        Ok(Self { mode, budget: file.budget, books, titles })
    }

    pub fn plan(&self, exp: &Experiment, author: &str, seed: u64) -> Result<SamplingPlan> {
        let path = plan_path(&exp.mode_dir(self.mode), author, seed);
        if !path.is_file() {
            return Err(super::ExperimentError::MissingStage("prepare"));
        }
        Ok(serde_json::from_slice(&read(&path)?)?)
    }

    pub fn held_out(&self, exp: &Experiment, author: &str, seed: u64) -> Result<&[TokenId]> {
        let plan = self.plan(exp, author, seed)?;
        Ok(&self.books[author][plan.held_out_book])
    }
}
