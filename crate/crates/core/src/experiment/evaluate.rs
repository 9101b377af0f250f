use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::prepare::{load_vocabulary, PreparedMode};
use super::run::{attribute_text, load_cell};
use super::{
    read, read_string, write_atomic, CellKey, CellStatus, Experiment, ExperimentError, Filter, Ledger, MdsInput,
    Result, TOOL_VERSION,
};
use crate::ablation::AblationMode;
use crate::distance::{mds_embed, normalize_loss, row_corr_dissimilarity, stylometric_distance, Matrix};
use crate::model::LanguageModel;
use crate::stats::{one_sample_t, t_threshold, welch_t, TTestResult};
use crate::train::{chunk_heldout, eval_loss, EpochRecord, LossEntry, LossMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub n_same: usize,
    pub n_other: usize,
    /// `None` when either sample is too small or has zero variance.
    pub test: Option<TTestResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Held-out texts whose every candidate model was evaluated.
    pub texts: usize,
    pub correct: usize,
    /// Texts with more than one minimizing model; never counted as correct.
    pub ambiguous: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsSummary {
    pub input: MdsInput,
    pub coords: Matrix,
    pub stress: f64,
    pub effective_dim: usize,
    /// Negative dissimilarities set to zero before embedding.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialResult {
    pub name: String,
    pub candidates: Vec<String>,
    /// Minimizers of the seed-averaged losses.
    pub winners: Vec<String>,
    pub ambiguous: bool,
    pub mean_losses: Vec<(String, f64)>,
    pub per_seed_winners: Vec<(u64, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tool_version: String,
    pub manifest_sha256: String,
    pub mode: AblationMode,
    pub authors: Vec<String>,
    pub seeds: Vec<u64>,
    pub missing_cells: Vec<String>,
    pub accuracy: Accuracy,
    /// Smallest `L[i][j][s] − L[i][i][s]` over `j ≠ i`.
    pub min_margin: Option<f64>,
    pub table1: Vec<Table1Row>,
    /// One-sample test over seeds of the author-averaged other-minus-same gap.
    pub overall: Option<TTestResult>,
    pub tails: String,
    pub pairing: String,
    pub mean_loss: Option<Matrix>,
    pub normalized_loss: Option<Matrix>,
    pub distances: Option<Matrix>,
    pub mds: Option<MdsSummary>,
    pub special: Vec<SpecialResult>,
    pub notes: Vec<String>,
}

/// Everything the report stage needs for one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeResults {
    pub summary: EvalSummary,
    /// Epoch records keyed by (author, seed).
    pub records: BTreeMap<(String, u64), Vec<EpochRecord>>,
}

/// Same-author losses `L[j][j][s]` against pooled other-author losses
/// `L[i][j][s]`, `i ≠ j`, per model author `j`.
pub fn table1(m: &LossMatrix) -> Vec<Table1Row> {
    let n = m.authors.len();
    (0..n)
        .map(|j| {
            let same: Vec<f64> = (0..m.seeds.len()).filter_map(|s| m.get(j, j, s)).collect();
            let other: Vec<f64> =
                (0..n).filter(|&i| i != j).flat_map(|i| (0..m.seeds.len()).filter_map(move |s| m.get(i, j, s))).collect();
            Table1Row {
                model: m.authors[j].clone(),
                n_same: same.len(),
                n_other: other.len(),
                test: welch_t(&other, &same).ok(),
            }
        })
        .collect()
}

/// Per seed, the mean over model authors of (mean other − same); `None`
/// for seeds with any gap.
fn seed_gaps(n: usize, n_seeds: usize, get: impl Fn(usize, usize, usize) -> Option<f64>) -> Vec<f64> {
    (0..n_seeds)
        .filter_map(|s| {
            let mut total = 0.0;
            for j in 0..n {
                let same = get(j, j, s)?;
                let mut other = 0.0;
                for i in (0..n).filter(|&i| i != j) {
                    other += get(i, j, s)?;
                }
                total += other / (n - 1) as f64 - same;
            }
            Some(total / n as f64)
        })
        .collect()
}

pub fn overall_test(m: &LossMatrix) -> Option<TTestResult> {
    if m.authors.len() < 2 {
        return None;
    }
    one_sample_t(&seed_gaps(m.authors.len(), m.seeds.len(), |i, j, s| m.get(i, j, s)), 0.0).ok()
}

/// Argmin attribution of every held-out text `(i, s)` over the models of seed `s`.
pub fn accuracy(m: &LossMatrix) -> Accuracy {
    let n = m.authors.len();
    let (mut texts, mut correct, mut ambiguous) = (0, 0, 0);
    for i in 0..n {
        for s in 0..m.seeds.len() {
            let Some(losses) = (0..n).map(|j| m.get(i, j, s)).collect::<Option<Vec<f64>>>() else { continue };
            texts += 1;
            let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
            let winners: Vec<usize> = (0..n).filter(|&j| losses[j] == min).collect();
            if winners.len() > 1 {
                ambiguous += 1;
            } else if winners[0] == i {
                correct += 1;
            }
        }
    }
    let accuracy = (texts > 0).then(|| correct as f64 / texts as f64);
    Accuracy { texts, correct, ambiguous, accuracy }
}

pub fn min_margin(m: &LossMatrix) -> Option<f64> {
    let n = m.authors.len();
    let mut out: Option<f64> = None;
    for i in 0..n {
        for s in 0..m.seeds.len() {
            let Some(own) = m.get(i, i, s) else { continue };
            for j in (0..n).filter(|&j| j != i) {
                if let Some(l) = m.get(i, j, s) {
                    let d = l - own;
                    out = Some(out.map_or(d, |o| o.min(d)));
                }
            }
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn matrix_csv(header: &str, authors: &[String], m: &Matrix) -> String {
    let mut s = header.to_string();
    s.push_str("author");
    for a in authors {
        let _ = write!(s, ",{a}");
    }
    s.push('\n');
    for (a, row) in authors.iter().zip(m) {
        s.push_str(a);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Evaluates every mode selected by `filter` over its trained cells.
/// Missing or failed cells leave explicit gaps in every output.
pub fn evaluate(exp: &Experiment, filter: &Filter) -> Result<Vec<EvalSummary>> {
    let vocab_size = load_vocabulary(exp)?.len();
    let ledger_path = exp.ledger_path();
    let grid = exp.grid();
    let mut ledger = Ledger::open(&ledger_path, &exp.checksum, &grid)?;
    let mut out = Vec::new();
    for &mode in &exp.manifest.modes {
        if !filter.modes.is_empty() && !filter.modes.contains(&mode) {
            continue;
        }
        let summary = evaluate_mode(exp, mode, vocab_size, &mut ledger)?;
        ledger.save(&ledger_path)?;
        out.push(summary);
    }
    Ok(out)
}

fn evaluate_mode(exp: &Experiment, mode: AblationMode, vocab_size: usize, ledger: &mut Ledger) -> Result<EvalSummary> {
    let prep = PreparedMode::load(exp, mode)?;
    let authors = exp.authors();
    let seeds = exp.manifest.seeds.clone();
    let analysis = exp.manifest.analysis;
    let eval_batch = exp.manifest.train.eval_batch;
    let seq_len = exp.manifest.train.seq_len;
    let mut notes = Vec::new();
    let mut missing = Vec::new();
    let mut models: HashMap<(usize, usize), LanguageModel> = HashMap::new();
    let mut records = BTreeMap::new();
    for (j, author) in authors.iter().enumerate() {
        for (s, &seed) in seeds.iter().enumerate() {
            let key = CellKey { mode, author: author.clone(), seed };
            if !matches!(ledger.status(&key), CellStatus::Trained | CellStatus::Evaluated) {
                missing.push(key.to_string());
                continue;
            }
            let (model, recs) = load_cell(exp, &key, vocab_size)?;
            models.insert((j, s), model);
            records.insert((author.clone(), seed), recs);
        }
    }
    if !missing.is_empty() {
        log::warn!("{mode}: {} cell(s) not trained: {}", missing.len(), missing.join(", "));
    }

    let mut m = LossMatrix::new(authors.clone(), seeds.clone());
    for (s, &seed) in seeds.iter().enumerate() {
        for (i, author) in authors.iter().enumerate() {
            if !(0..authors.len()).any(|j| models.contains_key(&(j, s))) {
                continue;
            }
            let chunks = chunk_heldout(prep.held_out(exp, author, seed)?, seq_len)?;
            for j in 0..authors.len() {
                if let Some(model) = models.get(&(j, s)) {
                    let r = eval_loss(model, &chunks, eval_batch)?;
                    m.set(i, j, s, LossEntry { mean: r.mean, n_chunks: chunks.len() });
                }
            }
        }
    }

    let results = exp.results_dir(mode);
    let header = exp.csv_header_comment();
    let mut s = header.clone();
    s.push_str("mode,seed,eval_author,model_author,mean_loss,n_chunks\n");
    for (si, seed) in seeds.iter().enumerate() {
        for (i, ea) in authors.iter().enumerate() {
            for (j, ma) in authors.iter().enumerate() {
                let e = m.entry(i, j, si);
                let _ = writeln!(
                    s,
                    "{mode},{seed},{ea},{ma},{},{}",
                    fmt_opt(e.map(|e| e.mean)),
                    e.map(|e| e.n_chunks.to_string()).unwrap_or_default()
                );
            }
        }
    }
    write_atomic(&results.join("loss_matrix.csv"), s.as_bytes())?;

    let rows = table1(&m);
    let mut s = header.clone();
    s.push_str("model,t_stat,df,p_value,n_same,n_other\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.model,
            fmt_opt(r.test.map(|t| t.t)),
            fmt_opt(r.test.map(|t| t.df)),
            fmt_opt(r.test.map(|t| t.p)),
            r.n_same,
            r.n_other
        );
    }
    write_atomic(&results.join("table1.csv"), s.as_bytes())?;

    write_atomic(&results.join("t_curves.csv"), t_curves_csv(&header, &authors, &seeds, &records, analysis.alpha).as_bytes())?;

    let mut mean_loss = None;
    let mut normalized = None;
    let mut distances = None;
    let mut mds = None;
    if m.is_complete() && authors.len() >= 2 {
        let lmean = m.seed_mean();
        let lbar = normalize_loss(&lmean)?;
        let d = stylometric_distance(&lbar)?;
        write_atomic(&results.join("normalized_loss.csv"), matrix_csv(&header, &authors, &lbar).as_bytes())?;
        write_atomic(&results.join("distances.csv"), matrix_csv(&header, &authors, &d).as_bytes())?;
        let delta = match analysis.mds_input {
            MdsInput::Distance => Some(d.clone()),
            MdsInput::Correlation if authors.len() >= 4 => {
                Some(row_corr_dissimilarity(&lmean, analysis.correlation, analysis.corr_transform)?)
            }
            MdsInput::Correlation => {
                notes.push(format!("correlation MDS needs at least 4 authors, got {}; skipped", authors.len()));
                None
            }
        };
        if let Some(mut delta) = delta {
            let mut clamped = 0;
            for v in delta.iter_mut().flatten() {
                if *v < 0.0 {
                    *v = 0.0;
                    clamped += 1;
                }
            }
            if clamped > 0 {
                let msg = format!("{clamped} negative dissimilarities clamped to 0 before MDS");
                log::warn!("{mode}: {msg}");
                notes.push(msg);
            }
            let emb = mds_embed(&delta, analysis.mds_dim, 0)?;
            if emb.reduced_dimensionality() {
                notes.push(format!("MDS spans {} of {} dimensions", emb.effective_dim, analysis.mds_dim));
            }
            let mut s = header.clone();
            let _ = writeln!(s, "# stress={} effective_dim={}", emb.stress, emb.effective_dim);
            s.push_str("author");
            for k in 0..analysis.mds_dim {
                let _ = write!(s, ",x{}", k + 1);
            }
            s.push('\n');
            for (a, row) in authors.iter().zip(&emb.coords) {
                s.push_str(a);
                for v in row {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
            write_atomic(&results.join("mds.csv"), s.as_bytes())?;
            mds = Some(MdsSummary {
                input: analysis.mds_input,
                coords: emb.coords,
                stress: emb.stress,
                effective_dim: emb.effective_dim,
                clamped,
            });
        }
        mean_loss = Some(lmean);
        normalized = Some(lbar);
        distances = Some(d);
    } else {
        notes.push("loss matrix incomplete; distance and MDS outputs skipped".into());
    }

    let mut special = Vec::new();
    let mut s = header.clone();
    s.push_str("evaluation,seed,candidate,mean_loss,winner,ambiguous\n");
    for ev in &exp.manifest.special_evaluations {
        match attribute_text(exp, mode, &ev.text, ev.strip, &ev.candidates) {
            Ok((per_seed, overall)) => {
                for (seed, a) in &per_seed {
                    for (c, l) in &a.losses {
                        let _ = writeln!(s, "{},{seed},{c},{l},{},{}", ev.name, a.winners.contains(c), a.is_ambiguous());
                    }
                }
                for (c, l) in &overall.losses {
                    let _ = writeln!(s, "{},mean,{c},{l},{},{}", ev.name, overall.winners.contains(c), overall.is_ambiguous());
                }
                special.push(SpecialResult {
                    name: ev.name.clone(),
                    candidates: ev.candidates.clone(),
                    ambiguous: overall.is_ambiguous(),
                    winners: overall.winners,
                    mean_losses: overall.losses,
                    per_seed_winners: per_seed.into_iter().map(|(s, a)| (s, a.winners)).collect(),
                });
            }
            Err(e @ ExperimentError::MissingStage(_)) => notes.push(format!("special evaluation {}: {e}", ev.name)),
            Err(e) => return Err(e),
        }
    }
    write_atomic(&results.join("attribution_report.csv"), s.as_bytes())?;

    let summary = EvalSummary {
        tool_version: TOOL_VERSION.into(),
        manifest_sha256: exp.checksum.clone(),
        mode,
        authors: authors.clone(),
        seeds: seeds.clone(),
        missing_cells: missing,
        accuracy: accuracy(&m),
        min_margin: min_margin(&m),
        table1: rows,
        overall: overall_test(&m),
        tails: "two-tailed".into(),
        pairing: "cross-author losses pair models and held-out books by seed index".into(),
        mean_loss,
        normalized_loss: normalized,
        distances,
        mds,
        special,
        notes,
    };
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    write_atomic(&results.join("summary.json"), &bytes)?;

    for (j, author) in authors.iter().enumerate() {
        for (si, &seed) in seeds.iter().enumerate() {
            if models.contains_key(&(j, si)) {
                let key = CellKey { mode, author: author.clone(), seed };
                ledger.update(&key, false, |e| e.status = CellStatus::Evaluated);
            }
        }
    }
    Ok(summary)
}

/// Per-epoch Welch t of each model author's held-out losses (other vs same),
/// plus a `mean` row testing the seed-level author-averaged gap.
fn t_curves_csv(
    header: &str,
    authors: &[String],
    seeds: &[u64],
    records: &BTreeMap<(String, u64), Vec<EpochRecord>>,
    alpha: f64,
) -> String {
    let lookup = |model: &str, seed: u64, epoch: usize, eval: &str| -> Option<f64> {
        let recs = records.get(&(model.to_string(), seed))?;
        recs.iter().find(|r| r.epoch == epoch)?.heldout.get(eval).copied()
    };
    let max_epoch = records.values().filter_map(|r| r.last().map(|r| r.epoch)).max().unwrap_or(0);
    let mut s = header.to_string();
    s.push_str("epoch,author,t,threshold_t\n");
    for epoch in 1..=max_epoch {
        for (j, a) in authors.iter().enumerate() {
            let same: Vec<f64> = seeds.iter().filter_map(|&sd| lookup(a, sd, epoch, a)).collect();
            let other: Vec<f64> = authors
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .flat_map(|(_, e)| seeds.iter().filter_map(move |&sd| lookup(a, sd, epoch, e)))
                .collect();
            if same.is_empty() && other.is_empty() {
                continue;
            }
            write_t_row(&mut s, epoch, a, welch_t(&other, &same).ok(), alpha);
        }
        if authors.len() >= 2 {
            let gaps = seed_gaps(authors.len(), seeds.len(), |i, j, si| lookup(&authors[j], seeds[si], epoch, &authors[i]));
            if !gaps.is_empty() {
                write_t_row(&mut s, epoch, "mean", one_sample_t(&gaps, 0.0).ok(), alpha);
            }
        }
    }
    s
}

fn write_t_row(s: &mut String, epoch: usize, label: &str, r: Option<TTestResult>, alpha: f64) {
    let thr = r.and_then(|r| t_threshold(r.df, alpha).ok());
    let _ = writeln!(s, "{epoch},{label},{},{}", fmt_opt(r.map(|r| r.t)), fmt_opt(thr));
}

/// Loads one mode's evaluation summary and per-cell epoch records.
pub fn load_results(exp: &Experiment, mode: AblationMode) -> Result<ModeResults> {
    let path = exp.results_dir(mode).join("summary.json");
    if !path.is_file() {
        return Err(ExperimentError::MissingStage("evaluate"));
    }
    let summary: EvalSummary = serde_json::from_slice(&read(&path)?)?;
    let mut records = BTreeMap::new();
    for a in &summary.authors {
        for &seed in &summary.seeds {
            let key = CellKey { mode, author: a.clone(), seed };
            let p = exp.run_dir(&key).join("epoch_records.csv");
            if p.is_file() {
                records.insert((a.clone(), seed), parse_epoch_records(&read_string(&p)?));
            }
        }
    }
    Ok(ModeResults { summary, records })
}

fn parse_epoch_records(text: &str) -> Vec<EpochRecord> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let Some(header) = lines.next() else { return Vec::new() };
    let cols: Vec<&str> = header.split(',').collect();
    lines
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let epoch = f.first()?.parse().ok()?;
            let train_loss = f.get(1)?.parse().ok()?;
            let heldout = cols
                .iter()
                .zip(&f)
                .skip(2)
                .filter_map(|(c, v)| Some((c.strip_prefix("loss_vs_")?.to_string(), v.parse().ok()?)))
                .collect();
            Some(EpochRecord { epoch, train_loss, heldout })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(vals: &[[[f64; 2]; 2]]) -> LossMatrix {
        // vals[s][i][j]
        let mut m = LossMatrix::new(vec!["a".into(), "b".into()], (0..vals.len() as u64).collect());
        for (s, v) in vals.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    m.set(i, j, s, LossEntry { mean: v[i][j], n_chunks: 1 });
                }
            }
        }
        m
    }

    #[test]
    fn ties_are_counted_as_ambiguous() {
        let m = matrix(&[[[1.0, 1.0], [2.0, 1.5]]]);
        let acc = accuracy(&m);
        assert_eq!((acc.texts, acc.correct, acc.ambiguous), (2, 1, 1));
        assert_eq!(acc.accuracy, Some(0.5));
    }

    #[test]
    fn gaps_are_skipped() {
        let mut m = LossMatrix::new(vec!["a".into(), "b".into()], vec![0]);
        m.set(0, 0, 0, LossEntry { mean: 1.0, n_chunks: 1 });
        m.set(0, 1, 0, LossEntry { mean: 2.0, n_chunks: 1 });
        let acc = accuracy(&m);
        assert_eq!((acc.texts, acc.correct), (1, 1));
        assert_eq!(min_margin(&m), Some(1.0));
        assert!(overall_test(&m).is_none());
    }

    #[test]
    fn seed_gap_is_author_mean() {
        // gaps: seed0 a: 3-1=2, b: 4-2=2 → 2; seed1: a 2, b 4 → 3; seed2: 1, 1 → 1
        let m = matrix(&[[[1.0, 4.0], [3.0, 2.0]], [[1.0, 6.0], [3.0, 2.0]], [[1.0, 3.0], [2.0, 2.0]]]);
        assert_eq!(seed_gaps(2, 3, |i, j, s| m.get(i, j, s)), vec![2.0, 3.0, 1.0]);
        let t = overall_test(&m).unwrap();
        assert!((t.t - 2.0 / (1.0 / 3f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn epoch_records_roundtrip_through_csv() {
        let csv = "# x\nepoch,train_loss,loss_vs_a,loss_vs_b\n1,3.5,4,\n2,3,3.25,4.5\n";
        let r = parse_epoch_records(csv);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].heldout.len(), 1);
        assert_eq!(r[1].heldout["b"], 4.5);
    }
}
