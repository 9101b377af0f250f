use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use predcomp::ablation::AblationMode;
use predcomp::experiment::{self, Experiment, Filter, PreparedMode};
use predcomp::synthetic::{write_desk_experiment, DeskSetup};
use serde_json::json;

#[derive(Parser)]
#[command(name = "predcomp", version, about = "Authorship analysis by comparing per-author language model losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict to one ablation mode.
    #[arg(long)]
    mode: Option<AblationMode>,
    /// Grid filter, e.g. `author=baum,seed=0`.
    #[arg(long, default_value = "")]
    filter: String,
    /// Concurrent training cells; overrides the manifest.
    #[arg(long)]
    jobs: Option<usize>,
    /// Print a machine-readable summary on stdout.
    #[arg(long)]
    json: bool,
    /// Redo cells regardless of ledger state.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize corpora, train the tokenizer, fix budgets and sampling plans.
    Prepare(Common),
    /// Train every pending (mode, author, seed) cell.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stop each cell after this many epochs in this session; rerun to resume.
        #[arg(long)]
        epoch_limit: Option<usize>,
    },
    /// Build loss matrices, t-tests, distances, MDS and attribution reports.
    Evaluate(Common),
    /// Render SVG figures from evaluation outputs.
    Report(Common),
    /// Show token budgets and per-book token counts.
    Stats(Common),
    /// Attribute a text among candidate authors.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        text: PathBuf,
        /// Comma-separated candidate authors; defaults to all.
        #[arg(long)]
        candidates: Option<String>,
        /// Skip Gutenberg header/footer stripping.
        #[arg(long)]
        no_strip: bool,
    },
    /// Write a small synthetic experiment (books plus manifests) to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn load(c: &Common) -> Result<(Experiment, Filter)> {
    let mut exp = Experiment::load(&c.manifest)?;
    if let Some(j) = c.jobs {
        exp.manifest.jobs = j;
    }
    let filter = Filter::parse(&c.filter)?.with_mode(c.mode);
    Ok((exp, filter))
}

fn emit(json: bool, value: serde_json::Value, human: impl FnOnce()) {
    if json {
        println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    } else {
        human();
    }
}

fn modes(exp: &Experiment, filter: &Filter) -> Vec<AblationMode> {
    exp.manifest.modes.iter().copied().filter(|m| filter.modes.is_empty() || filter.modes.contains(m)).collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Prepare(c) => {
            let (exp, _) = load(&c)?;
            let budgets = experiment::prepare(&exp)?;
            emit(c.json, json!({ "manifest_sha256": exp.checksum, "budgets": budgets }), || {
                for (mode, b) in &budgets {
                    println!("{mode}: token budget {b}");
                }
            });
            Ok(true)
        }
        Command::Train { common: c, epoch_limit } => {
            let (exp, filter) = load(&c)?;
            let s = experiment::train(&exp, &filter, c.force, epoch_limit)?;
            let names = |v: &[experiment::CellKey]| v.iter().map(ToString::to_string).collect::<Vec<_>>();
            let failed: Vec<_> = s.failed.iter().map(|(k, e)| json!({ "cell": k.to_string(), "error": e })).collect();
            let value = json!({
                "trained": names(&s.trained),
                "skipped": names(&s.skipped),
                "interrupted": names(&s.interrupted),
                "not_converged": names(&s.not_converged),
                "failed": failed,
            });
            emit(c.json, value, || {
                println!(
                    "trained {}, skipped {}, interrupted {}, failed {}",
                    s.trained.len(),
                    s.skipped.len(),
                    s.interrupted.len(),
                    s.failed.len()
                );
                for k in &s.not_converged {
                    println!("did not reach the loss threshold: {k}");
                }
                for (k, e) in &s.failed {
                    println!("failed {k}: {e}");
                }
            });
            Ok(s.all_succeeded())
        }
        Command::Evaluate(c) => {
            let (exp, filter) = load(&c)?;
            let summaries = experiment::evaluate(&exp, &filter)?;
            emit(c.json, serde_json::to_value(&summaries)?, || {
                for s in &summaries {
                    let acc = s.accuracy.accuracy.map_or("n/a".into(), |a| format!("{:.1}%", 100.0 * a));
                    println!(
                        "{}: accuracy {acc} ({} of {} held-out texts, {} ambiguous)",
                        s.mode, s.accuracy.correct, s.accuracy.texts, s.accuracy.ambiguous
                    );
                    for r in &s.table1 {
                        match r.test {
                            Some(t) => println!("  {:<12} t={:.3} df={:.2} p={:.3e}", r.model, t.t, t.df, t.p),
                            None => println!("  {:<12} t-test undefined", r.model),
                        }
                    }
                    if !s.missing_cells.is_empty() {
                        println!("  missing cells: {}", s.missing_cells.join(", "));
                    }
                    for n in &s.notes {
                        println!("  note: {n}");
                    }
                }
            });
            Ok(summaries.iter().all(|s| s.missing_cells.is_empty()))
        }
        Command::Report(c) => {
            let (exp, filter) = load(&c)?;
            let files = experiment::report(&exp, &filter)?;
            emit(c.json, json!({ "figures": files }), || {
                for f in &files {
                    println!("{}", f.display());
                }
            });
            Ok(true)
        }
        Command::Stats(c) => {
            let (exp, filter) = load(&c)?;
            let mut out = serde_json::Map::new();
            for mode in modes(&exp, &filter) {
                let p = PreparedMode::load(&exp, mode)?;
                let authors: serde_json::Map<_, _> = p
                    .books
                    .iter()
                    .map(|(a, books)| {
                        let rows: Vec<_> = books
                            .iter()
                            .zip(&p.titles[a])
                            .map(|(ids, t)| json!({ "title": t, "tokens": ids.len() }))
                            .collect();
                        (a.clone(), rows.into())
                    })
                    .collect();
                out.insert(mode.to_string(), json!({ "budget": p.budget, "authors": authors }));
            }
            emit(c.json, out.clone().into(), || {
                for (mode, v) in &out {
                    println!("{mode}: budget {}", v["budget"]);
                    for (a, books) in v["authors"].as_object().into_iter().flatten() {
                        for b in books.as_array().into_iter().flatten() {
                            println!("  {a:<12} {:>9}  {}", b["tokens"], b["title"].as_str().unwrap_or(""));
                        }
                    }
                }
            });
            Ok(true)
        }
        Command::Attribute { common: c, text, candidates, no_strip } => {
            let (exp, filter) = load(&c)?;
            let candidates: Vec<String> = match candidates {
                Some(s) => s.split(',').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect(),
                None => exp.authors(),
            };
            for a in &candidates {
                if !exp.corpus.authors.contains_key(a) {
                    bail!("unknown author {a}");
                }
            }
            let mut all = Vec::new();
            for mode in modes(&exp, &filter) {
                let (per_seed, overall) = experiment::attribute_text(&exp, mode, &text, !no_strip, &candidates)
                    .with_context(|| format!("attributing {} in mode {mode}", text.display()))?;
                all.push((mode, per_seed, overall));
            }
            let value: Vec<_> = all
                .iter()
                .map(|(mode, per_seed, o)| {
                    json!({
                        "mode": mode,
                        "winners": o.winners,
                        "ambiguous": o.is_ambiguous(),
                        "mean_losses": o.losses,
                        "per_seed": per_seed.iter().map(|(s, a)| json!({ "seed": s, "winners": a.winners })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            emit(c.json, value.into(), || {
                for (mode, _, o) in &all {
                    let tag = if o.is_ambiguous() { " (ambiguous)" } else { "" };
                    println!("{mode}: {}{tag}", o.winners.join(", "));
                    for (a, l) in &o.losses {
                        println!("  {a:<12} {l:.4}");
                    }
                }
            });
            Ok(true)
        }
        Command::Synth { out, seeds } => {
            let setup = DeskSetup { seeds: (0..seeds).collect(), ..DeskSetup::default() };
            let path = write_desk_experiment(&out, &setup).with_context(|| format!("writing to {}", out.display()))?;
            println!("{}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
