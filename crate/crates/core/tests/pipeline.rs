mod common;

use predcomp::ablation::AblationMode;
use predcomp::corpus::{normalize, strip_gutenberg};
use predcomp::experiment::{self, Experiment, Filter, Ledger};
use predcomp::synthetic::{write_desk_experiment, DeskSetup};

#[test]
fn fixture_books_strip_and_normalize() {
    for (name, raw) in common::corpus_files() {
        let stripped = strip_gutenberg(&raw).unwrap();
        assert!(stripped.warning.is_none(), "{name}: {:?}", stripped.warning);
        let t = &stripped.text;
        assert!(!t.contains("Project Gutenberg"), "{name}: boilerplate kept");
        assert!(!t.contains("[Illustration"), "{name}: illustration kept");
        assert!(!t.contains("CHAPTER"), "{name}: heading kept");
        let n = normalize(t);
        assert!(n.is_ascii() && !n.is_empty());
        assert_eq!(n, n.to_ascii_lowercase());
        assert!(!n.contains("  ") && !n.contains('\n'));
    }
}

#[test]
fn missing_markers_fall_back_with_a_warning() {
    let s = strip_gutenberg("just some text\nwith two lines\n").unwrap();
    assert!(s.warning.is_some());
    assert!(s.text.contains("just some text"));
    assert!(strip_gutenberg("").is_err());
}

fn small_setup() -> DeskSetup {
    DeskSetup { seeds: vec![0, 1], words_per_book: 1500, max_epochs: 3, special: false, ..DeskSetup::default() }
}

#[test]
fn filter_trains_exactly_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::load(&write_desk_experiment(dir.path(), &small_setup()).unwrap()).unwrap();
    experiment::prepare(&exp).unwrap();
    let summary = experiment::train(&exp, &Filter::parse("author=alder,seed=0").unwrap(), false, None).unwrap();
    assert_eq!(summary.trained.len(), 1);
    assert_eq!(summary.trained[0].author, "alder");
    assert_eq!(summary.trained[0].seed, 0);
    for key in exp.grid() {
        let ran = exp.run_dir(&key).join("checkpoint.bin").exists();
        assert_eq!(ran, key.author == "alder" && key.seed == 0, "{key}");
    }
    let ledger = Ledger::open(&exp.ledger_path(), &exp.checksum, &exp.grid()).unwrap();
    assert!(ledger.get(&summary.trained[0]).unwrap().epochs >= 1);
}

#[test]
fn evaluate_reports_gaps_and_writes_stamped_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::load(&write_desk_experiment(dir.path(), &small_setup()).unwrap()).unwrap();
    experiment::prepare(&exp).unwrap();
    experiment::train(&exp, &Filter::parse("seed=0").unwrap(), false, None).unwrap();
    let summaries = experiment::evaluate(&exp, &Filter::default()).unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0].missing_cells.len(), 3);

    let results = exp.results_dir(AblationMode::Intact);
    let stamp = exp.csv_header_comment();
    for f in ["loss_matrix.csv", "table1.csv", "t_curves.csv"] {
        let text = std::fs::read_to_string(results.join(f)).unwrap();
        assert!(text.starts_with(&stamp), "{f} lacks provenance line");
    }
    // Distances need every cell.
    assert!(!results.join("distances.csv").exists());
    let loss = std::fs::read_to_string(results.join("loss_matrix.csv")).unwrap();
    // Seed 1 cells are present as empty entries, not dropped.
    let seed1: Vec<&str> = loss.lines().filter(|l| l.starts_with("intact,1,")).collect();
    assert_eq!(seed1.len(), 9);

    let figs = experiment::report(&exp, &Filter::default()).unwrap();
    assert!(!figs.is_empty());
    for f in figs {
        let svg = std::fs::read_to_string(&f).unwrap();
        assert!(svg.contains(&format!("manifest={}", exp.checksum)), "{}", f.display());
    }
}
