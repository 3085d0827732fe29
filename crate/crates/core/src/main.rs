//! Command-line front end for the pipeline.
//!
//! Every command reads declared inputs, writes its artifacts into `--out`,
//! and echoes the resolved configuration there. Exit codes: 0 success,
//! 1 usage or config error, 2 data error, 3 runtime failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use evqa::corpus::{
    generate_synthetic, load_corpus, read_ndjson, save_corpus, write_ndjson, Vocabulary,
};
use evqa::evaluation::{
    build_challenge_set, confidence_curves, write_curves_csv, write_scores_csv,
    evaluate_predictions, ModelAnswerer,
};
use evqa::inference::{predict, train_selector, PredictionRecord};
use evqa::interpreter::{extract, EvidenceSet, ModelOracle};
use evqa::model::{load_checkpoint, LoadedModel, QaModel, SelectorModel};
use evqa::runcfg::{echo_config, load_config};
use evqa::setgen::{audit_labels, build_all_sets, LabelAudit, SetTag, TrainingInstance};
use evqa::trainer::run_curriculum;
use evqa::{Error, Result};

#[derive(Parser)]
#[command(
    name = "evqa",
    version,
    about = "Evidence-aware multi-hop QA pipeline on synthetic corpora"
)]
struct Cli {
    /// Configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set lambda=0.01.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for --set seed=N.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory for artifacts and the echoed config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train.ndjson and dev.ndjson).
    GenData {
        #[command(flatten)]
        out: OutArg,
    },
    /// Build training instances (A+, A-, E-) from a corpus.
    BuildSets {
        /// Corpus file (newline-delimited JSON examples).
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the reader with the delayed evidence curriculum.
    Train {
        /// Corpus the vocabulary is built from.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Training instances from build-sets.
        #[arg(long, value_name = "FILE")]
        sets: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Extract pseudo evidence sets with a trained reader.
    Interpret {
        /// Reader checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Training instances; extraction runs on the answerable ones.
        #[arg(long, value_name = "FILE")]
        sets: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the sentence selector on extracted evidence labels.
    TrainSelector {
        /// Corpus the selector vocabulary is built from.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Training instances; positives come from the labels file.
        #[arg(long, value_name = "FILE")]
        sets: PathBuf,
        /// Evidence labels (newline-delimited JSON).
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the reader over a corpus and write predictions.
    Predict {
        /// Reader checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Selector checkpoint; required for selected_evidences mode.
        #[arg(long, value_name = "FILE")]
        selector: Option<PathBuf>,
        /// Corpus to predict on.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a prediction file against its corpus.
    Evaluate {
        /// Predictions from the predict command.
        #[arg(long, value_name = "FILE")]
        predictions: PathBuf,
        /// Corpus the predictions were made on.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Keep the examples a single-paragraph baseline cannot answer.
    ChallengeSet {
        /// Baseline reader checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Corpus to filter.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Contrast reader confidence on sufficient vs insufficient evidence.
    ConfidenceCurves {
        /// Reader checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Dev corpus with gold evidence.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(e.exit_code());
    }
}

fn load_qa(path: &Path) -> Result<(QaModel, Vocabulary)> {
    match load_checkpoint(path)? {
        LoadedModel::Qa(m, v) => Ok((*m, v)),
        LoadedModel::Selector(..) => Err(Error::Usage(format!(
            "{} is a selector checkpoint, expected a reader",
            path.display()
        ))),
    }
}

fn load_selector(path: &Path) -> Result<(SelectorModel, Vocabulary)> {
    match load_checkpoint(path)? {
        LoadedModel::Selector(m, v) => Ok((*m, v)),
        LoadedModel::Qa(..) => Err(Error::Usage(format!(
            "{} is a reader checkpoint, expected a selector",
            path.display()
        ))),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Internal(format!("{}: {e}", path.display())))?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = load_config(cli.config.as_deref(), &overrides)?;

    match cli.cmd {
        Command::GenData { out } => {
            echo_config(&out.out, &cfg)?;
            let train = generate_synthetic(&cfg.synthetic())?;
            let dev = generate_synthetic(&cfg.synthetic_dev())?;
            save_corpus(&out.out.join("train.ndjson"), &train)?;
            save_corpus(&out.out.join("dev.ndjson"), &dev)?;
            println!("wrote {} train and {} dev examples", train.len(), dev.len());
        }

        Command::BuildSets { corpus, out } => {
            echo_config(&out.out, &cfg)?;
            let examples = load_corpus(&corpus)?;
            let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed.wrapping_add(0x5e75));
            let (instances, stats) = build_all_sets(&examples, cfg.k_neg, &mut rng)?;
            let mut audit = LabelAudit::default();
            for ex in &examples {
                audit.merge(audit_labels(&instances, ex));
            }
            write_ndjson(&out.out.join("instances.ndjson"), &instances)?;
            write_json(&out.out.join("setgen_stats.json"), &stats)?;
            write_json(&out.out.join("audit.json"), &audit)?;
            println!(
                "built {} instances ({} audit violations)",
                instances.len(),
                audit.violations.len()
            );
            if !audit.violations.is_empty() {
                return Err(Error::Internal("label audit reported violations".into()));
            }
        }

        Command::Train { corpus, sets, out } => {
            echo_config(&out.out, &cfg)?;
            let examples = load_corpus(&corpus)?;
            let vocab = Vocabulary::build(&examples);
            let instances: Vec<TrainingInstance> = read_ndjson(&sets)?;
            let enc_cfg = cfg.encoder(vocab.len());
            let outcome =
                run_curriculum(&instances, &vocab, &enc_cfg, &cfg.train(), Some(&out.out))?;
            #[derive(serde::Serialize)]
            struct Summary {
                epochs: usize,
                final_total: f64,
                extracted_sets: usize,
                extraction_failures: usize,
                dropped_truncated: usize,
                clamp_hits: usize,
            }
            write_json(
                &out.out.join("train_summary.json"),
                &Summary {
                    epochs: outcome.logs.len(),
                    final_total: outcome.logs.last().map_or(0.0, |l| l.total),
                    extracted_sets: outcome.evidence.len(),
                    extraction_failures: outcome.extraction_failures,
                    dropped_truncated: outcome.dropped_truncated,
                    clamp_hits: outcome.clamp_hits,
                },
            )?;
            println!(
                "trained {} epochs, final mean loss {:.4}, {} evidence sets extracted",
                outcome.logs.len(),
                outcome.logs.last().map_or(0.0, |l| l.total),
                outcome.evidence.len()
            );
        }

        Command::Interpret { model, sets, out } => {
            echo_config(&out.out, &cfg)?;
            let (qa, vocab) = load_qa(&model)?;
            let instances: Vec<TrainingInstance> = read_ndjson(&sets)?;
            let oracle = ModelOracle::new(&qa, &vocab, cfg.token_budget);
            let icfg = cfg.interpreter();
            let mut sets_out: Vec<EvidenceSet> = Vec::new();
            let mut failures = 0usize;
            for inst in instances.iter().filter(|i| i.set_tag() == SetTag::APos) {
                match extract(&oracle, inst, &icfg) {
                    Ok(ev) => sets_out.push(ev),
                    Err(_) => failures += 1,
                }
            }
            sets_out.sort_by(|a, b| a.qid.cmp(&b.qid));
            write_ndjson(&out.out.join("evidence.ndjson"), &sets_out)?;
            #[derive(serde::Serialize)]
            struct Stats {
                extracted: usize,
                failures: usize,
                zero_confidence_reads: usize,
            }
            write_json(
                &out.out.join("interpret_stats.json"),
                &Stats {
                    extracted: sets_out.len(),
                    failures,
                    zero_confidence_reads: oracle.zero_reads(),
                },
            )?;
            println!("extracted {} evidence sets ({failures} failures)", sets_out.len());
        }

        Command::TrainSelector { corpus, sets, labels, out } => {
            echo_config(&out.out, &cfg)?;
            let examples = load_corpus(&corpus)?;
            let vocab = Vocabulary::build(&examples);
            let instances: Vec<TrainingInstance> = read_ndjson(&sets)?;
            let evidence: Vec<EvidenceSet> = read_ndjson(&labels)?;
            let enc_cfg = cfg.encoder(vocab.len());
            let outcome = train_selector(
                &instances,
                &evidence,
                &vocab,
                &enc_cfg,
                &cfg.selector_train(),
            )?;
            outcome.model.save(&out.out.join("selector.ckpt"), &vocab)?;
            #[derive(serde::Serialize)]
            struct Summary {
                epochs: usize,
                final_bce: f64,
                dropped_sentences: usize,
            }
            write_json(
                &out.out.join("selector_summary.json"),
                &Summary {
                    epochs: outcome.epoch_bce.len(),
                    final_bce: outcome.epoch_bce.last().copied().unwrap_or(0.0),
                    dropped_sentences: outcome.dropped_sentences,
                },
            )?;
            println!(
                "selector trained, final BCE {:.4}",
                outcome.epoch_bce.last().copied().unwrap_or(0.0)
            );
        }

        Command::Predict { model, selector, corpus, out } => {
            echo_config(&out.out, &cfg)?;
            let (qa, vocab) = load_qa(&model)?;
            let sel = selector.as_deref().map(load_selector).transpose()?;
            let examples = load_corpus(&corpus)?;
            let mut records = Vec::with_capacity(examples.len());
            for ex in &examples {
                records.push(predict(
                    &qa,
                    sel.as_ref().map(|(m, _)| m),
                    ex,
                    cfg.mode,
                    &vocab,
                    cfg.token_budget,
                    cfg.max_span_len,
                    cfg.select_k,
                )?);
            }
            write_ndjson(&out.out.join("predictions.ndjson"), &records)?;
            println!("wrote {} predictions in {} mode", records.len(), cfg.mode);
        }

        Command::Evaluate { predictions, corpus, out } => {
            echo_config(&out.out, &cfg)?;
            let records: Vec<PredictionRecord> = read_ndjson(&predictions)?;
            let examples = load_corpus(&corpus)?;
            let (report, scores) = evaluate_predictions(&records, &examples)?;
            write_json(&out.out.join("report.json"), &report)?;
            write_scores_csv(&out.out.join("per_example.csv"), &scores)?;
            println!(
                "F1 {:.4}, EM {:.4} over {} examples",
                report.qa_f1, report.qa_em, report.n_examples
            );
        }

        Command::ChallengeSet { model, corpus, out } => {
            echo_config(&out.out, &cfg)?;
            let (qa, vocab) = load_qa(&model)?;
            let examples = load_corpus(&corpus)?;
            let baseline = ModelAnswerer {
                model: &qa,
                vocab: &vocab,
                budget: cfg.token_budget,
                max_span_len: cfg.max_span_len,
            };
            let survivors: BTreeSet<String> = build_challenge_set(&baseline, &examples)?;
            write_json(&out.out.join("challenge.json"), &survivors)?;
            println!("{} of {} examples survive", survivors.len(), examples.len());
        }

        Command::ConfidenceCurves { model, corpus, out } => {
            echo_config(&out.out, &cfg)?;
            let (qa, vocab) = load_qa(&model)?;
            let examples = load_corpus(&corpus)?;
            let curves = confidence_curves(&qa, &examples, &vocab, cfg.token_budget)?;
            write_curves_csv(&out.out.join("curves.csv"), &curves)?;
            write_json(&out.out.join("curves_summary.json"), &curves)?;
            println!(
                "mean confidence: sufficient {:.4}, insufficient {:.4} (gap {:.4})",
                curves.mean_plus,
                curves.mean_minus,
                curves.gap()
            );
        }
    }
    Ok(())
}
