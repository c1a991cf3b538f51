use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use cbr_core::bank::CaseBank;
use cbr_core::evaluation::{
    evaluate_offline, generate_corpus, read_test_samples, simulate_online, write_series, write_test_samples,
    OnlineConfig, SyntheticCorpusSpec,
};
use cbr_core::finetune::{base_embeddings, mine_labels, read_triplets, train_adapter, write_triplets, TrainConfig};
use cbr_core::rlft::{export_sft_dataset, train_toy, write_curve, write_sft_dataset, Algorithm, ToyTask, TrainToyConfig};
use cbr_core::script::{detect_repetition_default, extract_functions_with_diagnostics};
use cbr_core::{score_pair, ScriptSource};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{GeneratorKind, Settings};
use crate::service::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "cbr", version, about = "Case-based reasoning for functional test-script generation")]
pub struct Cli {
    /// Flat `key = value` configuration file; `CBR_*` variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ToyTaskName {
    TwoPosition,
    ThreePosition,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the function calls a script invokes and whether it repeats itself.
    Analyze { script: PathBuf },
    /// Score a generated script against a reference (CS, FP, FR, FF1).
    Score {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Mine (query, positive, negatives) triplets from the bank.
    MineLabels {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the retrieval adapter with InfoNCE on mined triplets.
    TrainAdapter {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_in_batch_negatives: bool,
    },
    /// Export retrieval-augmented prompt/completion pairs for supervised finetuning.
    ExportSft {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Policy-gradient finetuning of the enumerable toy policy.
    RlftToy {
        #[arg(long, default_value = "reinforce")]
        algorithm: Algorithm,
        #[arg(long, value_enum, default_value = "two-position")]
        task: ToyTaskName,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline evaluation: retrieve M cases per test intent, generate, score.
    Evaluate {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        generator: Option<GeneratorKind>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequential online simulation over a request stream, with or without retain.
    SimulateOnline {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        generator: Option<GeneratorKind>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        retain: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic bank (`bank.jsonl`) and test split (`test.jsonl`).
    GenerateCorpus {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        modules: usize,
        #[arg(long, default_value_t = 50)]
        cases_per_module: usize,
        /// Stream steps at which the function vocabulary drifts.
        #[arg(long, value_delimiter = ',')]
        drift: Vec<usize>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_script(path: &PathBuf) -> anyhow::Result<ScriptSource> {
    Ok(ScriptSource::new(
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn load_bank(path: &PathBuf) -> anyhow::Result<CaseBank> {
    CaseBank::load(path).with_context(|| format!("loading bank {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Analyze { script } => {
            let source = read_script(&script)?;
            let (calls, diagnostics) = extract_functions_with_diagnostics(&source);
            #[derive(Serialize)]
            struct Analysis<'a> {
                calls: Vec<&'a str>,
                diagnostics: cbr_core::script::ExtractionDiagnostics,
                repetition: cbr_core::script::RepetitionReport,
            }
            print_json(&Analysis {
                calls: calls.iter().collect(),
                diagnostics,
                repetition: detect_repetition_default(&source),
            })
        }
        Command::Score { generated, reference } => {
            print_json(&score_pair(&read_script(&generated)?, &read_script(&reference)?))
        }
        Command::MineLabels { bank, k, out } => {
            let bank = load_bank(&bank)?;
            let triplets = mine_labels(&bank.view(), k.unwrap_or(settings.retrieval_k), &settings.embedder()?)?;
            write_triplets(&out, &triplets)?;
            eprintln!("wrote {} triplets to {}", triplets.len(), out.display());
            Ok(())
        }
        Command::TrainAdapter {
            bank,
            triplets,
            out,
            epochs,
            lr,
            batch_size,
            seed,
            no_in_batch_negatives,
        } => {
            let bank = load_bank(&bank)?;
            let embedder = settings.embedder()?;
            let triplets = read_triplets(&triplets)?;
            let embeddings = base_embeddings(&bank.view(), &embedder)?;
            let config = TrainConfig {
                temperature: settings.infonce_tau,
                learning_rate: lr,
                batch_size,
                epochs,
                seed,
                in_batch_negatives: !no_in_batch_negatives,
            };
            let outcome = train_adapter(&triplets, &embeddings, embedder.adapter().as_ref().clone(), &config)?;
            fs::write(&out, serde_json::to_string(&outcome.adapter)?)?;
            eprintln!(
                "{} steps, loss {:.4} -> {:.4}; adapter written to {}",
                outcome.loss_curve.len(),
                outcome.loss_curve.first().copied().unwrap_or(f64::NAN),
                outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::ExportSft { bank, m, out } => {
            let bank = load_bank(&bank)?;
            let records = export_sft_dataset(&bank, &settings.embedder()?, m.unwrap_or(settings.retrieval_m))?;
            write_sft_dataset(&out, &records)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
        Command::RlftToy {
            algorithm,
            task,
            steps,
            lr,
            beta,
            seed,
            out,
        } => {
            let task = match task {
                ToyTaskName::TwoPosition => ToyTask::two_position(),
                ToyTaskName::ThreePosition => ToyTask::three_position(),
            };
            let config = TrainToyConfig {
                steps,
                seed,
                learning_rate: lr,
                beta: beta.unwrap_or(settings.rl_beta),
                ..TrainToyConfig::default()
            };
            let run = train_toy(&task, algorithm, &config)?;
            write_curve(&out, &run.curve)?;
            eprintln!(
                "{}: final expected FF1 {:.4} after {} steps",
                algorithm.as_str(),
                run.final_expected_reward().unwrap_or(f64::NAN),
                steps
            );
            Ok(())
        }
        Command::Evaluate {
            bank,
            split,
            generator,
            m,
            out,
        } => {
            if let Some(g) = generator {
                settings.llm_backend = g;
            }
            let bank = load_bank(&bank)?;
            let test = read_test_samples(&split)?;
            let report = evaluate_offline(
                &bank,
                &test,
                &settings.engine(),
                &settings.embedder()?,
                m.unwrap_or(settings.retrieval_m),
            )?;
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            match &report.aggregates {
                Some(a) => eprintln!(
                    "{} samples: CS {:.4} FP {:.4} FR {:.4} FF1 {:.4}; {} failures",
                    a.scored_samples, a.code_similarity, a.function_precision, a.function_recall, a.function_f1, report.failures
                ),
                None => eprintln!("no samples scored; {} failures", report.failures),
            }
            Ok(())
        }
        Command::SimulateOnline {
            bank,
            stream,
            generator,
            m,
            retain,
            out,
        } => {
            if let Some(g) = generator {
                settings.llm_backend = g;
            }
            let mut bank = load_bank(&bank)?;
            let stream = read_test_samples(&stream)?;
            let config = OnlineConfig {
                m: m.unwrap_or(settings.retrieval_m),
                retain,
                ..OnlineConfig::default()
            };
            let series = simulate_online(&mut bank, &stream, &settings.engine(), &settings.embedder()?, &config)?;
            write_series(&out, &series)?;
            eprintln!(
                "{} requests, final cumulative FF1 {:.4}, retained {}",
                series.points.len(),
                series.final_cumulative_ff1().unwrap_or(f64::NAN),
                series.retained
            );
            Ok(())
        }
        Command::GenerateCorpus {
            out_dir,
            seed,
            modules,
            cases_per_module,
            drift,
            test_fraction,
        } => {
            let spec = SyntheticCorpusSpec {
                seed,
                modules,
                cases_per_module,
                drift_schedule: drift,
                test_fraction,
                ..SyntheticCorpusSpec::default()
            };
            let corpus = generate_corpus(&spec)?;
            fs::create_dir_all(&out_dir)?;
            corpus.bank()?.save(out_dir.join("bank.jsonl"))?;
            write_test_samples(out_dir.join("test.jsonl"), &corpus.test_samples())?;
            eprintln!(
                "wrote {} bank cases and {} test samples to {}",
                corpus.train().len(),
                corpus.test().len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Serve { port, bank } => {
            if let Some(port) = port {
                settings.server_port = port;
            }
            if let Some(bank) = bank {
                settings.bank_path = bank;
            }
            if settings.retrieval_m == 0 {
                bail!("retrieval.m must be positive");
            }
            let state = AppState::open(&settings)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(state, &settings.server_host, settings.server_port))
        }
    }
}
