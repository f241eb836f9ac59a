use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bob_core::checkpoint::Checkpoint;
use bob_core::data::{load_corpus, synth_generate_with, write_corpus, LoadedCorpus, SynthConfig};
use bob_core::inference::{generate, DecodeConfig, Strategy, View};
use bob_core::metrics::{evaluate, ExternalOracle, NliOracle, RuleOracle};
use bob_core::model::Ablation;
use bob_core::objectives::{LossBreakdown, TrainData};
use bob_core::pipeline::{build_vocab, prepare};
use bob_core::run_config::RunConfig;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bob", version, about = "Persona-consistent dialogue: synthesize, train, generate, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic closed-world corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        profiles: usize,
        #[arg(long, env = "BOB_SEED", default_value_t = 17)]
        seed: u64,
        /// Share of dialogues whose persona states the queried fact.
        #[arg(long, default_value_t = bob_core::data::synth::DEFAULT_DENSE_FRACTION)]
        dense_fraction: f64,
    },
    /// Train a model and write a checkpoint plus a JSONL loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat `key = value` file of model and training fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, env = "BOB_SEED")]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Loss log path; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint; the log is appended to.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a response for one persona and query.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Persona sentences; empty strings are ignored.
        #[arg(long, num_args = 0..)]
        personas: Vec<String>,
        #[arg(long)]
        query: String,
        /// Also print the generation decoder's draft.
        #[arg(long)]
        show_draft: bool,
        #[arg(long, value_enum, default_value_t = StrategyArg::Greedy)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        #[arg(long, env = "BOB_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Compute the metric suite on the evaluation tuples and print JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// External referee command speaking the `persona<TAB>hypothesis`
        /// line protocol; the rule-based referee is used otherwise.
        #[arg(long)]
        oracle: Option<String>,
        /// Perplexity view; defaults to D2 where the ablation trains it.
        #[arg(long, value_enum)]
        view: Option<ViewArg>,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    D1,
    D2,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Synth {
            out,
            profiles,
            seed,
            dense_fraction,
        } => synth(&out, profiles, seed, dense_fraction),
        Cmd::Train {
            data,
            out,
            config,
            ablation,
            steps,
            seed,
            overrides,
            log,
            resume,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(a) = ablation {
                cfg.model.ablation = a;
            }
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let log = log.unwrap_or_else(|| out.with_extension("log.jsonl"));
            train(&data, &out, &log, cfg, resume.as_deref(), steps)
        }
        Cmd::Generate {
            ckpt,
            personas,
            query,
            show_draft,
            strategy,
            k,
            max_new_tokens,
            seed,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let personas: Vec<String> = personas.into_iter().filter(|p| !p.trim().is_empty()).collect();
            let decode = DecodeConfig {
                strategy: match strategy {
                    StrategyArg::Greedy => Strategy::Greedy,
                    StrategyArg::Topk => Strategy::TopK,
                },
                k,
                max_new_tokens,
                seed,
            };
            let g = generate(ckpt.model(), &ckpt.vocab, &personas, &query, &decode)?;
            if show_draft {
                println!("draft: {}", g.draft);
                println!("final: {}", g.response);
            } else {
                println!("{}", g.response);
            }
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            data,
            oracle,
            view,
            max_new_tokens,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let corpus = load_data(&data)?.corpus;
            if corpus.eval.is_empty() {
                bail!("no evaluation tuples in {}", data.display());
            }
            let view = match view {
                Some(ViewArg::D1) => View::D1,
                Some(ViewArg::D2) => View::D2,
                None => View::default_for(ckpt.model().config().ablation),
            };
            let mut oracle: Box<dyn NliOracle> = match oracle {
                Some(cmd) => Box::new(ExternalOracle::from_command(&cmd)?),
                None => Box::new(RuleOracle),
            };
            let decode = DecodeConfig {
                max_new_tokens,
                ..DecodeConfig::default()
            };
            let report = evaluate(ckpt.model(), &ckpt.vocab, &corpus.eval, view, &decode, oracle.as_mut())?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                fs::write(&p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{text}");
            Ok(())
        }
    }
}

fn synth(out: &Path, profiles: usize, seed: u64, dense_fraction: f64) -> Result<()> {
    let corpus = synth_generate_with(&SynthConfig {
        num_profiles: profiles,
        seed,
        dense_fraction,
    })?;
    write_corpus(out, &corpus)?;
    println!(
        "dialogues {} inference {} eval {}",
        corpus.dialogues.len(),
        corpus.inference.len(),
        corpus.eval.len()
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<LoadedCorpus> {
    let loaded = load_corpus(dir)?;
    for (file, e) in &loaded.errors {
        eprintln!("warning: {file}:{}: {}", e.line, e.message);
    }
    Ok(loaded)
}

/// One log record: the step index followed by every loss term.
fn log_line(step: u64, b: &LossBreakdown) -> Result<String> {
    let terms = serde_json::to_string(b)?;
    Ok(format!("{{\"step\":{step},{}", &terms[1..]))
}

fn train(
    data: &Path,
    out: &Path,
    log_path: &Path,
    cfg: RunConfig,
    resume: Option<&Path>,
    steps: Option<u64>,
) -> Result<()> {
    let corpus = load_data(data)?.corpus;
    let (mut ckpt, train_data, log_file) = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            if build_vocab(&corpus) != ckpt.vocab {
                bail!("vocabulary of {} does not match the checkpoint", data.display());
            }
            if let Some(s) = steps {
                ckpt.trainer.config.max_steps = s;
            }
            let train_data = TrainData::new(&corpus.dialogues, &corpus.inference, &ckpt.vocab, ckpt.model().config());
            let file = OpenOptions::new().create(true).append(true).open(log_path);
            (ckpt, train_data, file)
        }
        None => {
            let (ckpt, train_data) = prepare(&corpus, &cfg)?;
            (ckpt, train_data, File::create(log_path))
        }
    };
    if train_data.skipped > 0 {
        eprintln!("warning: skipped {} examples that do not fit max_len", train_data.skipped);
    }
    let mut log = BufWriter::new(log_file.with_context(|| format!("opening {}", log_path.display()))?);
    let mut write_err = None;
    let total = ckpt.trainer.config.max_steps;
    let run = ckpt.trainer.run(&train_data, |step, b| {
        if write_err.is_none() {
            if let Err(e) = log_line(step, b).and_then(|l| Ok(writeln!(log, "{l}")?)) {
                write_err = Some(e);
            }
        }
        if step % 100 == 0 || step == total {
            eprintln!("step {step}/{total} loss {:.4}", b.total);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e.context("writing loss log"));
    }
    run?;
    ckpt.save(out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
