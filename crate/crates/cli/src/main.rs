//! `snmn`: dataset generation, training, evaluation, traces and gradient
//! checks from the command line.
//!
//! Results go to stdout as one JSON object per line. Failures print a
//! single `error: code=<n> kind=<kind>: <message>` line to stderr and exit
//! with that code:
//!
//! | code | kind           |
//! |------|----------------|
//! | 1    | `runtime`      |
//! | 2    | `usage`        |
//! | 3    | `missing-file` |
//! | 4    | `config`       |
//! | 5    | `parse`        |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stack_nmn::config::RunConfig;
use stack_nmn::executor::ExecMode;
use stack_nmn::gradcheck;
use stack_nmn::gridworld::{generate_dataset, read_dataset, read_lines, Split, Vocabulary};
use stack_nmn::model::Model;
use stack_nmn::trace::{build_trace, export_trace};
use stack_nmn::training::{evaluate, prepare_examples, train, Example, TaskMix};
use stack_nmn::Error;

#[derive(Parser)]
#[command(name = "snmn", version, about = "Stack neural module networks on a synthetic grid world")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat TOML file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for checkpoints, logs and traces [default: .]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Dataset directory [default: <out-dir>/data]
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "vqa|ref|both")]
    task: Option<TaskMix>,
    #[arg(long, global = true, value_name = "on|off", value_parser = on_off)]
    layout_supervision: Option<bool>,
    #[arg(long, global = true, value_name = "T")]
    steps: Option<usize>,
    #[arg(long, global = true, value_name = "L")]
    stack_depth: Option<usize>,
    #[arg(long, global = true, value_name = "d")]
    hidden: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, val and test splits.
    Gen {
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        val_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// Train a model; writes metrics.jsonl, checkpoints/ and best/.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        sharpen_temperature: Option<f64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        target: Target,
    },
    /// Export traces for the given example ids.
    Trace {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck,
}

#[derive(Args)]
struct Target {
    /// Checkpoint directory [default: <out-dir>/best]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "val", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long, value_name = "soft|discretized")]
    mode: Option<ExecMode>,
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

struct Fail {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (3, "missing-file"),
            Error::Config(_) => (4, "config"),
            Error::Parse { .. } => (5, "parse"),
            _ => (1, "runtime"),
        };
        Fail {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Fail>;

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn with_path(path: &Path, e: Error) -> Fail {
    let mut f = Fail::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(Fail {
                code: 2,
                kind: "usage",
                message: first.trim_start_matches("error: ").to_string(),
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Fail) -> ExitCode {
    let message = f.message.replace('\n', " ");
    eprintln!("error: code={} kind={}: {message}", f.code, f.kind);
    ExitCode::from(f.code)
}

fn run(cli: Cli) -> CliResult<()> {
    let g = cli.global;
    let file = match &g.config {
        Some(p) => RunConfig::load(p).map_err(|e| with_path(p, e))?,
        None => RunConfig::default(),
    };
    let mut flags = RunConfig {
        seed: g.seed,
        out_dir: g.out_dir,
        data_dir: g.data_dir,
        task: g.task,
        layout_supervision: g.layout_supervision,
        steps: g.steps,
        stack_depth: g.stack_depth,
        hidden: g.hidden,
        ..RunConfig::default()
    };
    match &cli.command {
        Command::Gen {
            train_size,
            val_size,
            test_size,
        } => {
            flags.train_size = *train_size;
            flags.val_size = *val_size;
            flags.test_size = *test_size;
        }
        Command::Train {
            epochs,
            lr,
            batch_size,
            sharpen_temperature,
        } => {
            flags.epochs = *epochs;
            flags.lr = *lr;
            flags.batch_size = *batch_size;
            flags.sharpen_temperature = *sharpen_temperature;
        }
        Command::Eval { target } | Command::Trace { target, .. } => flags.mode = target.mode,
        Command::Gradcheck => {}
    }
    let cfg = file.merge(flags);
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let data_dir = cfg.data_dir.clone().unwrap_or_else(|| out_dir.join("data"));

    match cli.command {
        Command::Gen { .. } => {
            let spec = cfg.dataset_spec();
            let data = generate_dataset(&spec)?;
            data.write_dir(&data_dir)?;
            emit(json!({
                "data_dir": data_dir,
                "train": data.train.len(),
                "val": data.val.len(),
                "test": data.test.len(),
                "seed": spec.seed,
            }));
        }
        Command::Train { .. } => {
            let (vocab, answers) = load_vocabularies(&data_dir)?;
            let mc = cfg.model_config(vocab.len(), answers.len())?;
            let tc = cfg.train_config()?;
            let train_set = load_split(&data_dir, Split::Train, &vocab, &answers, mc.steps)?;
            let val_set = load_split(&data_dir, Split::Val, &vocab, &answers, mc.steps)?;
            let model = Model::new(mc, cfg.seed())?;
            let outcome = train(model, &tc, &train_set, &val_set, Some(&out_dir), |e| {
                emit(serde_json::to_value(e).unwrap_or_default());
            })?;
            emit(json!({
                "best_epoch": outcome.best_epoch,
                "checkpoint": out_dir.join("best"),
            }));
        }
        Command::Eval { target } => {
            let (model, examples, _, _) = load_target(&target, &cfg, &out_dir, &data_dir)?;
            let mode = cfg.mode.unwrap_or_default();
            let m = evaluate(&model, &examples, mode)?;
            let mut v = serde_json::to_value(&m).unwrap_or_default();
            v["split"] = json!(target.split);
            v["mode"] = json!(mode);
            emit(v);
        }
        Command::Trace { target, ids } => {
            let (model, examples, vocab, answers) = load_target(&target, &cfg, &out_dir, &data_dir)?;
            let mode = cfg.mode.unwrap_or_default();
            let dir = out_dir.join("traces");
            for id in ids {
                let ex = examples.iter().find(|e| e.id == id).ok_or_else(|| Fail {
                    code: 1,
                    kind: "runtime",
                    message: format!("no example with id {id} in the {} split", target.split),
                })?;
                let trace = build_trace(&model, ex, &vocab, &answers, mode)?;
                let path = export_trace(&trace, &dir)?;
                emit(json!({
                    "example_id": id,
                    "trace": path,
                    "steps": trace.steps.len(),
                    "predicted_answer": trace.predicted_answer,
                    "modules": trace.steps.iter().map(|s| s.argmax_module).collect::<Vec<_>>(),
                }));
            }
        }
        Command::Gradcheck => {
            let mut failed = Vec::new();
            for s in gradcheck::suites(cfg.seed())? {
                emit(json!({
                    "suite": s.name,
                    "max_rel_err": s.report.max_rel_err,
                    "checked": s.report.checked,
                    "passed": s.passed(),
                }));
                if !s.passed() {
                    failed.push(s.name);
                }
            }
            if !failed.is_empty() {
                return Err(Fail {
                    code: 1,
                    kind: "runtime",
                    message: format!("gradient check failed for {}", failed.join(",")),
                });
            }
        }
    }
    Ok(())
}

fn load_vocabularies(data_dir: &Path) -> CliResult<(Vocabulary, Vocabulary)> {
    let load = |name: &str| -> CliResult<Vocabulary> {
        let path = data_dir.join(name);
        let lines = read_lines(&path).map_err(|e| with_path(&path, e))?;
        Ok(Vocabulary::new(&lines)?)
    };
    Ok((load("vocab.txt")?, load("answers.txt")?))
}

fn load_split(data_dir: &Path, split: Split, vocab: &Vocabulary, answers: &Vocabulary, steps: usize) -> CliResult<Vec<Example>> {
    let path = data_dir.join(split.file_name());
    let records = read_dataset(&path).map_err(|e| with_path(&path, e))?;
    Ok(prepare_examples(&records, vocab, answers, steps)?)
}

fn load_target(
    target: &Target,
    cfg: &RunConfig,
    out_dir: &Path,
    data_dir: &Path,
) -> CliResult<(Model, Vec<Example>, Vocabulary, Vocabulary)> {
    let ckpt = target.checkpoint.clone().unwrap_or_else(|| out_dir.join("best"));
    let model = Model::load(&ckpt).map_err(|e| with_path(&ckpt, e))?;
    let (vocab, answers) = load_vocabularies(data_dir)?;
    if vocab.len() != model.config.vocab_size || answers.len() != model.config.answers {
        return Err(Error::Config(format!(
            "checkpoint expects {} words and {} answers, the dataset has {} and {}",
            model.config.vocab_size,
            model.config.answers,
            vocab.len(),
            answers.len()
        ))
        .into());
    }
    let split = match target.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        _ => Split::Val,
    };
    let mut examples = load_split(data_dir, split, &vocab, &answers, model.config.steps)?;
    if let Some(task) = cfg.task {
        examples.retain(|e| task.includes(e.kind));
    }
    Ok((model, examples, vocab, answers))
}
