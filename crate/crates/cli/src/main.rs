use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowrec::collab::{train_cm, CollabModel};
use flowrec::config::{split_assignment, RunConfig, RunManifest};
use flowrec::pipeline::{evaluate, format_sweep, stage_seeds, sweep, verify_flow, SweepAxis};
use flowrec::synth::{generate_sessions, generate_universe, read_dataset, write_dataset, World};
use flowrec::tokenizer::Tokenizer;
use flowrec::trainer::{build_splits, history_hash, load_checkpoint_for_tokenizer, save_checkpoint, train};
use flowrec::{Error, Result};

const LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
const AUGMENTED_GRID: [f64; 4] = [0.0, 1.0, 3.0, 5.0];

#[derive(Parser)]
#[command(
    name = "flowrec",
    version,
    about = "GFlowNet fine-tuning for generative recommendation on a synthetic universe"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed, overrides `seed` from the config file and --set.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override one config key, e.g. --set train.loss.lambda=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Lambda,
    K,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the item universe, user population and session dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the residual k-means tokenizer on the item embeddings.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
    },
    /// Train the collaborative model on the session dataset.
    TrainCm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Fine-tune the generative policy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Required by cm_curriculum sampling and the collaborative reward.
        #[arg(long)]
        cm: Option<PathBuf>,
    },
    /// Rank items for every user of a split and report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adds collaborative-score statistics to the diversity report.
        #[arg(long)]
        cm: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
        /// Also write the per-user ranked lists.
        #[arg(long)]
        lists: bool,
    },
    /// Fit a policy to a random reward table on an enumerable space and report proportionality.
    VerifyFlow {
        #[command(flatten)]
        common: Common,
    },
    /// Run full benchmarks over a grid of lambda or augmented-count values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated grid; defaults to 0.01,0.1,1,10,100 for lambda and 0,1,3,5 for k.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Tokenize { .. } => "tokenize",
            Command::TrainCm { .. } => "train-cm",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::VerifyFlow { .. } => "verify-flow",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Tokenize { common, .. }
            | Command::TrainCm { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::VerifyFlow { common }
            | Command::Sweep { common, .. } => common,
        }
    }
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default().resolved();
    if let Some(path) = &common.config {
        cfg = cfg.load(path)?;
    }
    let pairs = common
        .set
        .iter()
        .map(|s| split_assignment(s).map_err(Error::Config))
        .collect::<Result<Vec<_>>>()?;
    cfg = cfg.apply(pairs)?;
    if let Some(seed) = common.seed {
        cfg = cfg.apply([("seed", seed.to_string().as_str())])?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_pretty<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn load_cm(path: &Option<PathBuf>, manifest: &mut RunManifest) -> Result<Option<CollabModel>> {
    match path {
        Some(p) => {
            let cm = CollabModel::load(p)?;
            manifest.input("cm", p)?;
            Ok(Some(cm))
        }
        None => Ok(None),
    }
}

fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = effective_config(common)?;
    for line in cfg.echo()?.lines() {
        log::info!("config {line}");
    }
    let out = &common.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new(cmd.name(), &cfg)?;
    let b = &cfg.bench;
    let [world_seed, session_seed, tok_seed, cm_seed] = stage_seeds(b.seed);

    match cmd {
        Command::GenData { .. } => {
            manifest.guard(out)?;
            let world = generate_universe(b.env.num_items, b.env.num_users, b.env.dim, world_seed)?;
            let records = generate_sessions(&world, &b.env.session_config(), session_seed)?;
            let world_path = out.join("world.json");
            let data_path = out.join("dataset.jsonl");
            world.save(&world_path)?;
            write_dataset(&records, &data_path)?;
            manifest.output("world", &world_path)?;
            manifest.output("dataset", &data_path)?;
            println!("{} records, {} items, {} users", records.len(), b.env.num_items, b.env.num_users);
        }
        Command::Tokenize { world, .. } => {
            let w = World::load(world)?;
            manifest.input("world", world)?;
            manifest.guard(out)?;
            let tok = Tokenizer::fit(&w.universe, b.tok.levels, b.tok.vocab, tok_seed)?;
            let path = out.join("tokenizer.json");
            tok.save(&path)?;
            manifest.output("tokenizer", &path)?;
            println!(
                "{} items, identifier length {}, residual sse {:.6}",
                tok.index.num_items(),
                tok.index.max_len(),
                tok.residual_sse
            );
        }
        Command::TrainCm { dataset, .. } => {
            let records = read_dataset(dataset)?;
            manifest.input("dataset", dataset)?;
            manifest.guard(out)?;
            let cm = train_cm(&records, b.env.num_items, &b.cm, cm_seed)?;
            let path = out.join("cm.json");
            cm.save(&path)?;
            manifest.output("cm", &path)?;
            println!("final bpr loss {:.6}", cm.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Train {
            dataset, tokenizer, cm, ..
        } => {
            let tok = Tokenizer::load(tokenizer)?;
            let records = read_dataset(dataset)?;
            manifest.input("dataset", dataset)?;
            manifest.input("tokenizer", tokenizer)?;
            let cm = load_cm(cm, &mut manifest)?;
            manifest.guard(out)?;
            let splits = build_splits(&records, &tok)?;
            let outcome = train(&b.train, &splits, &tok, cm.as_ref())?;
            let ckpt = out.join("checkpoint.json");
            let history = out.join("history.json");
            let steps = out.join("steps.jsonl");
            save_checkpoint(&outcome.policy, &ckpt)?;
            write_pretty(&history, &outcome.history)?;
            write_lines(&steps, &outcome.steps)?;
            manifest.output("checkpoint", &ckpt)?;
            manifest.output("history", &history)?;
            manifest.output("steps", &steps)?;
            println!(
                "best epoch {} valid ndcg@10 {:.4}{}; history {}",
                outcome.best_epoch,
                outcome.best_valid_ndcg,
                if outcome.stopped_early { " (stopped early)" } else { "" },
                history_hash(&outcome.history)
            );
        }
        Command::Eval {
            dataset,
            tokenizer,
            world,
            checkpoint,
            cm,
            split,
            lists,
            ..
        } => {
            let tok = Tokenizer::load(tokenizer)?;
            let w = World::load(world)?;
            let records = read_dataset(dataset)?;
            let policy = load_checkpoint_for_tokenizer(checkpoint, &tok)?;
            manifest.input("dataset", dataset)?;
            manifest.input("tokenizer", tokenizer)?;
            manifest.input("world", world)?;
            manifest.input("checkpoint", checkpoint)?;
            let cm = load_cm(cm, &mut manifest)?;
            let splits = build_splits(&records, &tok)?;
            let (name, examples) = match split {
                Split::Valid => ("valid", &splits.valid),
                Split::Test => ("test", &splits.test),
            };
            manifest.command = format!("eval-{name}");
            manifest.guard(out)?;
            let (report, ranked) = evaluate(&policy, examples, name, &tok, &w, cm.as_ref(), &b.eval)?;
            let path = out.join(format!("eval-{name}.json"));
            write_pretty(&path, &report)?;
            manifest.output("report", &path)?;
            if *lists {
                let lpath = out.join(format!("lists-{name}.jsonl"));
                write_lines(&lpath, &ranked)?;
                manifest.output("lists", &lpath)?;
            }
            let m = &report.metrics;
            println!(
                "{name}: users {} recall@5 {:.4} recall@10 {:.4} ndcg@5 {:.4} ndcg@10 {:.4} value-ndcg@{} {:.4}",
                report.users, m.recall_at_5, m.recall_at_10, m.ndcg_at_5, m.ndcg_at_10, report.k, report.value_ndcg
            );
        }
        Command::VerifyFlow { .. } => {
            manifest.guard(out)?;
            let run = verify_flow(&cfg.flow, &b.tok, b.env.dim, b.seed)?;
            let path = out.join("flow-report.json");
            write_pretty(&path, &run)?;
            manifest.output("report", &path)?;
            let r = &run.report;
            println!(
                "identifiers {} tv {:.5} pearson {:.5} Z {:.5} sum R {:.5} (rel. err {:.5})",
                r.num_identifiers, r.total_variation, r.pearson, r.z_estimate, r.reward_total, r.z_relative_error
            );
        }
        Command::Sweep { axis, values, seeds, .. } => {
            let (axis, default_grid): (SweepAxis, &[f64]) = match axis {
                Axis::Lambda => (SweepAxis::Lambda, &LAMBDA_GRID),
                Axis::K => (SweepAxis::Augmented, &AUGMENTED_GRID),
            };
            let grid = if values.is_empty() { default_grid.to_vec() } else { values.clone() };
            manifest.command = format!("sweep-{}", if axis == SweepAxis::Lambda { "lambda" } else { "k" });
            manifest.guard(out)?;
            let rows = sweep(&b.clone(), axis, &grid, seeds)?;
            let table = format_sweep(&rows);
            let tsv = out.join(format!("{}.tsv", manifest.command));
            let json = out.join(format!("{}.json", manifest.command));
            write_text(&tsv, &table)?;
            write_pretty(&json, &rows)?;
            manifest.output("table", &tsv)?;
            manifest.output("rows", &json)?;
            print!("{table}");
        }
    }
    let path = manifest.write(out)?;
    log::info!("manifest {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
