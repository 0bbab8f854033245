use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bon::checkpoint::{encode_hash, encode_model, read_model, write_bytes};
use bon::config::{SynthParams, TrainConfig};
use bon::error::{BonError, Result};
use bon::format::{read_dataset, write_dataset};
use bon::report::{compare, parse_experiments, write_json, write_runlog, RunSummary};
use bon::train::{evaluate_model, train, SamplerState};
use bon_core::data::generate_synthetic;
use bon_core::samplers::SamplerKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bon", version, about = "Bag of Negatives training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered-identity dataset.
    GenData(GenData),
    /// Train one configuration and write its run log.
    Train(Box<Train>),
    /// Run a JSON list of configurations and summarize them.
    Compare {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "compare_out")]
        out: PathBuf,
    },
    /// mAP of a model checkpoint over every sample of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthParams::default().num_ids)]
    num_ids: usize,
    #[arg(long, default_value_t = SynthParams::default().images_per_id)]
    images_per_id: usize,
    #[arg(long, default_value_t = SynthParams::default().input_dim)]
    input_dim: usize,
    #[arg(long, default_value_t = SynthParams::default().cluster_spread)]
    cluster_spread: f64,
    #[arg(long, default_value_t = SynthParams::default().noise_sigma)]
    noise_sigma: f64,
    /// Leading coordinates carrying identity signal; 0 means all of them.
    #[arg(long, default_value_t = SynthParams::default().signal_dim.unwrap_or(0))]
    signal_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    /// JSON configuration; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<u32>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sh_rebuild_interval: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// BONDATA file; the synthetic benchmark is generated when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Evaluate on the full splits.
    #[arg(long)]
    full_eval: bool,
    /// Output directory for runlog.csv, summary.json and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| BonError::io(format!("reading {}", path.display()), e))
}

fn gen_data(a: &GenData) -> Result<()> {
    let params = SynthParams {
        num_ids: a.num_ids,
        images_per_id: a.images_per_id,
        input_dim: a.input_dim,
        cluster_spread: a.cluster_spread,
        noise_sigma: a.noise_sigma,
        signal_dim: (a.signal_dim > 0).then_some(a.signal_dim),
        seed: a.seed,
    };
    let ds = generate_synthetic(&(&params).into()).map_err(|e| BonError::Usage(e.to_string()))?;
    write_dataset(&ds, &a.out)?;
    log::info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn run_train(a: &Train) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => serde_json::from_str(&read_text(path)?).map_err(|e| BonError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(sampler, alpha, m, k, s, beta, steps, eval_interval, lr, sh_rebuild_interval, seed);
    if a.dataset.is_some() {
        cfg.dataset = a.dataset.clone();
    }
    cfg.full_eval |= a.full_eval;

    let out = train(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| BonError::Runtime(format!("creating {}: {e}", a.out.display())))?;
    write_runlog(&out.log, &a.out.join("runlog.csv"))?;
    write_json(&RunSummary::from_output(&cfg, &out), &a.out.join("summary.json"))?;
    write_json(&cfg, &a.out.join("config.json"))?;
    write_bytes(&a.out.join("model.bin"), &encode_model(&out.model)?)?;
    if let SamplerState::Bon(state) = &out.state {
        write_bytes(&a.out.join("hash.bin"), &encode_hash(state)?)?;
    }
    if let Some(last) = out.log.rows.last() {
        println!(
            "step {} train_map {:.4} val_map {:.4} hash_fraction {:.3}",
            last.step,
            last.train_map,
            last.val_map,
            out.timing.hash_fraction()
        );
    }
    Ok(())
}

fn run_compare(spec: &Path, out: &Path) -> Result<()> {
    let configs = parse_experiments(&read_text(spec)?, &spec.display().to_string())?;
    let cmp = compare(&configs, out)?;
    println!("{:<32} {:>8} {:>8} {:>10}", "run", "peak", "at step", "status");
    for s in &cmp.summaries {
        println!(
            "{:<32} {:>8} {:>8} {:>10}",
            s.name,
            s.peak_val_map.map_or("-".into(), |m| format!("{m:.4}")),
            s.steps_to_peak.map_or("-".into(), |x| x.to_string()),
            s.status
        );
    }
    if cmp.all_ok() {
        Ok(())
    } else {
        let failed = cmp.summaries.iter().filter(|s| !s.ok()).count();
        Err(BonError::Runtime(format!("{failed} of {} runs failed", cmp.summaries.len())))
    }
}

fn run_eval(checkpoint: &Path, dataset: &Path) -> Result<()> {
    let model = read_model(checkpoint)?;
    let ds = read_dataset(dataset)?;
    let report = evaluate_model(&ds, &model)?;
    println!(
        "{}",
        serde_json::json!({
            "map": report.map,
            "evaluated": report.evaluated,
            "without_positive": report.without_positive,
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Compare { spec, out } => run_compare(spec, out),
        Command::Eval { checkpoint, dataset } => run_eval(checkpoint, dataset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
