//! Command-line entry point: `train`, `evaluate`, `oracle`, `enumerate`.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or input error.

use crate::action_space::enumerate_actions;
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::{boltzmann_oracle, oracle_check_on, PROBE_SEEDS};
use crate::softq::ParamKind;
use crate::trainer::{checkpoint, resume_training, run_training, TrainConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "structflow", version, about = "Structured-action flow-network sampler trained against a soft-Q energy model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training from a config file.
    Train(TrainArgs),
    /// Roll out a trained checkpoint and report mean episode reward.
    Evaluate(EvaluateArgs),
    /// Compare the sampler's exact terminating distribution against the
    /// energy model's Boltzmann target.
    Oracle(OracleArgs),
    /// Dump target and learned probabilities per action as CSV.
    Enumerate(EnumerateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML or JSON file mirroring the training config field names.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set lr_q=1e-3 or --set env.n_signals=4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Environment config file (TOML or JSON).
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    episodes: u64,
    /// Base seed for evaluation episodes.
    #[arg(long, default_value_t = 10_000)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    env: PathBuf,
    /// Maximum tolerated total-variation distance on any probe.
    #[arg(long)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Enumerate(args) => cmd_enumerate(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Reads a TOML or JSON file into a JSON value.
fn read_value(path: &Path) -> Result<serde_json::Value> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        let v: toml::Value =
            toml::from_str(&raw).map_err(|e| Error::Config(format!("TOML parse: {e}")))?;
        serde_json::to_value(v).map_err(|e| Error::Config(format!("TOML convert: {e}")))
    } else {
        serde_json::from_str(&raw).map_err(|e| Error::Config(format!("JSON parse: {e}")))
    }
}

/// Applies one `key=value` override, with dotted paths into nested tables.
fn apply_override(root: &mut serde_json::Value, setting: &str) -> Result<()> {
    let (key, raw) = setting
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{setting}' is not KEY=VALUE")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot descend into '{part}'")))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config("override target is not a table".into()))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn load_train_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut value = read_value(path)?;
    for s in overrides {
        apply_override(&mut value, s)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("config invalid: {e}")))
}

fn load_env_config(path: &Path) -> Result<EnvConfig> {
    let value = read_value(path)?;
    serde_json::from_value(value).map_err(|e| Error::Config(format!("env config invalid: {e}")))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let artifacts = match &args.resume {
        Some(ckpt) => resume_training(ckpt, &args.out)?,
        None => {
            let config = load_train_config(&args.config, &args.set)?;
            run_training(config, &args.out)?
        }
    };
    println!(
        "trained {} env steps ({} EBM updates, {} sampler updates); metrics at {}",
        artifacts.total_env_steps,
        artifacts.ebm_updates,
        artifacts.gfn_updates,
        artifacts.metrics_path.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct EvaluateReport {
    mean: f64,
    std: f64,
    episodes: u64,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32> {
    if args.episodes == 0 {
        return Err(Error::Config("--episodes must be >= 1".into()));
    }
    let trainer = checkpoint::load(&args.ckpt)?;
    let env_config = load_env_config(&args.env)?;

    let mut returns = Vec::with_capacity(args.episodes as usize);
    for i in 0..args.episodes {
        let mut env = env_config.build(args.seed + i)?;
        let mut spec = env.action_spec().clone();
        spec.termination_enabled = trainer.config.termination_enabled;
        let mut rng = ChaCha12Rng::seed_from_u64(args.seed ^ (i << 20));
        let mut last_action = None;
        let mut total = 0.0;
        loop {
            let obs = env.obs();
            let tau =
                trainer.gfn.sample_trajectory(&obs, &spec, &mut rng, false, last_action.as_ref())?;
            let action = tau.terminal.clone();
            let (_, reward, done) = env.step(&action)?;
            total += reward;
            last_action = Some(action);
            if done {
                break;
            }
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / returns.len() as f64;
    let report = EvaluateReport { mean, std: var.sqrt(), episodes: args.episodes };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    println!("{json}");
    if let Some(out) = args.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("evaluate.json"), json)?;
    }
    Ok(0)
}

fn cmd_oracle(args: OracleArgs) -> Result<i32> {
    let trainer = checkpoint::load(&args.ckpt)?;
    let env_config = load_env_config(&args.env)?;
    let report = oracle_check_on(&trainer, &env_config, args.tol)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    println!("{json}");
    if let Some(out) = args.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("oracle.json"), json)?;
    }
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_enumerate(args: EnumerateArgs) -> Result<i32> {
    let trainer = checkpoint::load(&args.ckpt)?;
    let env_config = load_env_config(&args.env)?;
    let env = env_config.build(PROBE_SEEDS[0])?;
    let mut spec = env.action_spec().clone();
    spec.termination_enabled = trainer.config.termination_enabled;
    let obs = env.obs();
    let limit = trainer.config.enumeration_limit;

    let target = boltzmann_oracle(&trainer.q, ParamKind::Online, &obs, &spec, limit)?;
    let learned =
        trainer.gfn.exact_terminating_distribution(ParamKind::Online, &obs, &spec, limit, None)?;

    let mut csv = String::from("action_index,target_prob,learned_prob\n");
    for (idx, action) in enumerate_actions(&spec, limit)?.iter().enumerate() {
        let t = target.get(action).copied().unwrap_or(0.0);
        let l = learned.get(action).copied().unwrap_or(0.0);
        csv.push_str(&format!("{idx},{t},{l}\n"));
    }
    print!("{csv}");
    if let Some(out) = args.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("enumerate.csv"), csv)?;
    }
    Ok(0)
}
