//! Command-line front end: `train`, `eval`, `probe` and `ablate`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::envs::{Env, Task};
use crate::error::{Error, Result};
use crate::harness::collect::{run_episode, Actor};
use crate::harness::config::{TrainConfig, Variant};
use crate::harness::probes::{run_probes, ProbeDataset, ProbeReport, Reconstructions, DECODER_STEPS};
use crate::harness::train::{evaluate_agent, mean_std, random_returns, Trainer};
use crate::metrics::FileSink;

pub const RUN_ROOT_VAR: &str = "TPC_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "tpc", version, about = "Temporal predictive coding agents on small pixel tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the deterministic policy.
    Eval(EvalArgs),
    /// Run the linear and reconstruction probes on a checkpoint's encoder.
    Probe(ProbeArgs),
    /// Train every variant for several seeds and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-path override, e.g. `loss.lambda2=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; defaults to a fresh directory under $TPC_RUN_ROOT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub episodes: usize,
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Episodes collected with a random policy for the probe dataset.
    #[arg(long, default_value_t = 6)]
    pub episodes: usize,
    /// Episodes held out for scoring.
    #[arg(long, default_value_t = 2)]
    pub holdout: usize,
    #[arg(long, default_value_t = DECODER_STEPS)]
    pub decoder_steps: usize,
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Also run the variant without dynamics smoothing.
    #[arg(long)]
    pub no_smoothing: bool,
    #[command(flatten)]
    pub common: ConfigArgs,
}

/// A validated configuration and the overrides that produced it.
#[derive(Debug)]
pub struct LoadedConfig {
    pub config: TrainConfig,
    pub overrides: Vec<String>,
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("override path is non-empty");
    let mut table = root;
    for seg in parents {
        let entry = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {} crosses a non-table value", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if k != "background" => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds a configuration from TOML text plus overrides.
///
/// Missing fields come from the preset named by the top-level `preset` key
/// (`desk` by default) for the task in `env.task`. Unknown keys are
/// rejected and listed together.
pub fn load_config(text: &str, overrides: &[String], seed: Option<u64>) -> Result<LoadedConfig> {
    let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
    let mut applied = Vec::new();
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        set_path(&mut user, &path, value)?;
        applied.push(raw.clone());
    }
    if let Some(s) = seed {
        user.insert("seed".into(), toml::Value::Integer(s as i64));
        applied.push(format!("seed={s}"));
    }
    let preset = match user.remove("preset") {
        None => "desk".to_string(),
        Some(toml::Value::String(s)) => s,
        Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
    };
    let task: Task = user
        .get("env")
        .and_then(|e| e.get("task"))
        .and_then(|t| t.as_str())
        .ok_or_else(|| Error::Config("env.task is required".into()))?
        .parse()?;
    let base = match preset.as_str() {
        "desk" => TrainConfig::desk(task),
        "paper" => TrainConfig::paper(task),
        other => return Err(Error::Config(format!("unknown preset {other:?}; expected desk or paper"))),
    };
    let mut merged = match toml::Value::try_from(&base) {
        Ok(toml::Value::Table(t)) => t,
        Ok(_) => return Err(Error::Config("preset did not serialize to a table".into())),
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    merge(&mut merged, user);

    let mut unknown = BTreeSet::new();
    let de = toml::Value::Table(merged);
    let config: TrainConfig = serde_ignored::deserialize(de, |path| {
        unknown.insert(path.to_string());
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown configuration keys: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    config.validate()?;
    Ok(LoadedConfig {
        config,
        overrides: applied,
    })
}

pub fn load_config_file(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<LoadedConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    if path.is_none() && !overrides.iter().any(|o| o.trim_start().starts_with("env.task")) {
        return Err(Error::Config("pass --config or --set env.task=<task>".into()));
    }
    load_config(&text, overrides, seed)
}

/// The configuration exactly as stored in a run directory.
pub fn config_snapshot(config: &TrainConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_VAR).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from)
}

/// `out` if given, else the first unused `<root>/<stem>`, `<root>/<stem>-1`, ….
fn run_dir(out: Option<&Path>, stem: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = run_root();
            let mut k = 0;
            loop {
                let name = if k == 0 { stem.to_string() } else { format!("{stem}-{k}") };
                let candidate = root.join(name);
                if !candidate.exists() {
                    break candidate;
                }
                k += 1;
            }
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn variant_name(c: &TrainConfig) -> &'static str {
    let a = &c.ablation;
    if a.spc_only {
        "spc_only"
    } else if a.unstable_tpc {
        "unstable_tpc"
    } else if a.no_smoothing {
        "no_smoothing"
    } else {
        "full_tpc"
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    code_version: &'a str,
    seed: u64,
    started_at_unix: u64,
    source_config: Option<String>,
    overrides: &'a [String],
    config: &'a str,
    outputs: serde_json::Value,
}

/// Writes `config.toml` and `manifest.json`, then trains with checkpoints
/// and metrics in `dir`.
pub fn train_into(dir: &Path, loaded: &LoadedConfig, source: Option<&Path>) -> Result<Trainer> {
    let cfg = &loaded.config;
    let snapshot = config_snapshot(cfg)?;
    fs::write(dir.join("config.toml"), &snapshot)?;
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        started_at_unix: now_secs(),
        source_config: source.map(|p| p.display().to_string()),
        overrides: &loaded.overrides,
        config: "config.toml",
        outputs: json!({
            "metrics_jsonl": "metrics.jsonl",
            "metrics_csv": "metrics.csv",
            "checkpoints": "checkpoints",
            "status": "status.json",
        }),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let mut sink = FileSink::create(dir)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let every = cfg.checkpoint_every;
    let result = trainer.run_with(&mut sink, &mut |t| {
        if every > 0 && t.iterations % every as u64 == 0 {
            t.checkpoint().save(&ck_dir.join(format!("iter_{:06}.json", t.iterations)))?;
        }
        Ok(())
    });
    let status = match &result {
        Ok(summary) => {
            trainer.checkpoint().save(&ck_dir.join("final.json"))?;
            json!({ "state": "completed", "finished_at_unix": now_secs(), "summary": summary })
        }
        Err(e) => json!({ "state": "failed", "finished_at_unix": now_secs(), "error": e.to_string() }),
    };
    fs::write(dir.join("status.json"), serde_json::to_string_pretty(&status)?)?;
    result.map(|_| trainer)
}

fn cmd_train(args: &TrainArgs) -> Result<serde_json::Value> {
    let c = &args.common;
    let loaded = load_config_file(c.config.as_deref(), &c.set, c.seed)?;
    let cfg = &loaded.config;
    let stem = format!("{}_{}_s{}", cfg.env.task.name(), variant_name(cfg), cfg.seed);
    let dir = run_dir(c.out.as_deref(), &stem)?;
    let trainer = train_into(&dir, &loaded, c.config.as_deref())?;
    Ok(json!({
        "run_dir": dir.display().to_string(),
        "env_steps": trainer.env_steps,
        "grad_steps": trainer.grad_steps,
    }))
}

/// Environment configuration for eval/probe: the checkpoint's own unless a
/// config file or overrides are given, in which case their `env` is used.
fn env_for(ck: &Checkpoint, c: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = ck.config.clone();
    if c.config.is_some() || !c.set.is_empty() {
        let text = match &c.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => format!("[env]\ntask = \"{}\"\n", ck.config.env.task.name()),
        };
        let loaded = load_config(&text, &c.set, None)?;
        cfg.env = loaded.config.env;
        cfg.eval_episode_length = loaded.config.eval_episode_length;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    ck.check_env(&cfg.env)?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub episode_length: usize,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub random_returns: Vec<f64>,
    pub random_mean: f64,
}

pub fn evaluate_checkpoint(ck: &Checkpoint, cfg: &TrainConfig, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let agent = ck.restore()?;
    let returns = evaluate_agent(&agent, cfg, episodes, cfg.seed)?;
    let random = random_returns(cfg, episodes, cfg.seed)?;
    let (mean, std) = mean_std(&returns);
    Ok(EvalReport {
        episodes,
        episode_length: cfg.eval_episode_length,
        returns,
        mean,
        std,
        random_mean: mean_std(&random).0,
        random_returns: random,
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<serde_json::Value> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = env_for(&ck, &args.common)?;
    let report = evaluate_checkpoint(&ck, &cfg, args.episodes)?;
    let value = serde_json::to_value(&report)?;
    if let Some(out) = &args.common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&value)?)?;
    }
    Ok(value)
}

/// Collects `episodes` random-policy episodes of the evaluation environment.
pub fn probe_dataset(cfg: &TrainConfig, episodes: usize, holdout: usize) -> Result<ProbeDataset> {
    let env_cfg = cfg.eval_env();
    let mut env = Env::new(env_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = (0..episodes)
        .map(|i| run_episode(&mut env, cfg.seed.wrapping_add(i as u64), Actor::Random, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    ProbeDataset::from_episodes(&eps, env_cfg.image_size, holdout)
}

/// Two-row strip: ground truth on top, reconstruction below, pixels mapped
/// from `[−0.5, 0.5]` to 8-bit grey.
pub fn image_grid(images: &Reconstructions, size: usize) -> image::GrayImage {
    let cols = images.truth.len().max(1);
    let mut img = image::GrayImage::new((cols * size) as u32, (2 * size) as u32);
    let to_byte = |v: f64| ((v + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
    for (row, set) in [&images.truth, &images.reconstruction].into_iter().enumerate() {
        for (k, frame) in set.iter().enumerate() {
            for (p, &v) in frame.iter().enumerate() {
                let (y, x) = (p / size, p % size);
                img.put_pixel((k * size + x) as u32, (row * size + y) as u32, image::Luma([to_byte(v)]));
            }
        }
    }
    img
}

pub fn write_probe_outputs(dir: &Path, report: &ProbeReport, images: &Reconstructions, size: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("probe_report.json"), serde_json::to_string_pretty(report)?)?;
    let grid = image_grid(images, size);
    for name in ["probe_grid.pgm", "probe_grid.png"] {
        grid.save(dir.join(name))
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}

fn cmd_probe(args: &ProbeArgs) -> Result<serde_json::Value> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = env_for(&ck, &args.common)?;
    let agent = ck.restore()?;
    let data = probe_dataset(&cfg, args.episodes, args.holdout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (report, images) = run_probes(&agent.world_model, &data, args.decoder_steps, &mut rng)?;
    let dir = run_dir(args.common.out.as_deref(), &format!("probe_{}_s{}", cfg.env.task.name(), cfg.seed))?;
    write_probe_outputs(&dir, &report, &images, cfg.env.image_size)?;
    let mut v = serde_json::to_value(&report)?;
    v["out"] = json!(dir.display().to_string());
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_return: f64,
    pub min_latent_std: f64,
}

/// Runs every variant for seeds `base.seed .. base.seed + seeds`, each into
/// `<dir>/<variant>_s<seed>`, and writes `ablation.csv` and `latent_std.csv`.
pub fn ablate_into(dir: &Path, base: &LoadedConfig, seeds: u64, no_smoothing: bool) -> Result<Vec<AblationRow>> {
    let mut variants = vec![Variant::FullTpc, Variant::SpcOnly, Variant::UnstableTpc];
    if no_smoothing {
        variants.push(Variant::NoSmoothing);
    }
    let mut rows = Vec::new();
    let mut table = String::from("variant,seed,final_return,min_latent_std\n");
    let mut traj = String::from("variant,seed,grad_steps,latent_std,min_latent_std\n");
    for v in &variants {
        for k in 0..seeds {
            let mut cfg = base.config.clone();
            cfg.seed = base.config.seed + k;
            cfg.ablation = v.ablation();
            let mut overrides = base.overrides.clone();
            overrides.push(format!("ablation={}", v.name()));
            overrides.push(format!("seed={}", cfg.seed));
            let loaded = LoadedConfig { config: cfg, overrides };
            let sub = dir.join(format!("{}_s{}", v.name(), loaded.config.seed));
            fs::create_dir_all(&sub)?;
            let trainer = train_into(&sub, &loaded, None)?;
            let metrics = crate::metrics::read_csv(&fs::read_to_string(sub.join("metrics.csv"))?);
            for r in metrics.iter().filter(|r| r.kind == "train") {
                traj.push_str(&format!(
                    "{},{},{},{},{}\n",
                    v.name(),
                    loaded.config.seed,
                    r.get("grad_steps").unwrap_or(f64::NAN),
                    r.get("latent_std").unwrap_or(f64::NAN),
                    r.get("min_latent_std").unwrap_or(f64::NAN)
                ));
            }
            let final_return = metrics
                .iter()
                .rev()
                .find(|r| r.kind == "eval")
                .and_then(|r| r.get("eval_return"))
                .unwrap_or(f64::NAN);
            let row = AblationRow {
                variant: v.name().to_string(),
                seed: loaded.config.seed,
                final_return,
                min_latent_std: trainer.min_latent_std,
            };
            table.push_str(&format!("{},{},{},{}\n", row.variant, row.seed, row.final_return, row.min_latent_std));
            rows.push(row);
        }
    }
    fs::write(dir.join("ablation.csv"), table)?;
    fs::write(dir.join("latent_std.csv"), traj)?;
    Ok(rows)
}

fn cmd_ablate(args: &AblateArgs) -> Result<serde_json::Value> {
    let c = &args.common;
    if args.seeds == 0 {
        return Err(Error::Config("seeds must be at least 1".into()));
    }
    let loaded = load_config_file(c.config.as_deref(), &c.set, c.seed)?;
    let dir = run_dir(c.out.as_deref(), &format!("ablate_{}_s{}", loaded.config.env.task.name(), loaded.config.seed))?;
    let rows = ablate_into(&dir, &loaded, args.seeds, args.no_smoothing)?;
    Ok(json!({ "out": dir.display().to_string(), "rows": rows }))
}

/// Error record printed on stderr; the only thing that makes the exit code nonzero.
pub fn error_record(e: &Error) -> String {
    json!({ "kind": "error", "message": e.to_string() }).to_string()
}

/// Runs a parsed command, printing its JSON result on stdout. Returns the
/// process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[env]\ntask = \"pendulum_lite\"\n";

    #[test]
    fn overrides_reach_nested_fields() {
        let l = load_config(BASE, &["loss.lambda2=0.2".into(), "batch_size=8".into()], Some(4)).unwrap();
        assert_eq!(l.config.loss.lambda2, 0.2);
        assert_eq!(l.config.batch_size, 8);
        assert_eq!(l.config.seed, 4);
        assert_eq!(l.overrides, vec!["loss.lambda2=0.2", "batch_size=8", "seed=4"]);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text = format!("{BASE}bogus = 1\n[loss]\nlambda9 = 2.0\n");
        let err = load_config(&text, &["behavior.horizn=3".into()], None).unwrap_err().to_string();
        for k in ["bogus", "loss.lambda9", "behavior.horizn"] {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn snapshot_reloads_byte_exact() {
        let l = load_config(BASE, &["loss.lambda2=0.05".into()], Some(2)).unwrap();
        let snap = config_snapshot(&l.config).unwrap();
        let again = load_config(&snap, &[], None).unwrap();
        assert_eq!(again.config, l.config);
        assert_eq!(config_snapshot(&again.config).unwrap(), snap);
    }

    #[test]
    fn background_table_is_replaced_not_merged() {
        let text = format!("{BASE}[env.background]\nkind = \"random_per_step\"\ntile = 2\n");
        let l = load_config(&text, &[], None).unwrap();
        assert_eq!(
            l.config.env.background,
            crate::envs::BackgroundSource::RandomPerStep {
                tile: 2,
                low: -0.5,
                high: 0.1
            }
        );
    }

    #[test]
    fn ablation_flags_must_be_exclusive() {
        let err = load_config(BASE, &["ablation.spc_only=true".into()], None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn grid_has_two_rows() {
        let images = Reconstructions {
            truth: vec![vec![0.5; 16], vec![-0.5; 16]],
            reconstruction: vec![vec![0.0; 16], vec![0.0; 16]],
        };
        let g = image_grid(&images, 4);
        assert_eq!((g.width(), g.height()), (8, 8));
        assert_eq!(g.get_pixel(0, 0)[0], 255);
        assert_eq!(g.get_pixel(4, 0)[0], 0);
        assert_eq!(g.get_pixel(0, 4)[0], 128);
    }
}
