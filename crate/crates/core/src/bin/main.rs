use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rslora_ts::data::{DatasetKind, DatasetManifest, Frequency, SplitSpec, SynthKind, SynthParams, SynthSource};
use rslora_ts::exec::set_threads;
use rslora_ts::harness::{
    cmd_eval, cmd_params, cmd_rank_sweep, cmd_stability, cmd_synth, cmd_train, cmd_zero_shot,
    ExperimentSpec, RunContext,
};
use rslora_ts::rslora::stability::StabilizationConfig;
use rslora_ts::Error;

#[derive(Parser)]
#[command(name = "rslora-ts", version, about = "Rank-stabilized LoRA for time series")]
struct Cli {
    /// Experiment spec (TOML).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces the spec's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and write record.json, metrics.csv and adapters.ckpt.
    Train,
    /// Evaluate the adapters saved in --out on the test split.
    Eval,
    /// Train and evaluate every rank in the spec.
    RankSweep,
    /// Moment-scaling experiment over ranks and scaling exponents.
    Stability,
    /// Train on source collections, evaluate on targets without updates.
    ZeroShot,
    /// Parameter and checkpoint-size table.
    Params,
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long, value_enum, default_value = "multi-sine")]
        kind: SynthArg,
        #[arg(long, default_value_t = 4000)]
        length: usize,
        #[arg(long, default_value_t = 3)]
        vars: usize,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value = "hourly")]
        frequency: String,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SynthArg {
    MultiSine,
    TrendSeasonNoise,
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec, Error> {
    let path = cli
        .spec
        .as_deref()
        .ok_or_else(|| Error::Validation(vec!["--spec is required for this command".into()]))?;
    let mut spec = ExperimentSpec::from_file(path)?;
    if let Some(s) = cli.seed {
        spec.seeds = vec![s];
    }
    Ok(spec)
}

fn stability_config(cli: &Cli) -> Result<StabilizationConfig, Error> {
    let mut cfg = match cli.spec.as_deref() {
        None => StabilizationConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            match toml::from_str::<StabilizationConfig>(&text) {
                Ok(c) => c,
                Err(_) => ExperimentSpec::from_file(p)?
                    .stability
                    .ok_or_else(|| Error::Validation(vec!["spec has no [stability] section".into()]))?,
            }
        }
    };
    if let Some(s) = cli.seed {
        cfg.base_seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, spec: Option<&ExperimentSpec>, default: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| spec.and_then(|s| s.output_dir.clone()))
        .unwrap_or_else(|| Path::new("runs").join(default))
}

fn run(cli: &Cli) -> Result<String, Error> {
    if let Some(t) = cli.threads {
        set_threads(t);
    }
    match &cli.command {
        Command::Train => {
            let spec = load_spec(cli)?;
            let ctx = RunContext::new(out_dir(cli, Some(&spec), "train"));
            let rec = cmd_train(&spec, &ctx)?;
            let mse: Vec<String> = rec
                .horizons
                .iter()
                .map(|h| format!("h={} mse={:.6}", h.horizon, h.mean.get("mse").unwrap_or(f64::NAN)))
                .collect();
            Ok(format!("{} -> {}", mse.join(", "), ctx.out.display()))
        }
        Command::Eval => {
            let spec = load_spec(cli)?;
            let ctx = RunContext::new(out_dir(cli, Some(&spec), "train"));
            let rec = cmd_eval(&spec, &ctx)?;
            Ok(format!("evaluated {} horizon(s) -> {}", rec.horizons.len(), ctx.out.display()))
        }
        Command::RankSweep => {
            let spec = load_spec(cli)?;
            let ctx = RunContext::new(out_dir(cli, Some(&spec), "rank-sweep"));
            let rep = cmd_rank_sweep(&spec, &ctx)?;
            let sat: Vec<String> = rep
                .saturation
                .iter()
                .map(|(h, r)| format!("h={h} saturation rank {}", r.map_or("none".into(), |r| r.to_string())))
                .collect();
            Ok(format!("{} -> {}", sat.join(", "), ctx.out.display()))
        }
        Command::Stability => {
            let cfg = stability_config(cli)?;
            let ctx = RunContext::new(out_dir(cli, None, "stability"));
            let rep = cmd_stability(&cfg, &ctx)?;
            let lines: Vec<String> = rep
                .summary
                .iter()
                .map(|s| format!("gamma={} ratio={:.3} {:?}", s.gamma, s.ratio_max_min, s.verdict))
                .collect();
            Ok(lines.join("\n"))
        }
        Command::ZeroShot => {
            let spec = load_spec(cli)?;
            let ctx = RunContext::new(out_dir(cli, Some(&spec), "zero-shot"));
            let rows = cmd_zero_shot(&spec, &ctx)?;
            Ok(format!("{} row(s) -> {}", rows.len(), ctx.out.display()))
        }
        Command::Params => {
            let spec = load_spec(cli)?;
            let ctx = RunContext::new(out_dir(cli, Some(&spec), "params"));
            let rows = cmd_params(&spec, &ctx)?;
            Ok(format!("{} row(s) -> {}", rows.len(), ctx.out.display()))
        }
        Command::Synth {
            kind,
            length,
            vars,
            name,
            frequency,
        } => {
            let manifest = match &cli.spec {
                Some(_) => load_spec(cli)?.require_dataset()?.clone(),
                None => DatasetManifest {
                    name: name.clone(),
                    frequency: frequency.parse::<Frequency>()?,
                    kind: DatasetKind::Table,
                    path: None,
                    synth: Some(SynthSource {
                        kind: match kind {
                            SynthArg::MultiSine => SynthKind::MultiSine,
                            SynthArg::TrendSeasonNoise => SynthKind::TrendSeasonNoise,
                        },
                        length: *length,
                        seed: cli.seed.unwrap_or(0),
                        params: SynthParams::default(),
                    }),
                    n_vars: *vars,
                    has_header: false,
                    timestamp_column: None,
                    id_column: false,
                    split: SplitSpec::default(),
                },
            };
            let ctx = RunContext::new(out_dir(cli, None, "synth"));
            let path = cmd_synth(&manifest, &ctx)?;
            Ok(format!("wrote {}", path.display()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Validation(_) | Error::Config(_) | Error::Parse { .. } => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
