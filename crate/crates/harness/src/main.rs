//! Command-line front end for the event-triggered consensus lab.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use etcomm_core::comm::TriggerLogRow;
use etcomm_core::env::EnvConfig;
use etcomm_core::net::NetConfig;
use etcomm_core::trainer::{evaluate, load_checkpoint, TrainSetup};
use etcomm_harness::{
    inspect_comm, load_config_file, load_records, plot, run, table, ExperimentSpec, TableMetric,
    Variant,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "etcomm",
    about = "Event-triggered consensus communication lab: train, ablate, and inspect formation-control policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant (single communication range unless the config file
    /// sets a sweep).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the full ablation matrix: every variant across the range sweep.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Roll one deterministic episode from a checkpoint and report it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Aggregate persisted runs into a variant x range table.
    Table {
        /// Directory tree containing run_record.json files.
        #[arg(long, default_value = "runs")]
        records: PathBuf,
        #[arg(long, default_value = "message_volume")]
        metric: String,
        /// Also write table.txt / table.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot learning curves (SVG + JSON data) from persisted runs.
    Plot {
        #[arg(long, default_value = "runs")]
        records: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Pretty-print a trigger log.
    InspectComm {
        #[arg(long)]
        log: PathBuf,
    },
}

fn base_spec(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    epochs: Option<usize>,
) -> Result<ExperimentSpec> {
    let (setup, keys) = match config {
        Some(path) => {
            load_config_file(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => {
            let env = EnvConfig::default_seven();
            let net = NetConfig::default_for(env.n_agents);
            (
                TrainSetup::new(env, net),
                etcomm_harness::HarnessKeys {
                    variant: None,
                    comm_range_sweep: None,
                    n_seeds: None,
                    out_dir: None,
                },
            )
        }
    };
    let mut spec = ExperimentSpec::new(setup, keys.out_dir.unwrap_or(out));
    if let Some(v) = keys.variant {
        spec.variant = v;
    }
    if let Some(sweep) = keys.comm_range_sweep {
        spec.comm_range_sweep = sweep;
    } else {
        spec.comm_range_sweep = vec![spec.setup.env.comm_range];
    }
    if let Some(n) = keys.n_seeds {
        spec.n_seeds = n;
    }
    if let Some(s) = seed {
        spec.setup.train.seed = s;
    }
    if let Some(e) = epochs {
        spec.setup.train.epochs = e;
    }
    Ok(spec)
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            variant,
            epochs,
        } => {
            let mut spec = base_spec(&config, seed, out, epochs)?;
            spec.variant = Variant::parse(&variant)?;
            spec.n_seeds = 1;
            spec.validate()?;
            println!(
                "training variant={} ranges={:?} epochs={} seed={}",
                spec.variant, spec.comm_range_sweep, spec.setup.train.epochs, spec.setup.train.seed
            );
            let records = run(&spec)?;
            for r in &records {
                println!(
                    "done: delta={} seed={} reward(last10)={:.3} msg_volume={} kl_h={:.4} -> {}",
                    r.comm_range,
                    r.seed,
                    r.summary.mean_reward_last10,
                    r.summary.total_message_volume,
                    r.summary.final_kl_h,
                    spec.output_dir.display()
                );
            }
            Ok(())
        }
        Command::Ablate {
            config,
            seed,
            out,
            epochs,
        } => {
            let base = base_spec(&config, seed, out, epochs)?;
            let mut all_records = Vec::new();
            for variant in Variant::all() {
                let mut spec = base.clone();
                spec.variant = variant;
                spec.validate()?;
                println!(
                    "ablate: variant={} ranges={:?} seeds={} epochs={}",
                    variant, spec.comm_range_sweep, spec.n_seeds, spec.setup.train.epochs
                );
                all_records.extend(run(&spec)?);
            }
            let tbl = table(&all_records, TableMetric::MessageVolume);
            println!("\n{}", tbl.render_text());
            let tbl = table(&all_records, TableMetric::KlH);
            println!("{}", tbl.render_text());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            seed,
            variant,
        } => {
            let ckpt = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let mut spec = base_spec(&config, seed, PathBuf::from("runs"), None)?;
            spec.variant = Variant::parse(&variant)?;
            if ckpt.net != spec.setup.net {
                bail!(
                    "checkpoint network config differs from the requested config; \
                     pass the matching --config"
                );
            }
            let mut setup = spec.setup.clone();
            spec.variant.apply(&mut setup);
            setup.validate()?;
            let report = evaluate(&ckpt.params, &setup, seed.unwrap_or(0))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Table {
            records,
            metric,
            out,
        } => {
            let metric = TableMetric::parse(&metric)?;
            let recs = load_records(&records)
                .with_context(|| format!("loading records under {}", records.display()))?;
            if recs.is_empty() {
                bail!("no run_record.json found under {}", records.display());
            }
            let tbl = table(&recs, metric);
            print!("{}", tbl.render_text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join(format!("table_{}.txt", tbl.metric)),
                    tbl.render_text(),
                )?;
                std::fs::write(dir.join(format!("table_{}.csv", tbl.metric)), tbl.to_csv())?;
                println!(
                    "wrote table_{0}.txt and table_{0}.csv to {1}",
                    tbl.metric,
                    dir.display()
                );
            }
            Ok(())
        }
        Command::Plot { records, out } => {
            let recs = load_records(&records)
                .with_context(|| format!("loading records under {}", records.display()))?;
            if recs.is_empty() {
                bail!("no run_record.json found under {}", records.display());
            }
            let data = plot::curve_data(&recs);
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("learning_curves.json"),
                serde_json::to_string(&data)?,
            )?;
            std::fs::write(out.join("learning_curves.svg"), plot::render_svg(&data))?;
            println!(
                "wrote learning_curves.svg and learning_curves.json to {} ({} curves)",
                out.display(),
                data.curves.len()
            );
            Ok(())
        }
        Command::InspectComm { log } => {
            let text = std::fs::read_to_string(&log)
                .with_context(|| format!("reading {}", log.display()))?;
            let mut rows = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let row: TriggerLogRow = serde_json::from_str(line)?;
                rows.push(row);
            }
            print!("{}", inspect_comm(&rows));
            Ok(())
        }
    }
}
