//! Command-line entry point: `run`, `accountant`, and `pretrain`
//! subcommands. All state flows through flags and the config file; exit
//! codes are 0 on success and a per-category nonzero code otherwise.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::dp::{accumulate, CompositionMode, PrivacyLedger, RdpOrderGrid, ValidationBound};
use crate::error::{Error, Result};
use crate::lth::{generate_winning_tickets, TicketFile, TicketGenConfig};
use crate::metrics::{write_metrics, MetricsFormat};
use crate::nn::mlp_layers;
use crate::orchestrator::Experiment;

const USAGE: &str = "\
fedltp — federated learning simulator with lottery-ticket pruning and DP

USAGE:
  fedltp run --config <path> [--seed N] [--scheme one-shot|iterative|dp-fed]
             [--out <dir>] [--format csv|json]
  fedltp accountant --sigma <F> --q <F> --tau <N> --rounds <N>
                    --lambda-val <F> --delta <F> [--mode per-step|per-round]
  fedltp pretrain --config <path> [--out <path>] [--seed N]

EXIT CODES:
  0 success, 2 usage, 3 config parse, 4 data/serialization/io, 5 runtime
";

/// Parse and dispatch; returns the process exit code.
pub fn main(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Err(Error::Usage("missing subcommand".into()));
    };
    match command.as_str() {
        "run" => run_command(&args[1..]),
        "accountant" => accountant_command(&args[1..]),
        "pretrain" => pretrain_command(&args[1..]),
        "-h" | "--help" | "help" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(Error::Usage(format!("unknown subcommand '{other}'")))
        }
    }
}

/// `--flag value` pairs.
struct Flags {
    pairs: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let Some(name) = flag.strip_prefix("--") else {
                return Err(Error::Usage(format!("expected a --flag, got '{flag}'")));
            };
            let Some(value) = it.next() else {
                return Err(Error::Usage(format!("flag --{name} needs a value")));
            };
            pairs.push((name.to_string(), value.clone()));
        }
        Ok(Flags { pairs })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Usage(format!("missing required flag --{name}")))
    }

    fn ensure_known(&self, known: &[&str]) -> Result<()> {
        for (name, _) in &self.pairs {
            if !known.contains(&name.as_str()) {
                return Err(Error::Usage(format!("unknown flag --{name}")));
            }
        }
        Ok(())
    }
}

fn parse_f64_flag(flags: &Flags, name: &str) -> Result<f64> {
    let v = flags.require(name)?;
    match v {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => v
            .parse()
            .map_err(|_| Error::Usage(format!("flag --{name}: expected a number, got '{v}'"))),
    }
}

fn parse_u64_flag(flags: &Flags, name: &str) -> Result<u64> {
    let v = flags.require(name)?;
    v.parse()
        .map_err(|_| Error::Usage(format!("flag --{name}: expected an integer, got '{v}'")))
}

fn load_config(flags: &Flags) -> Result<ExperimentConfig> {
    let path = flags.require("config")?;
    let mut cfg = ExperimentConfig::parse_file(Path::new(path))?;
    if let Some(seed) = flags.get("seed") {
        cfg.seed = seed
            .parse()
            .map_err(|_| Error::Usage(format!("--seed: expected an integer, got '{seed}'")))?;
    }
    if let Some(scheme) = flags.get("scheme") {
        cfg.scheme = scheme.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_command(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args)?;
    flags.ensure_known(&["config", "seed", "scheme", "out", "format"])?;
    let cfg = load_config(&flags)?;
    let out_dir = PathBuf::from(flags.get("out").unwrap_or("."));
    let format: MetricsFormat = flags.get("format").unwrap_or("csv").parse()?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut experiment = Experiment::new(cfg.clone())?;
    let outcome = experiment.run();
    // Flush whatever rounds completed, even on error.
    let metrics_path = out_dir.join(format!("metrics.{}", format.extension()));
    write_metrics(&experiment.metrics_rows(), &metrics_path, format)?;
    let summary = outcome?;

    let summary_json = serde_json::json!({
        "scheme": summary.scheme,
        "seed": summary.seed,
        "rounds_executed": summary.rounds_executed,
        "stop_reason": summary.stop_reason.as_str(),
        "selected_round": summary.selected_round,
        "final_test_accuracy": summary.final_test_accuracy,
        "last_round_test_accuracy": summary.last_round_test_accuracy,
        "epsilon_final": if summary.epsilon_final.is_finite() { Some(summary.epsilon_final) } else { None },
        "comm_bits_total": summary.comm_bits_total,
        "comm_mb_total": summary.comm_bits_total / 8.0 / 1e6,
        "param_count": summary.param_count,
        "retention_p": summary.retention_p,
        "sample_rate": summary.sample_rate,
        "composition": match cfg.composition {
            CompositionMode::PerStep => "per-step",
            CompositionMode::PerRound => "per-round",
        },
        "data_mode": if cfg.data.carve_public_fraction.is_some() { "carved-pools" } else { "separate-pools" },
    });
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, format!("{summary_json:#}\n"))
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;

    println!(
        "{} seed={} rounds={} stop={} final_acc={:.4} eps={:.4} comm_mb={:.4} p={:.4}",
        summary.scheme,
        summary.seed,
        summary.rounds_executed,
        summary.stop_reason.as_str(),
        summary.final_test_accuracy,
        summary.epsilon_final,
        summary.comm_bits_total / 8.0 / 1e6,
        summary.retention_p,
    );
    Ok(())
}

fn accountant_command(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args)?;
    flags.ensure_known(&[
        "sigma",
        "q",
        "tau",
        "rounds",
        "lambda-val",
        "delta",
        "mode",
        "bound",
    ])?;
    let sigma = parse_f64_flag(&flags, "sigma")?;
    let q = parse_f64_flag(&flags, "q")?;
    let tau = parse_u64_flag(&flags, "tau")?;
    let rounds = parse_u64_flag(&flags, "rounds")?;
    let lambda_val = parse_f64_flag(&flags, "lambda-val")?;
    let delta = parse_f64_flag(&flags, "delta")?;
    let mode: CompositionMode = flags.get("mode").unwrap_or("per-step").parse()?;
    let bound: ValidationBound = flags.get("bound").unwrap_or("scaled").parse()?;

    let mut ledger = PrivacyLedger::new(tau, q, sigma, lambda_val, delta, mode, bound)?;
    let grid = RdpOrderGrid::default();
    println!("t\tepsilon\tbest_alpha");
    for t in 0..rounds {
        ledger.advance_round();
        let (eps, alpha) = accumulate(&ledger, &grid)?;
        println!("{t}\t{eps:.6}\t{alpha}");
    }
    Ok(())
}

fn pretrain_command(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args)?;
    flags.ensure_known(&["config", "out", "seed"])?;
    let cfg = load_config(&flags)?;
    let out = flags
        .get("out")
        .map(PathBuf::from)
        .or_else(|| cfg.tickets_path.clone())
        .unwrap_or_else(|| PathBuf::from("tickets.json"));

    // Build the public pool the same way the run would.
    let experiment_public = {
        use crate::config::SourceKind;
        use crate::rng::{purpose, RngStream};
        if let Some(fraction) = cfg.data.carve_public_fraction {
            let full = match &cfg.data.private {
                SourceKind::Blobs => {
                    let mut rng = RngStream::derive(cfg.seed, purpose::DATA_PRIVATE, &[]);
                    crate::data::synthesize_blobs(
                        cfg.data.classes,
                        cfg.data.dim,
                        cfg.data.private_size,
                        cfg.data.separation,
                        &mut rng,
                    )?
                }
                SourceKind::Idx { images, labels } => {
                    crate::data::idx::load_idx_files(images, labels, cfg.data.idx_classes)?
                }
            };
            let mut rng = RngStream::derive(cfg.seed, purpose::CARVE, &[]);
            full.carve(fraction, &mut rng)?.0
        } else {
            match &cfg.data.public {
                SourceKind::Blobs => {
                    let mut rng = RngStream::derive(cfg.seed, purpose::DATA_PUBLIC, &[]);
                    crate::data::synthesize_blobs(
                        cfg.data.classes,
                        cfg.data.dim,
                        cfg.data.public_size,
                        cfg.data.separation,
                        &mut rng,
                    )?
                }
                SourceKind::Idx { images, labels } => {
                    crate::data::idx::load_idx_files(images, labels, cfg.data.idx_classes)?
                }
            }
        }
    };

    let layers = mlp_layers(
        experiment_public.dim(),
        &cfg.hidden,
        experiment_public.class_count(),
    );
    let tickets = generate_winning_tickets(
        &experiment_public,
        &layers,
        &TicketGenConfig {
            count: cfg.ticket_count,
            train_iters: cfg.ticket_iters,
            prune_degree: cfg.prune_degree,
            mode: cfg.prune_mode,
            learning_rate: cfg.lth_learning_rate,
            batch_size: cfg.batch_size,
        },
        cfg.seed,
    )?;
    TicketFile::save(&out, &layers, &tickets)?;
    println!(
        "wrote {} tickets (scores: {:?}) to {}",
        tickets.len(),
        tickets.iter().map(|t| t.score).collect::<Vec<_>>(),
        out.display()
    );
    Ok(())
}
