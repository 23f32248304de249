use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfedpf::harness::{
    gen_data, merge_reports, run_ablation, run_experiment, run_probe, write_ablation, write_probe,
    write_run_artifacts, ExperimentConfig, MetricsReport,
};
use pfedpf::Error;

#[derive(Parser)]
#[command(version, about = "Personalized Bayesian federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured variant for every seed.
    Run(Common),
    /// Sweep the flow length on the fine-tuned variant.
    Ablate(Common),
    /// Probe predictive confidence far from the data on a binary model.
    Probe(Common),
    /// Write the synthetic dataset as IDX files with a manifest.
    GenData(Common),
    /// Merge per-seed report.json files of one configuration.
    Merge {
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        reports: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; replaces the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory. Defaults to $PFEDPF_OUT, then the config, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> pfedpf::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
            cfg.validate()?;
        }
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os("PFEDPF_OUT").map(PathBuf::from))
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        if let Some(n) = self.workers {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("`--workers`: {e}")))?;
        }
        Ok((cfg, out))
    }
}

fn read_report(path: &Path) -> pfedpf::Result<MetricsReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn execute(command: Command) -> pfedpf::Result<()> {
    match command {
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            let (report, runs, timing) = run_experiment(&cfg)?;
            write_run_artifacts(&out, &cfg, &report, &runs, &timing)?;
            for (head, h) in &report.mean_heads {
                eprintln!(
                    "{head}: acc {:.4} nll {:.4} ece {:.4}",
                    h.accuracy, h.nll, h.ece
                );
            }
            eprintln!("wrote {}", out.join("report.json").display());
        }
        Command::Ablate(c) => {
            let (cfg, out) = c.load()?;
            let report = run_ablation(&cfg)?;
            write_ablation(&out, &report)?;
            for &l in &cfg.ablation.flow_lengths {
                eprintln!(
                    "L={l}: ece {:.4} auroc {:.4}",
                    report.mean(l, |r| r.ece).unwrap_or(f64::NAN),
                    report.mean(l, |r| r.auroc).unwrap_or(f64::NAN)
                );
            }
            eprintln!("wrote {}", out.join("ablation.json").display());
        }
        Command::Probe(c) => {
            let (cfg, out) = c.load()?;
            let report = run_probe(&cfg)?;
            write_probe(&out, &report)?;
            eprintln!("wrote {}", out.join("probe.json").display());
        }
        Command::GenData(c) => {
            let (cfg, out) = c.load()?;
            let path = gen_data(&cfg, &out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Merge { out, reports } => {
            let reports = reports
                .iter()
                .map(|p| read_report(p))
                .collect::<pfedpf::Result<Vec<_>>>()?;
            let merged = merge_reports(&reports)?;
            std::fs::write(&out, merged.to_json()? + "\n")?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
