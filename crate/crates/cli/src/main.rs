//! Command-line front end: dataset generation, exact oracles, path
//! inspection, single training runs, and experiment bundles.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use arising_core::experiment::{report, run_experiment, ExperimentSpec};
use arising_core::ising::{
    read_dataset, sample_dataset, write_dataset, Algorithm, ThermalParams,
};
use arising_core::models::{save_checkpoint, ArModel, ModelKind, SequenceDataset};
use arising_core::oracle::enumerate;
use arising_core::paths::{PathKind, PathOrdering};
use arising_core::training::{train, write_trace_csv, TrainConfig};

#[derive(Parser)]
#[command(
    name = "arising",
    about = "Autoregressive sequence models on 2D Ising spin data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a lattice ordering as CSV rows `t,x,y` plus locality metrics.
    Paths {
        /// zigzag, snake, hilbert, or morton
        #[arg(long)]
        kind: PathKind,
        /// Lattice side (power of two)
        #[arg(long = "L")]
        l: usize,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the metrics JSON here instead of stderr
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Sample spin configurations from the Boltzmann distribution.
    Sample {
        #[arg(long = "L")]
        l: usize,
        #[arg(long)]
        beta: f64,
        /// Number of recorded configurations
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Dataset file to write
        #[arg(long)]
        out: PathBuf,
        /// Hybrid sweep units before the first record
        #[arg(long, default_value_t = 1000)]
        equilibration: usize,
        /// Hybrid sweep units between records
        #[arg(long, default_value_t = 1)]
        decorrelation: usize,
        /// hybrid (Metropolis + Wolff) or metropolis
        #[arg(long, default_value = "hybrid")]
        algorithm: String,
    },
    /// Exact observables and entropy for small lattices (L = 2 or 4).
    Oracle {
        #[arg(long = "L")]
        l: usize,
        #[arg(long)]
        beta: f64,
    },
    /// Train one model on a sampled dataset.
    Train {
        /// Dataset file produced by `sample`
        #[arg(long)]
        dataset: PathBuf,
        /// rnn or transformer
        #[arg(long)]
        model: ModelKind,
        /// Autoregressive path used to flatten configurations
        #[arg(long)]
        path: PathKind,
        /// Output directory for trace.csv, checkpoints.json, model.ckpt
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 100)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated checkpoint epochs for correlation diagnostics
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        n_model_samples: usize,
    },
    /// Multi-run experiment bundles.
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    /// Run every cell of a JSON spec into a bundle directory.
    Run {
        spec: PathBuf,
        /// Bundle output directory (defaults to the spec's name)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel worker threads
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Aggregate a bundle into plot-ready CSV tables and a JSON summary.
    Report { bundle: PathBuf },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Paths { kind, l, out, metrics_out } => cmd_paths(kind, l, out, metrics_out),
        Command::Sample {
            l,
            beta,
            n,
            seed,
            out,
            equilibration,
            decorrelation,
            algorithm,
        } => cmd_sample(l, beta, n, seed, out, equilibration, decorrelation, &algorithm),
        Command::Oracle { l, beta } => cmd_oracle(l, beta),
        Command::Train {
            dataset,
            model,
            path,
            out,
            epochs,
            batch,
            lr,
            split,
            seed,
            checkpoints,
            n_model_samples,
        } => cmd_train(
            dataset, model, path, out, epochs, batch, lr, split, seed, checkpoints,
            n_model_samples,
        ),
        Command::Experiment { action } => match action {
            ExperimentAction::Run { spec, out, workers } => cmd_experiment_run(spec, out, workers),
            ExperimentAction::Report { bundle } => cmd_experiment_report(bundle),
        },
    }
}

fn cmd_paths(
    kind: PathKind,
    l: usize,
    out: Option<PathBuf>,
    metrics_out: Option<PathBuf>,
) -> Result<()> {
    let ordering = PathOrdering::new(kind, l)?;
    let mut csv = String::from("t,x,y\n");
    for (t, site) in ordering.order().iter().enumerate() {
        csv.push_str(&format!("{t},{},{}\n", site.x, site.y));
    }
    match out {
        Some(path) => fs::write(&path, csv).with_context(|| format!("writing {path:?}"))?,
        None => print!("{csv}"),
    }
    let metrics = serde_json::to_string_pretty(&ordering.locality_metrics())?;
    match metrics_out {
        Some(path) => fs::write(&path, metrics + "\n")?,
        None => eprintln!("{metrics}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    l: usize,
    beta: f64,
    n: usize,
    seed: u64,
    out: PathBuf,
    equilibration: usize,
    decorrelation: usize,
    algorithm: &str,
) -> Result<()> {
    let params = ThermalParams {
        l,
        beta,
        n_samples: n,
        seed,
        equilibration_sweeps: equilibration,
        decorrelation_sweeps: decorrelation,
        algorithm: algorithm.parse::<Algorithm>()?,
    };
    let batch = sample_dataset(&params)?;
    let file = fs::File::create(&out).with_context(|| format!("creating {out:?}"))?;
    write_dataset(&batch, BufWriter::new(file))?;
    eprintln!(
        "wrote {} configurations to {} (E/site {:.6} ± {:.6}, |m| {:.6} ± {:.6})",
        n,
        out.display(),
        batch.stats.energy_per_site,
        batch.stats.energy_per_site_se,
        batch.stats.abs_magnetization,
        batch.stats.abs_magnetization_se,
    );
    Ok(())
}

fn cmd_oracle(l: usize, beta: f64) -> Result<()> {
    let dist = enumerate(l, beta)?;
    let obs = dist.observables();
    let out = serde_json::json!({
        "L": l,
        "beta": beta,
        "energy_per_site": obs.energy_per_site,
        "abs_magnetization": obs.abs_magnetization,
        "entropy": dist.entropy(),
        "entropy_per_site": dist.entropy() / (l * l) as f64,
        "log_z": dist.log_z(),
        "correlation": obs.correlation,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset: PathBuf,
    model_kind: ModelKind,
    path_kind: PathKind,
    out: PathBuf,
    epochs: usize,
    batch: usize,
    lr: f64,
    split: f64,
    seed: u64,
    checkpoints: Vec<usize>,
    n_model_samples: usize,
) -> Result<()> {
    let file = fs::File::open(&dataset).with_context(|| format!("opening {dataset:?}"))?;
    let loaded = read_dataset(BufReader::new(file))?;
    let ordering = PathOrdering::new(path_kind, loaded.header.l)?;
    let data = SequenceDataset::from_loaded(&loaded, &ordering);
    let mut model = ArModel::new(model_kind, ordering.len(), seed);
    let cfg = TrainConfig {
        epochs,
        batch_size: batch,
        lr,
        split,
        seed,
        checkpoint_epochs: checkpoints,
        n_model_samples,
    };
    let trace = train(&mut model, &data, &ordering, &cfg)?;
    fs::create_dir_all(&out)?;
    write_trace_csv(&trace, BufWriter::new(fs::File::create(out.join("trace.csv"))?))?;
    serde_json::to_writer_pretty(
        BufWriter::new(fs::File::create(out.join("checkpoints.json"))?),
        &trace.checkpoints,
    )?;
    save_checkpoint(
        &model,
        seed,
        epochs,
        BufWriter::new(fs::File::create(out.join("model.ckpt"))?),
    )?;
    let last = trace.epochs.last().expect("at least epoch 0");
    eprintln!(
        "trained {} on {} ({} epochs): val NLL {:.6} ({:.6}/site); outputs in {}",
        model_kind,
        path_kind,
        epochs,
        last.val_nll,
        last.val_nll / ordering.len() as f64,
        out.display()
    );
    Ok(())
}

fn cmd_experiment_run(spec_path: PathBuf, out: Option<PathBuf>, workers: usize) -> Result<()> {
    let spec = ExperimentSpec::load(&spec_path)
        .with_context(|| format!("loading spec {spec_path:?}"))?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&spec.name));
    let manifest = run_experiment(&spec, &out_dir, workers)?;
    let ok = manifest.cells.iter().filter(|c| c.status == "ok").count();
    eprintln!(
        "bundle {}: {}/{} cells ok{} -> {}",
        manifest.name,
        ok,
        manifest.cells.len(),
        if manifest.partial { " (partial)" } else { "" },
        out_dir.display()
    );
    if manifest.partial {
        bail!("bundle completed partially; inspect cell.json files");
    }
    Ok(())
}

fn cmd_experiment_report(bundle: PathBuf) -> Result<()> {
    let summary = report(&bundle)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
