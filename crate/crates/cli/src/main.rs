mod config;
mod run;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ncc_core::autograd::Tensor;
use ncc_core::clustering::{spherical_kmeans, KMeansConfig};
use ncc_core::data::{gen_vmf_mixture, load_embeddings_csv, make_long_tailed, save_csv, SyntheticSpec};
use ncc_core::metrics::{imbalance_ratio, MetricsReport};
use ncc_core::NccError;
use serde_json::json;

use config::Overrides;
use sweep::SweepParam;

#[derive(Parser)]
#[command(name = "ncc", version, about = "Non-contrastive deep clustering on the hypersphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a vMF mixture dataset and write it as CSV.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        kappa: f64,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "long-tail-ratio")]
        long_tail_ratio: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Cluster an embedding CSV and score it against its true labels.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        /// Defaults to the number of distinct true labels.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per value and repeat, then aggregate final metrics.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<NccError>() {
        Some(NccError::NonFiniteLoss { .. } | NccError::Numeric(_)) => 3,
        Some(NccError::Io(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        None => 1,
    }
}

fn gen_data(spec: SyntheticSpec, long_tail_ratio: Option<f64>, out: &Path) -> anyhow::Result<()> {
    let mut ds = gen_vmf_mixture(&spec)?;
    if let Some(r) = long_tail_ratio {
        ds = make_long_tailed(&ds, r, spec.seed)?;
    }
    save_csv(out, &ds).with_context(|| format!("writing {}", out.display()))?;
    let labels = ds.labels()?;
    let k = ds.class_counts()?.iter().filter(|&&c| c > 0).count();
    println!(
        "{}",
        json!({"n": ds.len(), "k": k, "imbalance": imbalance_ratio(labels)?})
    );
    Ok(())
}

fn train(config: Option<&Path>, out: Option<PathBuf>, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = overrides.apply(config)?;
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| NccError::Config("no output directory: pass --out or set output_dir".into()))?;
    let cfg = cfg.resolve()?;
    let report = run::run(&cfg, &out)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn eval(path: &Path, k: Option<usize>, seed: u64) -> anyhow::Result<()> {
    let emb = load_embeddings_csv(path)?;
    let truth = emb
        .label_true
        .as_ref()
        .ok_or_else(|| NccError::Contract(format!("{} has no label_true column", path.display())))?;
    let mut order: Vec<usize> = (0..emb.ids.len()).collect();
    order.sort_by_key(|&i| emb.ids[i]);
    let mut z: Tensor = emb.features.select_rows(&order);
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    let truth: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
    let k = match k {
        Some(k) => k,
        None => truth.iter().collect::<std::collections::BTreeSet<_>>().len(),
    };
    let km = spherical_kmeans(&z, k, seed, &KMeansConfig::default())?;
    let report = MetricsReport::evaluate(&truth, &km.assignments, &z)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn main_inner(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            classes,
            dim,
            kappa,
            per_class,
            seed,
            long_tail_ratio,
            out,
        } => gen_data(
            SyntheticSpec::balanced(classes, dim, kappa, per_class, seed),
            long_tail_ratio,
            &out,
        ),
        Command::Train { config, out, overrides } => train(config.as_deref(), out, &overrides),
        Command::Eval { embeddings, k, seed } => eval(&embeddings, k, seed),
        Command::Sweep {
            param,
            values,
            repeats,
            config,
            out,
            overrides,
        } => {
            let base = overrides.apply(config.as_deref())?;
            let (csv, cells) = sweep::sweep(&base, param, &values, repeats, &out)?;
            let path = out.join("sweep.csv");
            std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
            let failed: Vec<String> = cells
                .iter()
                .filter(|c| c.result.is_err())
                .map(|c| format!("{}={} seed {}", param.name(), c.value, c.seed))
                .collect();
            if !failed.is_empty() {
                eprintln!("{} of {} runs failed: {}", failed.len(), cells.len(), failed.join(", "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
