use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use ncc_core::NccError;

use crate::config::RunConfigFile;
use crate::run::{run, RunReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    R,
    Sigma,
    LambdaPcl,
    K,
    Dim,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::R => "r",
            SweepParam::Sigma => "sigma",
            SweepParam::LambdaPcl => "lambda-pcl",
            SweepParam::K => "k",
            SweepParam::Dim => "dim",
        }
    }

    fn apply(self, cfg: &mut RunConfigFile, value: f64) -> ncc_core::Result<()> {
        let t = &mut cfg.train;
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(NccError::Config(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        match self {
            SweepParam::R => t.r = count()?,
            SweepParam::Sigma => t.loss.sigma = value,
            SweepParam::LambdaPcl => t.loss.lambda_pcl = value,
            SweepParam::K => t.k = count()?,
            SweepParam::Dim => t.encoder.projection_dim = count()?,
        }
        Ok(())
    }
}

/// Number of concurrent runs: `NCC_THREADS` if set, else the core count.
pub fn thread_budget() -> anyhow::Result<usize> {
    match std::env::var("NCC_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| NccError::Config(format!("NCC_THREADS must be a positive integer, got `{v}`")))?;
            if n == 0 {
                return Err(NccError::Config("NCC_THREADS must be ≥ 1".into()).into());
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub struct Cell {
    pub value: f64,
    pub seed: u64,
    pub result: anyhow::Result<RunReport>,
}

/// Trains every value × repeat (seeds `seed, seed+1, ..`) under `out` and
/// returns the aggregated CSV. Failed runs are counted, not fatal.
pub fn sweep(
    base: &RunConfigFile,
    param: SweepParam,
    values: &[f64],
    repeats: usize,
    out: &Path,
) -> anyhow::Result<(String, Vec<Cell>)> {
    if values.is_empty() || repeats == 0 {
        return Err(NccError::Config("sweep needs at least one value and one repeat".into()).into());
    }
    let mut jobs = Vec::new();
    for &value in values {
        for rep in 0..repeats {
            let seed = base.train.seed + rep as u64;
            let dir = out.join(format!("{}-{value}", param.name())).join(format!("seed-{seed}"));
            jobs.push((value, seed, dir));
        }
    }
    let cell = |value: f64, seed: u64, dir: &Path| -> anyhow::Result<RunReport> {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value)?;
        cfg.train.seed = seed;
        run(&cfg.resolve()?, dir)
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Cell>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = thread_budget()?.min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(value, seed, ref dir)) = jobs.get(i) else { break };
                let result = cell(value, seed, dir);
                if let Err(e) = &result {
                    eprintln!("{} = {value}, seed {seed}: {e:#}", param.name());
                }
                results.lock().expect("no panics while locked")[i] = Some(Cell { value, seed, result });
            });
        }
    });
    let cells: Vec<Cell> = results
        .into_inner()
        .expect("no panics while locked")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();

    let mut csv = String::from(
        "param,value,runs,failed,nmi_mean,nmi_std,ami_mean,ami_std,ari_mean,ari_std,acc_mean,acc_std\n",
    );
    for &value in values {
        let group: Vec<&Cell> = cells.iter().filter(|c| c.value == value).collect();
        let ok: Vec<_> = group
            .iter()
            .filter_map(|c| c.result.as_ref().ok().and_then(|r| r.metrics.as_ref()))
            .collect();
        let failed = group.iter().filter(|c| c.result.is_err()).count();
        write!(csv, "{},{value},{},{failed}", param.name(), group.len())?;
        let columns: [fn(&ncc_core::metrics::MetricsReport) -> f64; 4] =
            [|m| m.nmi, |m| m.ami, |m| m.ari, |m| m.acc];
        for f in columns {
            if ok.is_empty() {
                csv.push_str(",,");
            } else {
                let xs: Vec<f64> = ok.iter().map(|m| f(m)).collect();
                let (m, s) = mean_std(&xs);
                write!(csv, ",{m},{s}")?;
            }
        }
        csv.push('\n');
    }
    Ok((csv, cells))
}
