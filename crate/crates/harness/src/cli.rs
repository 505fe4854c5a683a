//! The `cosal` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use cosal_core::metrics::{random_orders, GroupPredictor};
use cosal_core::model::check_order;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{HarnessError, Result};
use crate::eval;
use crate::pnm;
use crate::synth::{derive_seed, synth_group};
use crate::train;

/// Seed stream of `gen-data`.
pub const STREAM_DATA: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "cosal", version, about = "Order-stable co-saliency detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic groups as PPM images with PGM masks.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        groups: usize,
        /// Images per group.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        difficulty: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training stages from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict maps for every group under a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        group_dir: PathBuf,
        /// Comma-separated permutation, or `random:<seed>`; defaults to the
        /// stored order.
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spread of the metrics over random image orders.
    Stability {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        group_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OrderSpec {
    Given,
    Explicit(Vec<usize>),
    Random(u64),
}

impl OrderSpec {
    pub fn parse(s: Option<&str>) -> Result<Self> {
        let Some(s) = s else { return Ok(Self::Given) };
        if let Some(seed) = s.strip_prefix("random:") {
            return seed
                .parse()
                .map(Self::Random)
                .map_err(|_| HarnessError::Usage(format!("bad seed in --order {s}")));
        }
        s.split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Self::Explicit)
            .map_err(|_| HarnessError::Usage(format!("--order expects `i,j,..` or `random:<seed>`, got {s}")))
    }

    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        let order = match self {
            Self::Given => (0..n).collect(),
            Self::Explicit(o) => o.clone(),
            Self::Random(seed) => random_orders(n, 1, *seed).remove(0),
        };
        check_order(&order, n)?;
        Ok(order)
    }
}

pub fn gen_data(seed: u64, groups: usize, n: usize, size: usize, difficulty: u8, out: &Path) -> Result<()> {
    if groups == 0 {
        return Err(HarnessError::Usage("--groups must be positive".into()));
    }
    for g in 0..groups {
        let mut group = synth_group(derive_seed(seed, STREAM_DATA, g as u64), n, size, difficulty)?;
        group.id = format!("group{g:03}");
        dataset::write_group(out, &group)?;
    }
    Ok(())
}

pub fn infer(ckpt: &Path, group_dir: &Path, order: &OrderSpec, out: &Path) -> Result<()> {
    let (_, model) = checkpoint::load(ckpt)?;
    for group in dataset::read_groups(group_dir)? {
        let o = order.resolve(group.len())?;
        let maps = model.predict(&group, &o)?;
        let dir = out.join(&group.id);
        std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
        for (m, name) in maps.iter().zip(&group.names) {
            pnm::write_map(&dir.join(format!("{name}.pgm")), m)?;
        }
    }
    Ok(())
}

pub fn evaluate(pred: &Path, gt: &Path, out: &Path) -> Result<eval::DirEvaluation> {
    let ev = eval::evaluate_dirs(pred, gt)?;
    eval::write_report_csv(out, &ev.report)?;
    eval::write_json(&out.with_extension("json"), &ev)?;
    if !ev.complete() {
        let mut msg = String::new();
        if !ev.missing.is_empty() {
            msg += &format!("no prediction for {}", ev.missing.join(", "));
        }
        if !ev.unmatched.is_empty() {
            if !msg.is_empty() {
                msg += "; ";
            }
            msg += &format!("no mask for {}", ev.unmatched.join(", "));
        }
        return Err(HarnessError::Data(msg));
    }
    Ok(ev)
}

pub fn stability(ckpt: &Path, group_dir: &Path, trials: usize, seed: u64, out: &Path) -> Result<()> {
    let (_, model) = checkpoint::load(ckpt)?;
    let groups = dataset::read_groups(group_dir)?;
    let results = eval::stability(&model, &groups, trials, seed)?;
    eval::write_stability_csv(out, &results)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            groups,
            n,
            size,
            difficulty,
            out,
        } => gen_data(seed, groups, n, size, difficulty, &out),
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.paths.out_dir.clone())
                .ok_or_else(|| HarnessError::Usage("train needs --out or paths.out_dir".into()))?;
            let outcome = train::train(&cfg, &out)?;
            if let Some(last) = outcome.log.last() {
                eprintln!("final loss {:.6} after {} steps", last.total, outcome.log.len());
            }
            Ok(())
        }
        Command::Infer {
            ckpt,
            group_dir,
            order,
            out,
        } => infer(&ckpt, &group_dir, &OrderSpec::parse(order.as_deref())?, &out),
        Command::Eval { pred, gt, out } => evaluate(&pred, &gt, &out).map(|_| ()),
        Command::Stability {
            ckpt,
            group_dir,
            trials,
            seed,
            out,
        } => stability(&ckpt, &group_dir, trials, seed, &out),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
