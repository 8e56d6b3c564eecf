//! Experiment runners and their artifacts.

mod config;
mod svg;

pub use config::{
    ConfigFile, ExperimentConfig, ExperimentKind, CHAIN_BETA, DEFAULT_BETA, DEFAULT_BETA_LIST, DEFAULT_OVERPARAM_LIST,
    SWEEP_L1_SCALE,
};
pub use svg::{LineChart, Series};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::filterbank::{build_filterbank, filterbank_csv, overparam_factor, FilterBankSpec, FilterBankTask};
use crate::layers::{Activation, LayerSpec, ModelGraph};
use crate::profiler::{effective_flops, profile};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::trainer::{l1_loss, train_two_phase, Task, TrainConfig, TrainHistory};

/// Name of the marker file left in an output directory by a failed run.
pub const FAILED_MARKER: &str = ".failed";

const INIT_STREAM: u64 = 0x1417;
const SWEEP_STREAM: u64 = 0x5EE9;
const CHAIN_STREAM: u64 = 0xC4A1;

/// Everything produced by one filter-bank training run.
#[derive(Clone, Debug)]
pub struct FilterbankRun {
    pub width: usize,
    pub initial: ModelGraph,
    pub trained: ModelGraph,
    pub consolidated: ModelGraph,
    pub history: TrainHistory,
    /// Held-out L1 of the consolidated model over the bank's filters; a
    /// pruned filter output counts as zero.
    pub final_l1: f64,
    pub in_factor: f64,
    pub out_factor: f64,
}

/// Trains a single gated layer of `width` units to reproduce `bank`.
pub fn train_filterbank(
    bank: &FilterBankSpec,
    width: usize,
    noise_std: f64,
    train: &TrainConfig,
    threshold: f64,
    eval_frames: usize,
) -> Result<FilterbankRun> {
    let task = FilterBankTask::new(bank, width, train.batch_frames, noise_std, train.seed)?;
    let initial = ModelGraph::build(
        bank.bins(),
        &[LayerSpec::dynamic(width, false, Activation::Identity)],
        train.lambda_min,
        &RngStream::new(train.seed).derive(INIT_STREAM),
    )?;
    let mut trained = initial.clone();
    let history = train_two_phase(&mut trained, &task, train)?;
    let consolidated = trained.consolidate(threshold)?;
    let kept = trained.surviving_outputs(threshold);

    let (x, y) = task.held_out(eval_frames)?;
    let n = bank.n_filters;
    let pred = consolidated.predict(&x)?;
    let mut full = vec![0.0; eval_frames * n];
    for (c, &unit) in kept.iter().enumerate().filter(|(_, &u)| u < n) {
        for r in 0..eval_frames {
            full[r * n + unit] = pred.data()[r * kept.len() + c];
        }
    }
    let target = y.select_columns(&(0..n).collect::<Vec<_>>())?;
    let final_l1 = l1_loss(&target, &Tensor::new(&[eval_frames, n], full)?)?;

    Ok(FilterbankRun {
        width,
        initial,
        trained,
        consolidated,
        history,
        final_l1,
        in_factor: overparam_factor(width as f64, n as f64)?,
        out_factor: overparam_factor(kept.len() as f64, n as f64)?,
    })
}

/// One point of the penalty-weight sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub beta: f64,
    pub in_factor: f64,
    pub out_factor: f64,
    pub final_l1: f64,
    /// Consolidated over instantiated FLOPs per frame.
    pub flops_ratio: f64,
    /// `λ`-weighted over instantiated FLOPs per frame, before consolidation.
    pub effective_ratio: f64,
}

/// Seed of every sweep run at overparameterization index `index`. Runs that
/// differ only in `β` share initialization, data and noise.
fn sweep_seed(seed: u64, index: usize) -> u64 {
    RngStream::new(seed).derive(SWEEP_STREAM).derive(index as u64).seed()
}

/// Trains the `β × overparameterization` grid, `β`-major. Points run on a
/// pool of `threads` workers (rayon's default when `None`); results do not
/// depend on the worker count.
pub fn sweep_points(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let grid: Vec<(f64, usize, usize)> = cfg
        .beta_list
        .iter()
        .flat_map(|&b| cfg.overparam_list.iter().enumerate().map(move |(j, &f)| (b, j, f)))
        .collect();
    let run_point = |&(beta, index, factor): &(f64, usize, usize)| -> Result<SweepPoint> {
        let train = TrainConfig { beta, seed: sweep_seed(cfg.seed, index), ..cfg.train.clone() };
        let width = factor * cfg.bank.n_filters;
        let run = train_filterbank(&cfg.bank, width, cfg.noise_std, &train, cfg.threshold, cfg.eval_frames)?;
        let full = profile(&run.trained, cfg.frame_rate)?.total_flops_per_frame as f64;
        let kept = profile(&run.consolidated, cfg.frame_rate)?.total_flops_per_frame as f64;
        Ok(SweepPoint {
            beta,
            in_factor: run.in_factor,
            out_factor: run.out_factor,
            final_l1: run.final_l1,
            flops_ratio: kept / full,
            effective_ratio: effective_flops(&run.trained) / full,
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| invalid(format!("worker pool: {e}")))?;
    pool.install(|| grid.par_iter().map(run_point).collect())
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("beta,in_factor,out_factor,final_l1\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.beta, p.in_factor, p.out_factor, p.final_l1);
    }
    s
}

pub fn sweep_chart(points: &[SweepPoint], cfg: &ExperimentConfig) -> LineChart {
    let series = cfg
        .beta_list
        .iter()
        .map(|&b| Series {
            label: format!("β = {b}"),
            points: points.iter().filter(|p| p.beta == b).map(|p| (p.in_factor, p.out_factor)).collect(),
        })
        .collect();
    LineChart {
        title: format!("{} {} filters: overparameterization after training", cfg.bank.family, cfg.bank.n_filters),
        x_label: "input overparameterization factor".into(),
        y_label: "output overparameterization factor".into(),
        series,
        diagonal: true,
    }
}

/// Width of the low-rank chain's input, hidden and output layers, and the
/// rank of its target map.
pub const CHAIN_INPUT: usize = 8;
pub const CHAIN_HIDDEN: usize = 16;
pub const CHAIN_OUTPUT: usize = 8;
pub const CHAIN_RANK: usize = 4;

/// Regression onto `y = x·A·B` with `A` of shape `(in, rank)`.
pub struct LowRankTask {
    map: Tensor,
    batch: usize,
    data: RngStream,
}

impl LowRankTask {
    pub fn new(input: usize, output: usize, rank: usize, batch: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank > input.min(output) {
            return Err(invalid(format!("rank {rank} outside 1..={}", input.min(output))));
        }
        let root = RngStream::new(seed).derive(CHAIN_STREAM);
        let a = Tensor::new(&[input, rank], root.derive(0).normals(input * rank))?;
        let b = Tensor::new(&[rank, output], root.derive(1).normals(rank * output))?;
        let map = a.matmul(&b)?.scale(1.0 / (rank as f64).sqrt());
        Ok(Self { map, batch, data: root.derive(2) })
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn held_out(&self, n: usize) -> Result<(Tensor, Tensor)> {
        self.sample(&self.data.derive(u64::MAX), n)
    }

    fn sample(&self, rng: &RngStream, n: usize) -> Result<(Tensor, Tensor)> {
        let x = Tensor::new(&[n, self.map.shape()[0]], rng.normals(n * self.map.shape()[0]))?;
        let y = x.matmul(&self.map)?;
        Ok((x, y))
    }
}

impl Task for LowRankTask {
    fn batch(&self, step: u64) -> Result<(Tensor, Tensor)> {
        self.sample(&self.data.derive(step), self.batch)
    }
}

#[derive(Clone, Debug)]
pub struct AclChainRun {
    pub trained: ModelGraph,
    pub consolidated: ModelGraph,
    pub history: TrainHistory,
    pub hidden_width: usize,
    /// Largest elementwise gap between the consolidated model and the gated
    /// model with its pruned gates closed to exactly zero.
    pub equivalence_max_diff: f64,
    pub final_l1: f64,
}

/// Trains a gated hidden layer and its adaptive successor on a low-rank map.
pub fn train_acl_chain(train: &TrainConfig, threshold: f64, eval_frames: usize) -> Result<AclChainRun> {
    let task = LowRankTask::new(CHAIN_INPUT, CHAIN_OUTPUT, CHAIN_RANK, train.batch_frames, train.seed)?;
    let mut trained = ModelGraph::build(
        CHAIN_INPUT,
        &[
            LayerSpec::dynamic(CHAIN_HIDDEN, false, Activation::Identity),
            LayerSpec::adaptive(CHAIN_OUTPUT, false, Activation::Identity),
        ],
        train.lambda_min,
        &RngStream::new(train.seed).derive(INIT_STREAM),
    )?;
    let history = train_two_phase(&mut trained, &task, train)?;
    let consolidated = trained.consolidate(threshold)?;

    let closed = trained.with_closed_gates(threshold);
    let (x, y) = task.held_out(eval_frames)?;
    let pred = consolidated.predict(&x)?;
    let equivalence_max_diff = closed.predict(&x)?.max_abs_diff(&pred)?;
    Ok(AclChainRun {
        hidden_width: consolidated.layers()[0].layer.out_dim(),
        final_l1: l1_loss(&y, &pred)?,
        trained,
        consolidated,
        history,
        equivalence_max_diff,
    })
}

/// Creates `dir`, refusing a non-empty one unless `overwrite` is set. A
/// stale failure marker is removed.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(invalid(format!("{} is not a directory", dir.display())));
        }
        if !overwrite && fs::read_dir(dir)?.next().is_some() {
            return Err(invalid(format!("{} is not empty (pass --overwrite to reuse it)", dir.display())));
        }
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            fs::remove_file(marker)?;
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

struct Artifacts<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Artifacts<'_> {
    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.written.push(path);
        Ok(())
    }

    fn model(&mut self, model: &ModelGraph) -> Result<()> {
        let mut buf = Vec::new();
        model.write_to(&mut buf)?;
        self.write("model.bin", buf)?;
        self.write("model.txt", model.summary())
    }
}

/// Effective `(bins, width)` filter bank of a single gated layer in
/// evaluation mode.
fn gated_bank(model: &ModelGraph) -> Result<Tensor> {
    let layer = &model.layers()[0].layer;
    match layer.as_dynamic() {
        Some(d) => layer.weight().mul_row(&d.gate().lambdas().sqrt()?),
        None => Ok(layer.weight().clone()),
    }
}

/// Single filter-bank run. Writes `history.csv`, `filterbank_target.csv`,
/// `filterbank_initial.csv`, `filterbank_final.csv` (consolidated),
/// `model.bin`/`model.txt` (consolidated), `profile.txt`/`profile.csv` and
/// `summary.txt` into the (already prepared) output directory.
pub fn run_filterbank(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let width = cfg.width_factor * cfg.bank.n_filters;
    let run = train_filterbank(&cfg.bank, width, cfg.noise_std, &cfg.train, cfg.threshold, cfg.eval_frames)?;
    let mut out = Artifacts { dir: &cfg.out_dir, written: Vec::new() };
    let sr = cfg.bank.sample_rate;
    out.write("history.csv", run.history.to_csv())?;
    out.write("filterbank_target.csv", filterbank_csv(&build_filterbank(&cfg.bank)?, sr)?)?;
    out.write("filterbank_initial.csv", filterbank_csv(&gated_bank(&run.initial)?, sr)?)?;
    out.write("filterbank_final.csv", filterbank_csv(&gated_bank(&run.consolidated)?, sr)?)?;
    out.model(&run.consolidated)?;

    let before = profile(&run.trained, cfg.frame_rate)?;
    let after = profile(&run.consolidated, cfg.frame_rate)?;
    out.write(
        "profile.txt",
        format!("trained (all units)\n{}\nconsolidated\n{}", before.to_table(), after.to_table()),
    )?;
    out.write("profile.csv", after.to_csv())?;

    let mut summary = String::new();
    let _ = writeln!(summary, "experiment: filterbank");
    let _ = writeln!(summary, "seed: {}", cfg.seed);
    let _ = writeln!(summary, "filter_bank: {} {} filters, fft {}", cfg.bank.family, cfg.bank.n_filters, cfg.bank.fft_size);
    let _ = writeln!(summary, "steps: {} (penalty from step {})", cfg.train.total_steps, cfg.train.phase1_steps);
    let _ = writeln!(summary, "beta: {}", cfg.train.beta);
    let _ = writeln!(summary, "width: {width}");
    let _ = writeln!(summary, "active_units: {}", run.consolidated.output_dim().unwrap_or(0));
    let _ = writeln!(summary, "mean_lambda: {}", run.trained.mean_lambda().unwrap_or(1.0));
    let _ = writeln!(summary, "final_l1: {}", run.final_l1);
    let _ = writeln!(summary, "in_factor: {}", run.in_factor);
    let _ = writeln!(summary, "out_factor: {}", run.out_factor);
    let _ = writeln!(summary, "flops_per_frame_trained: {}", before.total_flops_per_frame);
    let _ = writeln!(summary, "flops_per_frame_consolidated: {}", after.total_flops_per_frame);
    out.write("summary.txt", summary)?;
    Ok(out.written)
}

/// Penalty-weight sweep. Writes `sweep.csv` and `sweep.svg`.
pub fn run_beta_sweep(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<PathBuf>> {
    let points = sweep_points(cfg, threads)?;
    let mut out = Artifacts { dir: &cfg.out_dir, written: Vec::new() };
    out.write("sweep.csv", sweep_csv(&points))?;
    out.write("sweep.svg", sweep_chart(&points, cfg).render())?;
    Ok(out.written)
}

/// Low-rank chain demo. Writes `history.csv`, `model.bin`/`model.txt`
/// (consolidated) and `summary.txt`.
pub fn run_acl_chain(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let run = train_acl_chain(&cfg.train, cfg.threshold, cfg.eval_frames)?;
    let mut out = Artifacts { dir: &cfg.out_dir, written: Vec::new() };
    out.write("history.csv", run.history.to_csv())?;
    out.model(&run.consolidated)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "experiment: acl_chain");
    let _ = writeln!(summary, "seed: {}", cfg.seed);
    let _ = writeln!(summary, "beta: {}", cfg.train.beta);
    let _ = writeln!(summary, "target_rank: {CHAIN_RANK}");
    let _ = writeln!(summary, "hidden_width_initial: {CHAIN_HIDDEN}");
    let _ = writeln!(summary, "hidden_width_consolidated: {}", run.hidden_width);
    let _ = writeln!(summary, "final_l1: {}", run.final_l1);
    let _ = writeln!(summary, "equivalence_max_diff: {:e}", run.equivalence_max_diff);
    out.write("summary.txt", summary)?;
    Ok(out.written)
}

/// Runs the configured experiment into its output directory.
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<PathBuf>> {
    match cfg.kind {
        ExperimentKind::Filterbank => run_filterbank(cfg),
        ExperimentKind::BetaSweep => run_beta_sweep(cfg, threads),
        ExperimentKind::AclChain => run_acl_chain(cfg),
    }
}
