//! Experiment configuration: a flat key-value file merged over per-experiment
//! defaults.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::filterbank::{build_filterbank, Family, FilterBankSpec, DEFAULT_NOISE_STD};
use crate::profiler::DEFAULT_FRAME_RATE;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Filterbank,
    BetaSweep,
    AclChain,
}

impl FromStr for ExperimentKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filterbank" => Ok(Self::Filterbank),
            "beta_sweep" => Ok(Self::BetaSweep),
            "acl_chain" => Ok(Self::AclChain),
            other => Err(invalid(format!(
                "unknown experiment '{other}' (expected filterbank, beta_sweep or acl_chain)"
            ))),
        }
    }
}

/// Every setting as an optional override. This is what a config file
/// deserializes into; command-line flags are written over it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub family: Option<Family>,
    pub n_filters: Option<usize>,
    pub fft_size: Option<usize>,
    pub sample_rate: Option<f64>,
    /// Standard deviation of the white-noise samples.
    pub noise_std: Option<f64>,
    /// DCL width as a multiple of the filter count.
    pub width_factor: Option<usize>,
    pub steps: Option<u64>,
    pub phase1_steps: Option<u64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_min: Option<f64>,
    pub l1_scale: Option<f64>,
    pub batch_frames: Option<usize>,
    pub beta_list: Option<Vec<f64>>,
    pub overparam_list: Option<Vec<usize>>,
    pub threshold: Option<f64>,
    pub frame_rate: Option<f64>,
    pub eval_frames: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub bank: FilterBankSpec,
    pub noise_std: f64,
    pub width_factor: usize,
    pub train: TrainConfig,
    pub beta_list: Vec<f64>,
    pub overparam_list: Vec<usize>,
    pub threshold: f64,
    pub frame_rate: f64,
    /// Held-out frames for the final loss.
    pub eval_frames: usize,
}

/// Penalty weight of the single filter-bank run.
pub const DEFAULT_BETA: f64 = 0.5;
/// Penalty weight of the low-rank chain. Its hidden units share the signal,
/// so they only start to close well above the filter-bank weight.
pub const CHAIN_BETA: f64 = 2.0;
pub const DEFAULT_BETA_LIST: [f64; 4] = [0.01, 0.1, 0.5, 1.0];
pub const DEFAULT_OVERPARAM_LIST: [usize; 5] = [2, 4, 6, 8, 10];
/// Loss scale of the sweep, which keeps L1 gradients from swamping the penalty.
pub const SWEEP_L1_SCALE: f64 = 1e-3;

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let train = TrainConfig {
            beta: if kind == ExperimentKind::AclChain { CHAIN_BETA } else { DEFAULT_BETA },
            l1_scale: if kind == ExperimentKind::BetaSweep { SWEEP_L1_SCALE } else { 1.0 },
            ..TrainConfig::default()
        };
        Self {
            kind,
            seed: 0,
            out_dir: PathBuf::from(format!("out/{}", kind_name(kind))),
            bank: FilterBankSpec::default(),
            noise_std: DEFAULT_NOISE_STD,
            width_factor: 2,
            train,
            beta_list: DEFAULT_BETA_LIST.to_vec(),
            overparam_list: DEFAULT_OVERPARAM_LIST.to_vec(),
            threshold: crate::layers::DEFAULT_PRUNE_THRESHOLD,
            frame_rate: DEFAULT_FRAME_RATE,
            eval_frames: 256,
        }
    }

    /// Defaults for the file's experiment, overridden by every set field.
    pub fn resolve(file: &ConfigFile) -> Result<Self> {
        let kind = file.experiment.ok_or_else(|| invalid("no experiment selected"))?;
        let mut c = Self::defaults(kind);
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = file.$src.clone() {
                    c.$($dst)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(out_dir => out_dir);
        set!(family => bank.family);
        set!(n_filters => bank.n_filters);
        set!(fft_size => bank.fft_size);
        set!(sample_rate => bank.sample_rate);
        set!(noise_std => noise_std);
        set!(width_factor => width_factor);
        set!(steps => train.total_steps);
        set!(phase1_steps => train.phase1_steps);
        set!(lr => train.lr);
        set!(weight_decay => train.weight_decay);
        set!(beta => train.beta);
        set!(lambda_min => train.lambda_min);
        set!(l1_scale => train.l1_scale);
        set!(batch_frames => train.batch_frames);
        set!(beta_list => beta_list);
        set!(overparam_list => overparam_list);
        set!(threshold => threshold);
        set!(frame_rate => frame_rate);
        set!(eval_frames => eval_frames);
        // A short run keeps its penalty phase rather than failing validation.
        if file.steps.is_some() && file.phase1_steps.is_none() {
            c.train.phase1_steps = c.train.phase1_steps.min(c.train.total_steps);
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    /// Checks everything a run will touch before any training starts.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(invalid(format!("frame rate {} must be positive", self.frame_rate)));
        }
        if self.eval_frames == 0 {
            return Err(invalid("eval_frames must be positive"));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(invalid(format!("noise_std {} must be positive", self.noise_std)));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(invalid("empty output directory"));
        }
        match self.kind {
            ExperimentKind::Filterbank => {
                build_filterbank(&self.bank)?;
                if self.width_factor < 1 {
                    return Err(invalid("width_factor must be at least 1"));
                }
            }
            ExperimentKind::BetaSweep => {
                build_filterbank(&self.bank)?;
                if self.beta_list.is_empty() || self.overparam_list.is_empty() {
                    return Err(invalid("beta_list and overparam_list must be nonempty"));
                }
                if let Some(b) = self.beta_list.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
                    return Err(invalid(format!("beta {b} in beta_list must be nonnegative")));
                }
                if let Some(f) = self.overparam_list.iter().find(|&&f| f < 1) {
                    return Err(invalid(format!("overparameterization factor {f} must be at least 1")));
                }
            }
            ExperimentKind::AclChain => {}
        }
        Ok(())
    }
}

pub(crate) fn kind_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Filterbank => "filterbank",
        ExperimentKind::BetaSweep => "beta_sweep",
        ExperimentKind::AclChain => "acl_chain",
    }
}
