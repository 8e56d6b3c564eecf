//! Noise-injection capacity gates.
//!
//! Two forms are provided:
//!
//! * The ordered form ([`gate_ordered`]): a vector keeps its first `⌊K⌋ - 1`
//!   elements, zeroes everything past `⌊K⌋`, and mixes element `⌊K⌋` with
//!   Gaussian noise in proportion to the fractional part `λ = K - ⌊K⌋`.
//!   Here `λ` is the *noise* fraction.
//! * The per-unit form ([`gate_per_unit`]), used by the layers: every unit
//!   `n` has its own `λ_n`, the *signal* fraction,
//!   `y_n = √λ_n · x_n + √(1 - λ_n) · σ_n · ν_n`, which keeps `Var(y_n)`
//!   equal to `Var(x_n)` when `σ_n` tracks the feature's standard deviation.
//!   In evaluation mode the noise is dropped and `y_n = √λ_n · x_n`.
//!
//! The Wiener estimate `ξ̂ = η √(1 - λ)` recovers a noisy element with
//! normalized mean squared error exactly `λ`; [`mc_normalized_error`]
//! measures that by simulation.

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Upper bound of every `λ_n`; `d√(1-λ)/dλ` diverges at 1.
pub const LAMBDA_MAX: f64 = 1.0 - 1e-3;
/// Momentum of the running feature-deviation estimate.
pub const SIGMA_MOMENTUM: f64 = 0.99;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const SIGMA_INIT: f64 = 1.0;
/// Magnitude at which gate gradients are clipped before an optimizer step.
pub const GATE_GRAD_CLIP: f64 = 1e3;

/// Learnable per-unit capacity fractions of one gated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    lambdas: Tensor,
    lambda_min: f64,
    lambda_max: f64,
    sigma_ema: Vec<f64>,
}

impl GateState {
    /// Fresh gate of `width` units at full capacity (`λ_n = λ_max`).
    pub fn new(width: usize, lambda_min: f64) -> Result<Self> {
        Self::with_lambdas(vec![LAMBDA_MAX; width], lambda_min)
    }

    /// Gate pinned at explicit values in `[0, 1]`.
    ///
    /// Values outside `[λ_min, λ_max]` are kept as given until the next
    /// [`GateState::clamp_lambdas`]; this is how exactly-closed (`λ = 0`)
    /// units are expressed for analysis.
    pub fn with_lambdas(lambdas: Vec<f64>, lambda_min: f64) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(invalid("gate width must be positive"));
        }
        if !(lambda_min > 0.0 && lambda_min < LAMBDA_MAX) {
            return Err(invalid(format!(
                "lambda_min {lambda_min} must lie in (0, {LAMBDA_MAX})"
            )));
        }
        if let Some(v) = lambdas.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("lambda {v} outside [0, 1]")));
        }
        let width = lambdas.len();
        Ok(Self {
            lambdas: Tensor::vector(lambdas),
            lambda_min,
            lambda_max: LAMBDA_MAX,
            sigma_ema: vec![SIGMA_INIT; width],
        })
    }

    pub fn width(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &Tensor {
        &self.lambdas
    }

    /// Mutable access for optimizers; follow with [`GateState::clamp_lambdas`].
    pub fn lambdas_mut(&mut self) -> &mut Tensor {
        &mut self.lambdas
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn sigma_ema(&self) -> &[f64] {
        &self.sigma_ema
    }

    pub fn set_sigma_ema(&mut self, sigma: Vec<f64>) -> Result<()> {
        if sigma.len() != self.width() {
            return Err(invalid("sigma length differs from gate width"));
        }
        self.sigma_ema = sigma.into_iter().map(|s| s.max(SIGMA_FLOOR)).collect();
        Ok(())
    }

    pub fn mean_lambda(&self) -> f64 {
        self.lambdas.mean()
    }

    /// Projects every `λ_n` into `[λ_min, λ_max]`.
    pub fn clamp_lambdas(&mut self) {
        let (lo, hi) = (self.lambda_min, self.lambda_max);
        for v in self.lambdas.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }

    /// Number of units with `λ_n > threshold`.
    pub fn active_units(&self, threshold: f64) -> usize {
        self.lambdas.data().iter().filter(|&&v| v > threshold).count()
    }

    /// Indices of units with `λ_n > threshold`.
    pub fn kept_units(&self, threshold: f64) -> Vec<usize> {
        self.lambdas
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > threshold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Folds one batch of pre-gate features `(batch, width)` into the running
    /// deviation estimate: `σ ← 0.99 σ + 0.01 std(column)`, floored at 1e-6.
    pub fn update_sigma_ema(&mut self, batch_features: &Tensor) -> Result<()> {
        let width = self.width();
        if batch_features.last_dim() != width {
            return Err(Error::ShapeMismatch {
                op: "update_sigma_ema",
                left: batch_features.shape().to_vec(),
                right: vec![width],
            });
        }
        let rows = batch_features.len() / width;
        let mut mean = vec![0.0; width];
        for row in batch_features.data().chunks(width) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; width];
        for row in batch_features.data().chunks(width) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (sigma, s) in self.sigma_ema.iter_mut().zip(var) {
            let std = (s / rows as f64).sqrt();
            *sigma = (SIGMA_MOMENTUM * *sigma + (1.0 - SIGMA_MOMENTUM) * std).max(SIGMA_FLOOR);
        }
        Ok(())
    }

    /// Noise amplitudes `σ_n ν_{b,n}` for a batch shaped like `shape`.
    pub fn scaled_noise(&self, noise: &RngStream, shape: &[usize]) -> Result<Tensor> {
        let draws = draw_normals(noise, shape)?;
        draws.mul_row(&Tensor::vector(self.sigma_ema.clone()))
    }
}

/// Tensor of standard normals addressed by flat element index.
pub fn draw_normals(noise: &RngStream, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, noise.normals(n))
}

/// Continuous dimensionality `K ∈ [N_min, N_max]` of the ordered gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderedKState {
    k: f64,
    n_min: usize,
    n_max: usize,
}

impl OrderedKState {
    pub fn new(k: f64, n_min: usize, n_max: usize) -> Result<Self> {
        if n_min < 1 || n_min > n_max {
            return Err(invalid(format!("need 1 <= N_min <= N_max, got {n_min}, {n_max}")));
        }
        let state = Self { k: n_min as f64, n_min, n_max };
        state.check(k)?;
        Ok(Self { k, ..state })
    }

    fn check(&self, k: f64) -> Result<()> {
        if !(self.n_min as f64..=self.n_max as f64).contains(&k) {
            return Err(Error::Domain {
                op: "gate_ordered",
                detail: format!("K = {k} outside [{}, {}]", self.n_min, self.n_max),
            });
        }
        Ok(())
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn n_min(&self) -> usize {
        self.n_min
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Noise fraction of the boundary element.
    pub fn fraction(&self) -> f64 {
        self.k - self.k.floor()
    }
}

/// Ordered gate on the tape, differentiable in `K` through its fractional
/// part. `k` is a scalar node whose value must lie in `[N_min, N_max]`;
/// `⌊K⌋` is held constant, so the derivative is zero at integers.
pub fn gate_ordered_on_tape(
    tape: &mut Tape,
    x: Var,
    k: Var,
    bounds: (usize, usize),
    sigma: &[f64],
    nu: f64,
) -> Result<Var> {
    let n = tape.value(x).len();
    let k_value = tape.value(k).item()?;
    let state = OrderedKState::new(k_value, bounds.0, bounds.1)?;
    if n != state.n_max || sigma.len() != n {
        return Err(Error::ShapeMismatch {
            op: "gate_ordered",
            left: tape.value(x).shape().to_vec(),
            right: vec![state.n_max],
        });
    }
    let whole = k_value.floor();
    let boundary = whole as usize - 1;

    let mut keep = vec![0.0; n];
    keep[..boundary].iter_mut().for_each(|v| *v = 1.0);
    let mut pick = vec![0.0; n];
    pick[boundary] = 1.0;
    let keep = tape.constant(Tensor::new(tape.value(x).shape(), keep)?);
    let pick = tape.constant(Tensor::new(tape.value(x).shape(), pick)?);

    let clean = tape.mul(x, keep)?;
    let picked = tape.mul(x, pick)?;
    let element = tape.sum(picked);

    // λ = K - ⌊K⌋; at λ = 0 the boundary element passes through untouched.
    let eta = if state.fraction() == 0.0 {
        element
    } else {
        let frac = tape.add_scalar(k, -whole);
        let keep_frac = tape.rsub_scalar(1.0, frac);
        let signal_gain = tape.sqrt(keep_frac)?;
        let noise_gain = tape.sqrt(frac)?;
        let signal = tape.mul(element, signal_gain)?;
        let noise = tape.scale(noise_gain, sigma[boundary] * nu);
        tape.add(signal, noise)?
    };
    let placed = tape.mul(pick, eta)?;
    tape.add(clean, placed)
}

/// Ordered gate with an explicit boundary draw `nu`.
pub fn gate_ordered_with_draw(
    x: &Tensor,
    state: &OrderedKState,
    sigma: &[f64],
    nu: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(Tensor::scalar(state.k));
    let out = gate_ordered_on_tape(&mut tape, xv, kv, (state.n_min, state.n_max), sigma, nu)?;
    Ok(tape.value(out).clone())
}

/// Ordered gate drawing `ν` from index 0 of `noise`.
pub fn gate_ordered(
    x: &Tensor,
    state: &OrderedKState,
    noise: &RngStream,
    sigma: &[f64],
) -> Result<Tensor> {
    gate_ordered_with_draw(x, state, sigma, noise.normal_at(0))
}

/// Per-unit gate on the tape.
///
/// `lambdas` is the gate's `λ` leaf (width `N`); `x` has trailing width `N`.
/// With `noise = Some(σ ⊙ ν)` (same shape as `x`) the training mix is
/// applied, with `λ` passed through a straight-through clamp to the gate's
/// band; with `None` the evaluation form `√λ ⊙ x` is used.
pub fn gate_per_unit_on_tape(
    tape: &mut Tape,
    x: Var,
    lambdas: Var,
    state: &GateState,
    noise: Option<&Tensor>,
) -> Result<Var> {
    let width = tape.value(lambdas).len();
    if tape.value(x).last_dim() != width {
        return Err(Error::ShapeMismatch {
            op: "gate_per_unit",
            left: tape.value(x).shape().to_vec(),
            right: vec![width],
        });
    }
    match noise {
        None => {
            let gain = tape.sqrt(lambdas)?;
            tape.mul_row(x, gain)
        }
        Some(noise) => {
            if noise.shape() != tape.value(x).shape() {
                return Err(Error::ShapeMismatch {
                    op: "gate_per_unit noise",
                    left: tape.value(x).shape().to_vec(),
                    right: noise.shape().to_vec(),
                });
            }
            let lam = tape.clamp(lambdas, state.lambda_min(), state.lambda_max())?;
            let signal_gain = tape.sqrt(lam)?;
            let rest = tape.rsub_scalar(1.0, lam);
            let noise_gain = tape.sqrt(rest)?;
            let signal = tape.mul_row(x, signal_gain)?;
            let noise = tape.constant(noise.clone());
            let noise = tape.mul_row(noise, noise_gain)?;
            tape.add(signal, noise)
        }
    }
}

/// Per-unit gate applied to a value. In training mode `ν` is drawn from
/// `noise` at each element's flat index.
pub fn gate_per_unit(
    x: &Tensor,
    state: &GateState,
    noise: &RngStream,
    training: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = tape.constant(state.lambdas().clone());
    let scaled = if training {
        Some(state.scaled_noise(noise, x.shape())?)
    } else {
        None
    };
    let out = gate_per_unit_on_tape(&mut tape, xv, lv, state, scaled.as_ref())?;
    Ok(tape.value(out).clone())
}

/// Linear MMSE estimate of the boundary element from its noisy mix.
pub fn wiener_estimate(eta: f64, lambda: f64) -> f64 {
    eta * (1.0 - lambda).sqrt()
}

/// Monte Carlo estimate of `E[(ξ - ξ̂)²] / σ²` for the ordered gate's
/// boundary element at noise fraction `lambda`.
pub fn mc_normalized_error(lambda: f64, n_samples: u64, seed: u64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(invalid(format!("lambda {lambda} outside [0, 1)")));
    }
    if n_samples < 10_000 {
        return Err(invalid(format!("need at least 1e4 samples, got {n_samples}")));
    }
    // Any σ works; a non-unit value keeps the normalization honest.
    const SIGMA: f64 = 1.7;
    let root = RngStream::new(seed);
    let signal = root.derive(0);
    let noise = root.derive(1);
    let (a, b) = ((1.0 - lambda).sqrt(), lambda.sqrt());
    let mut total = 0.0;
    for i in 0..n_samples {
        let xi = SIGMA * signal.normal_at(i);
        let eta = a * xi + b * SIGMA * noise.normal_at(i);
        let err = xi - wiener_estimate(eta, lambda);
        total += err * err;
    }
    Ok(total / n_samples as f64 / (SIGMA * SIGMA))
}

/// `(β / N) Σ λ_n²` on the tape.
pub fn lambda_penalty_on_tape(tape: &mut Tape, lambdas: Var, beta: f64) -> Var {
    let n = tape.value(lambdas).len() as f64;
    let sq = tape.square(lambdas);
    let total = tape.sum(sq);
    tape.scale(total, beta / n)
}

pub fn lambda_penalty(state: &GateState, beta: f64) -> f64 {
    beta / state.width() as f64 * state.lambdas().data().iter().map(|v| v * v).sum::<f64>()
}
