//! Triangular auditory filter banks and the white-noise regression task.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Frequency warp used to place the filter centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bark,
    Mel,
    Erb,
}

impl Family {
    /// Hz to the warped scale.
    pub fn warp(self, hz: f64) -> f64 {
        match self {
            Family::Mel => 2595.0 * (1.0 + hz / 700.0).log10(),
            Family::Bark => 26.81 * hz / (1960.0 + hz) - 0.53,
            Family::Erb => 21.4 * (1.0 + 0.00437 * hz).log10(),
        }
    }

    /// Warped scale back to Hz.
    pub fn unwarp(self, z: f64) -> f64 {
        match self {
            Family::Mel => 700.0 * (10f64.powf(z / 2595.0) - 1.0),
            Family::Bark => 1960.0 * (z + 0.53) / (26.28 - z),
            Family::Erb => (10f64.powf(z / 21.4) - 1.0) / 0.00437,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Bark => "bark",
            Family::Mel => "mel",
            Family::Erb => "erb",
        })
    }
}

impl FromStr for Family {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bark" => Ok(Family::Bark),
            "mel" => Ok(Family::Mel),
            "erb" => Ok(Family::Erb),
            other => Err(invalid(format!("unknown filter bank family '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBankSpec {
    pub family: Family,
    pub n_filters: usize,
    pub fft_size: usize,
    pub sample_rate: f64,
}

impl Default for FilterBankSpec {
    fn default() -> Self {
        Self { family: Family::Bark, n_filters: 32, fft_size: 512, sample_rate: 16000.0 }
    }
}

impl FilterBankSpec {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_filters < 2 {
            return Err(invalid(format!("need at least 2 filters, got {}", self.n_filters)));
        }
        if self.fft_size < 2 || !self.fft_size.is_power_of_two() {
            return Err(invalid(format!("fft size {} is not a power of two", self.fft_size)));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(invalid(format!("sample rate {} must be positive", self.sample_rate)));
        }
        Ok(())
    }

    /// Center frequencies in Hz, evenly spaced on the warped scale.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let edges = self.edge_frequencies();
        edges[1..=self.n_filters].to_vec()
    }

    fn edge_frequencies(&self) -> Vec<f64> {
        let lo = self.family.warp(0.0);
        let hi = self.family.warp(self.sample_rate / 2.0);
        let n = self.n_filters + 1;
        (0..=n)
            .map(|i| match i {
                0 => 0.0,
                i if i == n => self.sample_rate / 2.0,
                i => self.family.unwarp(lo + (hi - lo) * i as f64 / n as f64),
            })
            .collect()
    }
}

/// `(bins, n_filters)` matrix of peak-normalized triangular filters.
pub fn build_filterbank(spec: &FilterBankSpec) -> Result<Tensor> {
    spec.validate()?;
    let bins = spec.bins();
    let edges = spec.edge_frequencies();
    let bin_hz = spec.sample_rate / spec.fft_size as f64;
    let mut values = vec![0.0; bins * spec.n_filters];
    for j in 0..spec.n_filters {
        let (lo, center, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        let mut peak = 0.0_f64;
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let v = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            values[k * spec.n_filters + j] = v;
            peak = peak.max(v);
        }
        if peak <= 0.0 {
            return Err(invalid(format!(
                "filter {j} of {} covers no frequency bin at fft size {}",
                spec.n_filters, spec.fft_size
            )));
        }
        for k in 0..bins {
            values[k * spec.n_filters + j] /= peak;
        }
    }
    Tensor::new(&[bins, spec.n_filters], values)
}

/// Noise level of the regression task: 16-bit PCM scale, about −10 dBFS.
pub const DEFAULT_NOISE_STD: f64 = 1e4;

/// Computes Hann-windowed, unnormalized DFT magnitudes.
///
/// White noise of standard deviation `s` has an expected magnitude of
/// `s·√(π/4)·√(Σw²)` in interior bins.
pub struct SpectrumAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl SpectrumAnalyzer {
    pub fn new(fft_size: usize) -> Result<Self> {
        if fft_size < 2 || !fft_size.is_power_of_two() {
            return Err(invalid(format!("fft size {fft_size} is not a power of two")));
        }
        let window: Vec<f64> = (0..fft_size)
            .map(|t| 0.5 - 0.5 * (std::f64::consts::TAU * t as f64 / fft_size as f64).cos())
            .collect();
        Ok(Self { fft: FftPlanner::new().plan_fft_forward(fft_size), window })
    }

    pub fn fft_size(&self) -> usize {
        self.window.len()
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Magnitudes of bins `0..=fft_size/2` for one frame.
    pub fn magnitudes(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.window.len() {
            return Err(invalid(format!(
                "frame has {} samples, expected {}",
                frame.len(),
                self.window.len()
            )));
        }
        let mut buf: Vec<Complex<f64>> =
            frame.iter().zip(&self.window).map(|(x, w)| Complex::new(x * w, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[..=self.window.len() / 2].iter().map(|c| c.norm()).collect())
    }

    /// `(n_frames, bins)` spectra of Gaussian noise frames with standard
    /// deviation `std`. Frame `i` uses normals `i·fft_size ..` of `rng`.
    pub fn white_noise(&self, rng: &RngStream, n_frames: usize, std: f64) -> Result<Tensor> {
        if n_frames == 0 {
            return Err(invalid("need at least one frame"));
        }
        let n = self.fft_size();
        let bins = n / 2 + 1;
        let mut data = Vec::with_capacity(n_frames * bins);
        let mut frame = vec![0.0; n];
        for i in 0..n_frames {
            let base = (i * n) as u64;
            for (t, s) in frame.iter_mut().enumerate() {
                *s = std * rng.normal_at(base + t as u64);
            }
            data.extend(self.magnitudes(&frame)?);
        }
        Tensor::new(&[n_frames, bins], data)
    }
}

/// Magnitude spectrum of one frame; see [`SpectrumAnalyzer`].
pub fn magnitude_spectrum(frame: &[f64]) -> Result<Vec<f64>> {
    SpectrumAnalyzer::new(frame.len())?.magnitudes(frame)
}

/// `(n_frames, bins)` magnitude spectra of unit-variance white noise for
/// `spec`'s fft size.
pub fn white_noise_spectrum(rng: &RngStream, spec: &FilterBankSpec, n_frames: usize) -> Result<Tensor> {
    spec.validate()?;
    SpectrumAnalyzer::new(spec.fft_size)?.white_noise(rng, n_frames, 1.0)
}

/// Ratio of available to minimally required capacity.
pub fn overparam_factor(capacity: f64, min_capacity: f64) -> Result<f64> {
    if !(capacity > 0.0 && min_capacity > 0.0) || !capacity.is_finite() || !min_capacity.is_finite() {
        return Err(invalid(format!(
            "capacities must be positive, got {capacity} and {min_capacity}"
        )));
    }
    Ok(capacity / min_capacity)
}

/// Filter bank matrix as CSV: one row per bin, `bin,hz,f0,f1,...`.
pub fn filterbank_csv(matrix: &Tensor, sample_rate: f64) -> Result<String> {
    let (bins, filters) = matrix.dims2()?;
    let fft_size = 2 * (bins - 1);
    let mut out = String::from("bin,hz");
    for j in 0..filters {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for k in 0..bins {
        out.push_str(&format!("{k},{}", k as f64 * sample_rate / fft_size as f64));
        for v in &matrix.data()[k * filters..(k + 1) * filters] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Filtering white-noise spectra through a hidden filter bank.
///
/// The target has `width` columns: the bank's filters followed by zeros, so
/// a model of that width can match it exactly with only the first
/// `n_filters` units.
pub struct FilterBankTask {
    analyzer: SpectrumAnalyzer,
    target_matrix: Tensor,
    n_filters: usize,
    batch_frames: usize,
    noise_std: f64,
    data: RngStream,
}

impl FilterBankTask {
    pub fn new(
        spec: &FilterBankSpec,
        width: usize,
        batch_frames: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let bank = build_filterbank(spec)?;
        if !(noise_std.is_finite() && noise_std > 0.0) {
            return Err(invalid(format!("noise std {noise_std} must be positive")));
        }
        if width < spec.n_filters {
            return Err(invalid(format!(
                "model width {width} below the {} filters to reproduce",
                spec.n_filters
            )));
        }
        if batch_frames == 0 {
            return Err(invalid("batch needs at least one frame"));
        }
        let bins = spec.bins();
        let mut padded = vec![0.0; bins * width];
        for k in 0..bins {
            padded[k * width..k * width + spec.n_filters]
                .copy_from_slice(&bank.data()[k * spec.n_filters..(k + 1) * spec.n_filters]);
        }
        Ok(Self {
            analyzer: SpectrumAnalyzer::new(spec.fft_size)?,
            target_matrix: Tensor::new(&[bins, width], padded)?,
            n_filters: spec.n_filters,
            batch_frames,
            noise_std,
            data: RngStream::new(seed).derive(DATA_STREAM),
        })
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    /// `(input, target)` for training step `step`.
    pub fn batch(&self, step: u64) -> Result<(Tensor, Tensor)> {
        self.frames(&self.data.derive(step), self.batch_frames)
    }

    /// Held-out frames drawn from a stream no training step uses.
    pub fn held_out(&self, n_frames: usize) -> Result<(Tensor, Tensor)> {
        self.frames(&self.data.derive(HELD_OUT_STREAM), n_frames)
    }

    fn frames(&self, rng: &RngStream, n: usize) -> Result<(Tensor, Tensor)> {
        let x = self.analyzer.white_noise(rng, n, self.noise_std)?;
        let y = x.matmul(&self.target_matrix)?;
        Ok((x, y))
    }
}

const DATA_STREAM: u64 = 0xDA7A;
const HELD_OUT_STREAM: u64 = u64::MAX;
