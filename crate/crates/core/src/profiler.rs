//! Parameter and FLOP accounting for linear stacks.
//!
//! One multiply-accumulate counts as 2 FLOPs; a bias add counts as 1.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::layers::{Layer, ModelGraph};

/// Frames per second of a 16 kHz signal analyzed with a 256-sample hop.
pub const DEFAULT_FRAME_RATE: f64 = 62.5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: u64,
    pub flops_per_frame: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub entries: Vec<LayerProfile>,
    pub total_params: u64,
    pub total_flops_per_frame: u64,
    pub frame_rate: f64,
    pub flops_per_second: f64,
}

fn linear_cost(in_dim: usize, out_dim: usize, bias: bool) -> (u64, u64) {
    let (i, o) = (in_dim as u64, out_dim as u64);
    let b = if bias { o } else { 0 };
    (i * o + b, 2 * i * o + b)
}

fn check_rate(frame_rate: f64) -> Result<()> {
    if frame_rate.is_finite() && frame_rate > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("frame rate {frame_rate} must be positive")))
    }
}

fn report(model: &ModelGraph, frame_rate: f64, widths: &[(usize, usize)]) -> ProfileReport {
    let entries: Vec<LayerProfile> = model
        .layers()
        .iter()
        .zip(widths)
        .enumerate()
        .map(|(i, (rec, &(in_dim, out_dim)))| {
            let (params, flops) = linear_cost(in_dim, out_dim, rec.layer.bias().is_some());
            LayerProfile {
                name: format!("{i}:{}", rec.layer.kind().tag()),
                in_dim,
                out_dim,
                params,
                flops_per_frame: flops,
            }
        })
        .collect();
    let total_params = entries.iter().map(|e| e.params).sum();
    let total_flops_per_frame: u64 = entries.iter().map(|e| e.flops_per_frame).sum();
    ProfileReport {
        entries,
        total_params,
        total_flops_per_frame,
        frame_rate,
        flops_per_second: total_flops_per_frame as f64 * frame_rate,
    }
}

/// Costs at the instantiated widths.
pub fn profile(model: &ModelGraph, frame_rate: f64) -> Result<ProfileReport> {
    check_rate(frame_rate)?;
    let widths: Vec<_> = model.layers().iter().map(|r| (r.layer.in_dim(), r.layer.out_dim())).collect();
    Ok(report(model, frame_rate, &widths))
}

/// Costs at the widths consolidation would keep: gated outputs (and the
/// matching adaptive inputs) count only units with `λ > threshold`.
pub fn profile_active(model: &ModelGraph, frame_rate: f64, threshold: f64) -> Result<ProfileReport> {
    check_rate(frame_rate)?;
    let mut widths = Vec::with_capacity(model.len());
    let mut prev_active = None;
    for rec in model.layers() {
        let w = match &rec.layer {
            Layer::Fixed(_) => (rec.layer.in_dim(), rec.layer.out_dim()),
            Layer::Dynamic(d) => {
                let active = d.active_units(threshold);
                prev_active = Some(active);
                (rec.layer.in_dim(), active)
            }
            Layer::Adaptive(_) => (prev_active.take().unwrap_or(rec.layer.in_dim()), rec.layer.out_dim()),
        };
        widths.push(w);
    }
    Ok(report(model, frame_rate, &widths))
}

/// FLOPs per frame with every gated unit weighted by its `λ`.
pub fn effective_flops(model: &ModelGraph) -> f64 {
    let mut total = 0.0;
    let mut prev_mass = None;
    for rec in model.layers() {
        let l = &rec.layer;
        let bias = l.bias().is_some();
        total += match l {
            Layer::Fixed(_) => linear_cost(l.in_dim(), l.out_dim(), bias).1 as f64,
            Layer::Dynamic(d) => {
                let mass = d.gate().lambdas().sum();
                prev_mass = Some(mass);
                (2 * l.in_dim() + bias as usize) as f64 * mass
            }
            Layer::Adaptive(_) => {
                let mass = prev_mass.take().unwrap_or(l.in_dim() as f64);
                2.0 * mass * l.out_dim() as f64 + if bias { l.out_dim() as f64 } else { 0.0 }
            }
        };
    }
    total
}

impl ProfileReport {
    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# 1 MAC = 2 FLOPs, bias add = 1 FLOP; frame rate {} /s", self.frame_rate);
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>12} {:>14}", "layer", "in", "out", "params", "flops/frame");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>8} {:>12} {:>14}",
                e.name, e.in_dim, e.out_dim, e.params, e.flops_per_frame
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>12} {:>14}",
            "total", "", "", self.total_params, self.total_flops_per_frame
        );
        let _ = writeln!(s, "flops/second: {}", self.flops_per_second);
        s
    }

    /// CSV with one row per layer and a final `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,in_dim,out_dim,params,flops_per_frame,flops_per_second\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.name,
                e.in_dim,
                e.out_dim,
                e.params,
                e.flops_per_frame,
                e.flops_per_frame as f64 * self.frame_rate
            );
        }
        let _ = writeln!(
            s,
            "total,,,{},{},{}",
            self.total_params, self.total_flops_per_frame, self.flops_per_second
        );
        s
    }
}
