//! Fixed, dynamic and adaptive linear layers and their composition.
//!
//! A [`DynamicLinear`] layer gates each output unit with a learnable
//! capacity fraction. An [`AdaptiveLinear`] layer follows a dynamic one and
//! consumes its full-width (gated) output during training; when the model is
//! consolidated, the adaptive layer drops exactly the input rows that belong
//! to pruned units. Consolidation leaves only [`FixedLinear`] layers.
//!
//! Forward order inside a dynamic layer is `act(gate(x W) + b)`: the bias is
//! not gated.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::gate::{gate_per_unit_on_tape, GateState};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default `λ` threshold below which a unit is removed by consolidation.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => crate::tensor::sigmoid(v),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Sigmoid,
            other => return Err(Error::Format(format!("unknown activation code {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

fn check_linear(weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    let (i, o) = weight.dims2()?;
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: weight.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
    }
    Ok((i, o))
}

fn init_uniform(stream: &RngStream, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, stream.uniforms(n, -bound, bound)).expect("positive dims")
}

/// Ordinary linear layer with immutable dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedLinear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl FixedLinear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        check_linear(&weight, bias.as_ref())?;
        Ok(Self { weight, bias })
    }

    pub fn init(in_dim: usize, out_dim: usize, bias: bool, stream: &RngStream) -> Self {
        Self {
            weight: init_uniform(&stream.derive(0), &[in_dim, out_dim], in_dim),
            bias: bias.then(|| init_uniform(&stream.derive(1), &[out_dim], in_dim)),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Linear layer whose output units are capacity-gated.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicLinear {
    weight: Tensor,
    bias: Option<Tensor>,
    gate: GateState,
}

impl DynamicLinear {
    pub fn new(weight: Tensor, bias: Option<Tensor>, gate: GateState) -> Result<Self> {
        let (_, o) = check_linear(&weight, bias.as_ref())?;
        if gate.width() != o {
            return Err(invalid(format!(
                "gate width {} differs from layer width {o}",
                gate.width()
            )));
        }
        Ok(Self { weight, bias, gate })
    }

    pub fn init(
        in_dim: usize,
        max_width: usize,
        bias: bool,
        lambda_min: f64,
        stream: &RngStream,
    ) -> Result<Self> {
        let fixed = FixedLinear::init(in_dim, max_width, bias, stream);
        Self::new(fixed.weight, fixed.bias, GateState::new(max_width, lambda_min)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn gate(&self) -> &GateState {
        &self.gate
    }

    pub fn gate_mut(&mut self) -> &mut GateState {
        &mut self.gate
    }

    pub fn max_width(&self) -> usize {
        self.gate.width()
    }

    pub fn active_units(&self, threshold: f64) -> usize {
        self.gate.active_units(threshold)
    }
}

/// Linear layer whose input width follows a preceding dynamic layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveLinear {
    weight: Tensor,
    bias: Option<Tensor>,
    link: usize,
}

impl AdaptiveLinear {
    pub fn new(weight: Tensor, bias: Option<Tensor>, link: usize) -> Result<Self> {
        check_linear(&weight, bias.as_ref())?;
        Ok(Self { weight, bias, link })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Index of the dynamic layer this one adapts to.
    pub fn link(&self) -> usize {
        self.link
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Fixed(FixedLinear),
    Dynamic(DynamicLinear),
    Adaptive(AdaptiveLinear),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Fixed(_) => LayerKind::Fixed,
            Layer::Dynamic(_) => LayerKind::Dynamic,
            Layer::Adaptive(_) => LayerKind::Adaptive,
        }
    }

    pub fn weight(&self) -> &Tensor {
        match self {
            Layer::Fixed(l) => &l.weight,
            Layer::Dynamic(l) => &l.weight,
            Layer::Adaptive(l) => &l.weight,
        }
    }

    fn weight_mut(&mut self) -> &mut Tensor {
        match self {
            Layer::Fixed(l) => &mut l.weight,
            Layer::Dynamic(l) => &mut l.weight,
            Layer::Adaptive(l) => &mut l.weight,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Fixed(l) => l.bias.as_ref(),
            Layer::Dynamic(l) => l.bias.as_ref(),
            Layer::Adaptive(l) => l.bias.as_ref(),
        }
    }

    fn bias_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Fixed(l) => l.bias.as_mut(),
            Layer::Dynamic(l) => l.bias.as_mut(),
            Layer::Adaptive(l) => l.bias.as_mut(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight().shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight().shape()[1]
    }

    pub fn as_dynamic(&self) -> Option<&DynamicLinear> {
        match self {
            Layer::Dynamic(d) => Some(d),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Fixed,
    Dynamic,
    Adaptive,
}

impl LayerKind {
    pub fn tag(self) -> &'static str {
        match self {
            LayerKind::Fixed => "FCL",
            LayerKind::Dynamic => "DCL",
            LayerKind::Adaptive => "ACL",
        }
    }

    fn code(self) -> u8 {
        match self {
            LayerKind::Fixed => 0,
            LayerKind::Dynamic => 1,
            LayerKind::Adaptive => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub layer: Layer,
    pub activation: Activation,
}

/// Declarative description of one layer for [`ModelGraph::build`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub out_dim: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn fixed(out_dim: usize, bias: bool, activation: Activation) -> Self {
        Self { kind: LayerKind::Fixed, out_dim, bias, activation }
    }

    pub fn dynamic(out_dim: usize, bias: bool, activation: Activation) -> Self {
        Self { kind: LayerKind::Dynamic, out_dim, bias, activation }
    }

    pub fn adaptive(out_dim: usize, bias: bool, activation: Activation) -> Self {
        Self { kind: LayerKind::Adaptive, out_dim, bias, activation }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Lambda,
}

/// Address of one parameter tensor inside a [`ModelGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamId {
    pub fn name(&self) -> String {
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Lambda => "lambda",
        };
        format!("layer{}.{kind}", self.layer)
    }
}

/// How the gates behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Deterministic `√λ` scaling, no noise.
    Eval,
    /// Training mix. Noise for layer `i` is drawn from `noise.derive(i)`;
    /// `None` trains with the noise term switched off.
    Train { noise: Option<RngStream> },
}

/// Tape handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<(ParamId, Var)>,
}

impl Bindings {
    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Var)> {
        self.vars.iter()
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }

    fn expect(&self, layer: usize, kind: ParamKind) -> Var {
        self.get(ParamId { layer, kind }).expect("bound parameter")
    }
}

pub struct ForwardPass {
    pub output: Var,
    /// Pre-gate features of every dynamic layer, for deviation tracking.
    pub gate_features: Vec<(usize, Tensor)>,
}

/// Ordered stack of layers with activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerRecord>,
}

impl ModelGraph {
    pub fn new(layers: Vec<LayerRecord>) -> Result<Self> {
        let model = Self { layers };
        model.validate()?;
        Ok(model)
    }

    /// Builds and randomly initializes a stack on `input_dim` inputs.
    pub fn build(
        input_dim: usize,
        specs: &[LayerSpec],
        lambda_min: f64,
        stream: &RngStream,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut width = input_dim;
        for (i, spec) in specs.iter().enumerate() {
            let s = stream.derive(i as u64);
            let layer = match spec.kind {
                LayerKind::Fixed => Layer::Fixed(FixedLinear::init(width, spec.out_dim, spec.bias, &s)),
                LayerKind::Dynamic => {
                    Layer::Dynamic(DynamicLinear::init(width, spec.out_dim, spec.bias, lambda_min, &s)?)
                }
                LayerKind::Adaptive => {
                    let f = FixedLinear::init(width, spec.out_dim, spec.bias, &s);
                    let link = i.checked_sub(1).ok_or_else(|| invalid("adaptive layer needs a predecessor"))?;
                    Layer::Adaptive(AdaptiveLinear::new(f.weight, f.bias, link)?)
                }
            };
            layers.push(LayerRecord { layer, activation: spec.activation });
            width = spec.out_dim;
        }
        Self::new(layers)
    }

    fn validate(&self) -> Result<()> {
        for (i, rec) in self.layers.iter().enumerate() {
            if i > 0 {
                let prev = &self.layers[i - 1].layer;
                if rec.layer.in_dim() != prev.out_dim() {
                    return Err(Error::WidthMismatch {
                        layer: i,
                        expected: prev.out_dim(),
                        got: rec.layer.in_dim(),
                    });
                }
                if prev.kind() == LayerKind::Dynamic && rec.layer.kind() != LayerKind::Adaptive {
                    return Err(invalid(format!(
                        "layer {i} follows a dynamic layer and must be adaptive"
                    )));
                }
            }
            if let Layer::Adaptive(a) = &rec.layer {
                if i == 0 || a.link != i - 1 || self.layers[a.link].layer.kind() != LayerKind::Dynamic {
                    return Err(invalid(format!(
                        "adaptive layer {i} must link to the dynamic layer directly before it (link {})",
                        a.link
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerRecord] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(|r| r.layer.in_dim())
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(|r| r.layer.out_dim())
    }

    pub fn has_gates(&self) -> bool {
        self.layers.iter().any(|r| r.layer.kind() == LayerKind::Dynamic)
    }

    pub fn dynamic_layer_mut(&mut self, index: usize) -> Option<&mut DynamicLinear> {
        match self.layers.get_mut(index).map(|r| &mut r.layer) {
            Some(Layer::Dynamic(d)) => Some(d),
            _ => None,
        }
    }

    /// `(layer index, gate)` for every dynamic layer.
    pub fn gates(&self) -> impl Iterator<Item = (usize, &GateState)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.layer.as_dynamic().map(|d| (i, d.gate())))
    }

    pub fn gates_mut(&mut self) -> impl Iterator<Item = &mut GateState> {
        self.layers.iter_mut().filter_map(|r| match &mut r.layer {
            Layer::Dynamic(d) => Some(d.gate_mut()),
            _ => None,
        })
    }

    /// Weight and bias count (gate parameters excluded).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|r| r.layer.weight().len() + r.layer.bias().map_or(0, Tensor::len))
            .sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (layer, rec) in self.layers.iter().enumerate() {
            ids.push(ParamId { layer, kind: ParamKind::Weight });
            if rec.layer.bias().is_some() {
                ids.push(ParamId { layer, kind: ParamKind::Bias });
            }
            if rec.layer.kind() == LayerKind::Dynamic {
                ids.push(ParamId { layer, kind: ParamKind::Lambda });
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        let layer = &self.layers.get(id.layer)?.layer;
        match id.kind {
            ParamKind::Weight => Some(layer.weight()),
            ParamKind::Bias => layer.bias(),
            ParamKind::Lambda => layer.as_dynamic().map(|d| d.gate().lambdas()),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let layer = &mut self.layers.get_mut(id.layer)?.layer;
        match id.kind {
            ParamKind::Weight => Some(layer.weight_mut()),
            ParamKind::Bias => layer.bias_mut(),
            ParamKind::Lambda => match layer {
                Layer::Dynamic(d) => Some(d.gate_mut().lambdas_mut()),
                _ => None,
            },
        }
    }

    /// Places every parameter on the tape. Weights and biases are trainable;
    /// gate fractions only when `train_lambdas` is set.
    pub fn bind(&self, tape: &mut Tape, train_lambdas: bool) -> Bindings {
        let vars = self
            .param_ids()
            .into_iter()
            .map(|id| {
                let value = self.param(id).expect("listed parameter").clone();
                let trainable = id.kind != ParamKind::Lambda || train_lambdas;
                (id, tape.leaf(value, trainable))
            })
            .collect();
        Bindings { vars }
    }

    /// Runs the stack on a `(batch, in)` input node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        input: Var,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let mut x = input;
        let mut gate_features = Vec::new();
        for (i, rec) in self.layers.iter().enumerate() {
            let layer = &rec.layer;
            let got = tape.value(x).last_dim();
            if tape.value(x).shape().len() != 2 || got != layer.in_dim() {
                return Err(Error::WidthMismatch { layer: i, expected: layer.in_dim(), got });
            }
            let w = bindings.expect(i, ParamKind::Weight);
            let mut h = tape.matmul(x, w)?;
            if let Layer::Dynamic(d) = layer {
                gate_features.push((i, tape.value(h).clone()));
                let lambdas = bindings.expect(i, ParamKind::Lambda);
                let noise = match mode {
                    Mode::Eval => None,
                    Mode::Train { noise: Some(stream) } => {
                        Some(d.gate().scaled_noise(&stream.derive(i as u64), tape.value(h).shape())?)
                    }
                    Mode::Train { noise: None } => Some(Tensor::zeros(tape.value(h).shape())),
                };
                h = gate_per_unit_on_tape(tape, h, lambdas, d.gate(), noise.as_ref())?;
            }
            if layer.bias().is_some() {
                let b = bindings.expect(i, ParamKind::Bias);
                h = tape.add_row(h, b)?;
            }
            x = rec.activation.on_tape(tape, h);
        }
        Ok(ForwardPass { output: x, gate_features })
    }

    /// Evaluation-mode output for a `(batch, in)` or `(in)` input.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let one_row = input.shape().len() == 1;
        let x = if one_row { input.reshape(&[1, input.len()])? } else { input.clone() };
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, false);
        let xv = tape.constant(x);
        let pass = self.forward(&mut tape, &bindings, xv, Mode::Eval)?;
        let out = tape.value(pass.output).clone();
        if one_row {
            let n = out.len();
            out.reshape(&[n])
        } else {
            Ok(out)
        }
    }

    /// Folds a training forward pass's pre-gate features into each gate's
    /// running deviation estimate.
    pub fn update_sigma(&mut self, features: &[(usize, Tensor)]) -> Result<()> {
        for (i, f) in features {
            let d = self
                .dynamic_layer_mut(*i)
                .ok_or_else(|| invalid(format!("layer {i} is not dynamic")))?;
            d.gate_mut().update_sigma_ema(f)?;
        }
        Ok(())
    }

    pub fn clamp_lambdas(&mut self) {
        self.gates_mut().for_each(GateState::clamp_lambdas);
    }

    /// Total active units over all dynamic layers.
    pub fn active_units(&self, threshold: f64) -> usize {
        self.gates().map(|(_, g)| g.active_units(threshold)).sum()
    }

    /// Mean `λ` over every gated unit of the model; `None` without gates.
    pub fn mean_lambda(&self) -> Option<f64> {
        let (sum, n) = self
            .gates()
            .fold((0.0, 0usize), |(s, n), (_, g)| (s + g.lambdas().sum(), n + g.width()));
        (n > 0).then(|| sum / n as f64)
    }

    /// Replaces every dynamic/adaptive pair by fixed layers.
    ///
    /// Units with `λ_n > threshold` are kept and their weight columns scaled
    /// by `√λ_n`, which reproduces the evaluation-mode gate. A removed unit
    /// still emits the constant `act(b_n)`; that constant is folded into the
    /// following adaptive layer's bias, so outputs match exactly whenever
    /// every removed unit had `λ_n = 0`.
    pub fn consolidate(&self, threshold: f64) -> Result<ModelGraph> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(invalid(format!("threshold {threshold} outside (0, 1)")));
        }
        let mut out: Vec<LayerRecord> = Vec::with_capacity(self.layers.len());
        // kept units and per-unit constant outputs of the preceding dynamic layer
        let mut pending: Option<(Vec<usize>, Vec<f64>)> = None;
        for (i, rec) in self.layers.iter().enumerate() {
            let fixed = match &rec.layer {
                Layer::Fixed(f) => f.clone(),
                Layer::Dynamic(d) => {
                    let kept = d.gate().kept_units(threshold);
                    if kept.is_empty() {
                        return Err(Error::DegenerateConsolidation { layer: i });
                    }
                    let gains: Vec<f64> = kept.iter().map(|&n| d.gate().lambdas().data()[n].sqrt()).collect();
                    let weight = d.weight.select_columns(&kept)?.mul_row(&Tensor::vector(gains))?;
                    let bias = d
                        .bias
                        .as_ref()
                        .map(|b| Tensor::vector(kept.iter().map(|&n| b.data()[n]).collect()));
                    let constants = (0..d.max_width())
                        .map(|n| rec.activation.apply(d.bias.as_ref().map_or(0.0, |b| b.data()[n])))
                        .collect();
                    pending = Some((kept, constants));
                    FixedLinear::new(weight, bias)?
                }
                Layer::Adaptive(a) => {
                    let (kept, constants) = pending
                        .take()
                        .ok_or_else(|| invalid(format!("adaptive layer {i} has no dynamic predecessor")))?;
                    let weight = a.weight.select_rows(&kept)?;
                    let mut fold = vec![0.0; a.weight.shape()[1]];
                    for n in (0..constants.len()).filter(|n| !kept.contains(n)) {
                        if constants[n] != 0.0 {
                            for (f, w) in fold.iter_mut().zip(a.weight.select_rows(&[n])?.data()) {
                                *f += constants[n] * w;
                            }
                        }
                    }
                    let any_fold = fold.iter().any(|&v| v != 0.0);
                    let bias = match (&a.bias, any_fold) {
                        (Some(b), _) => Some(b.add(&Tensor::vector(fold))?),
                        (None, true) => Some(Tensor::vector(fold)),
                        (None, false) => None,
                    };
                    FixedLinear::new(weight, bias)?
                }
            };
            out.push(LayerRecord { layer: Layer::Fixed(fixed), activation: rec.activation });
        }
        ModelGraph::new(out)
    }

    /// Copy with every gate at or below `threshold` set to exactly zero.
    pub fn with_closed_gates(&self, threshold: f64) -> ModelGraph {
        let mut m = self.clone();
        for g in m.gates_mut() {
            for l in g.lambdas_mut().data_mut() {
                if *l <= threshold {
                    *l = 0.0;
                }
            }
        }
        m
    }

    /// Indices of the model outputs that survive consolidation, when the
    /// last layer is dynamic; all outputs otherwise.
    pub fn surviving_outputs(&self, threshold: f64) -> Vec<usize> {
        match self.layers.last().map(|r| &r.layer) {
            Some(Layer::Dynamic(d)) => d.gate().kept_units(threshold),
            Some(l) => (0..l.out_dim()).collect(),
            None => Vec::new(),
        }
    }

    /// Human-readable description of the stack.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layers: {}", self.layers.len());
        let _ = writeln!(s, "parameters: {}", self.parameter_count());
        for (i, rec) in self.layers.iter().enumerate() {
            let l = &rec.layer;
            let _ = write!(
                s,
                "  [{i}] {} {}x{} bias={} act={}",
                l.kind().tag(),
                l.in_dim(),
                l.out_dim(),
                l.bias().is_some(),
                rec.activation.name()
            );
            match l {
                Layer::Dynamic(d) => {
                    let _ = write!(
                        s,
                        " active@{DEFAULT_PRUNE_THRESHOLD}={} mean_lambda={:.6} lambda_min={}",
                        d.active_units(DEFAULT_PRUNE_THRESHOLD),
                        d.gate().mean_lambda(),
                        d.gate().lambda_min()
                    );
                }
                Layer::Adaptive(a) => {
                    let _ = write!(s, " link={}", a.link);
                }
                Layer::Fixed(_) => {}
            }
            s.push('\n');
        }
        s
    }

    /// Writes the binary container described in [`crate::layers`] docs of
    /// [`ModelGraph::read_from`].
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for rec in &self.layers {
            let l = &rec.layer;
            w.write_all(&[l.kind().code(), rec.activation.code(), l.bias().is_some() as u8, 0])?;
            w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
            let link = match l {
                Layer::Adaptive(a) => a.link as u32,
                _ => NO_LINK,
            };
            w.write_all(&link.to_le_bytes())?;
            write_f64s(&mut w, l.weight().data())?;
            if let Some(b) = l.bias() {
                write_f64s(&mut w, b.data())?;
            }
            if let Layer::Dynamic(d) = l {
                write_f64s(&mut w, &[d.gate().lambda_min()])?;
                write_f64s(&mut w, d.gate().lambdas().data())?;
                write_f64s(&mut w, d.gate().sigma_ema())?;
            }
        }
        Ok(())
    }

    /// Reads a model container.
    ///
    /// Layout, all integers and floats little-endian:
    ///
    /// ```text
    /// magic    8 bytes  "DYNCAPM\0"
    /// version  u32      1
    /// layers   u32
    /// per layer:
    ///   kind u8 (0 fixed, 1 dynamic, 2 adaptive), activation u8
    ///   (0 identity, 1 tanh, 2 sigmoid), has_bias u8, reserved u8
    ///   in u32, out u32, link u32 (0xFFFF_FFFF unless adaptive)
    ///   weight  in*out f64, row-major (in, out)
    ///   bias    out f64            (if has_bias)
    ///   dynamic only: lambda_min f64, lambdas out f64, sigma out f64
    /// ```
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let mut head = [0u8; 4];
            r.read_exact(&mut head)?;
            let activation = Activation::from_code(head[1])?;
            let has_bias = head[2] != 0;
            let in_dim = read_u32(&mut r)? as usize;
            let out_dim = read_u32(&mut r)? as usize;
            let link = read_u32(&mut r)?;
            let weight = Tensor::new(&[in_dim, out_dim], read_f64s(&mut r, in_dim * out_dim)?)?;
            let bias = if has_bias {
                Some(Tensor::vector(read_f64s(&mut r, out_dim)?))
            } else {
                None
            };
            let layer = match head[0] {
                0 => Layer::Fixed(FixedLinear::new(weight, bias)?),
                1 => {
                    let lambda_min = read_f64s(&mut r, 1)?[0];
                    let lambdas = read_f64s(&mut r, out_dim)?;
                    let sigma = read_f64s(&mut r, out_dim)?;
                    let mut gate = GateState::with_lambdas(lambdas, lambda_min)?;
                    gate.set_sigma_ema(sigma)?;
                    Layer::Dynamic(DynamicLinear::new(weight, bias, gate)?)
                }
                2 => Layer::Adaptive(AdaptiveLinear::new(weight, bias, link as usize)?),
                other => return Err(Error::Format(format!("unknown layer kind {other}"))),
            };
            layers.push(LayerRecord { layer, activation });
        }
        Self::new(layers)
    }
}

const MAGIC: &[u8; 8] = b"DYNCAPM\0";
const FORMAT_VERSION: u32 = 1;
const NO_LINK: u32 = u32::MAX;

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
