//! Spiking Q-network: synaptic layers with attached neuron populations,
//! simulated for `T` steps on a static observation.
//!
//! The observation is presented as a constant external current at every
//! step, so the first layer acts as a learned spike encoder. There are no
//! biases, and each layer's weights are shared across all simulation steps.
//! The last synaptic layer must be dense and drive non-spiking LI neurons;
//! every earlier synaptic layer drives LIF neurons. A [`DecoderKind`] turns
//! the LI voltage history into one Q-value per action.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::neuron::{self, NeuronConfig, NeuronModel, NeuronState};
use crate::real::Real;

/// Default number of simulation steps.
pub const DEFAULT_SIM_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// `Q = V_T`
    LastMem,
    /// `Q = max_t V_t`
    MaxMem,
    /// `Q = (1/T) sum_t V_t`
    MeanMem,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::LastMem, DecoderKind::MaxMem, DecoderKind::MeanMem];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::LastMem => "last_mem",
            DecoderKind::MaxMem => "max_mem",
            DecoderKind::MeanMem => "mean_mem",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "last_mem" => Ok(DecoderKind::LastMem),
            "max_mem" => Ok(DecoderKind::MaxMem),
            "mean_mem" => Ok(DecoderKind::MeanMem),
            other => Err(Error::Config(format!("unknown decoder {other:?}"))),
        }
    }
}

/// One token group of an architecture string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        neuron: NeuronModel,
    },
    /// `outputs == None` stands for the action count.
    Dense {
        outputs: Option<usize>,
        neuron: NeuronModel,
    },
    Flatten,
}

/// Parses the compact layer notation, e.g.
/// `Input-16C3S1-LIF-Flatten-128-LIF-NA-LI`.
///
/// `<c>C<k>S<s>` is a convolution with `c` output channels, kernel `k` and
/// stride `s`; a bare integer is a dense layer; `NA` is a dense layer with one
/// output per action. Each synaptic layer must be followed by `LIF` or `LI`.
pub fn parse_architecture(text: &str) -> Result<Vec<LayerSpec>> {
    let bad = |msg: String| Error::Config(format!("architecture {text:?}: {msg}"));
    let mut tokens = text.split('-').map(str::trim).peekable();
    if tokens.peek().is_some_and(|t| t.eq_ignore_ascii_case("input")) {
        tokens.next();
    }
    let mut specs = Vec::new();
    while let Some(tok) = tokens.next() {
        if tok.eq_ignore_ascii_case("flatten") {
            specs.push(LayerSpec::Flatten);
            continue;
        }
        let neuron = match tokens.next() {
            Some(n) if n.eq_ignore_ascii_case("lif") => NeuronModel::Lif,
            Some(n) if n.eq_ignore_ascii_case("li") => NeuronModel::Li,
            Some(n) => return Err(bad(format!("expected LIF or LI after {tok}, got {n}"))),
            None => return Err(bad(format!("layer {tok} has no neuron"))),
        };
        if tok.eq_ignore_ascii_case("na") {
            specs.push(LayerSpec::Dense { outputs: None, neuron });
        } else if let Ok(n) = tok.parse::<usize>() {
            specs.push(LayerSpec::Dense { outputs: Some(n), neuron });
        } else {
            specs.push(parse_conv(tok, neuron).ok_or_else(|| bad(format!("unrecognized layer {tok:?}")))?);
        }
    }
    Ok(specs)
}

fn parse_conv(tok: &str, neuron: NeuronModel) -> Option<LayerSpec> {
    let upper = tok.to_ascii_uppercase();
    let (c, rest) = upper.split_once('C')?;
    let (k, s) = rest.split_once('S')?;
    Some(LayerSpec::Conv2d { out_channels: c.parse().ok()?, kernel: k.parse().ok()?, stride: s.parse().ok()?, neuron })
}

/// Resolved geometry of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn input_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d { in_channels, in_h, in_w, .. } => Some(in_channels * in_h * in_w),
            LayerKind::Dense { inputs, .. } => Some(inputs),
            LayerKind::Flatten => None,
        }
    }

    pub fn output_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d { out_channels, out_h, out_w, .. } => Some(out_channels * out_h * out_w),
            LayerKind::Dense { outputs, .. } => Some(outputs),
            LayerKind::Flatten => None,
        }
    }

    /// Weight tensor shape: `[out, in, k, k]` for convolutions, `[out, in]`
    /// for dense layers, empty for flatten.
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![out_channels, in_channels, kernel, kernel]
            }
            LayerKind::Dense { inputs, outputs } => vec![outputs, inputs],
            LayerKind::Flatten => vec![],
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Flatten => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub kind: LayerKind,
    /// Row-major weights, shape [`LayerKind::weight_shape`]. Empty for flatten.
    pub weight: Vec<F>,
    pub neuron: Option<NeuronModel>,
}

impl<F: Real> Layer<F> {
    pub fn dense(inputs: usize, outputs: usize, weight: Vec<F>, neuron: NeuronModel) -> Result<Self> {
        ensure_len("dense weight", weight.len(), inputs * outputs)?;
        Ok(Self { kind: LayerKind::Dense { inputs, outputs }, weight, neuron: Some(neuron) })
    }

    fn apply(&self, input: &[F], out: &mut [F]) {
        match self.kind {
            LayerKind::Conv2d { .. } => conv2d_into(&self.kind, &self.weight, input, out),
            LayerKind::Dense { inputs, outputs } => dense_into(inputs, outputs, &self.weight, input, out),
            LayerKind::Flatten => out.copy_from_slice(input),
        }
    }
}

/// Strided cross-correlation without padding or bias.
///
/// `input` is `[in_channels, in_h, in_w]`, the result `[out_channels, out_h, out_w]`.
pub fn conv2d_apply<F: Real>(kind: &LayerKind, weight: &[F], input: &[F]) -> Result<Vec<F>> {
    let LayerKind::Conv2d { .. } = kind else {
        return Err(Error::contract("conv2d_apply needs a Conv2d layer"));
    };
    ensure_len("conv weight", weight.len(), kind.weight_shape().iter().product())?;
    ensure_len("conv input", input.len(), kind.input_len().unwrap_or(0))?;
    let mut out = vec![F::zero(); kind.output_len().unwrap_or(0)];
    conv2d_into(kind, weight, input, &mut out);
    Ok(out)
}

/// Matrix-vector product `W x` with `W` stored `[outputs, inputs]`.
pub fn dense_apply<F: Real>(inputs: usize, outputs: usize, weight: &[F], input: &[F]) -> Result<Vec<F>> {
    ensure_len("dense weight", weight.len(), inputs * outputs)?;
    ensure_len("dense input", input.len(), inputs)?;
    let mut out = vec![F::zero(); outputs];
    dense_into(inputs, outputs, weight, input, &mut out);
    Ok(out)
}

pub(crate) fn conv2d_into<F: Real>(kind: &LayerKind, weight: &[F], input: &[F], out: &mut [F]) {
    let LayerKind::Conv2d { in_channels, out_channels, kernel, stride, in_h, in_w, out_h, out_w } = *kind else {
        unreachable!("conv2d_into on non-conv layer");
    };
    out.fill(F::zero());
    for oc in 0..out_channels {
        let plane = &mut out[oc * out_h * out_w..(oc + 1) * out_h * out_w];
        for ic in 0..in_channels {
            let chan = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let w = weight[((oc * in_channels + ic) * kernel + kh) * kernel + kw];
                    if w == F::zero() {
                        continue;
                    }
                    for oy in 0..out_h {
                        let row = &chan[(oy * stride + kh) * in_w..];
                        let dst = &mut plane[oy * out_w..(oy + 1) * out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = *d + w * row[ox * stride + kw];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn dense_into<F: Real>(inputs: usize, outputs: usize, weight: &[F], input: &[F], out: &mut [F]) {
    let active: Vec<usize> = (0..inputs).filter(|&j| input[j] != F::zero()).collect();
    if active.len() * 2 < inputs {
        for o in 0..outputs {
            let row = &weight[o * inputs..(o + 1) * inputs];
            out[o] = active.iter().map(|&j| row[j] * input[j]).sum();
        }
    } else {
        for o in 0..outputs {
            let row = &weight[o * inputs..(o + 1) * inputs];
            out[o] = row.iter().zip(input).map(|(&w, &x)| w * x).sum();
        }
    }
}

/// Recorded state of one synaptic layer over all simulation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord<F> {
    /// External input to the neurons, `X_t = W I_t`.
    pub x: Vec<Vec<F>>,
    pub h: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub s: Vec<Vec<F>>,
}

/// Everything the backward pass needs from one forward simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageTrace<F> {
    pub obs: Vec<F>,
    /// One record per synaptic (non-flatten) layer, in order.
    pub layers: Vec<LayerRecord<F>>,
    pub q: Vec<F>,
    /// Per output neuron, the 1-based step of its maximum voltage (earliest on ties).
    pub argmax: Vec<usize>,
    pub decoder: DecoderKind,
    pub sim_steps: usize,
    /// True when spikes were produced by the smooth arctangent instead of the
    /// Heaviside step.
    pub smooth: bool,
}

impl<F: Real> VoltageTrace<F> {
    /// LI voltage history `V_1..V_T` of the output layer.
    pub fn output_history(&self) -> &[Vec<F>] {
        &self.layers.last().expect("trace has layers").v
    }

    /// Input signal `I_t` of synaptic layer `k` (0-based over synaptic layers).
    pub fn input(&self, k: usize, t: usize) -> &[F] {
        if k == 0 {
            &self.obs
        } else {
            &self.layers[k - 1].s[t]
        }
    }
}

/// Turns an LI voltage history (`history[t][neuron]`) into per-neuron values.
pub fn decode<F: Real>(history: &[Vec<F>], kind: DecoderKind) -> Result<Vec<F>> {
    let Some(last) = history.last() else {
        return Err(Error::contract("decode needs a non-empty voltage history"));
    };
    for step in history {
        ensure_len("voltage history step", step.len(), last.len())?;
    }
    Ok(match kind {
        DecoderKind::LastMem => last.clone(),
        DecoderKind::MaxMem => argmax_steps(history).into_iter().enumerate().map(|(n, t)| history[t - 1][n]).collect(),
        DecoderKind::MeanMem => {
            let steps = F::from_usize(history.len()).unwrap();
            (0..last.len()).map(|n| history.iter().map(|step| step[n]).sum::<F>() / steps).collect()
        }
    })
}

/// 1-based step of each neuron's maximum, earliest occurrence on ties.
pub fn argmax_steps<F: Real>(history: &[Vec<F>]) -> Vec<usize> {
    let width = history.first().map_or(0, Vec::len);
    (0..width)
        .map(|n| {
            let mut best = 0;
            for t in 1..history.len() {
                if history[t][n] > history[best][n] {
                    best = t;
                }
            }
            best + 1
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SpikeFn {
    Heaviside,
    /// Arctangent primitive of the surrogate gradient.
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<F> {
    pub layers: Vec<Layer<F>>,
    pub input_shape: Vec<usize>,
    pub sim_steps: usize,
    pub decoder: DecoderKind,
    pub neuron: NeuronConfig,
}

impl<F: Real> QNetwork<F> {
    /// Builds a network from parsed layer specs with weights drawn uniformly
    /// from `±1/sqrt(fan_in)`.
    pub fn from_specs<R: Rng + ?Sized>(
        specs: &[LayerSpec],
        input_shape: &[usize],
        num_actions: usize,
        sim_steps: usize,
        decoder: DecoderKind,
        neuron: NeuronConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let kind = match *spec {
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    LayerKind::Flatten
                }
                LayerSpec::Conv2d { out_channels, kernel, stride, .. } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(Error::Config(format!("convolution needs a [C, H, W] input, got {shape:?}")));
                    };
                    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "convolution kernel {kernel} stride {stride} does not fit {h}x{w}"
                        )));
                    }
                    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                    shape = vec![out_channels, oh, ow];
                    LayerKind::Conv2d {
                        in_channels: c,
                        out_channels,
                        kernel,
                        stride,
                        in_h: h,
                        in_w: w,
                        out_h: oh,
                        out_w: ow,
                    }
                }
                LayerSpec::Dense { outputs, .. } => {
                    let &[n] = shape.as_slice() else {
                        return Err(Error::Config(format!("dense layer needs a flat input, got {shape:?}")));
                    };
                    let outputs = outputs.unwrap_or(num_actions);
                    shape = vec![outputs];
                    LayerKind::Dense { inputs: n, outputs }
                }
            };
            let neuron = match *spec {
                LayerSpec::Conv2d { neuron, .. } | LayerSpec::Dense { neuron, .. } => Some(neuron),
                LayerSpec::Flatten => None,
            };
            let fan_in = kind.fan_in();
            let weight = if fan_in == 0 {
                Vec::new()
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..kind.weight_shape().iter().product()).map(|_| F::of(rng.gen_range(-bound..bound))).collect()
            };
            layers.push(Layer { kind, weight, neuron });
        }
        let net = Self { layers, input_shape: input_shape.to_vec(), sim_steps, decoder, neuron };
        net.validate()?;
        if net.num_actions() != num_actions {
            return Err(Error::Config(format!(
                "architecture ends in {} outputs but the environment has {num_actions} actions",
                net.num_actions()
            )));
        }
        Ok(net)
    }

    /// Multiplies the weights of every spiking layer by `gain`. Applied right
    /// after [`QNetwork::from_specs`] it widens the init range to
    /// `±gain/sqrt(fan_in)`, which sparse inputs need to reach threshold.
    pub fn scale_spiking_weights(&mut self, gain: F) {
        for layer in &mut self.layers {
            if layer.neuron == Some(NeuronModel::Lif) {
                layer.weight.iter_mut().for_each(|w| *w = *w * gain);
            }
        }
    }

    /// Builds a network directly from layers, checking every structural rule.
    pub fn from_layers(
        layers: Vec<Layer<F>>,
        input_shape: Vec<usize>,
        sim_steps: usize,
        decoder: DecoderKind,
        neuron: NeuronConfig,
    ) -> Result<Self> {
        let net = Self { layers, input_shape, sim_steps, decoder, neuron };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        if self.sim_steps == 0 {
            return Err(Error::Config("sim_steps must be positive".into()));
        }
        let mut len = self.input_len();
        let synaptic: Vec<usize> =
            (0..self.layers.len()).filter(|&i| self.layers[i].kind != LayerKind::Flatten).collect();
        let Some(&last) = synaptic.last() else {
            return Err(Error::Config("network has no synaptic layers".into()));
        };
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(n) = layer.kind.input_len() {
                if n != len {
                    return Err(Error::Config(format!("layer {i} expects {n} inputs but receives {len}")));
                }
                len = layer.kind.output_len().unwrap();
            }
            let weights = match layer.kind {
                LayerKind::Flatten => 0,
                kind => kind.weight_shape().iter().product(),
            };
            if layer.weight.len() != weights {
                return Err(Error::Config(format!("layer {i} has {} weights, expected {weights}", layer.weight.len())));
            }
            let expected = match (layer.kind, i == last) {
                (LayerKind::Flatten, _) => None,
                (_, true) => Some(NeuronModel::Li),
                (_, false) => Some(NeuronModel::Lif),
            };
            if layer.neuron != expected {
                return Err(Error::Config(format!(
                    "layer {i} has neuron {:?}; only the last synaptic layer may be LI and all others must be LIF",
                    layer.neuron
                )));
            }
        }
        if !matches!(self.layers[last].kind, LayerKind::Dense { .. }) {
            return Err(Error::Config("the LI output layer must be dense".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_actions(&self) -> usize {
        self.synaptic().last().and_then(|l| l.kind.output_len()).unwrap_or(0)
    }

    /// Synaptic (parameterized) layers in order.
    pub fn synaptic(&self) -> impl Iterator<Item = &Layer<F>> {
        self.layers.iter().filter(|l| l.kind != LayerKind::Flatten)
    }

    pub fn params(&self) -> impl Iterator<Item = &Vec<F>> {
        self.synaptic().map(|l| &l.weight)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<F>> {
        self.layers.iter_mut().filter(|l| l.kind != LayerKind::Flatten).map(|l| &mut l.weight)
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.synaptic().map(|l| l.kind.weight_shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Vec::len).sum()
    }

    /// Converts the element type; lossy when narrowing.
    pub fn cast<G: Real>(&self) -> QNetwork<G> {
        QNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    weight: l.weight.iter().map(|w| G::of(w.as_f64())).collect(),
                    neuron: l.neuron,
                })
                .collect(),
            input_shape: self.input_shape.clone(),
            sim_steps: self.sim_steps,
            decoder: self.decoder,
            neuron: self.neuron,
        }
    }

    /// Simulates `T` steps and decodes Q-values, recording the full trace.
    pub fn forward(&self, obs: &[F]) -> Result<(Vec<F>, VoltageTrace<F>)> {
        let trace = self.simulate(obs, SpikeFn::Heaviside, true)?;
        Ok((trace.q.clone(), trace))
    }

    /// Q-values only; skips trace recording.
    pub fn q_values(&self, obs: &[F]) -> Result<Vec<F>> {
        Ok(self.simulate(obs, SpikeFn::Heaviside, false)?.q)
    }

    /// Forward pass with the Heaviside replaced by the arctangent primitive.
    /// The result is differentiable everywhere and exists only for checking
    /// gradients.
    pub fn forward_smooth(&self, obs: &[F]) -> Result<(Vec<F>, VoltageTrace<F>)> {
        let trace = self.simulate(obs, SpikeFn::Smooth, true)?;
        Ok((trace.q.clone(), trace))
    }

    pub(crate) fn simulate(&self, obs: &[F], spike: SpikeFn, record: bool) -> Result<VoltageTrace<F>> {
        ensure_len("observation", obs.len(), self.input_len())?;
        let steps = self.sim_steps;
        let synaptic: Vec<&Layer<F>> = self.synaptic().collect();
        let mut states: Vec<NeuronState<F>> =
            synaptic.iter().map(|l| NeuronState::rest(l.kind.output_len().unwrap(), &self.neuron)).collect();
        let mut records: Vec<LayerRecord<F>> = synaptic
            .iter()
            .map(|_| LayerRecord {
                x: Vec::with_capacity(steps),
                h: Vec::with_capacity(steps),
                v: Vec::with_capacity(steps),
                s: Vec::with_capacity(steps),
            })
            .collect();
        let mut history = Vec::with_capacity(steps);
        let mut currents: Vec<Vec<F>> =
            synaptic.iter().map(|l| vec![F::zero(); l.kind.output_len().unwrap()]).collect();
        let cfg = &self.neuron;
        let last = synaptic.len() - 1;

        for t in 0..steps {
            for k in 0..synaptic.len() {
                let layer = synaptic[k];
                // The static observation drives layer 0 identically every step.
                if k > 0 || t == 0 {
                    let input = if k == 0 { obs } else { &states[k - 1].s[..] };
                    layer.apply(input, &mut currents[k]);
                }
                let state = &mut states[k];
                match (layer.neuron, spike) {
                    (Some(NeuronModel::Li), _) => neuron::li_update(state, &currents[k], cfg),
                    (_, SpikeFn::Heaviside) => neuron::lif_update(state, &currents[k], cfg),
                    (_, SpikeFn::Smooth) => neuron::lif_update_smooth(state, &currents[k], cfg, crate::grad::surrogate),
                }
                if record {
                    let rec = &mut records[k];
                    rec.x.push(currents[k].clone());
                    rec.h.push(state.h.clone());
                    rec.v.push(state.v.clone());
                    rec.s.push(state.s.clone());
                }
            }
            history.push(states[last].v.clone());
        }

        let q = decode(&history, self.decoder)?;
        let argmax = argmax_steps(&history);
        if !record {
            records = vec![LayerRecord { x: vec![], h: vec![], v: history, s: vec![] }];
        }
        Ok(VoltageTrace {
            obs: obs.to_vec(),
            layers: records,
            q,
            argmax,
            decoder: self.decoder,
            sim_steps: steps,
            smooth: spike == SpikeFn::Smooth,
        })
    }
}

/// The two-neuron network used to study decoders: one LIF neuron driven by
/// `w1 * I`, feeding one LI neuron through `w2`.
pub fn micro_network<F: Real>(
    w1: f64,
    w2: f64,
    sim_steps: usize,
    decoder: DecoderKind,
    neuron: NeuronConfig,
) -> Result<QNetwork<F>> {
    QNetwork::from_layers(
        vec![
            Layer::dense(1, 1, vec![F::of(w1)], NeuronModel::Lif)?,
            Layer::dense(1, 1, vec![F::of(w2)], NeuronModel::Li)?,
        ],
        vec![1],
        sim_steps,
        decoder,
        neuron,
    )
}

/// One row of the input-current sweep over [`micro_network`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub current: f64,
    pub last_mem: f64,
    pub max_mem: f64,
    pub mean_mem: f64,
}

/// Sweeps a constant input current over `steps + 1` evenly spaced values in
/// `[i_min, i_max]` through the LIF-then-LI micro network with unit weights.
pub fn case_study(
    sim_steps: usize,
    neuron: NeuronConfig,
    i_min: f64,
    i_max: f64,
    steps: usize,
) -> Result<Vec<CaseRow>> {
    if !(i_min.is_finite() && i_max.is_finite() && i_min < i_max) || steps == 0 {
        return Err(Error::Config(format!("invalid sweep [{i_min}, {i_max}] in {steps} steps")));
    }
    neuron.validate()?;
    let build = |d| micro_network::<f64>(1.0, 1.0, sim_steps, d, neuron);
    let nets = [build(DecoderKind::LastMem)?, build(DecoderKind::MaxMem)?, build(DecoderKind::MeanMem)?];
    (0..=steps)
        .map(|k| {
            let current = i_min + (i_max - i_min) * k as f64 / steps as f64;
            let q = |i: usize| -> Result<f64> { Ok(nets[i].q_values(&[current])?[0]) };
            Ok(CaseRow { current, last_mem: q(0)?, max_mem: q(1)?, mean_mem: q(2)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn toy(decoder: DecoderKind) -> QNetwork<f64> {
        let specs = parse_architecture("Input-4C3S1-LIF-Flatten-16-LIF-NA-LI").unwrap();
        QNetwork::from_specs(&specs, &[2, 6, 6], 3, 8, decoder, NeuronConfig::default(), &mut rng()).unwrap()
    }

    #[test]
    fn parses_paper_style_notation() {
        let specs = parse_architecture("Input-32C8S4-LIF-64C4S2-LIF-64C3S1-LIF-Flatten-512-LIF-NA-LI").unwrap();
        assert_eq!(specs.len(), 6);
        assert_eq!(specs[0], LayerSpec::Conv2d { out_channels: 32, kernel: 8, stride: 4, neuron: NeuronModel::Lif });
        assert_eq!(specs[5], LayerSpec::Dense { outputs: None, neuron: NeuronModel::Li });
        assert!(parse_architecture("16C3S1").is_err());
        assert!(parse_architecture("16C3S1-ReLU").is_err());
        assert!(parse_architecture("banana-LIF").is_err());
    }

    #[test]
    fn atari_geometry_chains() {
        let specs = parse_architecture("32C8S4-LIF-64C4S2-LIF-64C3S1-LIF-Flatten-512-LIF-NA-LI").unwrap();
        let net: QNetwork<f32> =
            QNetwork::from_specs(&specs, &[4, 84, 84], 6, 8, DecoderKind::MaxMem, NeuronConfig::default(), &mut rng())
                .unwrap();
        let shapes = net.param_shapes();
        assert_eq!(shapes[3], vec![512, 64 * 7 * 7]);
        assert_eq!(shapes[4], vec![6, 512]);
    }

    #[test]
    fn structural_rules_are_enforced() {
        let cfg = NeuronConfig::default();
        let bad_last = parse_architecture("8-LIF-NA-LIF").unwrap();
        assert!(QNetwork::<f64>::from_specs(&bad_last, &[4], 2, 8, DecoderKind::MaxMem, cfg, &mut rng()).is_err());
        let early_li = parse_architecture("8-LI-NA-LI").unwrap();
        assert!(QNetwork::<f64>::from_specs(&early_li, &[4], 2, 8, DecoderKind::MaxMem, cfg, &mut rng()).is_err());
        let no_flatten = parse_architecture("2C2S1-LIF-NA-LI").unwrap();
        assert!(
            QNetwork::<f64>::from_specs(&no_flatten, &[1, 3, 3], 2, 8, DecoderKind::MaxMem, cfg, &mut rng()).is_err()
        );
        let conv_out = parse_architecture("2C2S1-LI").unwrap();
        assert!(QNetwork::<f64>::from_specs(&conv_out, &[1, 3, 3], 8, 8, DecoderKind::MaxMem, cfg, &mut rng()).is_err());
        let ok = parse_architecture("8-LIF-NA-LI").unwrap();
        assert!(QNetwork::<f64>::from_specs(&ok, &[4], 2, 0, DecoderKind::MaxMem, cfg, &mut rng()).is_err());
    }

    #[test]
    fn case_study_sweep_shape() {
        let rows = case_study(8, NeuronConfig::default(), 0.0, 3.0, 300).unwrap();
        assert_eq!(rows.len(), 301);
        assert_eq!(rows[0], CaseRow { current: 0.0, last_mem: 0.0, max_mem: 0.0, mean_mem: 0.0 });
        assert_eq!(rows[300].current, 3.0);
        assert!(case_study(8, NeuronConfig::default(), 1.0, 1.0, 10).is_err());
        assert!(case_study(8, NeuronConfig::default(), 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn decoder_arithmetic() {
        let history = vec![vec![0.2_f64], vec![0.5], vec![0.3]];
        assert_eq!(decode(&history, DecoderKind::LastMem).unwrap(), vec![0.3]);
        assert_eq!(decode(&history, DecoderKind::MaxMem).unwrap(), vec![0.5]);
        let mean = decode(&history, DecoderKind::MeanMem).unwrap()[0];
        assert!((mean - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(argmax_steps(&history), vec![2]);

        let constant = vec![vec![0.7, -1.25]; 5];
        for kind in DecoderKind::ALL {
            assert_eq!(decode(&constant, kind).unwrap(), vec![0.7, -1.25]);
        }
        // Ties resolve to the earliest step.
        assert_eq!(argmax_steps(&constant), vec![1, 1]);

        assert!(matches!(decode::<f64>(&[], DecoderKind::MaxMem), Err(Error::Contract(_))));
    }

    #[test]
    fn decoder_names_round_trip() {
        for kind in DecoderKind::ALL {
            assert_eq!(kind.name().parse::<DecoderKind>().unwrap(), kind);
        }
        assert_eq!("max-mem".parse::<DecoderKind>().unwrap(), DecoderKind::MaxMem);
        assert!("median_mem".parse::<DecoderKind>().is_err());
    }

    #[test]
    fn dense_identity_and_unit_conv() {
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let x = [0.5, -2.0, 3.25];
        assert_eq!(dense_apply(3, 3, &eye, &x).unwrap(), x.to_vec());

        let kind = LayerKind::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            in_h: 2,
            in_w: 3,
            out_h: 2,
            out_w: 3,
        };
        let input = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = conv2d_apply(&kind, &[2.5], &input).unwrap();
        assert_eq!(out, input.iter().map(|v| 2.5 * v).collect::<Vec<_>>());
        assert!(conv2d_apply(&kind, &[2.5], &input[..5]).is_err());
        assert!(dense_apply(3, 3, &eye, &x[..2]).is_err());
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(
        w: &[f64],
        x: &[f64],
        (ci, co, k, s): (usize, usize, usize, usize),
        (ih, iw): (usize, usize),
    ) -> Vec<f64> {
        let oh = (ih - k) / s + 1;
        let ow = (iw - k) / s + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..k {
                            for b in 0..k {
                                acc += w[o * ci * k * k + c * k * k + a * k + b]
                                    * x[c * ih * iw + (y * s + a) * iw + xx * s + b];
                            }
                        }
                    }
                    out[o * oh * ow + y * ow + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut r = rng();
        for &(ci, co, k, s, ih, iw) in &[(1, 1, 3, 1, 5, 5), (2, 3, 2, 2, 7, 6), (3, 2, 3, 2, 9, 8), (2, 4, 1, 3, 7, 7)]
        {
            let oh = (ih - k) / s + 1;
            let ow = (iw - k) / s + 1;
            let kind = LayerKind::Conv2d {
                in_channels: ci,
                out_channels: co,
                kernel: k,
                stride: s,
                in_h: ih,
                in_w: iw,
                out_h: oh,
                out_w: ow,
            };
            let w: Vec<f64> = (0..co * ci * k * k).map(|_| r.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..ci * ih * iw).map(|_| r.gen_range(-1.0..1.0)).collect();
            let got = conv2d_apply(&kind, &w, &x).unwrap();
            let want = conv_oracle(&w, &x, (ci, co, k, s), (ih, iw));
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn zero_weights_give_resting_q() {
        let cfg = NeuronConfig { v_reset: -0.2, v_threshold: 0.8, tau: 3.0 };
        let mut net = toy(DecoderKind::MaxMem);
        net.neuron = cfg;
        for w in net.params_mut() {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        let obs: Vec<f64> = (0..72).map(|i| (i % 5) as f64 / 4.0).collect();
        for kind in DecoderKind::ALL {
            net.decoder = kind;
            let (q, _) = net.forward(&obs).unwrap();
            assert!(q.iter().all(|v| (v + 0.2).abs() < 1e-15), "{kind}: {q:?}");
        }
    }

    #[test]
    fn permuting_output_rows_permutes_q() {
        let net = toy(DecoderKind::MaxMem);
        let obs: Vec<f64> = (0..72).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let (q, _) = net.forward(&obs).unwrap();
        let mut swapped = net.clone();
        let out = swapped.layers.last_mut().unwrap();
        let inputs = 16;
        for j in 0..inputs {
            out.weight.swap(j, 2 * inputs + j);
        }
        let (qs, _) = swapped.forward(&obs).unwrap();
        assert_eq!(qs, vec![q[2], q[1], q[0]]);
    }

    #[test]
    fn trace_shapes_and_spike_binarity() {
        let net = toy(DecoderKind::MaxMem);
        let obs: Vec<f64> = (0..72).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let (q, trace) = net.forward(&obs).unwrap();
        assert_eq!(trace.layers.len(), 3);
        for rec in &trace.layers {
            assert_eq!(rec.v.len(), 8);
            assert_eq!(rec.s.len(), 8);
            for s in rec.s.iter().flatten() {
                assert!(*s == 0.0 || *s == 1.0);
            }
        }
        assert!(trace.argmax.iter().all(|&t| (1..=8).contains(&t)));
        assert_eq!(q, trace.q);
        assert_eq!(net.q_values(&obs).unwrap(), q);
        assert!(net.forward(&obs[..10]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = toy(DecoderKind::MeanMem);
        let obs: Vec<f64> = (0..72).map(|i| (i as f64 * 0.37).fract()).collect();
        let a = net.forward(&obs).unwrap();
        let b = net.forward(&obs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_mem_dominates_every_prefix() {
        let mut net = toy(DecoderKind::MaxMem);
        net.sim_steps = 12;
        let obs: Vec<f64> = (0..72).map(|i| (i as f64 * 0.61).fract()).collect();
        let (q, trace) = net.forward(&obs).unwrap();
        let hist = trace.output_history();
        for prefix in 1..=12 {
            let prefix_max = decode(&hist[..prefix], DecoderKind::MaxMem).unwrap();
            for (a, b) in q.iter().zip(&prefix_max) {
                assert!(a >= b);
            }
        }
    }

    #[test]
    fn li_output_scales_with_last_layer_weights() {
        // With V_reset = 0, the LI voltage is linear in the last layer's weights.
        for kind in DecoderKind::ALL {
            let net = micro_network::<f64>(1.0, 0.8, 8, kind, NeuronConfig::default()).unwrap();
            let scaled = micro_network::<f64>(1.0, 0.8 * 3.0, 8, kind, NeuronConfig::default()).unwrap();
            let q = net.q_values(&[2.3]).unwrap()[0];
            let qs = scaled.q_values(&[2.3]).unwrap()[0];
            assert!((qs - 3.0 * q).abs() < 1e-12, "{kind}: {qs} vs 3*{q}");
        }
    }
}
