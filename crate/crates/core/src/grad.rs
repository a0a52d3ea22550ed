//! Surrogate-gradient backpropagation through time.
//!
//! [`backward_recursive`] is the production backward pass. It walks the
//! recorded trace layer by layer from the LI output down, and within each
//! layer backwards in time:
//!
//! ```text
//! output layer (LI):  dV_t/dtheta = (1 - 1/tau) dV_{t-1}/dtheta + (1/tau) I_t
//!                     dV_u/dS_t   = (1 - 1/tau)^(u - t) theta / tau,  u >= t
//! hidden layer (LIF): dQ/dH_t = dQ/dS_t sigma'(H_t - V_th)
//!                             + dQ/dH_{t+1} (1 - 1/tau) dV_t/dH_t
//!                     dV_t/dH_t = 1 - S_t + (V_reset - H_t) sigma'(H_t - V_th)
//!                     dQ/dtheta = sum_t dQ/dH_t (1/tau) I_t
//! ```
//!
//! The reset path `(V_reset - H_t) dS_t/dH_t` is kept, not detached. The
//! decoder only decides where the output voltage history is seeded: at each
//! neuron's argmax step for max-mem, uniformly with weight `1/T` for
//! mean-mem, and at `t = T` for last-mem.
//!
//! [`backward_tape`] recomputes the same gradient by generic reverse-mode
//! accumulation over a scalar tape of the unrolled graph and serves as the
//! independent oracle. [`fd_check_relaxed`] replaces the Heaviside by its
//! arctangent primitive so the forward is truly differentiable and compares
//! against central differences.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{ensure_len, Error, Result};
use crate::network::{DecoderKind, Layer, LayerKind, QNetwork, VoltageTrace};
use crate::neuron::{NeuronConfig, NeuronModel};
use crate::real::Real;

/// Surrogate function family. Only the arctangent is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurrogateKind {
    #[default]
    Arctan,
}

/// Arctangent surrogate primitive: `atan(pi x) / pi + 1/2`.
pub fn surrogate<F: Real>(x: F) -> F {
    let pi = F::PI();
    (pi * x).atan() / pi + F::of(0.5)
}

/// Surrogate derivative standing in for the Heaviside derivative:
/// `1 / (1 + (pi x)^2)`.
pub fn surrogate_grad<F: Real>(x: F) -> F {
    let px = F::PI() * x;
    F::one() / (F::one() + px * px)
}

/// Per-layer gradients `dL/dtheta`, shape-congruent with the network's
/// synaptic layer weights, together with the output seed `dL/dQ` used.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<F> {
    pub layers: Vec<Vec<F>>,
    pub seed: Vec<F>,
}

impl<F: Real> GradientSet<F> {
    pub fn zeros_like(net: &QNetwork<F>) -> Self {
        Self {
            layers: net.params().map(|w| vec![F::zero(); w.len()]).collect(),
            seed: vec![F::zero(); net.num_actions()],
        }
    }

    /// Adds `other` elementwise. Seeds are summed as well.
    pub fn accumulate(&mut self, other: &GradientSet<F>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
        for (x, y) in self.seed.iter_mut().zip(&other.seed) {
            *x = *x + *y;
        }
    }

    pub fn scale(&mut self, c: F) {
        for x in self.layers.iter_mut().flatten().chain(self.seed.iter_mut()) {
            *x = *x * c;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = F> + '_ {
        self.layers.iter().flatten().copied()
    }

    pub fn max_abs(&self) -> F {
        self.iter().fold(F::zero(), |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(F::is_finite)
    }
}

/// Gradient of `seed . Q` with respect to every weight, by the explicit
/// layer/time recursion.
pub fn backward_recursive<F: Real>(trace: &VoltageTrace<F>, net: &QNetwork<F>, seed: &[F]) -> Result<GradientSet<F>> {
    Ok(backward_with(trace, net, seed, surrogate_grad, false)?.0)
}

/// Gradient of `seed . Q` with respect to the observation, through the full
/// `T`-step surrogate backward.
pub fn input_gradient<F: Real>(trace: &VoltageTrace<F>, net: &QNetwork<F>, seed: &[F]) -> Result<Vec<F>> {
    Ok(backward_with(trace, net, seed, surrogate_grad, true)?.1)
}

/// [`backward_recursive`] with an arbitrary surrogate derivative; exists so
/// that checkers can inject a deliberately wrong surrogate.
pub fn backward_with<F: Real>(
    trace: &VoltageTrace<F>,
    net: &QNetwork<F>,
    seed: &[F],
    dsurrogate: fn(F) -> F,
    want_input: bool,
) -> Result<(GradientSet<F>, Vec<F>)> {
    let mut grads = GradientSet::zeros_like(net);
    grads.seed = seed.to_vec();
    let input = backward_core(trace, net, seed, dsurrogate, want_input, &mut grads.layers)?;
    Ok((grads, input))
}

/// Adds the gradient of `seed . Q` into `acc` without allocating a fresh
/// gradient set; `acc.seed` accumulates `seed`.
pub fn backward_accumulate<F: Real>(
    trace: &VoltageTrace<F>,
    net: &QNetwork<F>,
    seed: &[F],
    acc: &mut GradientSet<F>,
) -> Result<()> {
    let shapes_agree = acc.layers.len() == net.synaptic().count()
        && acc.layers.iter().zip(net.synaptic()).all(|(g, l)| g.len() == l.weight.len())
        && acc.seed.len() == seed.len();
    if !shapes_agree {
        return Err(Error::contract("gradient accumulator does not match the network"));
    }
    backward_core(trace, net, seed, surrogate_grad, false, &mut acc.layers)?;
    for (a, &s) in acc.seed.iter_mut().zip(seed) {
        *a = *a + s;
    }
    Ok(())
}

fn backward_core<F: Real>(
    trace: &VoltageTrace<F>,
    net: &QNetwork<F>,
    seed: &[F],
    dsurrogate: fn(F) -> F,
    want_input: bool,
    grads: &mut [Vec<F>],
) -> Result<Vec<F>> {
    check_trace(trace, net, seed)?;
    let layers: Vec<&Layer<F>> = net.synaptic().collect();
    let steps = trace.sim_steps;
    let cfg = &net.neuron;
    let inv_tau = F::of(1.0 / cfg.tau);
    let leak = F::of(cfg.leak());
    let vr = F::of(cfg.v_reset);
    let vth = F::of(cfg.v_threshold);
    let out_k = layers.len() - 1;
    let n_out = seed.len();

    let mut input_grad = vec![F::zero(); net.input_len()];

    // dQ_a/dV_t of the output history, as selected by the decoder.
    let steps_f = F::from_usize(steps).unwrap();
    let seed_at = |t: usize, a: usize| -> F {
        match trace.decoder {
            DecoderKind::MaxMem if trace.argmax[a] == t + 1 => seed[a],
            DecoderKind::MaxMem => F::zero(),
            DecoderKind::MeanMem => seed[a] / steps_f,
            DecoderKind::LastMem if t + 1 == steps => seed[a],
            DecoderKind::LastMem => F::zero(),
        }
    };

    // Output layer weights: forward sensitivity of V_t to theta, read off at
    // the seeded steps.
    let LayerKind::Dense { inputs: n_in, .. } = layers[out_k].kind else {
        return Err(Error::contract("output layer must be dense"));
    };
    let mut sens = vec![F::zero(); n_in];
    for t in 0..steps {
        let input = trace.input(out_k, t);
        for (s, &i) in sens.iter_mut().zip(input) {
            *s = leak * *s + inv_tau * i;
        }
        for a in 0..n_out {
            let w = seed_at(t, a);
            if w != F::zero() {
                let row = &mut grads[out_k][a * n_in..(a + 1) * n_in];
                for (g, &s) in row.iter_mut().zip(&sens) {
                    *g = *g + w * s;
                }
            }
        }
    }

    // dQ/dX_t of the output layer: geometric tail of the seeds.
    let mut g_x: Vec<Vec<F>> = vec![vec![F::zero(); n_out]; steps];
    let mut g_v = vec![F::zero(); n_out];
    for t in (0..steps).rev() {
        for a in 0..n_out {
            g_v[a] = seed_at(t, a) + leak * g_v[a];
            g_x[t][a] = inv_tau * g_v[a];
        }
    }

    // dQ/dS_t of the layer below (or of the observation).
    let mut g_below = propagate_down(layers[out_k], &g_x, out_k > 0 || want_input);
    if out_k == 0 {
        accumulate_input(&g_below, &mut input_grad, want_input);
    }

    for k in (0..out_k).rev() {
        let layer = layers[k];
        let rec = &trace.layers[k];
        let width = layer.kind.output_len().unwrap();
        let mut g_x: Vec<Vec<F>> = vec![vec![F::zero(); width]; steps];
        // dQ/dV_t carried back from H_{t+1}.
        let mut g_v = vec![F::zero(); width];
        for t in (0..steps).rev() {
            let g_s = &g_below[t];
            for n in 0..width {
                let h = rec.h[t][n];
                let sg = dsurrogate(h - vth);
                let dv_dh = F::one() - rec.s[t][n] + (vr - h) * sg;
                let g_h = g_s[n] * sg + g_v[n] * dv_dh;
                g_x[t][n] = inv_tau * g_h;
                g_v[n] = leak * g_h;
            }
        }
        accumulate_weight_grad(layer, trace, k, &g_x, &mut grads[k]);
        let need_below = k > 0 || want_input;
        g_below = propagate_down(layer, &g_x, need_below);
        if k == 0 {
            accumulate_input(&g_below, &mut input_grad, want_input);
        }
    }

    Ok(input_grad)
}

fn check_trace<F: Real>(trace: &VoltageTrace<F>, net: &QNetwork<F>, seed: &[F]) -> Result<()> {
    ensure_len("gradient seed", seed.len(), net.num_actions())?;
    ensure_len("trace observation", trace.obs.len(), net.input_len())?;
    let synaptic: Vec<&Layer<F>> = net.synaptic().collect();
    ensure_len("trace layers", trace.layers.len(), synaptic.len())?;
    if trace.sim_steps != net.sim_steps || trace.decoder != net.decoder {
        return Err(Error::contract("trace was recorded with different simulation settings"));
    }
    for (rec, layer) in trace.layers.iter().zip(&synaptic) {
        ensure_len("trace steps", rec.v.len(), trace.sim_steps)?;
        ensure_len("trace spikes", rec.s.len(), trace.sim_steps)?;
        ensure_len("trace pre-reset voltage", rec.h.len(), trace.sim_steps)?;
        let width = layer.kind.output_len().unwrap();
        if rec.h.iter().chain(&rec.s).any(|v| v.len() != width) {
            return Err(Error::contract("trace layer width does not match the network"));
        }
    }
    Ok(())
}

/// `dQ/dI_t = theta^T dQ/dX_t` for every step; empty when not needed.
fn propagate_down<F: Real>(layer: &Layer<F>, g_x: &[Vec<F>], needed: bool) -> Vec<Vec<F>> {
    if !needed {
        return Vec::new();
    }
    let n_in = layer.kind.input_len().unwrap();
    if let LayerKind::Dense { inputs, outputs } = layer.kind {
        // Row-major sweep: each weight row is loaded once for all steps.
        let mut out = vec![vec![F::zero(); n_in]; g_x.len()];
        for o in 0..outputs {
            let row = &layer.weight[o * inputs..(o + 1) * inputs];
            for (gx, dst) in g_x.iter().zip(out.iter_mut()) {
                let go = gx[o];
                if go != F::zero() {
                    for (acc, &w) in dst.iter_mut().zip(row) {
                        *acc = *acc + w * go;
                    }
                }
            }
        }
        return out;
    }
    g_x.iter()
        .map(|gx| {
            let mut out = vec![F::zero(); n_in];
            if gx.iter().any(|&g| g != F::zero()) {
                transpose_apply(layer, gx, &mut out);
            }
            out
        })
        .collect()
}

fn accumulate_input<F: Real>(g_in: &[Vec<F>], input_grad: &mut [F], wanted: bool) {
    if wanted {
        for step in g_in {
            for (acc, &g) in input_grad.iter_mut().zip(step) {
                *acc = *acc + g;
            }
        }
    }
}

/// `out += theta^T g` for one layer.
fn transpose_apply<F: Real>(layer: &Layer<F>, g: &[F], out: &mut [F]) {
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            for o in 0..outputs {
                let go = g[o];
                if go == F::zero() {
                    continue;
                }
                let row = &layer.weight[o * inputs..(o + 1) * inputs];
                for (acc, &w) in out.iter_mut().zip(row) {
                    *acc = *acc + w * go;
                }
            }
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, in_h, in_w, out_h, out_w } => {
            for oc in 0..out_channels {
                for ic in 0..in_channels {
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let w = layer.weight[((oc * in_channels + ic) * kernel + kh) * kernel + kw];
                            for oy in 0..out_h {
                                for ox in 0..out_w {
                                    let go = g[(oc * out_h + oy) * out_w + ox];
                                    let idx = (ic * in_h + oy * stride + kh) * in_w + ox * stride + kw;
                                    out[idx] = out[idx] + w * go;
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::Flatten => {}
    }
}

/// `dtheta += sum_t dQ/dX_t (x) I_t`.
fn accumulate_weight_grad<F: Real>(layer: &Layer<F>, trace: &VoltageTrace<F>, k: usize, g_x: &[Vec<F>], out: &mut [F]) {
    if k == 0 {
        // Static input: sum the currents' adjoints first.
        let mut total = vec![F::zero(); g_x[0].len()];
        for gx in g_x {
            for (acc, &g) in total.iter_mut().zip(gx) {
                *acc = *acc + g;
            }
        }
        outer_accumulate(layer, &total, &trace.obs, out);
    } else {
        for (t, gx) in g_x.iter().enumerate() {
            if gx.iter().any(|&g| g != F::zero()) {
                outer_accumulate(layer, gx, trace.input(k, t), out);
            }
        }
    }
}

fn outer_accumulate<F: Real>(layer: &Layer<F>, g: &[F], input: &[F], out: &mut [F]) {
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            let active: Vec<usize> = (0..inputs).filter(|&j| input[j] != F::zero()).collect();
            for o in 0..outputs {
                let go = g[o];
                if go == F::zero() {
                    continue;
                }
                let row = &mut out[o * inputs..(o + 1) * inputs];
                for &j in &active {
                    row[j] = row[j] + go * input[j];
                }
            }
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, in_h, in_w, out_h, out_w } => {
            for oc in 0..out_channels {
                let plane = &g[oc * out_h * out_w..(oc + 1) * out_h * out_w];
                if plane.iter().all(|&v| v == F::zero()) {
                    continue;
                }
                for ic in 0..in_channels {
                    let chan = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let mut acc = F::zero();
                            for oy in 0..out_h {
                                let row = &chan[(oy * stride + kh) * in_w..];
                                for ox in 0..out_w {
                                    acc = acc + plane[oy * out_w + ox] * row[ox * stride + kw];
                                }
                            }
                            let idx = ((oc * in_channels + ic) * kernel + kh) * kernel + kw;
                            out[idx] = out[idx] + acc;
                        }
                    }
                }
            }
        }
        LayerKind::Flatten => {}
    }
}

// ---------------------------------------------------------------------------
// Reverse-mode tape oracle

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
struct Node<F> {
    value: F,
    /// `(parent, d self / d parent)`
    parents: Vec<(usize, F)>,
}

/// Scalar Wengert list with reverse accumulation.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> F {
        self.nodes[v.0].value
    }

    fn push(&mut self, value: F, parents: Vec<(usize, F)>) -> Var {
        self.nodes.push(Node { value, parents });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: F) -> Var {
        self.push(value, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, vec![(a.0, F::one()), (b.0, F::one())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, vec![(a.0, F::one()), (b.0, -F::one())])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, vec![(a.0, y), (b.0, x)])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, vec![(a.0, -F::one())])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a) * c;
        self.push(v, vec![(a.0, c)])
    }

    /// Spike nonlinearity: forward value `forward(x)`, derivative `deriv(x)`.
    pub fn unary(&mut self, a: Var, forward: impl Fn(F) -> F, deriv: impl Fn(F) -> F) -> Var {
        let x = self.value(a);
        self.push(forward(x), vec![(a.0, deriv(x))])
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let mut acc = self.value(terms[0]);
        for t in &terms[1..] {
            acc = acc + self.value(*t);
        }
        self.push(acc, terms.iter().map(|t| (t.0, F::one())).collect())
    }

    /// Adjoints of every node given output seeds.
    pub fn backward(&self, seeds: &[(Var, F)]) -> Vec<F> {
        let mut adj = vec![F::zero(); self.nodes.len()];
        for &(v, s) in seeds {
            adj[v.0] = adj[v.0] + s;
        }
        for i in (0..self.nodes.len()).rev() {
            let a = adj[i];
            if a == F::zero() {
                continue;
            }
            for &(p, d) in &self.nodes[i].parents {
                adj[p] = adj[p] + a * d;
            }
        }
        adj
    }
}

/// Unrolled graph of one forward simulation on a tape.
struct Unrolled<F> {
    tape: Tape<F>,
    weights: Vec<Vec<Var>>,
    inputs: Vec<Var>,
    q: Vec<Var>,
}

fn unroll<F: Real>(net: &QNetwork<F>, obs: &[F], smooth: bool) -> Result<Unrolled<F>> {
    ensure_len("observation", obs.len(), net.input_len())?;
    let cfg: NeuronConfig = net.neuron;
    let mut tape = Tape::new();
    let layers: Vec<&Layer<F>> = net.synaptic().collect();
    let weights: Vec<Vec<Var>> = layers.iter().map(|l| l.weight.iter().map(|&w| tape.leaf(w)).collect()).collect();
    let inputs: Vec<Var> = obs.iter().map(|&x| tape.leaf(x)).collect();
    let vr = tape.leaf(F::of(cfg.v_reset));
    let one = tape.leaf(F::one());
    let inv_tau = F::of(1.0 / cfg.tau);
    let vth = F::of(cfg.v_threshold);

    let mut v: Vec<Vec<Var>> = layers.iter().map(|l| vec![vr; l.kind.output_len().unwrap()]).collect();
    let mut history: Vec<Vec<Var>> = Vec::new();

    for _ in 0..net.sim_steps {
        let mut signal = inputs.clone();
        for (k, layer) in layers.iter().enumerate() {
            let x = tape_synapse(&mut tape, layer, &weights[k], &signal);
            let mut spikes = Vec::with_capacity(x.len());
            for (n, &xn) in x.iter().enumerate() {
                // H = V + (1/tau) (-(V - V_reset) + X)
                let d = tape.sub(v[k][n], vr);
                let nd = tape.neg(d);
                let drive = tape.add(nd, xn);
                let step = tape.scale(drive, inv_tau);
                let h = tape.add(v[k][n], step);
                match layer.neuron {
                    Some(NeuronModel::Li) => v[k][n] = h,
                    _ => {
                        let s = if smooth {
                            tape.unary(h, |x| surrogate(x - vth), |x| surrogate_grad(x - vth))
                        } else {
                            tape.unary(
                                h,
                                |x| if x - vth >= F::zero() { F::one() } else { F::zero() },
                                |x| surrogate_grad(x - vth),
                            )
                        };
                        // V = H (1 - S) + V_reset S
                        let keep = tape.sub(one, s);
                        let a = tape.mul(h, keep);
                        let b = tape.mul(vr, s);
                        v[k][n] = tape.add(a, b);
                        spikes.push(s);
                    }
                }
            }
            signal = spikes;
        }
        history.push(v[layers.len() - 1].clone());
    }

    let width = history[0].len();
    let q = (0..width)
        .map(|a| match net.decoder {
            DecoderKind::LastMem => history[history.len() - 1][a],
            DecoderKind::MaxMem => {
                let mut best = 0;
                for t in 1..history.len() {
                    if tape.value(history[t][a]) > tape.value(history[best][a]) {
                        best = t;
                    }
                }
                history[best][a]
            }
            DecoderKind::MeanMem => {
                let col: Vec<Var> = history.iter().map(|h| h[a]).collect();
                let total = tape.sum(&col);
                tape.scale(total, F::one() / F::from_usize(history.len()).unwrap())
            }
        })
        .collect();

    Ok(Unrolled { tape, weights, inputs, q })
}

fn tape_synapse<F: Real>(tape: &mut Tape<F>, layer: &Layer<F>, w: &[Var], input: &[Var]) -> Vec<Var> {
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => (0..outputs)
            .map(|o| {
                let terms: Vec<Var> = (0..inputs).map(|j| tape.mul(w[o * inputs + j], input[j])).collect();
                tape.sum(&terms)
            })
            .collect(),
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, in_h, in_w, out_h, out_w } => {
            let mut out = Vec::with_capacity(out_channels * out_h * out_w);
            for oc in 0..out_channels {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut terms = Vec::with_capacity(in_channels * kernel * kernel);
                        for ic in 0..in_channels {
                            for kh in 0..kernel {
                                for kw in 0..kernel {
                                    let wi =
                                        oc * in_channels * kernel * kernel + ic * kernel * kernel + kh * kernel + kw;
                                    let xi = ic * in_h * in_w + (oy * stride + kh) * in_w + ox * stride + kw;
                                    terms.push(tape.mul(w[wi], input[xi]));
                                }
                            }
                        }
                        out.push(tape.sum(&terms));
                    }
                }
            }
            out
        }
        LayerKind::Flatten => input.to_vec(),
    }
}

/// Same contract as [`backward_recursive`], computed by reverse-mode
/// accumulation over a freshly unrolled scalar tape.
pub fn backward_tape<F: Real>(trace: &VoltageTrace<F>, net: &QNetwork<F>, seed: &[F]) -> Result<GradientSet<F>> {
    Ok(tape_gradients(trace, net, seed)?.0)
}

/// Tape version of [`input_gradient`].
pub fn input_gradient_tape<F: Real>(trace: &VoltageTrace<F>, net: &QNetwork<F>, seed: &[F]) -> Result<Vec<F>> {
    Ok(tape_gradients(trace, net, seed)?.1)
}

fn tape_gradients<F: Real>(trace: &VoltageTrace<F>, net: &QNetwork<F>, seed: &[F]) -> Result<(GradientSet<F>, Vec<F>)> {
    check_trace(trace, net, seed)?;
    let un = unroll(net, &trace.obs, trace.smooth)?;
    for (&qv, &qt) in un.q.iter().zip(&trace.q) {
        let q = un.tape.value(qv);
        if (q - qt).abs() > F::of(1e-6) * (F::one() + qt.abs()) {
            return Err(Error::contract("trace was not produced by this network"));
        }
    }
    let seeds: Vec<(Var, F)> = un.q.iter().copied().zip(seed.iter().copied()).collect();
    let adj = un.tape.backward(&seeds);
    let layers = un.weights.iter().map(|ws| ws.iter().map(|v| adj[v.0]).collect()).collect();
    let input = un.inputs.iter().map(|v| adj[v.0]).collect();
    Ok((GradientSet { layers, seed: seed.to_vec() }, input))
}

// ---------------------------------------------------------------------------
// Finite-difference checking

/// Relative difference with a floor on the denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst-case agreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub params: usize,
}

/// Maximum relative error between the analytic gradient of the smoothed
/// forward and central differences of step `h`.
pub fn fd_check_relaxed(net: &QNetwork<f64>, obs: &[f64], seed: &[f64], h: f64) -> Result<f64> {
    Ok(fd_report(net, obs, seed, h)?.max_rel_error)
}

pub fn fd_report(net: &QNetwork<f64>, obs: &[f64], seed: &[f64], h: f64) -> Result<FdReport> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    ensure_len("gradient seed", seed.len(), net.num_actions())?;
    let (_, trace) = net.forward_smooth(obs)?;
    let analytic = backward_recursive(&trace, net, seed)?;
    if !analytic.is_finite() {
        return Err(Error::GradCheck("analytic gradient is not finite".into()));
    }
    let fd = fd_gradient(net, obs, seed, h)?;
    let mut report = FdReport { max_rel_error: 0.0, max_abs_error: 0.0, params: 0 };
    for (a, b) in analytic.iter().zip(fd.iter()) {
        report.max_rel_error = report.max_rel_error.max(relative_error(a, b));
        report.max_abs_error = report.max_abs_error.max((a - b).abs());
        report.params += 1;
    }
    Ok(report)
}

/// Random micro-network for oracle trials.
#[derive(Debug, Clone)]
pub struct MicroCase {
    pub net: QNetwork<f64>,
    pub obs: Vec<f64>,
    pub seed: Vec<f64>,
}

/// Samples a dense network with 1–3 synaptic layers of at most 8 neurons,
/// `T <= 8`, random decoder and neuron constants. Weights are scaled so that
/// hidden layers spike at moderate rates.
pub fn sample_micro_case<R: Rng + ?Sized>(rng: &mut R) -> MicroCase {
    let depth = rng.gen_range(1..=3);
    let n_in = rng.gen_range(1..=8);
    let mut widths = vec![n_in];
    for _ in 0..depth {
        widths.push(rng.gen_range(1..=8));
    }
    let neuron = NeuronConfig {
        tau: rng.gen_range(1.5..4.0),
        v_threshold: rng.gen_range(0.3..1.2),
        v_reset: rng.gen_range(-0.3..0.1),
    };
    let layers = (0..depth)
        .map(|k| {
            let (i, o) = (widths[k], widths[k + 1]);
            let scale = 2.5 / (i as f64).sqrt();
            let w = (0..i * o).map(|_| rng.gen_range(-0.6 * scale..scale)).collect();
            let model = if k + 1 == depth { NeuronModel::Li } else { NeuronModel::Lif };
            Layer::dense(i, o, w, model).expect("sizes agree")
        })
        .collect();
    let decoder = DecoderKind::ALL[rng.gen_range(0..3)];
    let net = QNetwork::from_layers(layers, vec![n_in], rng.gen_range(1..=8), decoder, neuron)
        .expect("micro network is well formed");
    let obs = (0..n_in).map(|_| rng.gen_range(0.0..2.0)).collect();
    let seed = (0..widths[depth]).map(|_| rng.gen_range(-1.0..1.0)).collect();
    MicroCase { net, obs, seed }
}

/// Tolerance for recursive-versus-tape agreement.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
/// Tolerance for analytic-versus-central-difference agreement at `h = 1e-4`.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of one oracle trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialErrors {
    /// Worst relative difference between recursive and tape gradients.
    pub oracle: f64,
    /// Worst relative difference against central differences at `h = 1e-4`.
    pub fd: f64,
}

/// Runs both oracles on one micro case, using `dsurrogate` in the recursive
/// backward.
pub fn run_trial(case: &MicroCase, dsurrogate: fn(f64) -> f64) -> Result<TrialErrors> {
    let (_, trace) = case.net.forward(&case.obs)?;
    let (rec, _) = backward_with(&trace, &case.net, &case.seed, dsurrogate, false)?;
    let tape = backward_tape(&trace, &case.net, &case.seed)?;
    let oracle = rec.iter().zip(tape.iter()).map(|(a, b)| relative_error(a, b)).fold(0.0, f64::max);

    let (_, smooth) = case.net.forward_smooth(&case.obs)?;
    let (analytic, _) = backward_with(&smooth, &case.net, &case.seed, dsurrogate, false)?;
    let fd_ref = fd_gradient(&case.net, &case.obs, &case.seed, 1e-4)?;
    let fd = analytic.iter().zip(fd_ref.iter()).map(|(a, b)| relative_error(a, b)).fold(0.0, f64::max);
    Ok(TrialErrors { oracle, fd })
}

/// Central-difference gradient of `seed . Q` under the smoothed forward.
pub fn fd_gradient(net: &QNetwork<f64>, obs: &[f64], seed: &[f64], h: f64) -> Result<GradientSet<f64>> {
    let objective = |n: &QNetwork<f64>| -> Result<f64> {
        let (q, _) = n.forward_smooth(obs)?;
        Ok(q.iter().zip(seed).map(|(q, s)| q * s).sum())
    };
    let mut probe = net.clone();
    let mut out = GradientSet::zeros_like(net);
    out.seed = seed.to_vec();
    let synaptic: Vec<usize> = (0..net.layers.len()).filter(|&i| net.layers[i].kind != LayerKind::Flatten).collect();
    for (k, &li) in synaptic.iter().enumerate() {
        for j in 0..net.layers[li].weight.len() {
            let w0 = net.layers[li].weight[j];
            probe.layers[li].weight[j] = w0 + h;
            let up = objective(&probe)?;
            probe.layers[li].weight[j] = w0 - h;
            let down = objective(&probe)?;
            probe.layers[li].weight[j] = w0;
            out.layers[k][j] = (up - down) / (2.0 * h);
        }
    }
    if !out.is_finite() {
        return Err(Error::GradCheck("finite differences are not finite".into()));
    }
    Ok(out)
}

/// Worst-case errors over a batch of oracle trials.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GradCheckSummary {
    pub trials: usize,
    pub max_oracle_error: f64,
    pub max_fd_error: f64,
    pub passed: bool,
}

/// Runs `trials` micro cases drawn from `rng` through [`run_trial`].
pub fn grad_check<R: Rng + ?Sized>(trials: usize, rng: &mut R, dsurrogate: fn(f64) -> f64) -> Result<GradCheckSummary> {
    if trials == 0 {
        return Err(Error::Config("grad check needs at least one trial".into()));
    }
    let mut summary = GradCheckSummary { trials, max_oracle_error: 0.0, max_fd_error: 0.0, passed: false };
    for _ in 0..trials {
        let e = run_trial(&sample_micro_case(rng), dsurrogate)?;
        summary.max_oracle_error = summary.max_oracle_error.max(e.oracle);
        summary.max_fd_error = summary.max_fd_error.max(e.fd);
    }
    summary.passed = summary.max_oracle_error <= ORACLE_TOLERANCE && summary.max_fd_error <= FD_TOLERANCE;
    Ok(summary)
}

/// A surrogate derivative with the wrong slope, for negative controls.
pub fn corrupted_surrogate_grad(x: f64) -> f64 {
    1.0 / (1.0 + (0.5 * PI * x).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::micro_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NeuronConfig {
        NeuronConfig::default()
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_grad(0.0_f64), 1.0);
        assert!((surrogate_grad(1.0_f64 / PI) - 0.5).abs() < 1e-15);
        assert_eq!(surrogate(0.0_f64), 0.5);
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            assert_eq!(surrogate_grad(x), surrogate_grad(-x));
            let h = 1e-6;
            let fd = (surrogate(x + h) - surrogate(x - h)) / (2.0 * h);
            assert!((fd - surrogate_grad(x)).abs() < 1e-9, "x = {x}");
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let case = sample_micro_case(&mut rng);
            let (_, trace) = case.net.forward(&case.obs).unwrap();
            let zero = vec![0.0; case.seed.len()];
            assert!(backward_recursive(&trace, &case.net, &zero).unwrap().iter().all(|g| g == 0.0));
            assert!(backward_tape(&trace, &case.net, &zero).unwrap().iter().all(|g| g == 0.0));
        }
    }

    #[test]
    fn micro_network_output_weight_closed_form() {
        // I = 1.5: the LIF neuron fires at t = 2, 4, 6, 8 and the LI maximum
        // sits at t' = 8, so dQ/dw2 = (1/2)(1 + 1/4 + 1/16 + 1/64).
        let net = micro_network::<f64>(1.0, 1.0, 8, DecoderKind::MaxMem, cfg()).unwrap();
        let (q, trace) = net.forward(&[1.5]).unwrap();
        assert_eq!(trace.argmax, vec![8]);
        assert_eq!(q, vec![0.6640625]);
        let g = backward_recursive(&trace, &net, &[1.0]).unwrap();
        assert_eq!(g.layers[1], vec![0.6640625]);
    }

    #[test]
    fn single_step_chain_rule() {
        // T = 1: Q = Vr + w2 S/tau with S = step(Vr + w1 x/tau - Vth).
        let c = NeuronConfig { tau: 2.5, v_threshold: 0.7, v_reset: -0.1 };
        let (w1, w2, x) = (1.3, -0.8, 1.1);
        let net = micro_network::<f64>(w1, w2, 1, DecoderKind::LastMem, c).unwrap();
        let (_, trace) = net.forward(&[x]).unwrap();
        let h = c.v_reset + w1 * x / c.tau;
        let s = if h >= c.v_threshold { 1.0 } else { 0.0 };
        let dw1 = (w2 / c.tau) * surrogate_grad(h - c.v_threshold) * (x / c.tau);
        let dw2 = s / c.tau;
        for g in [backward_recursive(&trace, &net, &[1.0]).unwrap(), backward_tape(&trace, &net, &[1.0]).unwrap()] {
            assert!((g.layers[0][0] - dw1).abs() < 1e-15);
            assert!((g.layers[1][0] - dw2).abs() < 1e-15);
        }
    }

    #[test]
    fn leak_factor_law_in_li_chain() {
        // One LI layer: dV_t'/dI = sum_{t <= t'} (1 - 1/tau)^(t' - t) theta/tau.
        for tau in [1.5, 2.0, 3.0] {
            for steps in 1..=8 {
                let c = NeuronConfig { tau, ..cfg() };
                let theta = 0.7;
                let layer = Layer::dense(1, 1, vec![theta], NeuronModel::Li).unwrap();
                let leak = 1.0 - 1.0 / tau;
                let dv = |tp: usize| (1..=tp).map(|t| leak.powi((tp - t) as i32) * theta / tau).sum::<f64>();
                for decoder in [DecoderKind::LastMem, DecoderKind::MeanMem] {
                    let net = QNetwork::from_layers(vec![layer.clone()], vec![1], steps, decoder, c).unwrap();
                    let (_, trace) = net.forward(&[0.4]).unwrap();
                    let expected = match decoder {
                        DecoderKind::LastMem => dv(steps),
                        _ => (1..=steps).map(dv).sum::<f64>() / steps as f64,
                    };
                    let got = input_gradient(&trace, &net, &[1.0]).unwrap()[0];
                    assert!((got - expected).abs() < 1e-14, "tau {tau} T {steps} {decoder}");
                }
            }
        }
    }

    #[test]
    fn max_mem_gradient_truncates_after_peak() {
        // Seeding action a under max_mem equals seeding the same network run
        // for only t'_a steps and read out last_mem.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 30 {
            let mut case = sample_micro_case(&mut rng);
            case.net.decoder = DecoderKind::MaxMem;
            let (_, trace) = case.net.forward(&case.obs).unwrap();
            let a = rng.gen_range(0..case.seed.len());
            let t_peak = trace.argmax[a];
            if t_peak == case.net.sim_steps {
                continue;
            }
            let mut onehot = vec![0.0; case.seed.len()];
            onehot[a] = 1.0;
            let full = backward_recursive(&trace, &case.net, &onehot).unwrap();
            let mut short = case.net.clone();
            short.sim_steps = t_peak;
            short.decoder = DecoderKind::LastMem;
            let (_, short_trace) = short.forward(&case.obs).unwrap();
            let cut = backward_recursive(&short_trace, &short, &onehot).unwrap();
            for (x, y) in full.iter().zip(cut.iter()) {
                assert!(relative_error(x, y) < 1e-12);
            }
            checked += 1;
        }
    }

    #[test]
    fn recursion_matches_tape_on_micro_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let case = sample_micro_case(&mut rng);
            let (_, trace) = case.net.forward(&case.obs).unwrap();
            let rec = backward_recursive(&trace, &case.net, &case.seed).unwrap();
            let tape = backward_tape(&trace, &case.net, &case.seed).unwrap();
            for (a, b) in rec.iter().zip(tape.iter()) {
                assert!(relative_error(a, b) < ORACLE_TOLERANCE, "{a} vs {b}");
            }
            let gi = input_gradient(&trace, &case.net, &case.seed).unwrap();
            let gt = input_gradient_tape(&trace, &case.net, &case.seed).unwrap();
            for (a, b) in gi.iter().zip(&gt) {
                assert!(relative_error(*a, *b) < ORACLE_TOLERANCE);
            }
        }
    }

    #[test]
    fn recursion_matches_tape_through_convolutions() {
        let specs = crate::network::parse_architecture("2C3S1-LIF-Flatten-6-LIF-NA-LI").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for decoder in DecoderKind::ALL {
            let mut net = QNetwork::<f64>::from_specs(&specs, &[1, 5, 5], 3, 6, decoder, cfg(), &mut rng).unwrap();
            net.scale_spiking_weights(6.0);
            let obs: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (_, trace) = net.forward(&obs).unwrap();
            assert!(trace.layers[0].s.iter().flatten().any(|&s| s == 1.0), "conv layer never fires");
            let seed = [0.3, -1.0, 0.6];
            let rec = backward_recursive(&trace, &net, &seed).unwrap();
            let tape = backward_tape(&trace, &net, &seed).unwrap();
            for (a, b) in rec.iter().zip(tape.iter()) {
                assert!(relative_error(a, b) < ORACLE_TOLERANCE, "{decoder}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tape_rejects_foreign_trace() {
        let net = micro_network::<f64>(1.0, 1.0, 8, DecoderKind::MaxMem, cfg()).unwrap();
        let other = micro_network::<f64>(1.0, 2.0, 8, DecoderKind::MaxMem, cfg()).unwrap();
        let (_, trace) = other.forward(&[1.5]).unwrap();
        assert!(matches!(backward_tape(&trace, &net, &[1.0]), Err(Error::Contract(_))));
        assert!(backward_recursive(&trace, &net, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn finite_differences_agree_with_relaxed_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let case = sample_micro_case(&mut rng);
            let err = fd_check_relaxed(&case.net, &case.obs, &case.seed, 1e-4).unwrap();
            assert!(err < FD_TOLERANCE, "relative error {err}");
        }
    }

    #[test]
    fn zero_weight_network_agrees_with_fd() {
        // The relaxed spike sigma(-Vth) is not zero, so the gradient is not
        // either; last_mem avoids the all-equal tie that max_mem has here.
        let net = micro_network::<f64>(0.0, 0.0, 8, DecoderKind::LastMem, cfg()).unwrap();
        let r = fd_report(&net, &[0.5], &[1.0], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!(fd_report(&net, &[0.5], &[1.0], 1e-2).is_err());
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let case = sample_micro_case(&mut rng);
        let coarse = fd_report(&case.net, &case.obs, &case.seed, 1e-3).unwrap().max_abs_error;
        let fine = fd_report(&case.net, &case.obs, &case.seed, 1e-4).unwrap().max_abs_error;
        let slope = (coarse / fine).log10();
        assert!(slope > 1.5, "observed order {slope} ({coarse:e} -> {fine:e})");
    }

    #[test]
    fn corrupted_surrogate_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let worst = (0..20)
            .map(|_| run_trial(&sample_micro_case(&mut rng), corrupted_surrogate_grad).unwrap())
            .fold(0.0_f64, |m, e| m.max(e.oracle));
        assert!(worst > ORACLE_TOLERANCE);
    }
}
