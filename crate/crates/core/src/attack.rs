//! White-box FGSM attacks on a trained network.
//!
//! The attack loss is the cross-entropy between `softmax(Q(x))` and the
//! network's own greedy action at the clean state, so
//! `dL/dQ = softmax(Q) - onehot(a_clean)`. The input gradient runs through
//! the full surrogate backward pass. Each iteration re-linearizes at the
//! current adversarial state and clips back into the observation range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{evaluate, run_episodes, Environment, EvalProtocol};
use crate::error::{Error, Result};
use crate::grad::input_gradient;
use crate::network::QNetwork;
use crate::qlearn::greedy_action;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Episodes per attacked evaluation.
    pub episodes: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 0.01, max_iters: 50, clip_lo: 0.0, clip_hi: 1.0, episodes: 100 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("attack max_iters must be >= 1".into()));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Config("attack clip range is empty".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("attack episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gradient of the attack loss with respect to the input state.
pub fn attack_input_gradient<F: Real>(net: &QNetwork<F>, x: &[F], target: usize) -> Result<Vec<F>> {
    let (q, trace) = net.forward(x)?;
    if target >= q.len() {
        return Err(Error::contract(format!("target action {target} out of range")));
    }
    let seed = softmax(&q)
        .into_iter()
        .enumerate()
        .map(|(i, p)| if i == target { p - F::one() } else { p })
        .collect::<Vec<_>>();
    let g = input_gradient(&trace, net, &seed)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Attack("non-finite input gradient".into()));
    }
    Ok(g)
}

pub fn softmax<F: Real>(q: &[F]) -> Vec<F> {
    let m = q.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = q.iter().map(|&v| (v - m).exp()).collect();
    let z: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_range<F: Real>(x: &[F], cfg: &AttackConfig) -> Result<()> {
    let (lo, hi) = (F::of(cfg.clip_lo), F::of(cfg.clip_hi));
    if x.iter().any(|&v| !(v >= lo && v <= hi)) {
        return Err(Error::contract("attack input outside the clip range"));
    }
    Ok(())
}

/// One FGSM step `eta = epsilon * sign(grad_x L)` against the clean greedy
/// action at `x`. Zero gradient components give zero perturbation.
pub fn fgsm_perturb<F: Real>(net: &QNetwork<F>, x: &[F], cfg: &AttackConfig) -> Result<Vec<F>> {
    check_range(x, cfg)?;
    let target = greedy_action(&net.q_values(x)?);
    fgsm_toward(net, x, target, cfg.epsilon)
}

fn fgsm_toward<F: Real>(net: &QNetwork<F>, x: &[F], target: usize, epsilon: f64) -> Result<Vec<F>> {
    let eps = F::of(epsilon);
    Ok(attack_input_gradient(net, x, target)?
        .into_iter()
        .map(|g| {
            if g > F::zero() {
                eps
            } else if g < F::zero() {
                -eps
            } else {
                F::zero()
            }
        })
        .collect())
}

/// Outcome of [`iterative_attack`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome<F> {
    pub x_adv: Vec<F>,
    pub flipped: bool,
    pub iters_used: usize,
    pub clean_action: usize,
    pub action: usize,
}

/// Repeats `x <- clip(x + fgsm(x))`, always against the clean action, until
/// the greedy action changes or `max_iters` steps have been taken.
pub fn iterative_attack<F: Real>(net: &QNetwork<F>, x: &[F], cfg: &AttackConfig) -> Result<AttackOutcome<F>> {
    check_range(x, cfg)?;
    let clean_action = greedy_action(&net.q_values(x)?);
    let mut x_adv = x.to_vec();
    if cfg.epsilon == 0.0 {
        // Every step is a no-op.
        return Ok(AttackOutcome {
            x_adv,
            flipped: false,
            iters_used: cfg.max_iters,
            clean_action,
            action: clean_action,
        });
    }
    let (lo, hi) = (F::of(cfg.clip_lo), F::of(cfg.clip_hi));
    for iter in 1..=cfg.max_iters {
        let eta = fgsm_toward(net, &x_adv, clean_action, cfg.epsilon)?;
        for (v, e) in x_adv.iter_mut().zip(eta) {
            *v = (*v + e).max(lo).min(hi);
        }
        let action = greedy_action(&net.q_values(&x_adv)?);
        if action != clean_action {
            return Ok(AttackOutcome { x_adv, flipped: true, iters_used: iter, clean_action, action });
        }
    }
    Ok(AttackOutcome { x_adv, flipped: false, iters_used: cfg.max_iters, clean_action, action: clean_action })
}

/// Percentage drop from `before` to `after`; `None` when `before <= 0`.
pub fn decay_rate(before: f64, after: f64) -> Option<f64> {
    (before > 0.0).then(|| (before - after) / before * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub env: String,
    pub epsilon: f64,
    pub max_iters: usize,
    pub before: f64,
    pub after: f64,
    /// Percent; `null` when `before <= 0`.
    pub decay_rate: Option<f64>,
    /// Fraction of attacked states whose action changed.
    pub flip_fraction: f64,
    #[serde(skip)]
    pub returns_before: Vec<f64>,
    #[serde(skip)]
    pub returns_after: Vec<f64>,
    #[serde(skip)]
    pub attacked_states: usize,
}

/// Plays the protocol twice from the same RNG state: once clean, once with
/// every state replaced by its attacked version before action selection.
/// With `epsilon = 0` both passes are identical.
pub fn attacked_eval<F, E, R>(
    net: &QNetwork<F>,
    env: &mut E,
    protocol: &EvalProtocol,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackReport>
where
    F: Real,
    E: Environment + ?Sized,
    R: Rng + Clone,
{
    cfg.validate()?;
    let mut clean_rng = rng.clone();
    let clean = evaluate(net, env, protocol, &mut clean_rng)?;

    let mut flips = 0usize;
    let mut states = 0usize;
    let attacked = run_episodes(env, protocol, rng, |state| {
        let x: Vec<F> = state.iter().map(|&v| F::of(v as f64)).collect();
        let out = iterative_attack(net, &x, cfg)?;
        states += 1;
        flips += usize::from(out.flipped);
        Ok(out.action)
    })?;
    let flip_fraction = if states == 0 { 0.0 } else { flips as f64 / states as f64 };
    Ok(AttackReport {
        env: env.name().to_string(),
        epsilon: cfg.epsilon,
        max_iters: cfg.max_iters,
        before: clean.mean,
        after: attacked.mean,
        decay_rate: decay_rate(clean.mean, attacked.mean),
        flip_fraction,
        returns_before: clean.returns,
        returns_after: attacked.returns,
        attacked_states: states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::CatchEnv;
    use crate::grad::input_gradient_tape;
    use crate::network::{parse_architecture, DecoderKind, Layer};
    use crate::neuron::{NeuronConfig, NeuronModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(epsilon: f64) -> AttackConfig {
        AttackConfig { epsilon, ..AttackConfig::default() }
    }

    /// Two inputs, two actions, one LI layer: Q is linear in x.
    fn linear_net(w: [f64; 4]) -> QNetwork<f64> {
        let layer = Layer::dense(2, 2, w.to_vec(), NeuronModel::Li).unwrap();
        QNetwork::from_layers(vec![layer], vec![2], 4, DecoderKind::LastMem, NeuronConfig::default()).unwrap()
    }

    fn ce_loss(net: &QNetwork<f64>, x: &[f64], target: usize) -> f64 {
        let q = net.q_values(x).unwrap();
        -softmax(&q)[target].ln()
    }

    #[test]
    fn zero_epsilon_gives_zero_perturbation() {
        let net = linear_net([1.0, -2.0, 0.5, 0.3]);
        assert_eq!(fgsm_perturb(&net, &[0.2, 0.7], &cfg(0.0)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn perturbation_follows_loss_gradient_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w = [0; 4].map(|_| rng.gen_range(-2.0..2.0));
            let net = linear_net(w);
            let x = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let target = greedy_action(&net.q_values(&x).unwrap());
            let eta = fgsm_perturb(&net, &x, &cfg(0.03)).unwrap();
            for i in 0..2 {
                let h = 1e-6;
                let (mut up, mut down) = (x, x);
                up[i] += h;
                down[i] -= h;
                let fd = (ce_loss(&net, &up, target) - ce_loss(&net, &down, target)) / (2.0 * h);
                if fd.abs() > 1e-7 {
                    assert_eq!(eta[i], 0.03 * fd.signum(), "w {w:?} x {x:?}");
                }
            }
        }
    }

    #[test]
    fn spiking_input_gradient_matches_tape() {
        let specs = parse_architecture("6-LIF-NA-LI").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net =
            QNetwork::<f64>::from_specs(&specs, &[4], 3, 8, DecoderKind::MaxMem, NeuronConfig::default(), &mut rng)
                .unwrap();
        net.scale_spiking_weights(3.0);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (q, trace) = net.forward(&x).unwrap();
            let target = greedy_action(&q);
            let mut seed = softmax(&q);
            seed[target] -= 1.0;
            let oracle = input_gradient_tape(&trace, &net, &seed).unwrap();
            let eta = fgsm_perturb(&net, &x, &cfg(0.1)).unwrap();
            for (e, g) in eta.iter().zip(&oracle) {
                assert!(*e == 0.1 || *e == -0.1 || *e == 0.0);
                if g.abs() > 1e-12 {
                    assert_eq!(*e, 0.1 * g.signum());
                }
            }
        }
    }

    #[test]
    fn iterative_attack_limits() {
        let net = linear_net([1.0, -2.0, 0.5, 0.3]);
        let x = [0.4, 0.6];
        let out = iterative_attack(&net, &x, &cfg(0.0)).unwrap();
        assert!(!out.flipped);
        assert_eq!(out.iters_used, 50);
        assert_eq!(out.x_adv, x.to_vec());

        let zero = linear_net([0.0; 4]);
        let out = iterative_attack(&zero, &x, &cfg(0.05)).unwrap();
        assert!(!out.flipped);
        assert_eq!(out.action, 0);

        assert!(fgsm_perturb(&net, &[1.5, 0.0], &cfg(0.1)).is_err());
    }

    #[test]
    fn iterative_attack_flips_and_respects_budget() {
        // Q0 - Q1 = c (x0 - x1); starting at x0 slightly above x1 the attack
        // must push them across.
        let net = linear_net([1.0, 0.0, 0.0, 1.0]);
        let x = [0.55, 0.45];
        assert_eq!(greedy_action(&net.q_values(&x).unwrap()), 0);
        let c = cfg(0.01);
        let out = iterative_attack(&net, &x, &c).unwrap();
        assert!(out.flipped);
        assert_eq!(out.action, 1);
        // Each step closes the gap by 2 epsilon; the flip needs x1 > x0
        // strictly.
        assert_eq!(out.iters_used, 6);
        for (a, b) in out.x_adv.iter().zip(&x) {
            assert!((a - b).abs() <= out.iters_used as f64 * c.epsilon + 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn decay_rate_arithmetic() {
        assert!((decay_rate(5211.5, 2055.0).unwrap() - 60.57).abs() < 0.01);
        assert!((decay_rate(100.0, 80.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(decay_rate(-1.0, 0.5), None);
        assert_eq!(decay_rate(0.0, -0.5), None);
    }

    #[test]
    fn zero_epsilon_attacked_eval_equals_clean_eval() {
        let specs = parse_architecture("8C3S1-LIF-Flatten-32-LIF-NA-LI").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = QNetwork::<f32>::from_specs(
            &specs,
            &[1, 10, 10],
            3,
            8,
            DecoderKind::MaxMem,
            NeuronConfig::default(),
            &mut rng,
        )
        .unwrap();
        net.scale_spiking_weights(6.0);
        let protocol = EvalProtocol { episodes: 20, epsilon: 0.05, noop_max: 30, frames: 1 };
        let mut env = CatchEnv::new(10, 10).unwrap();
        let eval_rng = ChaCha8Rng::seed_from_u64(77);

        let clean = evaluate(&net, &mut env, &protocol, &mut eval_rng.clone()).unwrap();
        let report =
            attacked_eval(&net, &mut env, &protocol, &AttackConfig { episodes: 20, ..cfg(0.0) }, &mut eval_rng.clone())
                .unwrap();
        assert_eq!(report.returns_before, clean.returns);
        assert_eq!(report.returns_after, clean.returns);
        assert_eq!(report.before.to_bits(), report.after.to_bits());
        assert_eq!(report.flip_fraction, 0.0);

        let json: serde_json::Value = serde_json::to_value(&report).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 7, "{keys:?}");
        for k in ["env", "epsilon", "max_iters", "before", "after", "decay_rate", "flip_fraction"] {
            assert!(json.get(k).is_some(), "missing {k}");
        }
        match report.decay_rate {
            Some(d) => assert!((d - decay_rate(report.before, report.after).unwrap()).abs() < 1e-9),
            None => assert!(report.before <= 0.0),
        }
    }
}
