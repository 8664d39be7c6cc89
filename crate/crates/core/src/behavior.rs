//! Actor-critic learning in imagination.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{BehaviorConfig, OptimConfig};
use crate::error::{Error, Result};
use crate::kernels::softmax_rows;
use crate::nn::Mlp;
use crate::optim::Adam;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::twohot::TwoHot;
use crate::worldmodel::{categorical, LatentState, WorldModel};

/// `R_t = r_t + gamma * c_t * ((1 - lambda) * V_{t+1} + lambda * R_{t+1})`, with `R_H = V_H`.
///
/// `rewards` and `continuations` have length `H`, `values` has length `H + 1`.
pub fn lambda_returns(rewards: &[f64], continuations: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = rewards.len();
    if continuations.len() != h || values.len() != h + 1 {
        return Err(Error::ShapeMismatch { expected: vec![h, h, h + 1], got: vec![rewards.len(), continuations.len(), values.len()] });
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * continuations[t] * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Running scale of the return spread used to normalise advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnScale {
    pub value: f64,
    decay: f64,
    low: f64,
    high: f64,
}

impl ReturnScale {
    pub fn new(decay: f64, low: f64, high: f64) -> Self {
        Self { value: 0.0, decay, low, high }
    }

    pub fn from_config(cfg: &BehaviorConfig) -> Self {
        Self::new(cfg.return_decay, cfg.return_low, cfg.return_high)
    }

    pub fn update(&mut self, returns: &[f64]) -> Result<()> {
        if returns.is_empty() {
            return Err(Error::Precondition("return scale needs a nonempty batch".into()));
        }
        let mut sorted = returns.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let range = percentile(&sorted, self.high) - percentile(&sorted, self.low);
        self.value = self.decay * self.value + (1.0 - self.decay) * range;
        Ok(())
    }

    pub fn denominator(&self) -> f64 {
        self.value.max(1.0)
    }
}

/// Imagined rollouts from `n` start states, stored time-major.
#[derive(Clone, Debug)]
pub struct ImaginedTrajectory {
    pub starts: usize,
    pub horizon: usize,
    /// `[(H + 1) * n, feature]`.
    pub features: Tensor,
    /// `H * n` each.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<f64>,
    /// `(H + 1) * n` online critic means.
    pub values: Vec<f64>,
    /// `H * n` slow critic means.
    pub slow_values: Vec<f64>,
    pub returns: Vec<f64>,
    /// `H * n` cumulative continuation products (1 at the first step).
    pub weights: Vec<f64>,
}

impl ImaginedTrajectory {
    fn step_features(&self, steps: usize) -> Tensor {
        let f = self.features.cols();
        Tensor::new(&[steps * self.starts, f], self.features.data()[..steps * self.starts * f].to_vec())
    }
}

pub struct ActorCritic {
    pub actor: ParamStore,
    pub critic: ParamStore,
    pub slow_critic: ParamStore,
    actor_net: Mlp,
    critic_net: Mlp,
    codec: TwoHot,
    cfg: BehaviorConfig,
    num_actions: usize,
    pub return_scale: ReturnScale,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl ActorCritic {
    pub fn new(cfg: &BehaviorConfig, optim: &OptimConfig, feature_dim: usize, num_actions: usize, rng: &mut impl Rng) -> Self {
        let mut actor = ParamStore::new();
        let actor_net = Mlp::new(&mut actor, "actor", feature_dim, cfg.units, cfg.layers, num_actions, Init::Zeros, rng);
        let mut critic = ParamStore::new();
        let critic_net = Mlp::new(&mut critic, "critic", feature_dim, cfg.units, cfg.layers, cfg.bins, Init::Zeros, rng);
        let slow_critic = critic.clone();
        let actor_opt = Adam::new(optim, &actor);
        let critic_opt = Adam::new(optim, &critic);
        Self {
            actor,
            critic,
            slow_critic,
            actor_net,
            critic_net,
            codec: TwoHot::new(cfg.bins, cfg.bin_limit),
            cfg: cfg.clone(),
            num_actions,
            return_scale: ReturnScale::from_config(cfg),
            actor_opt,
            critic_opt,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn policy_logits(&self, tape: &mut Tape, features: Var) -> Var {
        self.actor_net.forward(tape, &self.actor, features)
    }

    pub fn policy_probs(&self, features: &Tensor) -> Tensor {
        let mut tape = Tape::no_grad();
        let f = tape.constant(features.clone());
        let l = self.policy_logits(&mut tape, f);
        Tensor::new(&[features.rows(), self.num_actions], softmax_rows(tape.value(l).data(), self.num_actions, false))
    }

    /// Samples actions, or takes the mode with uniform tie-breaking when `greedy`.
    pub fn act(&self, features: &Tensor, greedy: bool, rng: &mut impl Rng) -> Vec<usize> {
        let probs = self.policy_probs(features);
        probs
            .data()
            .chunks(self.num_actions)
            .map(|p| {
                if greedy {
                    let best = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ties: Vec<usize> = (0..p.len()).filter(|&i| p[i] == best).collect();
                    ties[rng.gen_range(0..ties.len())]
                } else {
                    categorical(p, rng)
                }
            })
            .collect()
    }

    fn critic_means(&self, store: &ParamStore, features: &Tensor) -> Vec<f64> {
        let mut tape = Tape::no_grad();
        let f = tape.constant(features.clone());
        let l = self.critic_net.forward(&mut tape, store, f);
        self.codec.decode_logits(tape.value(l))
    }

    pub fn value(&self, features: &Tensor) -> Vec<f64> {
        self.critic_means(&self.critic, features)
    }

    /// Rolls the world model forward under the policy from detached start states.
    pub fn imagine(&self, wm: &WorldModel, start: &LatentState, horizon: usize, rng: &mut impl Rng) -> Result<ImaginedTrajectory> {
        let n = start.rows();
        let mut states = vec![start.clone()];
        let mut actions = Vec::with_capacity(horizon * n);
        for t in 0..horizon {
            let a = self.act(&states[t].features(), false, rng);
            let (next, _) = wm.imagine(&states[t], &a, rng);
            actions.extend_from_slice(&a);
            states.push(next);
        }
        let all = LatentState::concat(&states);
        let features = all.features();
        let later = all.select(&(n..(horizon + 1) * n).collect::<Vec<_>>());
        let (rewards, continuations) = if horizon > 0 { (wm.predict_reward(&later), wm.predict_continuation(&later)) } else { (vec![], vec![]) };
        let values = self.value(&features);
        let head = ImaginedTrajectory {
            starts: n,
            horizon,
            features,
            actions,
            rewards,
            continuations,
            values,
            slow_values: vec![],
            returns: vec![],
            weights: vec![],
        };
        let slow_values = if horizon > 0 { self.critic_means(&self.slow_critic, &head.step_features(horizon)) } else { vec![] };
        let mut returns = vec![0.0; horizon * n];
        let mut weights = vec![0.0; horizon * n];
        for i in 0..n {
            let col = |v: &[f64], len: usize| (0..len).map(|t| v[t * n + i]).collect::<Vec<_>>();
            let r = lambda_returns(&col(&head.rewards, horizon), &col(&head.continuations, horizon), &col(&head.values, horizon + 1), self.cfg.gamma, self.cfg.lambda)?;
            let mut w = 1.0;
            for t in 0..horizon {
                returns[t * n + i] = r[t];
                weights[t * n + i] = w;
                w *= head.continuations[t * n + i];
            }
        }
        Ok(ImaginedTrajectory { slow_values, returns, weights, ..head })
    }

    /// Weighted twohot NLL of the returns plus the slow-critic regulariser.
    pub fn critic_loss(&self, tape: &mut Tape, traj: &ImaginedTrajectory) -> Var {
        let steps = traj.horizon * traj.starts;
        if steps == 0 {
            return tape.constant(Tensor::scalar(0.0));
        }
        let f = tape.constant(traj.step_features(traj.horizon));
        let logits = self.critic_net.forward(tape, &self.critic, f);
        let nll = self.codec.nll(tape, logits, &traj.returns);
        let reg = self.codec.nll(tape, logits, &traj.slow_values);
        let reg = tape.scale(reg, self.cfg.slow_critic_scale);
        let per = tape.add(nll, reg);
        let w = tape.constant(Tensor::new(&[steps, 1], traj.weights.clone()));
        let per = tape.mul(per, w);
        tape.mean(per)
    }

    /// REINFORCE with normalised, stop-gradient advantages and an entropy bonus.
    pub fn actor_loss(&self, tape: &mut Tape, traj: &ImaginedTrajectory, scale: &ReturnScale) -> Var {
        let steps = traj.horizon * traj.starts;
        if steps == 0 {
            return tape.constant(Tensor::scalar(0.0));
        }
        let f = tape.constant(traj.step_features(traj.horizon));
        let logits = self.policy_logits(tape, f);
        let logp = tape.log_softmax(logits);
        let chosen = tape.constant(Tensor::one_hot(&traj.actions, self.num_actions));
        let sel = tape.mul(logp, chosen);
        let sel = tape.sum_cols(sel);
        let p = tape.exp(logp);
        let plogp = tape.mul(p, logp);
        let neg_ent = tape.sum_cols(plogp);
        let denom = scale.denominator();
        let adv: Vec<f64> = (0..steps).map(|i| (traj.returns[i] - traj.values[i]) / denom).collect();
        let adv = tape.constant(Tensor::new(&[steps, 1], adv));
        let pg = tape.mul(adv, sel);
        let ent = tape.scale(neg_ent, -self.cfg.entropy_scale);
        let obj = tape.add(pg, ent);
        let w = tape.constant(Tensor::new(&[steps, 1], traj.weights.clone()));
        let obj = tape.mul(obj, w);
        let obj = tape.mean(obj);
        tape.neg(obj)
    }

    /// One behaviour update from detached posterior start states.
    pub fn train_step(&mut self, wm: &WorldModel, start: &LatentState, rng: &mut impl Rng) -> Result<BTreeMap<String, f64>> {
        let traj = self.imagine(wm, start, self.cfg.horizon, rng)?;
        let mut metrics = BTreeMap::new();
        if traj.returns.is_empty() {
            return Ok(metrics);
        }
        self.return_scale.update(&traj.returns)?;

        let mut tape = Tape::new();
        let loss = self.actor_loss(&mut tape, &traj, &self.return_scale);
        let g = tape.backward(loss).for_store(&self.actor);
        let actor_loss = tape.value(loss).item();
        let s = self.actor_opt.step(&mut self.actor, g)?;
        metrics.insert("actor_grad_norm".into(), s.grad_norm);

        let mut tape = Tape::new();
        let loss = self.critic_loss(&mut tape, &traj);
        let g = tape.backward(loss).for_store(&self.critic);
        let critic_loss = tape.value(loss).item();
        let s = self.critic_opt.step(&mut self.critic, g)?;
        metrics.insert("critic_grad_norm".into(), s.grad_norm);
        self.slow_critic.ema_update(&self.critic, self.cfg.critic_ema_decay);

        let probs = self.policy_probs(&traj.step_features(traj.horizon));
        let ent: f64 = probs.data().chunks(self.num_actions).map(|p| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()).sum::<f64>()
            / (traj.horizon * traj.starts) as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        metrics.insert("actor_loss".into(), actor_loss);
        metrics.insert("critic_loss".into(), critic_loss);
        metrics.insert("policy_entropy".into(), ent);
        metrics.insert("return_scale".into(), self.return_scale.value);
        metrics.insert("imag_return".into(), mean(&traj.returns));
        metrics.insert("imag_reward".into(), mean(&traj.rewards));
        metrics.insert("imag_value".into(), mean(&traj.values));
        Ok(metrics)
    }

    pub fn actor_steps(&self) -> u64 {
        self.actor_opt.steps()
    }
}
