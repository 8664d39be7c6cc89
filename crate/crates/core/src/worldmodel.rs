//! Recurrent state-space world model with categorical latents.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{Config, LatentSampling, LossConfig, NeMode};
use crate::error::{Error, Result};
use crate::nepredictor::{NePredictor, NeStats};
use crate::nn::{ConvDecoder, ConvEncoder, Dense, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::replay::SequenceBatch;
use crate::tensor::Tensor;
use crate::twohot::TwoHot;

/// Latent state values: `h` is `[n, deter]`, `z` is `[n, latents * classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub h: Tensor,
    pub z: Tensor,
}

impl LatentState {
    pub fn rows(&self) -> usize {
        self.h.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { h: self.h.select_rows(idx), z: self.z.select_rows(idx) }
    }

    /// `concat(h, z)` per row.
    pub fn features(&self) -> Tensor {
        let (dh, dz) = (self.h.cols(), self.z.cols());
        let mut out = Vec::with_capacity(self.rows() * (dh + dz));
        for r in 0..self.rows() {
            out.extend_from_slice(self.h.row(r));
            out.extend_from_slice(self.z.row(r));
        }
        Tensor::new(&[self.rows(), dh + dz], out)
    }

    pub fn concat(parts: &[LatentState]) -> Self {
        let cat = |f: &dyn Fn(&LatentState) -> &Tensor| {
            let cols = f(&parts[0]).cols();
            let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
            Tensor::new(&[data.len() / cols, cols], data)
        };
        Self { h: cat(&|p| &p.h), z: cat(&|p| &p.z) }
    }
}

/// Latent state on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub z: Var,
}

impl StateVars {
    pub fn constant(tape: &mut Tape, s: &LatentState) -> Self {
        Self { h: tape.constant(s.h.clone()), z: tape.constant(s.z.clone()) }
    }

    pub fn value(&self, tape: &Tape) -> LatentState {
        LatentState { h: tape.value(self.h).clone(), z: tape.value(self.z).clone() }
    }
}

/// Per-row KL terms, each `[n, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct KlTerms {
    pub loss: Var,
    /// `KL(sg(posterior) || prior)` before clipping.
    pub dynamics: Var,
    /// `KL(posterior || sg(prior))` before clipping.
    pub representation: Var,
}

/// Balanced, free-bits-clipped KL between `[n * latents, classes]` log-probability rows.
pub fn kl_loss(tape: &mut Tape, prior_logp: Var, post_logp: Var, latents: usize, cfg: &LossConfig) -> KlTerms {
    let rows = tape.value(prior_logp).rows();
    assert_eq!(rows % latents, 0);
    let n = rows / latents;
    let kl = |tape: &mut Tape, q: Var, p: Var| {
        let qp = tape.exp(q);
        let d = tape.sub(q, p);
        let prod = tape.mul(qp, d);
        let s = tape.sum_cols(prod);
        let s = tape.reshape(s, &[n, latents]);
        tape.sum_cols(s)
    };
    let post_sg = tape.detach(post_logp);
    let prior_sg = tape.detach(prior_logp);
    let dynamics = kl(tape, post_sg, prior_logp);
    let representation = kl(tape, post_logp, prior_sg);
    let d = tape.max_scalar(dynamics, cfg.free_nats);
    let d = tape.scale(d, cfg.dyn_scale);
    let r = tape.max_scalar(representation, cfg.free_nats);
    let r = tape.scale(r, cfg.rep_scale);
    let loss = tape.add(d, r);
    KlTerms { loss, dynamics, representation }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub deter: usize,
    pub latents: usize,
    pub classes: usize,
    pub actions: usize,
    pub embed: usize,
    pub image: usize,
}

impl Dims {
    pub fn stoch(&self) -> usize {
        self.latents * self.classes
    }

    pub fn feature(&self) -> usize {
        self.deter + self.stoch()
    }
}

/// Everything the training step needs from one world-model loss evaluation.
pub struct WmOutput {
    pub loss: Var,
    pub metrics: BTreeMap<String, f64>,
    /// Posterior states, batch-major, as values (start points for imagination).
    pub posterior: LatentState,
    pub embeddings: Tensor,
    pub ne: Option<NeStats>,
}

pub struct WorldModel {
    pub params: ParamStore,
    encoder: ConvEncoder,
    img_in: Dense,
    gru: Linear,
    gru_norm: ParamId,
    prior_hidden: Dense,
    prior_out: Linear,
    post_hidden: Dense,
    post_out: Linear,
    init_h: ParamId,
    reward_head: Mlp,
    cont_head: Mlp,
    decoder: ConvDecoder,
    ne: Option<NePredictor>,
    codec: TwoHot,
    dims: Dims,
    unimix: f64,
    sampling: LatentSampling,
    mode: NeMode,
    loss_cfg: LossConfig,
    ne_scale: f64,
}

impl WorldModel {
    pub fn new(cfg: &Config, num_actions: usize, rng: &mut impl Rng) -> Result<Self> {
        let m = &cfg.model;
        let dims = Dims {
            deter: m.deter,
            latents: m.latents,
            classes: m.classes,
            actions: num_actions,
            embed: m.embed_dim,
            image: cfg.env.image_size,
        };
        if dims.image >> m.encoder_channels.len() == 0 || (dims.image >> m.encoder_channels.len()) << m.encoder_channels.len() != dims.image {
            return Err(Error::Config(format!("image size {} incompatible with {} conv stages", dims.image, m.encoder_channels.len())));
        }
        let mut p = ParamStore::new();
        let encoder = ConvEncoder::new(&mut p, "wm.encoder", dims.image, &m.encoder_channels, dims.embed, rng);
        let img_in = Dense::new(&mut p, "wm.rssm.img_in", dims.stoch() + num_actions, m.units, rng);
        let gru = Linear::new(&mut p, "wm.rssm.gru", m.units + dims.deter, 3 * dims.deter, false, Init::FanAvg(1.0), rng);
        let gru_norm = p.add("wm.rssm.gru.norm", Tensor::full(&[3 * dims.deter], 1.0));
        let prior_hidden = Dense::new(&mut p, "wm.rssm.prior.h0", dims.deter, m.units, rng);
        let prior_out = Linear::new(&mut p, "wm.rssm.prior.out", m.units, dims.stoch(), true, Init::FanAvg(1.0), rng);
        let post_hidden = Dense::new(&mut p, "wm.rssm.post.h0", dims.deter + dims.embed, m.units, rng);
        let post_out = Linear::new(&mut p, "wm.rssm.post.out", m.units, dims.stoch(), true, Init::FanAvg(1.0), rng);
        let init_h = p.add("wm.rssm.init_h", Tensor::zeros(&[1, dims.deter]));
        let b = &cfg.behavior;
        let reward_head = Mlp::new(&mut p, "wm.reward", dims.feature(), m.units, b.layers, b.bins, Init::Zeros, rng);
        let cont_head = Mlp::new(&mut p, "wm.cont", dims.feature(), m.units, b.layers, 1, Init::FanAvg(1.0), rng);
        let decoder = ConvDecoder::new(&mut p, "wm.decoder", dims.feature(), dims.image, &m.encoder_channels, rng);
        let ne = if cfg.ne.mode == NeMode::Reconstruction {
            None
        } else {
            Some(NePredictor::new(&mut p, "wm.ne", &cfg.ne, dims.feature(), num_actions, dims.embed, cfg.replay.batch_length, rng)?)
        };
        Ok(Self {
            params: p,
            encoder,
            img_in,
            gru,
            gru_norm,
            prior_hidden,
            prior_out,
            post_hidden,
            post_out,
            init_h,
            reward_head,
            cont_head,
            decoder,
            ne,
            codec: TwoHot::new(b.bins, b.bin_limit),
            dims,
            unimix: m.unimix,
            sampling: m.latent_sampling,
            mode: cfg.ne.mode,
            loss_cfg: cfg.loss.clone(),
            ne_scale: cfg.ne.scale,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn codec(&self) -> &TwoHot {
        &self.codec
    }

    pub fn mode(&self) -> NeMode {
        self.mode
    }

    pub fn predictor(&self) -> Option<&NePredictor> {
        self.ne.as_ref()
    }

    /// `[n, size, size, 3]` pixels to `[n, embed]`.
    pub fn encode(&self, tape: &mut Tape, pixels: Var) -> Var {
        self.encoder.forward(tape, &self.params, pixels)
    }

    /// Log-probabilities and probabilities (`[n * latents, classes]`) after uniform mixing.
    fn dist(&self, tape: &mut Tape, hidden: &Dense, out: &Linear, x: Var) -> (Var, Var) {
        let n = tape.value(x).rows();
        let y = hidden.forward(tape, &self.params, x);
        let logits = out.forward(tape, &self.params, y);
        let logits = tape.reshape(logits, &[n * self.dims.latents, self.dims.classes]);
        let probs = tape.softmax(logits);
        let probs = tape.scale(probs, 1.0 - self.unimix);
        let probs = tape.add_scalar(probs, self.unimix / self.dims.classes as f64);
        let logp = tape.ln(probs);
        (logp, probs)
    }

    fn sample(&self, tape: &mut Tape, probs: Var, rng: &mut impl Rng) -> Var {
        let rows = tape.value(probs).rows();
        let n = rows / self.dims.latents;
        let z = match self.sampling {
            LatentSampling::Probs => probs,
            LatentSampling::StraightThrough => {
                let c = self.dims.classes;
                let p = tape.value(probs);
                let idx: Vec<usize> = p.data().chunks(c).map(|row| categorical(row, rng)).collect();
                tape.straight_through(Tensor::one_hot(&idx, c), probs)
            }
        };
        tape.reshape(z, &[n, self.dims.stoch()])
    }

    fn mode_of(&self, tape: &mut Tape, probs: Var) -> Var {
        let rows = tape.value(probs).rows();
        let n = rows / self.dims.latents;
        let z = match self.sampling {
            LatentSampling::Probs => probs,
            LatentSampling::StraightThrough => {
                let idx = tape.value(probs).argmax_rows();
                tape.straight_through(Tensor::one_hot(&idx, self.dims.classes), probs)
            }
        };
        tape.reshape(z, &[n, self.dims.stoch()])
    }

    /// Learned single-row initial state.
    pub fn initial(&self, tape: &mut Tape) -> StateVars {
        let p = tape.param(&self.params, self.init_h);
        let h = tape.tanh(p);
        let (_, probs) = self.dist(tape, &self.prior_hidden, &self.prior_out, h);
        let z = self.mode_of(tape, probs);
        StateVars { h, z }
    }

    fn action_onehot(&self, actions: &[usize], null: &[bool]) -> Tensor {
        let a = self.dims.actions;
        let mut t = Tensor::zeros(&[actions.len(), a]);
        for (r, (&act, &skip)) in actions.iter().zip(null).enumerate() {
            if !skip {
                assert!(act < a, "action {act} out of range");
                t.data_mut()[r * a + act] = 1.0;
            }
        }
        t
    }

    fn recurrent(&self, tape: &mut Tape, h_prev: Var, z_prev: Var, a: Var) -> Var {
        let d = self.dims.deter;
        let x = tape.concat_cols(&[z_prev, a]);
        let x = self.img_in.forward(tape, &self.params, x);
        let xh = tape.concat_cols(&[x, h_prev]);
        let g = self.gru.forward(tape, &self.params, xh);
        let s = tape.param(&self.params, self.gru_norm);
        let g = tape.rms_norm(g, s, crate::nn::NORM_EPS);
        let reset = tape.slice_cols(g, 0, d);
        let reset = tape.sigmoid(reset);
        let cand = tape.slice_cols(g, d, d);
        let cand = tape.mul(reset, cand);
        let cand = tape.tanh(cand);
        let update = tape.slice_cols(g, 2 * d, d);
        let update = tape.add_scalar(update, -1.0);
        let update = tape.sigmoid(update);
        let delta = tape.sub(cand, h_prev);
        let delta = tape.mul(update, delta);
        tape.add(h_prev, delta)
    }

    /// Substitutes the learned initial state (and a null action) on `reset` rows.
    fn reset_rows(&self, tape: &mut Tape, prev: StateVars, reset: &[bool]) -> StateVars {
        if !reset.iter().any(|&r| r) {
            return prev;
        }
        let init = self.initial(tape);
        StateVars { h: tape.where_rows(reset, init.h, prev.h), z: tape.where_rows(reset, init.z, prev.z) }
    }

    /// One filtering step. Returns the posterior state and the prior and
    /// posterior log-probabilities.
    pub fn observe_step(
        &self,
        tape: &mut Tape,
        prev: StateVars,
        prev_action: &[usize],
        reset: &[bool],
        embedding: Var,
        rng: &mut impl Rng,
    ) -> (StateVars, Var, Var) {
        let prev = self.reset_rows(tape, prev, reset);
        let a = tape.constant(self.action_onehot(prev_action, reset));
        let h = self.recurrent(tape, prev.h, prev.z, a);
        let (prior_logp, _) = self.dist(tape, &self.prior_hidden, &self.prior_out, h);
        let he = tape.concat_cols(&[h, embedding]);
        let (post_logp, post_probs) = self.dist(tape, &self.post_hidden, &self.post_out, he);
        let z = self.sample(tape, post_probs, rng);
        (StateVars { h, z }, prior_logp, post_logp)
    }

    /// One imagination step: same recurrence, latent drawn from the prior.
    pub fn imagine_step(&self, tape: &mut Tape, prev: StateVars, action: &[usize], rng: &mut impl Rng) -> (StateVars, Var) {
        let a = tape.constant(self.action_onehot(action, &vec![false; action.len()]));
        let h = self.recurrent(tape, prev.h, prev.z, a);
        let (prior_logp, prior_probs) = self.dist(tape, &self.prior_hidden, &self.prior_out, h);
        let z = self.sample(tape, prior_probs, rng);
        (StateVars { h, z }, prior_logp)
    }

    pub fn features(&self, tape: &mut Tape, s: StateVars) -> Var {
        tape.concat_cols(&[s.h, s.z])
    }

    pub fn reward_logits(&self, tape: &mut Tape, features: Var) -> Var {
        self.reward_head.forward(tape, &self.params, features)
    }

    pub fn continuation_logit(&self, tape: &mut Tape, features: Var) -> Var {
        self.cont_head.forward(tape, &self.params, features)
    }

    /// Per-pixel means `[n, size, size, 3]`.
    pub fn decode(&self, tape: &mut Tape, features: Var) -> Var {
        self.decoder.forward(tape, &self.params, features)
    }

    /// Full training objective on a replayed batch.
    pub fn loss(&self, tape: &mut Tape, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<WmOutput> {
        let (b, t) = (batch.batch, batch.length);
        let s = self.dims.image;
        let want = [b, t, s, s, 3];
        if batch.pixels.shape() != want {
            return Err(Error::ShapeMismatch { expected: want.to_vec(), got: batch.pixels.shape().to_vec() });
        }
        let px = tape.constant(batch.pixels.clone().reshape(&[b * t, s, s, 3]));
        let embeddings = self.encode(tape, px);

        let mut prev = StateVars {
            h: tape.constant(Tensor::zeros(&[b, self.dims.deter])),
            z: tape.constant(Tensor::zeros(&[b, self.dims.stoch()])),
        };
        let (mut hs, mut zs, mut priors, mut posts) = (vec![], vec![], vec![], vec![]);
        for step in 0..t {
            let idx: Vec<usize> = (0..b).map(|bi| bi * t + step).collect();
            let e = tape.gather_rows(embeddings, &idx);
            let reset: Vec<bool> = idx.iter().map(|&i| step == 0 || batch.is_first[i]).collect();
            let prev_action: Vec<usize> = idx.iter().map(|&i| if step == 0 { 0 } else { batch.actions[i - 1] }).collect();
            let (state, prior, post) = self.observe_step(tape, prev, &prev_action, &reset, e, rng);
            hs.push(state.h);
            zs.push(state.z);
            priors.push(prior);
            posts.push(post);
            prev = state;
        }
        // time-major -> batch-major
        let perm: Vec<usize> = (0..b * t).map(|i| (i % t) * b + i / t).collect();
        let h = tape.concat_rows(&hs);
        let h = tape.gather_rows(h, &perm);
        let z = tape.concat_rows(&zs);
        let z = tape.gather_rows(z, &perm);
        let prior = tape.concat_rows(&priors);
        let post = tape.concat_rows(&posts);
        let feat = tape.concat_cols(&[h, z]);

        let rl = self.reward_logits(tape, feat);
        let rew = self.codec.nll(tape, rl, &batch.rewards);
        let rew = tape.mean(rew);
        let cl = self.continuation_logit(tape, feat);
        let target = tape.constant(Tensor::new(&[b * t, 1], batch.continuations.iter().map(|&c| c as u8 as f64).collect()));
        let sp = tape.softplus(cl);
        let ct = tape.mul(target, cl);
        let cont = tape.sub(sp, ct);
        let cont = tape.mean(cont);
        let kl = kl_loss(tape, prior, post, self.dims.latents, &self.loss_cfg);
        let kl_total = tape.mean(kl.loss);

        let pred = tape.add(rew, cont);
        let pred = tape.scale(pred, self.loss_cfg.pred_scale);
        let mut total = tape.add(pred, kl_total);

        let mut metrics = BTreeMap::new();
        let mut ne_stats = None;
        match &self.ne {
            Some(ne) => {
                let (l, stats) = ne.loss(tape, &self.params, h, z, &batch.actions, embeddings, &batch.continuations, &batch.is_first, b, t)?;
                metrics.insert("ne_loss".into(), stats.loss);
                metrics.insert("ne_valid".into(), stats.valid as f64);
                metrics.insert("ne_mean_diag".into(), stats.mean_diag);
                ne_stats = Some(stats);
                let l = tape.scale(l, self.ne_scale);
                total = tape.add(total, l);
            }
            None => {
                let recon = self.decode(tape, feat);
                let diff = tape.sub(recon, px);
                let sq = tape.square(diff);
                let sq = tape.sum(sq);
                let nll = tape.scale(sq, 0.5 / (b * t) as f64);
                metrics.insert("recon_loss".into(), tape.value(nll).item());
                let l = tape.scale(nll, self.loss_cfg.recon_scale);
                total = tape.add(total, l);
            }
        }
        let mean_of = |tape: &Tape, v: Var| tape.value(v).sum() / tape.value(v).len() as f64;
        metrics.insert("reward_loss".into(), tape.value(rew).item());
        metrics.insert("cont_loss".into(), tape.value(cont).item());
        metrics.insert("kl_loss".into(), tape.value(kl_total).item());
        metrics.insert("kl_dyn".into(), mean_of(tape, kl.dynamics));
        metrics.insert("kl_rep".into(), mean_of(tape, kl.representation));
        metrics.insert("wm_loss".into(), tape.value(total).item());
        let posterior = StateVars { h, z }.value(tape);
        Ok(WmOutput { loss: total, metrics, posterior, embeddings: tape.value(embeddings).clone(), ne: ne_stats })
    }

    // Value-level helpers (no gradient recording).

    pub fn initial_state(&self, n: usize) -> LatentState {
        let mut tape = Tape::no_grad();
        let s = self.initial(&mut tape).value(&tape);
        s.select(&vec![0; n])
    }

    pub fn embed(&self, pixels: &Tensor) -> Tensor {
        let mut tape = Tape::no_grad();
        let x = tape.constant(pixels.clone());
        let e = self.encode(&mut tape, x);
        tape.value(e).clone()
    }

    /// Filtering step on values; `pixels` is `[n, size, size, 3]`.
    pub fn observe(
        &self,
        prev: &LatentState,
        prev_action: &[usize],
        is_first: &[bool],
        pixels: &Tensor,
        rng: &mut impl Rng,
    ) -> (LatentState, Tensor, Tensor) {
        let mut tape = Tape::no_grad();
        let x = tape.constant(pixels.clone());
        let e = self.encode(&mut tape, x);
        let p = StateVars::constant(&mut tape, prev);
        let (s, prior, post) = self.observe_step(&mut tape, p, prev_action, is_first, e, rng);
        (s.value(&tape), tape.value(prior).clone(), tape.value(post).clone())
    }

    pub fn imagine(&self, prev: &LatentState, action: &[usize], rng: &mut impl Rng) -> (LatentState, Tensor) {
        let mut tape = Tape::no_grad();
        let p = StateVars::constant(&mut tape, prev);
        let (s, prior) = self.imagine_step(&mut tape, p, action, rng);
        (s.value(&tape), tape.value(prior).clone())
    }

    pub fn predict_reward(&self, state: &LatentState) -> Vec<f64> {
        let mut tape = Tape::no_grad();
        let f = tape.constant(state.features());
        let l = self.reward_logits(&mut tape, f);
        self.codec.decode_logits(tape.value(l))
    }

    pub fn predict_continuation(&self, state: &LatentState) -> Vec<f64> {
        let mut tape = Tape::no_grad();
        let f = tape.constant(state.features());
        let l = self.continuation_logit(&mut tape, f);
        tape.value(l).data().iter().map(|&x| crate::autodiff::sigmoid(x)).collect()
    }

    pub fn decode_state(&self, state: &LatentState) -> Tensor {
        let mut tape = Tape::no_grad();
        let f = tape.constant(state.features());
        let d = self.decode(&mut tape, f);
        tape.value(d).clone()
    }
}

/// Index drawn from a probability row.
pub fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
