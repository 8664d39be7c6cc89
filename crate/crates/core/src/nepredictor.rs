//! Next-embedding prediction: a projector and causal transformer over RSSM
//! history, aligned with stop-gradient encoder targets by a Barlow Twins loss.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{NeConfig, NeMode};
use crate::error::{Error, Result};
use crate::nn::{Dense, Linear, Mlp, NORM_EPS};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Added to the per-dimension standard deviation before normalising.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Projector {
    Mlp(Dense, Linear),
    Linear(Linear),
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff_norm: ParamId,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
enum Sequence {
    Transformer { pos: ParamId, blocks: Vec<Block>, out_norm: ParamId, head: Linear },
    PerStep(Mlp),
}

#[derive(Clone, Debug)]
pub struct NePredictor {
    mode: NeMode,
    projector: Projector,
    action_embed: ParamId,
    sequence: Sequence,
    heads: usize,
    token_dim: usize,
    embed_dim: usize,
    max_len: usize,
    bt_lambda: f64,
}

/// Where each valid prediction row finds its target row.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub valid: Vec<bool>,
    /// For every `(b, t)` row, the row index holding its target embedding.
    pub target_row: Vec<usize>,
}

impl Targets {
    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(prediction rows, target rows)` over the valid set.
    pub fn pairs(&self) -> (Vec<usize>, Vec<usize>) {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| (i, self.target_row[i])).unzip()
    }
}

/// Summary of one alignment-loss evaluation.
#[derive(Clone, Debug, Default)]
pub struct NeStats {
    pub loss: f64,
    pub valid: usize,
    pub mean_diag: f64,
    pub mean_off_diag_sq: f64,
}

/// Valid-transition mask and target indices for `B x T` rows in batch-major order.
///
/// With `shifted`, row `(b, t)` targets `(b, t + 1)` and is valid when
/// `c(b, t)`, `t < T - 1` and not `is_first(b, t + 1)`. Otherwise it targets
/// itself and is valid when not `is_first(b, t)`.
pub fn build_targets(continuations: &[bool], is_first: &[bool], batch: usize, length: usize, shifted: bool) -> Result<Targets> {
    if continuations.len() != batch * length || is_first.len() != batch * length {
        return Err(Error::ShapeMismatch { expected: vec![batch, length], got: vec![continuations.len(), is_first.len()] });
    }
    if shifted && length < 2 {
        return Err(Error::Precondition(format!("next-step targets need T >= 2, got {length}")));
    }
    let n = batch * length;
    let mut valid = vec![false; n];
    let mut target_row = vec![0; n];
    for b in 0..batch {
        for t in 0..length {
            let i = b * length + t;
            if shifted {
                target_row[i] = if t + 1 < length { i + 1 } else { i };
                valid[i] = continuations[i] && t + 1 < length && !is_first[i + 1];
            } else {
                target_row[i] = i;
                valid[i] = !is_first[i];
            }
        }
    }
    Ok(Targets { valid, target_row })
}

/// Barlow Twins alignment of `[N, D]` predictions with `[N, D]` targets.
///
/// Returns `None` for the correlation matrix (and a zero loss) when `N < 2`.
pub fn barlow_alignment_loss(tape: &mut Tape, predicted: Var, target: Var, lambda: f64) -> (Var, Option<Tensor>) {
    let n = tape.value(predicted).rows();
    let d = tape.value(predicted).cols();
    assert_eq!(tape.shape(predicted), tape.shape(target));
    if n < 2 {
        log::warn!("alignment loss skipped: {n} valid transitions");
        let zero = tape.constant(Tensor::scalar(0.0));
        return (zero, None);
    }
    let p = standardize(tape, predicted);
    let t = standardize(tape, target);
    let c = tape.matmul_t(p, t, true, false);
    let c = tape.scale(c, 1.0 / n as f64);
    let diag = tape.diag(c);
    let one_minus = tape.add_scalar(diag, -1.0);
    let on = tape.square(one_minus);
    let on = tape.sum(on);
    let all_sq = tape.square(c);
    let all_sq = tape.sum(all_sq);
    let diag_sq = tape.square(diag);
    let diag_sq = tape.sum(diag_sq);
    let off = tape.sub(all_sq, diag_sq);
    let off = tape.scale(off, lambda);
    let loss = tape.add(on, off);
    let cm = tape.value(c).clone();
    debug_assert_eq!(cm.shape(), &[d, d]);
    (loss, Some(cm))
}

/// Zero mean, unit (population) variance per column.
fn standardize(tape: &mut Tape, x: Var) -> Var {
    let mean = tape.mean_rows(x);
    let centred = tape.sub_row(x, mean);
    let sq = tape.square(centred);
    let var = tape.mean_rows(sq);
    let std = tape.sqrt(var);
    let std = tape.add_scalar(std, STD_EPS);
    tape.div_row(centred, std)
}

impl NePredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &NeConfig,
        state_dim: usize,
        num_actions: usize,
        embed_dim: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mode = cfg.mode;
        if mode == NeMode::Reconstruction {
            return Err(Error::InvalidMode("reconstruction has no next-embedding predictor".into()));
        }
        let d = cfg.token_dim;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("token_dim {d} not divisible by {} heads", cfg.heads)));
        }
        let projector = if mode == NeMode::NoProjector {
            Projector::Linear(Linear::new(store, &format!("{name}.proj"), state_dim, d, true, Init::FanAvg(1.0), rng))
        } else {
            let hidden = Dense::new(store, &format!("{name}.proj.h0"), state_dim, d, rng);
            let out = Linear::new(store, &format!("{name}.proj.out"), d, d, true, Init::FanAvg(1.0), rng);
            Projector::Mlp(hidden, out)
        };
        let action_embed = store.add(format!("{name}.action_embed"), Init::FanAvg(1.0).tensor(&[num_actions, d], num_actions, d, rng));
        let sequence = if mode == NeMode::NoTransformer {
            Sequence::PerStep(Mlp::new(store, &format!("{name}.mlp"), d, d, 2, embed_dim, Init::FanAvg(1.0), rng))
        } else {
            let pos = store.add(format!("{name}.pos"), Init::FanAvg(0.1).tensor(&[max_len, d], max_len, d, rng));
            let blocks = (0..cfg.layers)
                .map(|i| {
                    let p = format!("{name}.block{i}");
                    Block {
                        attn_norm: store.add(format!("{p}.attn_norm"), Tensor::full(&[d], 1.0)),
                        q: Linear::new(store, &format!("{p}.q"), d, d, false, Init::FanAvg(1.0), rng),
                        k: Linear::new(store, &format!("{p}.k"), d, d, false, Init::FanAvg(1.0), rng),
                        v: Linear::new(store, &format!("{p}.v"), d, d, false, Init::FanAvg(1.0), rng),
                        o: Linear::new(store, &format!("{p}.o"), d, d, false, Init::FanAvg(1.0), rng),
                        ff_norm: store.add(format!("{p}.ff_norm"), Tensor::full(&[d], 1.0)),
                        ff1: Linear::new(store, &format!("{p}.ff1"), d, 2 * d, true, Init::FanAvg(1.0), rng),
                        ff2: Linear::new(store, &format!("{p}.ff2"), 2 * d, d, true, Init::FanAvg(1.0), rng),
                    }
                })
                .collect();
            let out_norm = store.add(format!("{name}.out_norm"), Tensor::full(&[d], 1.0));
            let head = Linear::new(store, &format!("{name}.head"), d, embed_dim, true, Init::FanAvg(1.0), rng);
            Sequence::Transformer { pos, blocks, out_norm, head }
        };
        Ok(Self { mode, projector, action_embed, sequence, heads: cfg.heads, token_dim: d, embed_dim, max_len, bt_lambda: cfg.bt_lambda })
    }

    pub fn mode(&self) -> NeMode {
        self.mode
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Scalar count of the projector (excluding the action table).
    pub fn projector_scalars(&self) -> usize {
        match &self.projector {
            Projector::Linear(l) => l.num_scalars(),
            Projector::Mlp(h, o) => h.linear.num_scalars() + self.token_dim + o.num_scalars(),
        }
    }

    /// Tokens `[n, D_tok]` from states `(h, z)` and the action taken at each state.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, h: Var, z: Var, actions: &[usize]) -> Var {
        let s = tape.concat_cols(&[h, z]);
        let base = match &self.projector {
            Projector::Linear(l) => l.forward(tape, store, s),
            Projector::Mlp(hidden, out) => {
                let x = hidden.forward(tape, store, s);
                out.forward(tape, store, x)
            }
        };
        let table = tape.param(store, self.action_embed);
        let emb = tape.gather_rows(table, actions);
        tape.add(base, emb)
    }

    /// Predicted next embeddings `[B*T, D_e]` for batch-major tokens; row
    /// `(b, t)` sees only tokens `(b, 0..=t)`.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, batch: usize, length: usize) -> Var {
        assert_eq!(tape.value(tokens).rows(), batch * length);
        match &self.sequence {
            Sequence::PerStep(mlp) => mlp.forward(tape, store, tokens),
            Sequence::Transformer { pos, blocks, out_norm, head } => {
                assert!(length <= self.max_len, "sequence length {length} exceeds positional table {}", self.max_len);
                let table = tape.param(store, *pos);
                let idx: Vec<usize> = (0..batch * length).map(|i| i % length).collect();
                let p = tape.gather_rows(table, &idx);
                let mut x = tape.add(tokens, p);
                for block in blocks {
                    x = self.block(tape, store, block, x, batch, length);
                }
                let s = tape.param(store, *out_norm);
                let x = tape.rms_norm(x, s, NORM_EPS);
                head.forward(tape, store, x)
            }
        }
    }

    fn block(&self, tape: &mut Tape, store: &ParamStore, b: &Block, x: Var, batch: usize, length: usize) -> Var {
        let d = self.token_dim;
        let nh = self.heads;
        let dh = d / nh;
        let s = tape.param(store, b.attn_norm);
        let n = tape.rms_norm(x, s, NORM_EPS);
        let split = |tape: &mut Tape, v: Var| {
            let v = tape.reshape(v, &[batch, length, nh, dh]);
            let v = tape.permute_0213(v, [batch, length, nh, dh]);
            tape.reshape(v, &[batch * nh, length, dh])
        };
        let q = b.q.forward(tape, store, n);
        let k = b.k.forward(tape, store, n);
        let v = b.v.forward(tape, store, n);
        let (q, k, v) = (split(tape, q), split(tape, k), split(tape, v));
        let scores = tape.bmm(q, k, false, true);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.causal_softmax(scores);
        let ctx = tape.bmm(att, v, false, false);
        let ctx = tape.reshape(ctx, &[batch, nh, length, dh]);
        let ctx = tape.permute_0213(ctx, [batch, nh, length, dh]);
        let ctx = tape.reshape(ctx, &[batch * length, d]);
        let a = b.o.forward(tape, store, ctx);
        let x = tape.add(x, a);
        let s = tape.param(store, b.ff_norm);
        let n = tape.rms_norm(x, s, NORM_EPS);
        let f = b.ff1.forward(tape, store, n);
        let f = tape.silu(f);
        let f = b.ff2.forward(tape, store, f);
        tape.add(x, f)
    }

    /// Full alignment loss for batch-major `B x T` states and embeddings.
    /// Targets are detached; gradients reach the encoder only through `h`, `z`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        z: Var,
        actions: &[usize],
        embeddings: Var,
        continuations: &[bool],
        is_first: &[bool],
        batch: usize,
        length: usize,
    ) -> Result<(Var, NeStats)> {
        let targets = build_targets(continuations, is_first, batch, length, self.mode != NeMode::NoShift)?;
        let tokens = self.project(tape, store, h, z, actions);
        let pred = self.predict(tape, store, tokens, batch, length);
        let (pi, ti) = targets.pairs();
        let target_all = tape.detach(embeddings);
        let p = tape.gather_rows(pred, &pi);
        let t = tape.gather_rows(target_all, &ti);
        let (loss, c) = barlow_alignment_loss(tape, p, t, self.bt_lambda);
        let mut stats = NeStats { loss: tape.value(loss).item(), valid: pi.len(), ..Default::default() };
        if let Some(c) = c {
            let d = c.cols();
            let diag: f64 = (0..d).map(|i| c.data()[i * d + i]).sum();
            let all: f64 = c.data().iter().map(|v| v * v).sum();
            let diag_sq: f64 = (0..d).map(|i| c.data()[i * d + i].powi(2)).sum();
            stats.mean_diag = diag / d as f64;
            stats.mean_off_diag_sq = (all - diag_sq) / (d * d - d).max(1) as f64;
        }
        Ok((loss, stats))
    }
}
