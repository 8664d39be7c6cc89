//! Gradient checking, collapse metrics, linear probes, and the post-hoc decoder probe.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::behavior::ReturnScale;
use crate::config::{Config, EnvConfig, LatentSampling, LossConfig, NeMode, OptimConfig};
use crate::envs::{make_env, tmaze_actions, Environment, Observation};
use crate::error::{io_err, Error, Result};
use crate::nn::ConvDecoder;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::replay::SequenceBatch;
use crate::tensor::Tensor;
use crate::trainer::{stack_pixels, Agent};
use crate::worldmodel::LatentState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of `loss` against its tape gradient.
///
/// Stop-gradient values are held at their unperturbed values, so the
/// numeric derivative is that of the surrogate the tape differentiates.
/// At most `coords_per_tensor` coordinates of each tensor are perturbed
/// (all of them when the tensor is small enough); the choice is seeded.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, coords_per_tensor: usize, tolerance: f64, seed: u64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    finite_diff_check_in(store, |s| s, eps, coords_per_tensor, tolerance, seed, |t, s| loss(t, s))
}

/// Like [`finite_diff_check`] for a parameter store owned by a larger model.
pub fn finite_diff_check_in<T, G, F>(
    owner: &mut T,
    store: G,
    eps: f64,
    coords_per_tensor: usize,
    tolerance: f64,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    G: Fn(&mut T) -> &mut ParamStore,
    F: FnMut(&mut Tape, &T) -> Result<Var>,
{
    let mut tape = Tape::new().recording_detached();
    let l = loss(&mut tape, owner)?;
    let frozen = tape.take_detached();
    let base = tape.value(l).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss is {base}")));
    }
    let grads = tape.backward(l).for_store(store(owner));
    drop(tape);
    let mut eval = |owner: &T| -> Result<f64> {
        let mut tape = Tape::no_grad().replaying_detached(frozen.clone());
        let l = loss(&mut tape, owner)?;
        let v = tape.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("perturbed loss is {v}")))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        let len = g.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > coords_per_tensor {
            coords.shuffle(&mut rng);
            coords.truncate(coords_per_tensor);
        }
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = store(owner).values()[ti].data()[c];
            store(owner).values_mut()[ti].data_mut()[c] = orig + eps;
            let plus = eval(owner);
            store(owner).values_mut()[ti].data_mut()[c] = orig - eps;
            let minus = eval(owner);
            store(owner).values_mut()[ti].data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(g.data()[c], numeric));
        }
        let name = store(owner).name(crate::params::ParamId(ti)).to_string();
        tensors.push(TensorCheck { name, checked: coords.len(), max_rel_error: worst });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_error, tolerance, passed: max_rel_error < tolerance })
}

/// `exp` of the entropy of the normalised eigenvalue spectrum of the
/// population covariance of `x` (`[n, d]`, mean-subtracted).
pub fn effective_rank(x: &Tensor) -> Result<f64> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Precondition(format!("effective rank needs at least 2 rows, got {n}")));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let mut centred = m;
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let scale = x.data().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if total <= 1e-12 * scale * scale {
        return Ok(1.0);
    }
    let h: f64 = vals.iter().filter(|&&v| v > 0.0).map(|&v| v / total).map(|p| -p * p.ln()).sum();
    Ok(h.exp().clamp(1.0, d as f64))
}

/// Cross-validated accuracy of a multinomial logistic regression on frozen features.
pub fn linear_probe(features: &Tensor, labels: &[usize], folds: usize, seed: u64) -> Result<f64> {
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::ShapeMismatch { expected: vec![n], got: vec![labels.len()] });
    }
    if folds < 2 || n < folds {
        return Err(Error::Precondition(format!("linear probe needs 2 <= folds <= N, got folds={folds}, N={n}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::Precondition("linear probe needs at least two classes".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut correct = 0usize;
    for f in 0..folds {
        let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, &r)| r).collect();
        let train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, &r)| r).collect();
        let row = |r: usize| &features.data()[r * d..(r + 1) * d];
        // standardise with training statistics
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for &r in &train {
            row(r).iter().zip(&mut mean).for_each(|(x, m)| *m += x / train.len() as f64);
        }
        for &r in &train {
            row(r).iter().zip(&mean).zip(&mut std).for_each(|((x, m), s)| *s += (x - m).powi(2) / train.len() as f64);
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
        let norm = |r: usize| -> Vec<f64> { row(r).iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect() };
        let xs: Vec<Vec<f64>> = train.iter().map(|&r| norm(r)).collect();
        let (w, b) = fit_softmax(&xs, &train.iter().map(|&r| labels[r]).collect::<Vec<_>>(), classes);
        for &r in &test {
            let x = norm(r);
            let scores: Vec<f64> = (0..classes).map(|c| b[c] + w[c].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()).collect();
            let pred = (0..classes).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap_or(0);
            correct += usize::from(pred == labels[r]);
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Full-batch gradient descent on L2-regularised softmax regression.
fn fit_softmax(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    const STEPS: usize = 300;
    const LR: f64 = 0.5;
    const L2: f64 = 1e-3;
    let d = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    for _ in 0..STEPS {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(ys) {
            let s: Vec<f64> = (0..classes).map(|c| b[c] + w[c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / z - f64::from(u8::from(c == y));
                gb[c] += g / n;
                gw[c].iter_mut().zip(x).for_each(|(gi, xi)| *gi += g * xi / n);
            }
        }
        for c in 0..classes {
            b[c] -= LR * gb[c];
            for (wi, gi) in w[c].iter_mut().zip(&gw[c]) {
                *wi -= LR * (gi + L2 * *wi);
            }
        }
    }
    (w, b)
}

/// A recorded episode. `actions[t]` is taken after observing `frames[t]`;
/// `rewards[t]` and `continuations[t]` describe arriving at `frames[t]`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub frames: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<bool>,
    pub labels: Vec<Option<usize>>,
    pub decision: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Plays `episodes` episodes with `policy(env, observation)`.
pub fn collect_episodes<P>(env_cfg: &EnvConfig, episodes: usize, seed: u64, mut policy: P) -> Result<Vec<Episode>>
where
    P: FnMut(&dyn Environment, &Observation) -> usize,
{
    let mut env = make_env(env_cfg, seed)?;
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset(seed.wrapping_mul(0x9e37_79b9).wrapping_add(ep as u64));
        let mut e = Episode { frames: vec![], actions: vec![], rewards: vec![0.0], continuations: vec![true], labels: vec![], decision: vec![] };
        loop {
            let a = policy(env.as_ref(), &obs);
            e.labels.push(env.probe_label());
            e.decision.push(env.at_decision_point());
            e.frames.push(obs);
            e.actions.push(a);
            let res = env.step(a)?;
            obs = res.observation;
            e.rewards.push(res.reward);
            e.continuations.push(res.continuation);
            if !res.continuation {
                e.labels.push(env.probe_label());
                e.decision.push(env.at_decision_point());
                e.frames.push(obs);
                e.actions.push(0);
                break;
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// Walks the TMaze corridor and turns left at the junction, so every
/// episode visits the decision step regardless of any learned policy.
pub fn tmaze_walk(env: &dyn Environment, _obs: &Observation) -> usize {
    if env.at_decision_point() {
        tmaze_actions::LEFT
    } else {
        tmaze_actions::FORWARD
    }
}

/// Posterior states for every frame of an episode.
pub fn filter_episode(agent: &Agent, ep: &Episode, rng: &mut impl Rng) -> LatentState {
    let mut state = agent.wm.initial_state(1);
    let mut parts = Vec::with_capacity(ep.len());
    for (t, frame) in ep.frames.iter().enumerate() {
        let prev = if t == 0 { 0 } else { ep.actions[t - 1] };
        let (s, _, _) = agent.wm.observe(&state, &[prev], &[t == 0], &stack_pixels(&[frame]), rng);
        parts.push(s.clone());
        state = s;
    }
    LatentState::concat(&parts)
}

/// Deterministic-state features at decision steps with their labels.
pub fn decision_point_dataset(agent: &Agent, episodes: &[Episode], seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deter = agent.wm.dims().deter;
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for ep in episodes {
        let states = filter_episode(agent, ep, &mut rng);
        for t in 0..ep.len() {
            if let (true, Some(label)) = (ep.decision[t], ep.labels[t]) {
                rows.extend_from_slice(states.h.row(t));
                labels.push(label);
                break;
            }
        }
    }
    (Tensor::new(&[labels.len(), deter], rows), labels)
}

/// Cuts episodes into one stream of `length`-step windows.
pub fn episodes_to_batch(episodes: &[Episode], length: usize) -> Option<SequenceBatch> {
    let frames: Vec<(&Observation, usize, f64, bool, bool)> = episodes
        .iter()
        .flat_map(|e| (0..e.len()).map(move |t| (&e.frames[t], e.actions[t], e.rewards[t], e.continuations[t], t == 0)))
        .collect();
    let batch = frames.len() / length;
    if batch == 0 {
        return None;
    }
    let used = &frames[..batch * length];
    let obs: Vec<&Observation> = used.iter().map(|f| f.0).collect();
    let (h, w) = (obs[0].height, obs[0].width);
    let pixels = stack_pixels(&obs).reshape(&[batch, length, h, w, 3]);
    Some(SequenceBatch {
        batch,
        length,
        pixels,
        actions: used.iter().map(|f| f.1).collect(),
        rewards: used.iter().map(|f| f.2).collect(),
        continuations: used.iter().map(|f| f.3).collect(),
        is_first: used.iter().enumerate().map(|(i, f)| f.4 || i % length == 0).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprReport {
    pub diag_mean: Option<f64>,
    pub offdiag_rms: Option<f64>,
    pub effective_rank: f64,
    pub embed_dim: usize,
    pub probe_accuracy: Option<f64>,
    pub probe_samples: usize,
}

/// Collapse metrics and the decision-step probe on scripted TMaze-style episodes.
pub fn representation_report(agent: &Agent, episodes: &[Episode], seed: u64) -> Result<ReprReport> {
    let obs: Vec<&Observation> = episodes.iter().flat_map(|e| e.frames.iter()).collect();
    if obs.len() < 2 {
        return Err(Error::Precondition("representation report needs at least two frames".into()));
    }
    let embeddings = agent.wm.embed(&stack_pixels(&obs));
    let rank = effective_rank(&embeddings)?;
    let (mut diag_mean, mut offdiag_rms) = (None, None);
    if let Some(batch) = episodes_to_batch(episodes, agent.cfg.replay.batch_length) {
        let mut tape = Tape::no_grad();
        let out = agent.wm.loss(&mut tape, &batch, &mut ChaCha8Rng::seed_from_u64(seed))?;
        if let Some(ne) = out.ne.filter(|s| s.valid >= 2) {
            diag_mean = Some(ne.mean_diag);
            offdiag_rms = Some(ne.mean_off_diag_sq.sqrt());
        }
    }
    let (features, labels) = decision_point_dataset(agent, episodes, seed);
    let probe_accuracy = match linear_probe(&features, &labels, 5, seed) {
        Ok(a) => Some(a),
        Err(Error::Precondition(msg)) => {
            log::warn!("probe skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(ReprReport { diag_mean, offdiag_rms, effective_rank: rank, embed_dim: embeddings.cols(), probe_accuracy, probe_samples: labels.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderProbeReport {
    /// Mean squared pixel error by in-episode time step, on held-out episodes.
    pub mse_per_step: Vec<f64>,
    pub mean_mse: f64,
    pub steps: usize,
    pub wm_fingerprint_before: String,
    pub wm_fingerprint_after: String,
}

#[derive(Clone, Debug)]
pub struct DecoderProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout: usize,
    pub seed: u64,
}

impl Default for DecoderProbeConfig {
    fn default() -> Self {
        Self { steps: 5_000, batch_size: 32, lr: 1e-3, holdout: 4, seed: 0 }
    }
}

/// Trains a fresh pixel decoder on frozen posterior features `concat(h, z)`.
///
/// The world model is only read. When `out_dir` is given, a PNG grid with
/// ground-truth frames on the top row and reconstructions below is written
/// there along with a JSON report.
pub fn posthoc_decoder_probe(agent: &Agent, episodes: &[Episode], cfg: &DecoderProbeConfig, out_dir: Option<&Path>) -> Result<DecoderProbeReport> {
    if episodes.len() <= cfg.holdout || cfg.holdout == 0 {
        return Err(Error::Precondition(format!("decoder probe needs more than {} episodes, got {}", cfg.holdout, episodes.len())));
    }
    let before = agent.wm.params.fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let states: Vec<LatentState> = episodes.iter().map(|e| filter_episode(agent, e, &mut rng)).collect();
    let (train_eps, test_eps) = episodes.split_at(episodes.len() - cfg.holdout);
    let (train_states, test_states) = states.split_at(states.len() - cfg.holdout);
    let train_feats = LatentState::concat(train_states).features();
    let train_obs: Vec<&Observation> = train_eps.iter().flat_map(|e| e.frames.iter()).collect();
    let frame = dims_frame(agent);
    let train_px = stack_pixels(&train_obs).reshape(&[train_obs.len(), frame]);

    let dims = agent.wm.dims();
    let mut store = ParamStore::new();
    let decoder = ConvDecoder::new(&mut store, "probe.decoder", dims.feature(), dims.image, &agent.cfg.model.encoder_channels, &mut rng);
    let mut opt = Adam::new(&OptimConfig { lr: cfg.lr, eps: 1e-8, agc: f64::INFINITY, ..OptimConfig::default() }, &store);
    let n = train_feats.rows();
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let mut tape = Tape::new();
        let f = tape.constant(train_feats.select_rows(&idx));
        let target = tape.constant(train_px.select_rows(&idx).reshape(&[idx.len(), dims.image, dims.image, 3]));
        let pred = decoder.forward(&mut tape, &store, f);
        let diff = tape.sub(pred, target);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).for_store(&store);
        opt.step(&mut store, grads)?;
    }

    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut grid = None;
    for (ep, st) in test_eps.iter().zip(test_states) {
        let mut tape = Tape::no_grad();
        let f = tape.constant(st.features());
        let pred = decoder.forward(&mut tape, &store, f);
        let pred = tape.value(pred);
        let truth = stack_pixels(&ep.frames.iter().collect::<Vec<_>>());
        for t in 0..ep.len() {
            let mse = pred.data()[t * frame..(t + 1) * frame].iter().zip(&truth.data()[t * frame..(t + 1) * frame]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / frame as f64;
            if sums.len() <= t {
                sums.push((0.0, 0));
            }
            sums[t].0 += mse;
            sums[t].1 += 1;
        }
        if grid.is_none() {
            grid = Some((truth, pred.clone()));
        }
    }
    let mse_per_step: Vec<f64> = sums.iter().map(|(s, c)| s / *c as f64).collect();
    let total: f64 = sums.iter().map(|s| s.0).sum();
    let count: usize = sums.iter().map(|s| s.1).sum();
    let report = DecoderProbeReport {
        mse_per_step,
        mean_mse: total / count as f64,
        steps: cfg.steps,
        wm_fingerprint_before: before,
        wm_fingerprint_after: agent.wm.params.fingerprint(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        if let Some((truth, pred)) = grid {
            write_grid(&dir.join("posthoc_decoder.png"), &[&truth, &pred], dims.image, 16)?;
        }
        let p = dir.join("posthoc_decoder.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(io_err(&p))?;
    }
    Ok(report)
}

fn dims_frame(agent: &Agent) -> usize {
    let s = agent.wm.dims().image;
    s * s * 3
}

/// Writes rows of `[n, s, s, 3]` frames as one PNG, at most `max_cols` per row.
pub fn write_grid(path: &Path, rows: &[&Tensor], size: usize, max_cols: usize) -> Result<()> {
    let cols = rows.iter().map(|r| r.shape()[0]).min().unwrap_or(0).min(max_cols);
    let pad = 1;
    let (w, h) = (cols * (size + pad) + pad, rows.len() * (size + pad) + pad);
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    for (r, frames) in rows.iter().enumerate() {
        for c in 0..cols {
            for y in 0..size {
                for x in 0..size {
                    let i = ((c * size + y) * size + x) * 3;
                    let px: [u8; 3] = std::array::from_fn(|k| (frames.data()[i + k].clamp(0.0, 1.0) * 255.0).round() as u8);
                    img.put_pixel((pad + c * (size + pad) + x) as u32, (pad + r * (size + pad) + y) as u32, image::Rgb(px));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}

/// Tiny model sizes with deterministic latents, for gradient checks.
pub fn gradient_check_config(mode: NeMode) -> Config {
    let mut cfg = Config::default();
    cfg.env.image_size = 8;
    cfg.model.deter = 6;
    cfg.model.latents = 2;
    cfg.model.classes = 3;
    cfg.model.units = 6;
    cfg.model.embed_dim = 5;
    cfg.model.encoder_channels = vec![2, 3];
    cfg.model.latent_sampling = LatentSampling::Probs;
    cfg.loss.free_nats = 0.01;
    cfg.ne.mode = mode;
    cfg.ne.token_dim = 4;
    cfg.ne.heads = 2;
    cfg.ne.layers = 1;
    cfg.behavior.bins = 9;
    cfg.behavior.units = 6;
    cfg.behavior.layers = 1;
    cfg.behavior.horizon = 3;
    cfg.replay.batch_size = 2;
    cfg.replay.batch_length = 4;
    cfg
}

/// Random replay-shaped batch with one episode boundary per sequence.
pub fn random_batch(b: usize, t: usize, size: usize, actions: usize, rng: &mut impl Rng) -> SequenceBatch {
    let n = b * t;
    let mut continuations = vec![true; n];
    let mut is_first = vec![false; n];
    for bi in 0..b {
        let cut = rng.gen_range(1..t);
        continuations[bi * t + cut - 1] = false;
        is_first[bi * t + cut] = true;
    }
    SequenceBatch {
        batch: b,
        length: t,
        pixels: Tensor::from_fn(&[b, t, size, size, 3], |_| rng.gen_range(0.0..1.0)),
        actions: (0..n).map(|_| rng.gen_range(0..actions)).collect(),
        rewards: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        continuations,
        is_first,
    }
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Finite-difference checks of every trained objective on tiny shapes.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let (eps, tol, coords) = (GRADCHECK_EPS, GRADCHECK_TOLERANCE, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let pred = store.add("predicted", Tensor::from_fn(&[7, 3], |_| rng.gen_range(-1.0..1.0)));
    let target = Tensor::from_fn(&[7, 3], |_| rng.gen_range(-1.0..1.0));
    let rep = finite_diff_check(&mut store, eps, 64, tol, seed, |t, s| {
        let p = t.param(s, pred);
        let tg = t.constant(target.clone());
        Ok(crate::nepredictor::barlow_alignment_loss(t, p, tg, 0.3).0)
    })?;
    out.push(("barlow_alignment_loss".to_string(), rep));

    let loss_cfg = LossConfig { free_nats: 0.05, rep_scale: 0.3, ..LossConfig::default() };
    let mut store = ParamStore::new();
    let prior = store.add("prior_logits", Tensor::from_fn(&[6, 4], |_| rng.gen_range(-2.0..2.0)));
    let post = store.add("posterior_logits", Tensor::from_fn(&[6, 4], |_| rng.gen_range(-2.0..2.0)));
    let rep = finite_diff_check(&mut store, eps, 64, tol, seed, |t, s| {
        let p = t.param(s, prior);
        let p = t.log_softmax(p);
        let q = t.param(s, post);
        let q = t.log_softmax(q);
        let kl = crate::worldmodel::kl_loss(t, p, q, 2, &loss_cfg);
        Ok(t.mean(kl.loss))
    })?;
    out.push(("kl_loss".to_string(), rep));

    for mode in [NeMode::Full, NeMode::Reconstruction] {
        let cfg = gradient_check_config(mode);
        let mut agent = Agent::new(&cfg, 3, &mut rng)?;
        let batch = random_batch(2, 4, 8, 3, &mut rng);
        let rep = finite_diff_check_in(&mut agent.wm, |w| &mut w.params, eps, coords, tol, seed, |t, w| {
            w.loss(t, &batch, &mut ChaCha8Rng::seed_from_u64(0)).map(|o| o.loss)
        })?;
        out.push((format!("world_model_loss[{}]", mode.as_str()), rep));
    }

    let cfg = gradient_check_config(NeMode::Full);
    let mut agent = Agent::new(&cfg, 3, &mut rng)?;
    // give the critic and actor non-trivial outputs
    for store in [&mut agent.ac.actor, &mut agent.ac.critic, &mut agent.ac.slow_critic] {
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }
    let start = agent.wm.initial_state(3);
    let traj = agent.ac.imagine(&agent.wm, &start, 3, &mut rng)?;
    let mut scale = ReturnScale::from_config(&cfg.behavior);
    scale.value = 2.5;
    let rep = finite_diff_check_in(&mut agent.ac, |a| &mut a.critic, eps, coords * 4, tol, seed, |t, a| Ok(a.critic_loss(t, &traj)))?;
    out.push(("critic_loss".to_string(), rep));
    let rep = finite_diff_check_in(&mut agent.ac, |a| &mut a.actor, eps, coords * 4, tol, seed, |t, a| Ok(a.actor_loss(t, &traj, &scale)))?;
    out.push(("actor_loss".to_string(), rep));
    Ok(out)
}
