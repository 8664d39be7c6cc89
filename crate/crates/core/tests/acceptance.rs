//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 and 10 are self-contained and decide the exit status.
//! Criteria 7-9 judge trained ablation runs. They read the output root of
//! `nedreamer ablate` from `NEDREAMER_ABLATION_DIR` (default
//! `<workspace>/artifacts/ablation`) and report FAIL when the runs are
//! missing or miss a threshold. Set `NEDREAMER_ACCEPTANCE_STRICT=1` to make
//! those three count towards the exit status too.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nedreamer::behavior::{lambda_returns, ActorCritic};
use nedreamer::checkpoint;
use nedreamer::config::{Config, LossConfig, NeConfig, NeMode};
use nedreamer::diagnostics::{self, representation_report};
use nedreamer::nepredictor::{barlow_alignment_loss, build_targets, NePredictor};
use nedreamer::replay::{ReplayBuffer, TransitionRecord};
use nedreamer::trainer::{self, read_metrics, MetricsRecord, CONFIG_SNAPSHOT, METRICS_FILE};
use nedreamer::twohot::TwoHot;
use nedreamer::worldmodel::{kl_loss, WorldModel};
use nedreamer::{Error, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- criterion 1

const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let suite = diagnostics::gradcheck_suite(7).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for required in ["barlow_alignment_loss", "kl_loss", "world_model_loss", "critic_loss", "actor_loss"] {
        ensure!(suite.iter().any(|(n, _)| n.starts_with(required)), "no check for {required}");
    }
    for (name, report) in &suite {
        ensure!(report.tensors.iter().all(|t| t.checked > 0), "{name}: a tensor had no sampled coordinates");
        ensure!(report.max_rel_error < GRAD_TOL, "{name}: max relative error {:.3e} >= {GRAD_TOL:e}", report.max_rel_error);
        worst = worst.max(report.max_rel_error);
    }
    ensure!(elapsed < GRAD_BUDGET, "took {:.1}s, budget {}s", elapsed.as_secs_f64(), GRAD_BUDGET.as_secs());
    Ok(format!("{} objectives, worst relative error {worst:.2e}, {:.1}s", suite.len(), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

const CAUSAL_BUDGET: Duration = Duration::from_secs(60);

fn causality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for instance in 0..100 {
        let (h_dim, z_dim) = (rng.gen_range(1..6), rng.gen_range(1..4));
        let (actions, embed) = (rng.gen_range(2..5), rng.gen_range(2..6));
        let heads = rng.gen_range(1..=2);
        let cfg = NeConfig { mode: NeMode::Full, token_dim: 4 * heads, heads, layers: rng.gen_range(1..=2), ..NeConfig::default() };
        let b = rng.gen_range(1..=3);
        let t = rng.gen_range(2..=16);
        let mut store = ParamStore::new();
        let ne = NePredictor::new(&mut store, "ne", &cfg, h_dim + z_dim, actions, embed, 16, &mut rng).map_err(|e| e.to_string())?;
        let h = Tensor::from_fn(&[b * t, h_dim], |_| rng.gen_range(-2.0..2.0));
        let z = Tensor::from_fn(&[b * t, z_dim], |_| rng.gen_range(0.0..1.0));
        let a: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..actions)).collect();
        let run = |h: &Tensor, z: &Tensor, a: &[usize]| {
            let mut tape = Tape::no_grad();
            let (hv, zv) = (tape.constant(h.clone()), tape.constant(z.clone()));
            let tok = ne.project(&mut tape, &store, hv, zv, a);
            let out = ne.predict(&mut tape, &store, tok, b, t);
            tape.value(out).clone()
        };
        let base = run(&h, &z, &a);
        let cut = rng.gen_range(0..t);
        let (mut h2, mut z2, mut a2) = (h.clone(), z.clone(), a.clone());
        for bi in 0..b {
            for ti in cut + 1..t {
                let r = bi * t + ti;
                let hc = h2.cols();
                h2.data_mut()[r * hc..(r + 1) * hc].iter_mut().for_each(|v| *v = rng.gen_range(-50.0..50.0));
                let zc = z2.cols();
                z2.data_mut()[r * zc..(r + 1) * zc].iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
                a2[r] = rng.gen_range(0..actions);
            }
        }
        let pert = run(&h2, &z2, &a2);
        for bi in 0..b {
            for ti in 0..=cut {
                let r = bi * t + ti;
                let same = base.row(r).iter().zip(pert.row(r)).all(|(x, y)| x.to_bits() == y.to_bits());
                ensure!(same, "instance {instance}: row (b={bi}, t={ti}) changed after perturbing t > {cut}");
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < CAUSAL_BUDGET, "took {:.1}s, budget {}s", elapsed.as_secs_f64(), CAUSAL_BUDGET.as_secs());
    Ok(format!("100 instances bit-identical, {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 3

fn all_zero(t: Option<&Tensor>) -> bool {
    t.is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
}

fn any_nonzero(t: Option<&Tensor>) -> bool {
    t.is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
}

fn tiny_config() -> Config {
    diagnostics::gradient_check_config(NeMode::Full)
}

fn stop_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Next-step targets.
    let cfg = NeConfig { token_dim: 4, heads: 2, layers: 1, ..NeConfig::default() };
    let mut store = ParamStore::new();
    let ne = NePredictor::new(&mut store, "ne", &cfg, 5, 3, 4, 8, &mut rng).map_err(|e| e.to_string())?;
    let (b, t) = (2, 5);
    let mut tape = Tape::new();
    let h = tape.input(Tensor::from_fn(&[b * t, 3], |_| rng.gen_range(-1.0..1.0)));
    let z = tape.input(Tensor::from_fn(&[b * t, 2], |_| rng.gen_range(0.0..1.0)));
    let e = tape.input(Tensor::from_fn(&[b * t, 4], |_| rng.gen_range(-1.0..1.0)));
    let a: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..3)).collect();
    let (loss, _) = ne.loss(&mut tape, &store, h, z, &a, e, &vec![true; b * t], &vec![false; b * t], b, t).map_err(|e| e.to_string())?;
    let g = tape.backward(loss);
    ensure!(all_zero(g.wrt(e)), "target embeddings received gradient");
    ensure!(any_nonzero(g.wrt(h)), "no gradient reached the model state");

    // Both stop-gradient halves of the KL.
    let logp = |rng: &mut ChaCha8Rng| {
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(&[2, 3], nedreamer::kernels::log_softmax_rows(&x, 3))
    };
    let (prior_t, post_t) = (logp(&mut rng), logp(&mut rng));
    for (term, frozen) in [("dynamics", "posterior"), ("representation", "prior")] {
        let mut tape = Tape::new();
        let prior = tape.input(prior_t.clone());
        let post = tape.input(post_t.clone());
        let kl = kl_loss(&mut tape, prior, post, 2, &LossConfig::default());
        let (out, stopped, live): (Var, Var, Var) =
            if term == "dynamics" { (kl.dynamics, post, prior) } else { (kl.representation, prior, post) };
        let sum = tape.sum(out);
        let g = tape.backward(sum);
        ensure!(all_zero(g.wrt(stopped)), "{term} KL sent gradient to the {frozen}");
        ensure!(any_nonzero(g.wrt(live)), "{term} KL has no live gradient");
    }

    // Advantages: the actor objective must not reach the critic or world model.
    let cfg = tiny_config();
    let mut wm = WorldModel::new(&cfg, 3, &mut rng).map_err(|e| e.to_string())?;
    let mut ac = ActorCritic::new(&cfg.behavior, &cfg.optim, wm.dims().feature(), 3, &mut rng);
    // Zero-initialised heads give identically zero advantages; move off that point.
    for store in [&mut wm.params, &mut ac.actor, &mut ac.critic] {
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }
    let traj = ac.imagine(&wm, &wm.initial_state(2), cfg.behavior.horizon, &mut rng).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let l = ac.actor_loss(&mut tape, &traj, &ac.return_scale);
    let g = tape.backward(l);
    for (label, store) in [("critic", &ac.critic), ("slow critic", &ac.slow_critic), ("world model", &wm.params)] {
        ensure!(store.ids().all(|id| all_zero(g.param(store, id))), "actor loss sent gradient to the {label}");
    }
    ensure!(ac.actor.ids().any(|id| any_nonzero(g.param(&ac.actor, id))), "actor received no gradient");
    Ok("targets, both KL halves, and advantages carry exactly zero gradient".into())
}

// ---------------------------------------------------------------- criterion 4

/// Unrolled form of `R_t = r_t + γc_t((1-λ)v_{t+1} + λR_{t+1})` with `R_H = v_H`.
fn expanded_return(r: &[f64], c: &[f64], v: &[f64], gamma: f64, lambda: f64, t: usize) -> f64 {
    let h = r.len();
    let mut total = 0.0;
    let mut coef = 1.0;
    for k in t..h {
        total += coef * (r[k] + gamma * c[k] * (1.0 - lambda) * v[k + 1]);
        coef *= gamma * c[k] * lambda;
    }
    total + coef * v[h]
}

fn loop_alignment_loss(p: &[f64], t: &[f64], n: usize, d: usize, lambda: f64) -> f64 {
    let norm = |x: &[f64]| {
        let mut out = vec![0.0; n * d];
        for j in 0..d {
            let mut mean = 0.0;
            for i in 0..n {
                mean += x[i * d + j];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                var += (x[i * d + j] - mean) * (x[i * d + j] - mean);
            }
            let std = (var / n as f64).sqrt() + 1e-8;
            for i in 0..n {
                out[i * d + j] = (x[i * d + j] - mean) / std;
            }
        }
        out
    };
    let (pn, tn) = (norm(p), norm(t));
    let mut loss = 0.0;
    for a in 0..d {
        for b in 0..d {
            let mut c = 0.0;
            for i in 0..n {
                c += pn[i * d + a] * tn[i * d + b];
            }
            c /= n as f64;
            if a == b {
                loss += (1.0 - c) * (1.0 - c);
            } else {
                loss += lambda * c * c;
            }
        }
    }
    loss
}

fn alignment_value(p: &[f64], t: &[f64], n: usize, d: usize, lambda: f64) -> f64 {
    let mut tape = Tape::no_grad();
    let pv = tape.constant(Tensor::new(&[n, d], p.to_vec()));
    let tv = tape.constant(Tensor::new(&[n, d], t.to_vec()));
    let (l, _) = barlow_alignment_loss(&mut tape, pv, tv, lambda);
    tape.value(l).item()
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ret = 0.0f64;
    for i in 0..1000 {
        let h = rng.gen_range(1..=8);
        let r: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..h).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.5..1.0) }).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (g, l) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let got = lambda_returns(&r, &c, &v, g, l).map_err(|e| e.to_string())?;
        for t in 0..h {
            let err = (got[t] - expanded_return(&r, &c, &v, g, l, t)).abs();
            worst_ret = worst_ret.max(err);
            ensure!(err < 1e-9, "instance {i} t={t}: λ-return error {err:e}");
        }
    }
    let mut worst_bt = 0.0f64;
    for i in 0..200 {
        let n = rng.gen_range(2..20);
        let d = rng.gen_range(1..6);
        let p: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lambda = if i % 2 == 0 { 5e-4 } else { rng.gen_range(0.0..1.0) };
        let err = (alignment_value(&p, &t, n, d, lambda) - loop_alignment_loss(&p, &t, n, d, lambda)).abs();
        worst_bt = worst_bt.max(err);
        ensure!(err < 1e-6, "alignment instance {i}: error {err:e}");
    }
    let codec = TwoHot::new(255, 20.0);
    let mut worst_th = 0.0f64;
    for _ in 0..1000 {
        let v = rng.gen_range(-20.0..20.0);
        let mut probs = vec![0.0; codec.len()];
        for (k, w) in codec.encode(v) {
            probs[k] += w;
        }
        let err = (codec.decode(&probs) - v).abs();
        worst_th = worst_th.max(err);
        ensure!(err < 1e-6, "twohot round trip of {v}: error {err:e}");
    }
    Ok(format!("max errors: λ-return {worst_ret:.1e}, alignment {worst_bt:.1e}, twohot {worst_th:.1e}"))
}

// ---------------------------------------------------------------- criterion 5

fn hand_values() -> Outcome {
    let bt = alignment_value(&[1.0, -1.0], &[-1.0, 1.0], 2, 1, 5e-4);
    // With the std epsilon the correlation is -1/(1+ε)².
    let c = -1.0 / (1.0f64 + 1e-8).powi(2);
    let bt_exact = (1.0 - c) * (1.0 - c);
    ensure!((bt - bt_exact).abs() < 1e-12 && (bt - 4.0).abs() < 1e-6, "alignment loss {bt}, want 4");
    let r = lambda_returns(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 1.0, 2.0], 0.85, 0.95).map_err(|e| e.to_string())?;
    ensure!((r[1] - 2.7).abs() < 1e-12 && (r[0] - 3.22275).abs() < 1e-12, "λ-returns {r:?}");
    let mut tape = Tape::no_grad();
    let lp = Tensor::new(&[1, 2], vec![0.3f64.ln(), 0.7f64.ln()]);
    let prior = tape.constant(lp.clone());
    let post = tape.constant(lp);
    let kl = kl_loss(&mut tape, prior, post, 1, &LossConfig::default());
    let klv = tape.value(kl.loss).item();
    ensure!((klv - 1.1).abs() < 1e-12, "kl loss {klv}, want 1.1");
    Ok(format!("alignment {bt:.10}, λ-return {:.5}, kl {klv}", r[0]))
}

// ---------------------------------------------------------------- criterion 6

fn closed_form_count(cont: &[bool], first: &[bool], b: usize, t: usize, shifted: bool) -> usize {
    if shifted {
        // B(T-1) candidate pairs minus those broken by termination or a reset.
        let broken = (0..b).flat_map(|bi| (0..t - 1).map(move |ti| bi * t + ti)).filter(|&i| !cont[i] || first[i + 1]).count();
        b * (t - 1) - broken
    } else {
        b * t - first.iter().filter(|&&f| f).count()
    }
}

fn masks() -> Outcome {
    let mut patterns = 0usize;
    // Every continuation/reset pattern for all shapes with B*T <= 6.
    for b in 1..=6 {
        for t in 1..=6 / b {
            let n = b * t;
            for bits in 0u32..(1 << (2 * n)) {
                let cont: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                let first: Vec<bool> = (0..n).map(|i| bits >> (n + i) & 1 == 1).collect();
                for shifted in [true, false] {
                    if shifted && t < 2 {
                        ensure!(build_targets(&cont, &first, b, t, true).is_err(), "T=1 shifted targets accepted");
                        continue;
                    }
                    let got = build_targets(&cont, &first, b, t, shifted).map_err(|e| e.to_string())?.count();
                    ensure!(got == closed_form_count(&cont, &first, b, t, shifted), "B={b} T={t} pattern {bits:b}");
                    patterns += 1;
                }
            }
        }
    }
    // Random patterns for every shape up to B*T = 64.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for b in 1..=64 {
        for t in 2..=64 / b {
            for _ in 0..20 {
                let n = b * t;
                let p_end = rng.gen_range(0.0..1.0);
                let cont: Vec<bool> = (0..n).map(|_| !rng.gen_bool(p_end)).collect();
                let first: Vec<bool> = (0..n).map(|_| rng.gen_bool(p_end)).collect();
                for shifted in [true, false] {
                    let got = build_targets(&cont, &first, b, t, shifted).map_err(|e| e.to_string())?.count();
                    ensure!(got == closed_form_count(&cont, &first, b, t, shifted), "random B={b} T={t}");
                    patterns += 1;
                }
            }
        }
    }
    Ok(format!("{patterns} patterns match"))
}

// ---------------------------------------------------------------- criterion 10

fn tiny_run_config() -> Config {
    let overrides: Vec<String> = [
        "seed=5",
        "env.corridor_len=2",
        "env.image_size=8",
        "env.max_episode_steps=12",
        "model.embed_dim=6",
        "model.deter=6",
        "model.latents=2",
        "model.classes=3",
        "model.units=6",
        "model.encoder_channels=[2, 3]",
        "ne.token_dim=4",
        "ne.heads=2",
        "ne.layers=1",
        "behavior.units=6",
        "behavior.layers=1",
        "behavior.bins=9",
        "behavior.horizon=3",
        "replay.batch_size=2",
        "replay.batch_length=4",
        "train.total_env_steps=40",
        "train.train_ratio=2",
        "train.env_instances=2",
        "train.eval_every=0",
        "train.eval_episodes=2",
        "train.checkpoint_every=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    Config::from_str_with_overrides("", &overrides).expect("tiny config")
}

fn engineering() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tiny_run_config();
    let run = dir.path().join("run");
    let summary = trainer::train(&cfg, &run).map_err(|e| e.to_string())?;

    // Checkpoint round trip.
    let ckpt = trainer::checkpoint_path(&run, summary.env_steps);
    let a = trainer::evaluate_checkpoint(&ckpt, None, 6, 11).map_err(|e| e.to_string())?;
    let b = trainer::evaluate_checkpoint(&ckpt, None, 6, 11).map_err(|e| e.to_string())?;
    ensure!(a == b, "evaluation differs between loads: {a:?} vs {b:?}");
    let (agent, step) = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    let resaved = dir.path().join("again.ckpt");
    checkpoint::save(&resaved, &agent, step).map_err(|e| e.to_string())?;
    ensure!(std::fs::read(&ckpt).ok() == std::fs::read(&resaved).ok(), "re-saved checkpoint differs");
    let direct = trainer::evaluate(&agent, &agent.cfg.env, 6, 11).map_err(|e| e.to_string())?;
    ensure!(direct == a, "in-memory evaluation differs from checkpoint evaluation");

    // Config round trip through the run snapshot.
    let snap = std::fs::read_to_string(run.join(CONFIG_SNAPSHOT)).map_err(|e| e.to_string())?;
    let reparsed = Config::from_str_with_overrides(&snap, &[]).map_err(|e| e.to_string())?;
    ensure!(reparsed == cfg && reparsed.to_toml() == snap, "snapshot does not re-parse to the same config");

    // Uniform sampling over valid chunk starts.
    let mut buf = ReplayBuffer::new(10_000, 3, 1, 1);
    let lens = [25usize, 14, 40];
    for (s, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let rec = TransitionRecord { pixels: vec![0, 0, 0], action: s * 1000 + i, reward: 0.0, continuation: true, is_first: i == 0 };
            buf.append(s, rec).map_err(|e| e.to_string())?;
        }
    }
    let t = 6;
    let k: usize = lens.iter().map(|l| l - t + 1).sum();
    let n = 20_000;
    let batch = buf.sample(n, t, &mut ChaCha8Rng::seed_from_u64(10)).map_err(|e| e.to_string())?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for bi in 0..n {
        *counts.entry(batch.actions[bi * t]).or_default() += 1;
    }
    ensure!(counts.len() == k, "{} distinct starts, want {k}", counts.len());
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let worst = counts.values().map(|&c| ((c as f64 / n as f64 - p) / sigma).abs()).fold(0.0, f64::max);
    ensure!(worst <= 5.0, "start frequency {worst:.2}σ from uniform");

    // Unknown keys are rejected with a suggestion, from overrides and files.
    match Config::from_str_with_overrides("", &["ne.moed=full".into()]) {
        Err(Error::UnknownKey { key, suggestion }) => ensure!(key == "ne.moed" && suggestion.as_deref() == Some("ne.mode"), "bad suggestion {suggestion:?}"),
        other => return Err(format!("unknown override accepted: {:?}", other.map(|_| ()))),
    }
    ensure!(
        matches!(Config::from_str_with_overrides("[train]\ntotal_env_stepz = 3\n", &[]), Err(Error::UnknownKey { .. })),
        "unknown file key accepted"
    );
    Ok(format!("checkpoint, config, replay (worst {worst:.2}σ), unknown keys"))
}

// ---------------------------------------------------------- criteria 7, 8, 9

const MODES: [&str; 4] = ["full", "no_shift", "no_transformer", "no_projector"];
const SEEDS_REQUIRED: usize = 5;
const STEPS_REQUIRED: u64 = 200_000;

struct Run {
    seed: u64,
    dir: PathBuf,
    cfg: Config,
    metrics: Vec<MetricsRecord>,
}

impl Run {
    fn final_success(&self) -> Option<f64> {
        self.metrics.iter().rev().find(|r| r.kind == "eval").and_then(|r| r.values.get("success_rate").copied())
    }

    fn last_checkpoint(&self) -> Option<PathBuf> {
        let entries = std::fs::read_dir(self.dir.join("checkpoints")).ok()?;
        entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let step = p.file_stem()?.to_str()?.strip_prefix("step_")?.parse::<u64>().ok()?;
                Some((step, p))
            })
            .max_by_key(|(s, _)| *s)
            .map(|(_, p)| p)
    }
}

fn ablation_root() -> PathBuf {
    std::env::var_os("NEDREAMER_ABLATION_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("workspace root");
            workspace.join("artifacts").join("ablation")
        })
}

/// Finished runs of `mode` under an ablation output root.
fn load_runs(root: &Path, mode: &str) -> Result<Vec<Run>, String> {
    let dir = root.join("runs").join(mode);
    let entries = std::fs::read_dir(&dir).map_err(|_| format!("no runs at {}", dir.display()))?;
    let mut runs = Vec::new();
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        if !path.join("summary.json").exists() {
            continue;
        }
        let text = std::fs::read_to_string(path.join(CONFIG_SNAPSHOT)).map_err(|e| e.to_string())?;
        let cfg = Config::from_str_with_overrides(&text, &[]).map_err(|e| e.to_string())?;
        let metrics = read_metrics(&path.join(METRICS_FILE)).map_err(|e| e.to_string())?;
        runs.push(Run { seed: cfg.seed, dir: path, cfg, metrics });
    }
    runs.sort_by_key(|r| r.seed);
    Ok(runs)
}

fn check_protocol(mode: &str, runs: &[Run]) -> Result<(), String> {
    ensure!(runs.len() >= SEEDS_REQUIRED, "{mode}: {} finished runs, need {SEEDS_REQUIRED}", runs.len());
    for r in runs {
        ensure!(r.cfg.ne.mode.as_str() == mode, "{}: mode {}", r.dir.display(), r.cfg.ne.mode);
        ensure!(r.cfg.env.name == "tmaze" && r.cfg.env.corridor_len == 10, "{}: not TMaze(L=10)", r.dir.display());
        ensure!(r.cfg.train.total_env_steps >= STEPS_REQUIRED, "{}: {} env steps, need {STEPS_REQUIRED}", r.dir.display(), r.cfg.train.total_env_steps);
    }
    Ok(())
}

fn all_modes(root: &Path) -> Result<BTreeMap<&'static str, Vec<Run>>, String> {
    let mut out = BTreeMap::new();
    for mode in MODES {
        let runs = load_runs(root, mode)?;
        check_protocol(mode, &runs)?;
        out.insert(mode, runs);
    }
    Ok(out)
}

fn success_ordering(root: &Path) -> Outcome {
    let runs = all_modes(root)?;
    let finals = |m: &str| -> Vec<f64> { runs[m].iter().map(|r| r.final_success().unwrap_or(0.0)).collect() };
    let count = |v: &[f64], f: &dyn Fn(f64) -> bool| v.iter().filter(|&&x| f(x)).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (full, shift, trans, proj) = (finals("full"), finals("no_shift"), finals("no_transformer"), finals("no_projector"));
    let summary = format!(
        "final success mean: full {:.2}, no_shift {:.2}, no_transformer {:.2}, no_projector {:.2}",
        mean(&full),
        mean(&shift),
        mean(&trans),
        mean(&proj)
    );
    let need = SEEDS_REQUIRED - 1;
    ensure!(count(&full, &|x| x >= 0.9) >= need, "full >= 90% on {}/{} seeds; {summary}", count(&full, &|x| x >= 0.9), full.len());
    ensure!(count(&shift, &|x| x <= 0.6) >= need, "no_shift <= 60% on {}/{} seeds; {summary}", count(&shift, &|x| x <= 0.6), shift.len());
    ensure!(count(&trans, &|x| x <= 0.6) >= need, "no_transformer <= 60% on {}/{} seeds; {summary}", count(&trans, &|x| x <= 0.6), trans.len());
    ensure!(mean(&full) - mean(&proj) <= 0.15, "no_projector trails full by {:.2}; {summary}", mean(&full) - mean(&proj));
    Ok(summary)
}

fn probe_episodes(cfg: &Config) -> Result<Vec<diagnostics::Episode>, String> {
    diagnostics::collect_episodes(&cfg.env, 64, 2024, diagnostics::tmaze_walk).map_err(|e| e.to_string())
}

fn representation(root: &Path) -> Outcome {
    let full = load_runs(root, "full")?;
    let shift = load_runs(root, "no_shift")?;
    let bt0 = load_runs(&root.join("bt0"), "full")?;
    check_protocol("full", &full)?;
    check_protocol("no_shift", &shift)?;
    check_protocol("full", &bt0)?;
    ensure!(bt0.iter().all(|r| r.cfg.ne.bt_lambda == 0.0), "bt0 runs must set ne.bt_lambda=0");
    let mut probe = (Vec::new(), Vec::new());
    let mut ranks = (Vec::new(), Vec::new());
    for f in &full {
        let s = shift.iter().find(|r| r.seed == f.seed).ok_or(format!("no_shift lacks seed {}", f.seed))?;
        let z = bt0.iter().find(|r| r.seed == f.seed).ok_or(format!("bt0 lacks seed {}", f.seed))?;
        let eps = probe_episodes(&f.cfg)?;
        let report = |r: &Run| -> Result<diagnostics::ReprReport, String> {
            let path = r.last_checkpoint().ok_or(format!("{}: no checkpoint", r.dir.display()))?;
            let (agent, _) = checkpoint::load(&path).map_err(|e| e.to_string())?;
            representation_report(&agent, &eps, r.seed).map_err(|e| e.to_string())
        };
        let (rf, rs, rz) = (report(f)?, report(s)?, report(z)?);
        probe.0.push(rf.probe_accuracy.unwrap_or(0.0));
        probe.1.push(rs.probe_accuracy.unwrap_or(0.0));
        ranks.0.push(rf.effective_rank);
        ranks.1.push(rz.effective_rank);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = format!(
        "probe full {:.2} vs no_shift {:.2}; effective rank full {:.2} vs bt_lambda=0 {:.2}",
        mean(&probe.0),
        mean(&probe.1),
        mean(&ranks.0),
        mean(&ranks.1)
    );
    ensure!(mean(&probe.0) >= 0.9, "full probe accuracy below 0.9; {summary}");
    ensure!(mean(&probe.1) <= 0.7, "no_shift probe accuracy above 0.7; {summary}");
    ensure!(mean(&ranks.0) > mean(&ranks.1), "effective rank not above the bt_lambda=0 run; {summary}");
    Ok(summary)
}

fn collapse_prevention(root: &Path) -> Outcome {
    let full = load_runs(root, "full")?;
    check_protocol("full", &full)?;
    let mut lines = Vec::new();
    for r in &full {
        let tail: Vec<&MetricsRecord> = r.metrics.iter().filter(|m| m.kind == "train").rev().take(10).collect();
        let avg = |k: &str| tail.iter().filter_map(|m| m.values.get(k)).sum::<f64>() / tail.len().max(1) as f64;
        let (diag, off) = (avg("ne_mean_diag"), avg("ne_offdiag_rms"));
        lines.push(format!("seed {}: diag {diag:.3} off {off:.3}", r.seed));
        ensure!(!tail.is_empty(), "seed {}: no training records", r.seed);
        ensure!(diag > 0.5 && off < 0.1, "seed {}: mean diagonal {diag:.3} (> 0.5), off-diagonal rms {off:.3} (< 0.1)", r.seed);
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- runner

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {id:>2} {name:<28} PASS  {detail} [{secs:.1}s]"),
        Err(detail) => println!("criterion {id:>2} {name:<28} FAIL  {detail} [{secs:.1}s]"),
    }
    outcome.is_ok()
}

fn main() {
    // `cargo test -- --list` style invocations expect no work.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let strict = std::env::var("NEDREAMER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let root = ablation_root();
    let mut gating = vec![
        run(1, "gradient checks", gradient_checks),
        run(2, "causality", causality),
        run(3, "stop gradients", stop_gradients),
        run(4, "oracle equivalence", oracles),
        run(5, "hand-computed values", hand_values),
        run(6, "mask correctness", masks),
    ];
    let trained = [
        run(7, "ablation ordering", || success_ordering(&root)),
        run(8, "representation diagnostics", || representation(&root)),
        run(9, "collapse prevention", || collapse_prevention(&root)),
    ];
    gating.push(run(10, "engineering gates", engineering));
    println!("trained-run criteria read from {}", root.display());
    let ok = gating.iter().all(|&x| x) && (!strict || trained.iter().all(|&x| x));
    if !ok {
        std::process::exit(1);
    }
}
