//! Collection, replay-ratio controlled updates, evaluation, and run output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::behavior::ActorCritic;
use crate::checkpoint;
use crate::config::{Config, EnvConfig};
use crate::envs::{make_env, Environment, Observation};
use crate::error::{io_err, Error, Result};
use crate::optim::Adam;
use crate::replay::{ReplayBuffer, SequenceBatch, TransitionRecord};
use crate::tensor::Tensor;
use crate::worldmodel::{LatentState, WorldModel};

/// World model, actor-critic, and the world-model optimizer.
pub struct Agent {
    pub cfg: Config,
    pub wm: WorldModel,
    pub ac: ActorCritic,
    wm_opt: Adam,
    num_actions: usize,
}

/// Recurrent filtering state for a set of parallel episodes.
#[derive(Clone, Debug)]
pub struct PolicyState {
    pub latent: LatentState,
    pub prev_action: Vec<usize>,
}

impl Agent {
    pub fn new(cfg: &Config, num_actions: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let wm = WorldModel::new(cfg, num_actions, rng)?;
        let ac = ActorCritic::new(&cfg.behavior, &cfg.optim, wm.dims().feature(), num_actions, rng);
        let wm_opt = Adam::new(&cfg.optim, &wm.params);
        Ok(Self { cfg: cfg.clone(), wm, ac, wm_opt, num_actions })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of gradient steps taken so far.
    pub fn updates(&self) -> u64 {
        self.wm_opt.steps()
    }

    /// World-model step, then an actor-critic step on imagination from the same batch.
    pub fn update(&mut self, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<BTreeMap<String, f64>> {
        let mut tape = Tape::new();
        let out = self.wm.loss(&mut tape, batch, rng)?;
        let loss = tape.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("world model loss is {loss}")));
        }
        let grads = tape.backward(out.loss).for_store(&self.wm.params);
        drop(tape);
        let stats = self.wm_opt.step(&mut self.wm.params, grads)?;
        let mut metrics = out.metrics;
        metrics.insert("wm_grad_norm".into(), stats.grad_norm);
        if let Some(ne) = &out.ne {
            metrics.insert("ne_offdiag_rms".into(), ne.mean_off_diag_sq.sqrt());
        }
        let behavior = self.ac.train_step(&self.wm, &out.posterior, rng)?;
        if let Some((k, v)) = behavior.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{k} is {v}")));
        }
        metrics.extend(behavior);
        Ok(metrics)
    }

    pub fn initial_policy_state(&self, n: usize) -> PolicyState {
        PolicyState { latent: self.wm.initial_state(n), prev_action: vec![0; n] }
    }

    /// Filters one observation per episode and picks the next actions.
    pub fn policy_step(&self, state: &mut PolicyState, obs: &[&Observation], greedy: bool, rng: &mut impl Rng) -> Vec<usize> {
        let pixels = stack_pixels(obs);
        let first: Vec<bool> = obs.iter().map(|o| o.is_first).collect();
        let (latent, _, _) = self.wm.observe(&state.latent, &state.prev_action, &first, &pixels, rng);
        let actions = self.ac.act(&latent.features(), greedy, rng);
        state.latent = latent;
        state.prev_action = actions.clone();
        actions
    }

    fn check_env(&self, env: &dyn Environment) -> Result<()> {
        let spec = env.spec();
        let s = self.wm.dims().image;
        if spec.num_actions != self.num_actions || spec.obs_height != s || spec.obs_width != s {
            return Err(Error::InvalidSpec(format!(
                "environment `{}` ({}x{}, {} actions) does not match the agent ({s}x{s}, {} actions)",
                spec.name, spec.obs_height, spec.obs_width, spec.num_actions, self.num_actions
            )));
        }
        Ok(())
    }
}

/// `[n, H, W, 3]` tensor from observations.
pub fn stack_pixels(obs: &[&Observation]) -> Tensor {
    let (h, w) = (obs[0].height, obs[0].width);
    let data = obs.iter().flat_map(|o| o.pixels.iter().map(|&p| p as f64)).collect();
    Tensor::new(&[obs.len(), h, w, 3], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean_return: f64,
    /// Fraction of episodes with positive return.
    pub success_rate: f64,
}

/// Runs the greedy policy for `episodes` episodes.
pub fn evaluate(agent: &Agent, env_cfg: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Precondition("evaluation needs at least one episode".into()));
    }
    let mut env = make_env(env_cfg, seed)?;
    agent.check_env(env.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset(seed.wrapping_mul(1_000_003).wrapping_add(ep as u64));
        let mut state = agent.initial_policy_state(1);
        let mut total = 0.0;
        loop {
            let a = agent.policy_step(&mut state, &[&obs], true, &mut rng)[0];
            let res = env.step(a)?;
            total += res.reward;
            obs = res.observation;
            if !res.continuation {
                break;
            }
        }
        log::debug!("eval episode {ep}: return {total}");
        returns.push(total);
    }
    let n = returns.len() as f64;
    Ok(EvalReport {
        mean_return: returns.iter().sum::<f64>() / n,
        success_rate: returns.iter().filter(|&&r| r > 0.0).count() as f64 / n,
        returns,
    })
}

pub fn evaluate_checkpoint(path: &Path, env_cfg: Option<&EnvConfig>, episodes: usize, seed: u64) -> Result<EvalReport> {
    let (agent, _) = checkpoint::load(path)?;
    let env_cfg = env_cfg.cloned().unwrap_or_else(|| agent.cfg.env.clone());
    evaluate(&agent, &env_cfg, episodes, seed)
}

/// One JSONL line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `train`, `episode`, or `eval`.
    pub kind: String,
    pub env_step: u64,
    pub wall_time: f64,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub env_steps: u64,
    pub updates: u64,
    pub replayed_steps: u64,
    pub episodes: u64,
    pub final_eval: Option<EvalReport>,
}

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step}.ckpt"))
}

struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    start: Instant,
}

impl MetricsWriter {
    fn emit(&mut self, kind: &str, env_step: u64, values: BTreeMap<String, f64>) -> Result<()> {
        let rec = MetricsRecord { kind: kind.into(), env_step, wall_time: self.start.elapsed().as_secs_f64(), values };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

struct Slot {
    env: Box<dyn Environment>,
    obs: Observation,
    reward: f64,
    cont: bool,
    ep_return: f64,
    ep_length: u64,
}

/// Trains an agent from scratch and writes the run directory.
pub fn train(cfg: &Config, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let snap = run_dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&snap, cfg.to_toml()).map_err(io_err(&snap))?;
    let mut summary = RunSummary { run_dir: run_dir.to_path_buf(), env_steps: 0, updates: 0, replayed_steps: 0, episodes: 0, final_eval: None };
    if cfg.train.total_env_steps == 0 {
        return Ok(summary);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.train.env_instances;
    let mut slots = Vec::with_capacity(n);
    for i in 0..n {
        let mut env = make_env(&cfg.env, cfg.seed.wrapping_mul(7919).wrapping_add(i as u64))?;
        let obs = env.reset(rng.gen());
        slots.push(Slot { env, obs, reward: 0.0, cont: true, ep_return: 0.0, ep_length: 0 });
    }
    let spec = slots[0].env.spec().clone();
    let mut agent = Agent::new(cfg, spec.num_actions, &mut rng)?;
    agent.check_env(slots[0].env.as_ref())?;
    let mut replay = ReplayBuffer::new(cfg.replay.capacity, n, spec.obs_height, spec.obs_width);
    let path = run_dir.join(METRICS_FILE);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut writer = MetricsWriter { out: BufWriter::new(file), path, start: Instant::now() };

    let (bsz, blen) = (cfg.replay.batch_size, cfg.replay.batch_length);
    let per_update = (bsz * blen) as u64;
    let total = cfg.train.total_env_steps;
    let mut state = agent.initial_policy_state(n);
    let mut next_eval = cfg.train.eval_every;
    let mut next_ckpt = cfg.train.checkpoint_every;
    let mut next_log = cfg.train.log_every;
    let mut last_metrics = BTreeMap::new();

    while summary.env_steps < total {
        let obs: Vec<&Observation> = slots.iter().map(|s| &s.obs).collect();
        let actions = agent.policy_step(&mut state, &obs, false, &mut rng);
        let active = ((total - summary.env_steps) as usize).min(n);
        for (i, slot) in slots.iter_mut().enumerate().take(active) {
            let rec = TransitionRecord {
                pixels: slot.obs.to_bytes(),
                action: actions[i],
                reward: slot.reward,
                continuation: slot.cont,
                is_first: slot.obs.is_first,
            };
            replay.append(i, rec)?;
            summary.env_steps += 1;
            if slot.cont {
                let res = slot.env.step(actions[i])?;
                slot.obs = res.observation;
                slot.reward = res.reward;
                slot.cont = res.continuation;
                slot.ep_return += res.reward;
                slot.ep_length += 1;
            } else {
                let values = BTreeMap::from([("return".to_string(), slot.ep_return), ("length".to_string(), slot.ep_length as f64)]);
                writer.emit("episode", summary.env_steps, values)?;
                summary.episodes += 1;
                slot.obs = slot.env.reset(rng.gen());
                slot.reward = 0.0;
                slot.cont = true;
                slot.ep_return = 0.0;
                slot.ep_length = 0;
            }
        }

        let budget = cfg.train.train_ratio * summary.env_steps as f64;
        while (summary.replayed_steps as f64) < budget && replay.valid_starts(blen).iter().sum::<usize>() > 0 {
            let batch = replay.sample(bsz, blen, &mut rng)?;
            let metrics = match agent.update(&batch, &mut rng) {
                Ok(m) => m,
                Err(e @ Error::NonFinite(_)) => return Err(diverged(run_dir, &agent, summary.env_steps, &last_metrics, e)),
                Err(e) => return Err(e),
            };
            summary.replayed_steps += per_update;
            summary.updates += 1;
            writer.emit("train", summary.env_steps, metrics.clone())?;
            last_metrics = metrics;
        }

        if summary.env_steps >= next_log {
            next_log += cfg.train.log_every;
            log::info!(
                "step {} updates {} wm_loss {:.4} ne_mean_diag {:.3}",
                summary.env_steps,
                summary.updates,
                last_metrics.get("wm_loss").copied().unwrap_or(f64::NAN),
                last_metrics.get("ne_mean_diag").copied().unwrap_or(f64::NAN)
            );
        }
        if cfg.train.eval_every > 0 && summary.env_steps >= next_eval && summary.env_steps < total {
            next_eval += cfg.train.eval_every;
            let rep = evaluate(&agent, &cfg.env, cfg.train.eval_episodes, cfg.seed.wrapping_add(summary.env_steps))?;
            writer.emit("eval", summary.env_steps, eval_values(&rep))?;
        }
        if cfg.train.checkpoint_every > 0 && summary.env_steps >= next_ckpt && summary.env_steps < total {
            next_ckpt += cfg.train.checkpoint_every;
            checkpoint::save(&checkpoint_path(run_dir, summary.env_steps), &agent, summary.env_steps)?;
        }
    }

    let rep = evaluate(&agent, &cfg.env, cfg.train.eval_episodes, cfg.seed.wrapping_add(total))?;
    writer.emit("eval", summary.env_steps, eval_values(&rep))?;
    checkpoint::save(&checkpoint_path(run_dir, summary.env_steps), &agent, summary.env_steps)?;
    summary.final_eval = Some(rep);
    let p = run_dir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(io_err(&p))?;
    Ok(summary)
}

fn eval_values(rep: &EvalReport) -> BTreeMap<String, f64> {
    BTreeMap::from([("mean_return".to_string(), rep.mean_return), ("success_rate".to_string(), rep.success_rate)])
}

/// Writes a divergence dump next to the metrics and converts the error.
fn diverged(run_dir: &Path, agent: &Agent, step: u64, last: &BTreeMap<String, f64>, err: Error) -> Error {
    let dump = serde_json::json!({
        "env_step": step,
        "updates": agent.updates(),
        "error": err.to_string(),
        "last_metrics": last,
        "wm_fingerprint": agent.wm.params.fingerprint(),
    });
    let path = run_dir.join("divergence.json");
    if let Err(e) = std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default()) {
        log::error!("could not write {}: {e}", path.display());
    }
    let _ = checkpoint::save(&run_dir.join("checkpoints").join(format!("diverged_step_{step}.ckpt")), agent, step);
    Error::Divergence { step, detail: err.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NeMode;

    pub(crate) fn tiny_run_config(mode: NeMode) -> Config {
        let mut cfg = Config::default();
        cfg.env.corridor_len = 2;
        cfg.env.image_size = 8;
        cfg.env.max_episode_steps = 12;
        cfg.model.deter = 8;
        cfg.model.latents = 2;
        cfg.model.classes = 4;
        cfg.model.units = 8;
        cfg.model.embed_dim = 6;
        cfg.model.encoder_channels = vec![2, 4];
        cfg.ne.mode = mode;
        cfg.ne.token_dim = 8;
        cfg.ne.heads = 2;
        cfg.ne.layers = 1;
        cfg.behavior.bins = 15;
        cfg.behavior.units = 8;
        cfg.behavior.layers = 1;
        cfg.behavior.horizon = 3;
        cfg.replay.batch_size = 2;
        cfg.replay.batch_length = 4;
        cfg.replay.capacity = 1000;
        cfg.train.total_env_steps = 60;
        cfg.train.train_ratio = 4.0;
        cfg.train.env_instances = 2;
        cfg.train.eval_every = 40;
        cfg.train.eval_episodes = 2;
        cfg.train.checkpoint_every = 0;
        cfg.train.log_every = 1000;
        cfg
    }

    fn strip_time(mut recs: Vec<MetricsRecord>) -> Vec<MetricsRecord> {
        recs.iter_mut().for_each(|r| r.wall_time = 0.0);
        recs
    }

    #[test]
    fn run_is_deterministic_and_ratio_is_kept() {
        let cfg = tiny_run_config(NeMode::Full);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = train(&cfg, a.path()).unwrap();
        train(&cfg, b.path()).unwrap();
        let ma = strip_time(read_metrics(&a.path().join(METRICS_FILE)).unwrap());
        let mb = strip_time(read_metrics(&b.path().join(METRICS_FILE)).unwrap());
        assert_eq!(ma, mb);
        assert_eq!(sa.env_steps, 60);
        let bt = (cfg.replay.batch_size * cfg.replay.batch_length) as f64;
        assert!((sa.replayed_steps as f64 - cfg.train.train_ratio * sa.env_steps as f64).abs() <= bt);
        let train_records = ma.iter().filter(|r| r.kind == "train").count() as u64;
        assert_eq!(train_records, sa.updates);
        assert!(ma.windows(2).all(|w| w[0].env_step <= w[1].env_step));
        assert!(checkpoint_path(a.path(), 60).exists());
        assert!(ma.iter().any(|r| r.kind == "eval" && r.env_step == 40));
    }

    #[test]
    fn zero_budget_writes_snapshot_only() {
        let mut cfg = tiny_run_config(NeMode::Full);
        cfg.train.total_env_steps = 0;
        let d = tempfile::tempdir().unwrap();
        train(&cfg, d.path()).unwrap();
        let entries: Vec<_> = std::fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(entries, vec![std::ffi::OsString::from(CONFIG_SNAPSHOT)]);
        let back = Config::from_str_with_overrides(&std::fs::read_to_string(d.path().join(CONFIG_SNAPSHOT)).unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn reconstruction_mode_trains() {
        let mut cfg = tiny_run_config(NeMode::Reconstruction);
        cfg.train.total_env_steps = 24;
        let d = tempfile::tempdir().unwrap();
        let s = train(&cfg, d.path()).unwrap();
        assert!(s.updates > 0);
        let m = read_metrics(&d.path().join(METRICS_FILE)).unwrap();
        assert!(m.iter().any(|r| r.values.contains_key("recon_loss")));
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_evaluation() {
        let cfg = tiny_run_config(NeMode::Full);
        let d = tempfile::tempdir().unwrap();
        train(&cfg, d.path()).unwrap();
        let path = checkpoint_path(d.path(), 60);
        let (agent, step) = checkpoint::load(&path).unwrap();
        assert_eq!(step, 60);
        let again = d.path().join("copy.ckpt");
        checkpoint::save(&again, &agent, step).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        let r1 = evaluate(&agent, &cfg.env, 4, 9).unwrap();
        let r2 = evaluate_checkpoint(&again, None, 4, 9).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn evaluation_preconditions() {
        let cfg = tiny_run_config(NeMode::Full);
        let agent = Agent::new(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(evaluate(&agent, &cfg.env, 0, 0), Err(Error::Precondition(_))));
        let mut other = cfg.env.clone();
        other.name = "keydoor".into();
        other.image_size = 16;
        assert!(matches!(evaluate(&agent, &other, 1, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn untrained_policy_is_at_chance_on_tmaze() {
        let mut cfg = tiny_run_config(NeMode::Full);
        cfg.env.max_episode_steps = 40;
        let agent = Agent::new(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let rep = evaluate(&agent, &cfg.env, 400, 1).unwrap();
        // zero-initialised actor: greedy ties broken uniformly, so a junction choice is a coin flip
        let decided = rep.returns.iter().filter(|r| **r != 0.0).count() as f64;
        assert!(decided > 100.0);
        let wins = rep.returns.iter().filter(|r| **r > 0.0).count() as f64;
        let p = wins / decided;
        assert!((p - 0.5).abs() < 4.0 * (0.25 / decided).sqrt(), "{p}");
    }

    #[test]
    fn divergence_aborts_with_dump() {
        let mut cfg = tiny_run_config(NeMode::Full);
        cfg.optim.lr = 1e300;
        cfg.optim.agc = 1e300;
        cfg.train.total_env_steps = 200;
        let d = tempfile::tempdir().unwrap();
        match train(&cfg, d.path()) {
            Err(Error::Divergence { .. }) => assert!(d.path().join("divergence.json").exists()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
