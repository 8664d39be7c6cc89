//! Synthetic partially observable pixel environments.
//!
//! All environments render RGB images whose values are exact multiples of
//! `1/255`, so the replay buffer can store them as bytes losslessly.

use base64::Engine;
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3`, row-major HWC, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub is_first: bool,
}

impl Observation {
    fn from_canvas(c: &Canvas, is_first: bool) -> Self {
        Self { height: c.height, width: c.width, pixels: c.data.iter().map(|&b| b as f32 / 255.0).collect(), is_first }
    }

    /// Byte encoding; exact for rendered observations.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    /// `false` exactly on terminal transitions (including time limits).
    pub continuation: bool,
    pub is_first: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_height: usize,
    pub obs_width: usize,
    pub num_actions: usize,
    pub max_episode_steps: usize,
    pub seed: u64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_actions < 2 {
            return Err(Error::InvalidSpec(format!("{} needs at least 2 actions, got {}", self.name, self.num_actions)));
        }
        if self.max_episode_steps < 1 {
            return Err(Error::InvalidSpec("max_episode_steps must be >= 1".into()));
        }
        if self.obs_height == 0 || self.obs_width == 0 {
            return Err(Error::InvalidSpec("observation size must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform episodic interface. One instance is used by one thread at a time.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn reward_range(&self) -> (f64, f64);
    /// Task label for probing the current episode (TMaze cue side, KeyDoor key held).
    fn probe_label(&self) -> Option<usize> {
        None
    }
    /// True when the agent is at the step where the remembered label matters.
    fn at_decision_point(&self) -> bool {
        false
    }
}

pub fn make_env(cfg: &EnvConfig, seed: u64) -> Result<Box<dyn Environment>> {
    let base: Box<dyn Environment> = match cfg.name.as_str() {
        "tmaze" => Box::new(TMaze::new(cfg.corridor_len, cfg.cue_steps, cfg.max_episode_steps, cfg.image_size, seed)?),
        "keydoor" => Box::new(KeyDoor::new(cfg.grid, cfg.max_episode_steps, cfg.image_size, seed)?),
        "linear_gaussian" => Box::new(LinearGaussianPomdp::new(cfg.max_episode_steps, cfg.image_size, seed)?),
        other => return Err(Error::InvalidSpec(format!("unknown environment `{other}`"))),
    };
    if cfg.distractor {
        Ok(Box::new(DistractorNoise::new(base, cfg.noise_patch)?))
    } else {
        Ok(base)
    }
}

#[derive(Clone)]
struct Canvas {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Canvas {
    fn new(height: usize, width: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&fill);
        }
        Self { height, width, data }
    }

    fn rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, color: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                let i = (y * self.width + x) * 3;
                self.data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Episode bookkeeping shared by the grid environments.
#[derive(Clone, Debug, Default)]
struct EpisodeClock {
    steps: usize,
    started: bool,
    done: bool,
}

impl EpisodeClock {
    fn check_step(&self, action: usize, spec: &EnvSpec) -> Result<()> {
        if !self.started || self.done {
            return Err(Error::EpisodeTerminated);
        }
        if action >= spec.num_actions {
            return Err(Error::InvalidAction { action, num_actions: spec.num_actions });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cue {
    Left,
    Right,
}

pub mod tmaze_actions {
    pub const FORWARD: usize = 0;
    pub const LEFT: usize = 1;
    pub const RIGHT: usize = 2;
}

/// Corridor of length `L` ending in a T junction. The cue side is rendered
/// only on the first `cue_steps` observations; choosing that side at the
/// junction pays +1, the other side -1.
pub struct TMaze {
    spec: EnvSpec,
    corridor_len: usize,
    cue_steps: usize,
    size: usize,
    pos: usize,
    cue: Cue,
    clock: EpisodeClock,
}

impl TMaze {
    pub fn new(corridor_len: usize, cue_steps: usize, max_episode_steps: usize, size: usize, seed: u64) -> Result<Self> {
        let spec = EnvSpec { name: "tmaze".into(), obs_height: size, obs_width: size, num_actions: 3, max_episode_steps, seed };
        spec.validate()?;
        if corridor_len == 0 || size < 8 {
            return Err(Error::InvalidSpec("tmaze needs corridor_len >= 1 and image size >= 8".into()));
        }
        Ok(Self { spec, corridor_len, cue_steps, size, pos: 0, cue: Cue::Left, clock: EpisodeClock::default() })
    }

    pub fn cue(&self) -> Cue {
        self.cue
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn corridor_len(&self) -> usize {
        self.corridor_len
    }

    /// Resets with an explicit cue (used by exhaustive checks).
    pub fn reset_with_cue(&mut self, cue: Cue) -> Observation {
        self.cue = cue;
        self.pos = 0;
        self.clock = EpisodeClock { steps: 0, started: true, done: false };
        Observation::from_canvas(&self.render(), true)
    }

    fn render(&self) -> Canvas {
        let s = self.size;
        let u = s / 16;
        let u = u.max(1);
        let mut c = Canvas::new(s, s, [30, 30, 30]);
        // corridor floor
        c.rect(0, 6 * u, s, 4 * u, [110, 110, 110]);
        if self.pos == self.corridor_len {
            c.rect(2 * u, 0, 4 * u, s, [110, 110, 110]);
        }
        if self.clock.steps < self.cue_steps {
            let x0 = match self.cue {
                Cue::Left => u,
                Cue::Right => 11 * u,
            };
            c.rect(10 * u, x0, 4 * u, 4 * u, [20, 200, 60]);
        }
        c
    }
}

impl Environment for TMaze {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cue = if rng.gen_bool(0.5) { Cue::Left } else { Cue::Right };
        self.reset_with_cue(cue)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        self.clock.check_step(action, &self.spec)?;
        use tmaze_actions::*;
        self.clock.steps += 1;
        let mut reward = 0.0;
        let mut terminal = false;
        if self.pos < self.corridor_len {
            if action == FORWARD {
                self.pos += 1;
            }
        } else if action == LEFT || action == RIGHT {
            let chosen = if action == LEFT { Cue::Left } else { Cue::Right };
            reward = if chosen == self.cue { 1.0 } else { -1.0 };
            terminal = true;
        }
        if self.clock.steps >= self.spec.max_episode_steps {
            terminal = true;
        }
        self.clock.done = terminal;
        Ok(StepResult { observation: Observation::from_canvas(&self.render(), false), reward, continuation: !terminal, is_first: false })
    }

    fn reward_range(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn probe_label(&self) -> Option<usize> {
        Some(match self.cue {
            Cue::Left => 0,
            Cue::Right => 1,
        })
    }

    fn at_decision_point(&self) -> bool {
        self.pos == self.corridor_len
    }
}

pub mod keydoor_actions {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;
}

/// Walled `N x N` grid: pick up the key, then reach the door. The agent sees
/// only the 3x3 cells around itself; whether it holds the key is not drawn.
pub struct KeyDoor {
    spec: EnvSpec,
    grid: usize,
    size: usize,
    agent: (usize, usize),
    key: Option<(usize, usize)>,
    door: (usize, usize),
    has_key: bool,
    clock: EpisodeClock,
}

impl KeyDoor {
    pub const START: (usize, usize) = (1, 1);

    pub fn new(grid: usize, max_episode_steps: usize, size: usize, seed: u64) -> Result<Self> {
        let spec = EnvSpec { name: "keydoor".into(), obs_height: size, obs_width: size, num_actions: 4, max_episode_steps, seed };
        spec.validate()?;
        if grid < 4 || size < 15 {
            return Err(Error::InvalidSpec("keydoor needs grid >= 4 and image size >= 15".into()));
        }
        Ok(Self { spec, grid, size, agent: Self::START, key: None, door: (0, 0), has_key: false, clock: EpisodeClock::default() })
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn key(&self) -> Option<(usize, usize)> {
        self.key
    }

    pub fn door(&self) -> (usize, usize) {
        self.door
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    fn is_wall(&self, r: isize, c: isize) -> bool {
        r <= 0 || c <= 0 || r >= self.grid as isize - 1 || c >= self.grid as isize - 1
    }

    /// Whether `cell` falls in the rendered 3x3 window.
    pub fn in_view(&self, cell: (usize, usize)) -> bool {
        (cell.0 as isize - self.agent.0 as isize).abs() <= 1 && (cell.1 as isize - self.agent.1 as isize).abs() <= 1
    }

    fn render(&self) -> Canvas {
        let cell = self.size / 3;
        let mut c = Canvas::new(self.size, self.size, [0, 0, 0]);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (r, col) = (self.agent.0 as isize + dr, self.agent.1 as isize + dc);
                let color = if self.is_wall(r, col) {
                    [70, 70, 70]
                } else if self.key == Some((r as usize, col as usize)) {
                    [240, 220, 30]
                } else if self.door == (r as usize, col as usize) {
                    [170, 60, 20]
                } else {
                    [180, 180, 180]
                };
                c.rect((dr + 1) as usize * cell, (dc + 1) as usize * cell, cell, cell, color);
            }
        }
        c.rect(cell + cell / 3, cell + cell / 3, cell - 2 * (cell / 3), cell - 2 * (cell / 3), [40, 80, 230]);
        c
    }
}

impl Environment for KeyDoor {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let interior: Vec<(usize, usize)> =
            (1..self.grid - 1).flat_map(|r| (1..self.grid - 1).map(move |c| (r, c))).filter(|&p| p != Self::START).collect();
        let k = rng.gen_range(0..interior.len());
        let mut d = rng.gen_range(0..interior.len() - 1);
        if d >= k {
            d += 1;
        }
        self.agent = Self::START;
        self.key = Some(interior[k]);
        self.door = interior[d];
        self.has_key = false;
        self.clock = EpisodeClock { steps: 0, started: true, done: false };
        Observation::from_canvas(&self.render(), true)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        self.clock.check_step(action, &self.spec)?;
        use keydoor_actions::*;
        self.clock.steps += 1;
        let (dr, dc) = match action {
            UP => (-1, 0),
            DOWN => (1, 0),
            LEFT => (0, -1),
            _ => (0, 1),
        };
        let (r, c) = (self.agent.0 as isize + dr, self.agent.1 as isize + dc);
        if !self.is_wall(r, c) {
            self.agent = (r as usize, c as usize);
        }
        if self.key == Some(self.agent) {
            self.key = None;
            self.has_key = true;
        }
        let mut reward = 0.0;
        let mut terminal = false;
        if self.agent == self.door && self.has_key {
            reward = 1.0;
            terminal = true;
        }
        if self.clock.steps >= self.spec.max_episode_steps {
            terminal = true;
        }
        self.clock.done = terminal;
        Ok(StepResult { observation: Observation::from_canvas(&self.render(), false), reward, continuation: !terminal, is_first: false })
    }

    fn reward_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn probe_label(&self) -> Option<usize> {
        Some(self.has_key as usize)
    }
}

/// Overlays i.i.d. byte noise on a fixed top-left patch; rewards pass through.
pub struct DistractorNoise {
    inner: Box<dyn Environment>,
    patch: usize,
    rng: ChaCha8Rng,
    spec: EnvSpec,
}

impl DistractorNoise {
    pub fn new(inner: Box<dyn Environment>, patch: usize) -> Result<Self> {
        let mut spec = inner.spec().clone();
        if patch == 0 || patch > spec.obs_height || patch > spec.obs_width {
            return Err(Error::InvalidSpec(format!("noise patch {patch} does not fit the image")));
        }
        spec.name = format!("{}+noise", spec.name);
        Ok(Self { inner, patch, rng: ChaCha8Rng::seed_from_u64(0), spec })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    fn overlay(&mut self, obs: &mut Observation) {
        for y in 0..self.patch {
            for x in 0..self.patch {
                for ch in 0..3 {
                    let v: u8 = self.rng.gen();
                    obs.pixels[(y * obs.width + x) * 3 + ch] = v as f32 / 255.0;
                }
            }
        }
    }
}

impl Environment for DistractorNoise {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut obs = self.inner.reset(seed);
        self.overlay(&mut obs);
        obs
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let mut r = self.inner.step(action)?;
        self.overlay(&mut r.observation);
        Ok(r)
    }

    fn reward_range(&self) -> (f64, f64) {
        self.inner.reward_range()
    }

    fn probe_label(&self) -> Option<usize> {
        self.inner.probe_label()
    }

    fn at_decision_point(&self) -> bool {
        self.inner.at_decision_point()
    }
}

/// Optimal filter for the linear-Gaussian environment's latent state given
/// its noisy position measurements.
#[derive(Clone, Debug)]
pub struct KalmanFilter {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    dynamics: Matrix2<f64>,
    process_var: f64,
    measurement_var: f64,
}

impl KalmanFilter {
    pub fn predict(&mut self, control: Vector2<f64>) {
        self.mean = self.dynamics * self.mean + control;
        self.cov = self.dynamics * self.cov * self.dynamics.transpose() + Matrix2::identity() * self.process_var;
    }

    pub fn update(&mut self, measurement: Vector2<f64>) {
        let s = self.cov + Matrix2::identity() * self.measurement_var;
        let gain = self.cov * s.try_inverse().expect("innovation covariance is positive definite");
        self.mean += gain * (measurement - self.mean);
        self.cov = (Matrix2::identity() - gain) * self.cov;
    }
}

/// Latent 2D linear dynamics `x' = A x + B u + w`, observed as a blurred blob
/// drawn at a noisy measurement of `x`. Reward is `-min(|x|^2, 4) / 4`.
pub struct LinearGaussianPomdp {
    spec: EnvSpec,
    size: usize,
    state: Vector2<f64>,
    measurement: Vector2<f64>,
    rng: ChaCha8Rng,
    clock: EpisodeClock,
}

impl LinearGaussianPomdp {
    pub const PROCESS_STD: f64 = 0.05;
    pub const MEASUREMENT_STD: f64 = 0.2;
    const PUSH: f64 = 0.2;
    const LIMIT: f64 = 2.0;

    pub fn new(max_episode_steps: usize, size: usize, seed: u64) -> Result<Self> {
        let spec = EnvSpec { name: "linear_gaussian".into(), obs_height: size, obs_width: size, num_actions: 5, max_episode_steps, seed };
        spec.validate()?;
        Ok(Self {
            spec,
            size,
            state: Vector2::zeros(),
            measurement: Vector2::zeros(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock: EpisodeClock::default(),
        })
    }

    pub fn dynamics() -> Matrix2<f64> {
        Matrix2::new(0.95, 0.1, -0.1, 0.95)
    }

    pub fn control(action: usize) -> Vector2<f64> {
        match action {
            1 => Vector2::new(Self::PUSH, 0.0),
            2 => Vector2::new(-Self::PUSH, 0.0),
            3 => Vector2::new(0.0, Self::PUSH),
            4 => Vector2::new(0.0, -Self::PUSH),
            _ => Vector2::zeros(),
        }
    }

    pub fn latent(&self) -> Vector2<f64> {
        self.state
    }

    pub fn measurement(&self) -> Vector2<f64> {
        self.measurement
    }

    /// Filter matching this environment's noise model, started at the reset prior.
    pub fn filter(&self) -> KalmanFilter {
        KalmanFilter {
            mean: Vector2::zeros(),
            cov: Matrix2::identity() * 0.25,
            dynamics: Self::dynamics(),
            process_var: Self::PROCESS_STD.powi(2),
            measurement_var: Self::MEASUREMENT_STD.powi(2),
        }
    }

    fn measure(&mut self) {
        let n = Normal::new(0.0, Self::MEASUREMENT_STD).unwrap();
        self.measurement = self.state + Vector2::new(n.sample(&mut self.rng), n.sample(&mut self.rng));
    }

    fn render(&self) -> Canvas {
        let s = self.size as f64;
        let to_px = |v: f64| (v + Self::LIMIT) / (2.0 * Self::LIMIT) * s;
        let (cx, cy) = (to_px(self.measurement.x), to_px(self.measurement.y));
        let sigma = 1.5 * s / 16.0;
        let mut c = Canvas::new(self.size, self.size, [0, 0, 0]);
        for y in 0..self.size {
            for x in 0..self.size {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let i = (y * self.size + x) * 3;
                c.data[i] = (v * 255.0).round() as u8;
                c.data[i + 1] = (v * 127.0).round() as u8;
            }
        }
        c
    }
}

impl Environment for LinearGaussianPomdp {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::<f64>::new(0.0, 0.5).unwrap();
        self.state = Vector2::new(n.sample(&mut self.rng), n.sample(&mut self.rng)).map(|v| v.clamp(-Self::LIMIT, Self::LIMIT));
        self.measure();
        self.clock = EpisodeClock { steps: 0, started: true, done: false };
        Observation::from_canvas(&self.render(), true)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        self.clock.check_step(action, &self.spec)?;
        self.clock.steps += 1;
        let n = Normal::new(0.0, Self::PROCESS_STD).unwrap();
        let noise = Vector2::new(n.sample(&mut self.rng), n.sample(&mut self.rng));
        self.state = (Self::dynamics() * self.state + Self::control(action) + noise).map(|v| v.clamp(-Self::LIMIT, Self::LIMIT));
        self.measure();
        let reward = -self.state.norm_squared().min(4.0) / 4.0;
        let terminal = self.clock.steps >= self.spec.max_episode_steps;
        self.clock.done = terminal;
        Ok(StepResult { observation: Observation::from_canvas(&self.render(), false), reward, continuation: !terminal, is_first: false })
    }

    fn reward_range(&self) -> (f64, f64) {
        (-1.0, 0.0)
    }
}

/// One exported step of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub action: Option<usize>,
    pub reward: f64,
    pub continuation: bool,
    pub is_first: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixels: Option<String>,
}

/// Runs one episode with `policy` and returns its trace; pixels are base64 bytes when requested.
pub fn record_episode(
    env: &mut dyn Environment,
    seed: u64,
    include_pixels: bool,
    mut policy: impl FnMut(&Observation) -> usize,
) -> Result<Vec<TraceStep>> {
    let enc = |o: &Observation| include_pixels.then(|| base64::engine::general_purpose::STANDARD.encode(o.to_bytes()));
    let mut obs = env.reset(seed);
    let mut trace = vec![TraceStep { t: 0, action: None, reward: 0.0, continuation: true, is_first: true, pixels: enc(&obs) }];
    loop {
        let a = policy(&obs);
        let r = env.step(a)?;
        trace.push(TraceStep {
            t: trace.len(),
            action: Some(a),
            reward: r.reward,
            continuation: r.continuation,
            is_first: false,
            pixels: enc(&r.observation),
        });
        obs = r.observation;
        if !r.continuation {
            return Ok(trace);
        }
    }
}

pub fn trace_to_jsonl(trace: &[TraceStep]) -> String {
    trace.iter().map(|s| serde_json::to_string(s).expect("trace serialises") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tmaze_actions::*;

    fn run(env: &mut dyn Environment, seed: u64, actions: &[usize]) -> Vec<(Vec<f32>, f64, bool)> {
        let mut out = vec![(env.reset(seed).pixels, 0.0, true)];
        for &a in actions {
            let r = env.step(a).unwrap();
            out.push((r.observation.pixels, r.reward, r.continuation));
            if !r.continuation {
                break;
            }
        }
        out
    }

    #[test]
    fn tmaze_reset_shape_and_first_flag() {
        let mut env = TMaze::new(10, 2, 100, 16, 7).unwrap();
        let obs = env.reset(7);
        assert!(obs.is_first);
        assert_eq!((obs.height, obs.width, obs.pixels.len()), (16, 16, 16 * 16 * 3));
        assert!(obs.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn same_seed_same_actions_bitwise_identical() {
        let actions = [0, 1, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let mut a = TMaze::new(10, 2, 100, 16, 0).unwrap();
        let mut b = TMaze::new(10, 2, 100, 16, 0).unwrap();
        assert_eq!(run(&mut a, 11, &actions), run(&mut b, 11, &actions));
        let cfg = EnvConfig { name: "keydoor".into(), distractor: true, ..EnvConfig::default() };
        let mut a = make_env(&cfg, 0).unwrap();
        let mut b = make_env(&cfg, 0).unwrap();
        let acts: Vec<usize> = (0..60).map(|i| (i * 7 + 3) % 4).collect();
        assert_eq!(run(a.as_mut(), 5, &acts), run(b.as_mut(), 5, &acts));
    }

    fn walk_to_junction(env: &mut TMaze) {
        for _ in 0..env.corridor_len() {
            assert!(env.step(FORWARD).unwrap().continuation);
        }
        assert!(env.at_decision_point());
    }

    #[test]
    fn tmaze_correct_and_incorrect_choice() {
        let mut env = TMaze::new(10, 2, 100, 16, 0).unwrap();
        env.reset_with_cue(Cue::Left);
        walk_to_junction(&mut env);
        let r = env.step(LEFT).unwrap();
        assert_eq!((r.reward, r.continuation), (1.0, false));
        env.reset_with_cue(Cue::Left);
        walk_to_junction(&mut env);
        let r = env.step(RIGHT).unwrap();
        assert_eq!((r.reward, r.continuation), (-1.0, false));
    }

    #[test]
    fn tmaze_cue_visible_only_during_cue_steps() {
        let mut left = TMaze::new(10, 2, 100, 16, 0).unwrap();
        let mut right = TMaze::new(10, 2, 100, 16, 0).unwrap();
        let a0 = left.reset_with_cue(Cue::Left);
        let b0 = right.reset_with_cue(Cue::Right);
        assert_ne!(a0.pixels, b0.pixels);
        let a1 = left.step(FORWARD).unwrap().observation;
        let b1 = right.step(FORWARD).unwrap().observation;
        assert_ne!(a1.pixels, b1.pixels);
        let a2 = left.step(FORWARD).unwrap().observation;
        let b2 = right.step(FORWARD).unwrap().observation;
        assert_eq!(a2.pixels, b2.pixels);
    }

    #[test]
    fn tmaze_exhaustive_policy_returns() {
        // cue-following earns +1 on both cues; a fixed side earns +1 and -1.
        let mut env = TMaze::new(10, 2, 100, 16, 0).unwrap();
        let mut follow = 0.0;
        let mut ignore = 0.0;
        for cue in [Cue::Left, Cue::Right] {
            env.reset_with_cue(cue);
            walk_to_junction(&mut env);
            follow += env.step(if cue == Cue::Left { LEFT } else { RIGHT }).unwrap().reward;
            env.reset_with_cue(cue);
            walk_to_junction(&mut env);
            ignore += env.step(LEFT).unwrap().reward;
        }
        assert_eq!(follow / 2.0, 1.0);
        assert_eq!(ignore / 2.0, 0.0);
    }

    #[test]
    fn time_limit_terminates_without_reward() {
        let mut env = TMaze::new(10, 2, 5, 16, 0).unwrap();
        env.reset(3);
        for i in 0..5 {
            let r = env.step(LEFT).unwrap();
            assert_eq!(r.reward, 0.0);
            assert_eq!(r.continuation, i < 4);
        }
        assert!(matches!(env.step(FORWARD), Err(Error::EpisodeTerminated)));
    }

    #[test]
    fn invalid_actions_and_specs_rejected() {
        let mut env = TMaze::new(10, 2, 100, 16, 0).unwrap();
        assert!(matches!(env.step(0), Err(Error::EpisodeTerminated)));
        env.reset(1);
        assert!(matches!(env.step(3), Err(Error::InvalidAction { .. })));
        let spec = EnvSpec { name: "x".into(), obs_height: 16, obs_width: 16, num_actions: 0, max_episode_steps: 5, seed: 0 };
        assert!(spec.validate().is_err());
        assert!(TMaze::new(10, 2, 0, 16, 0).is_err());
        assert!(make_env(&EnvConfig { name: "doom".into(), ..EnvConfig::default() }, 0).is_err());
    }

    #[test]
    fn keydoor_key_visible_iff_in_window() {
        let mut env = KeyDoor::new(7, 100, 16, 0).unwrap();
        let key_color = [240.0 / 255.0, 220.0 / 255.0, 30.0 / 255.0];
        for seed in 0..40 {
            let obs = env.reset(seed);
            assert_eq!(env.agent(), KeyDoor::START);
            let key = env.key().unwrap();
            let visible = obs.pixels.chunks(3).any(|p| p.iter().zip(&key_color).all(|(a, b)| (a - b).abs() < 1e-6));
            assert_eq!(visible, env.in_view(key), "seed {seed}");
        }
    }

    #[test]
    fn keydoor_rewards_only_with_key() {
        let mut env = KeyDoor::new(5, 200, 16, 0).unwrap();
        // exhaustive sweep until success with a scripted path planner
        for seed in 0..20 {
            env.reset(seed);
            let mut total = 0.0;
            for target in [env.key().unwrap(), env.door()] {
                while env.agent() != target {
                    let (r, c) = env.agent();
                    let a = if r < target.0 {
                        keydoor_actions::DOWN
                    } else if r > target.0 {
                        keydoor_actions::UP
                    } else if c < target.1 {
                        keydoor_actions::RIGHT
                    } else {
                        keydoor_actions::LEFT
                    };
                    let res = env.step(a).unwrap();
                    total += res.reward;
                    if !res.continuation {
                        break;
                    }
                }
            }
            assert!(env.has_key());
            assert_eq!(total, 1.0, "seed {seed}");
        }
    }

    #[test]
    fn distractor_changes_patch_only_and_keeps_rewards() {
        let cfg = EnvConfig::default();
        let mut plain = make_env(&cfg, 0).unwrap();
        let mut noisy = make_env(&EnvConfig { distractor: true, ..cfg }, 0).unwrap();
        let a = plain.reset(9);
        let b = noisy.reset(9);
        let patch = 4;
        for y in 0..16 {
            for x in 0..16 {
                for ch in 0..3 {
                    let i = (y * 16 + x) * 3 + ch;
                    if y >= patch || x >= patch {
                        assert_eq!(a.pixels[i], b.pixels[i]);
                    }
                }
            }
        }
        assert_ne!(a.pixels, b.pixels);
        for _ in 0..10 {
            let ra = plain.step(0).unwrap();
            let rb = noisy.step(0).unwrap();
            assert_eq!((ra.reward, ra.continuation), (rb.reward, rb.continuation));
        }
    }

    #[test]
    fn rewards_within_declared_bounds() {
        for name in ["tmaze", "keydoor", "linear_gaussian"] {
            let mut env = make_env(&EnvConfig { name: name.into(), max_episode_steps: 60, ..EnvConfig::default() }, 0).unwrap();
            let (lo, hi) = env.reward_range();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for ep in 0..10 {
                env.reset(ep);
                loop {
                    let a = rng.gen_range(0..env.spec().num_actions);
                    let r = env.step(a).unwrap();
                    assert!(r.reward >= lo && r.reward <= hi);
                    assert!(r.observation.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
                    if !r.continuation {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn kalman_filter_beats_raw_measurements() {
        let mut env = LinearGaussianPomdp::new(400, 16, 0).unwrap();
        env.reset(4);
        let mut kf = env.filter();
        kf.update(env.measurement());
        let (mut filt, mut raw) = (0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..399 {
            let a = rng.gen_range(0..5);
            env.step(a).unwrap();
            kf.predict(LinearGaussianPomdp::control(a));
            kf.update(env.measurement());
            filt += (kf.mean - env.latent()).norm_squared();
            raw += (env.measurement() - env.latent()).norm_squared();
        }
        assert!(filt < 0.6 * raw, "filter {filt} vs raw {raw}");
    }

    #[test]
    fn trace_export_with_and_without_pixels() {
        let mut env = TMaze::new(3, 2, 20, 16, 0).unwrap();
        let trace = record_episode(&mut env, 1, true, |_| FORWARD).unwrap();
        let text = trace_to_jsonl(&trace);
        assert_eq!(text.lines().count(), trace.len());
        let first: TraceStep = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.is_first && first.pixels.is_some());
        let plain = record_episode(&mut env, 1, false, |_| FORWARD).unwrap();
        assert!(!trace_to_jsonl(&plain).contains("pixels"));
    }
}
