use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use nedreamer::config::{Config, EnvConfig, NeMode};
use nedreamer::diagnostics::{self, DecoderProbeConfig};
use nedreamer::trainer::{self, MetricsRecord, RunSummary, CONFIG_SNAPSHOT, METRICS_FILE};
use nedreamer::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::plot::{aggregate, ema, line_chart, Series};
use crate::ConfigArgs;

pub const MANIFEST: &str = "manifest.json";
const CURVE_POINTS: usize = 100;
const DISPLAY_EMA: f64 = 0.99;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownKey { .. } | Error::InvalidMode(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Curve = (Vec<f64>, Vec<f64>);

type CliResult<T> = std::result::Result<T, CliError>;

/// Written once, before training starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub code_version: String,
    pub command: Vec<String>,
    pub created_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn load_config(args: &ConfigArgs) -> CliResult<Config> {
    match &args.config {
        // An unreadable config file is a usage problem, not a failed run.
        Some(path) => Config::load(path, &args.overrides).map_err(|e| match e {
            Error::Io { .. } => CliError::Usage(format!("cannot read config file: {e}")),
            other => other.into(),
        }),
        None => Ok(Config::from_str_with_overrides("", &args.overrides)?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn run_id(cfg: &Config) -> String {
    format!("{}-{}-seed{}-{}", cfg.env.name, cfg.ne.mode.as_str(), cfg.seed, cfg.hash())
}

fn start_run(cfg: &Config, run_dir: &Path, argv: &[String]) -> CliResult<RunSummary> {
    let manifest_path = run_dir.join(MANIFEST);
    if manifest_path.exists() {
        return Err(runtime(format!("{} already exists; refusing to overwrite a run", manifest_path.display())));
    }
    let manifest = RunManifest {
        run_id: run_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        config_hash: cfg.hash(),
        code_version: env!("NEDREAMER_CODE_VERSION").to_string(),
        command: argv.to_vec(),
        created_unix: now(),
    };
    write_json(&manifest_path, &manifest)?;
    let summary = trainer::train(cfg, run_dir)?;
    write_json(&run_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn train(args: &ConfigArgs, out: &Path, argv: &[String]) -> CliResult<()> {
    let cfg = load_config(args)?;
    let run_dir = out.join(run_id(&cfg));
    log::info!("training into {}", run_dir.display());
    let summary = start_run(&cfg, &run_dir, argv)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(runtime)?);
    Ok(())
}

pub fn evaluate(checkpoint: &Path, episodes: usize, seed: u64, out: Option<&Path>, overrides: &[String]) -> CliResult<()> {
    if let Some(bad) = overrides.iter().find(|o| !o.trim_start().starts_with("env.")) {
        return Err(CliError::Usage(format!("evaluate accepts only env.* overrides, got `{bad}`")));
    }
    let env_cfg: Option<EnvConfig> = if overrides.is_empty() {
        None
    } else {
        let (agent, _) = nedreamer::checkpoint::load(checkpoint)?;
        Some(agent.cfg.with_overrides(overrides)?.env)
    };
    let report = trainer::evaluate_checkpoint(checkpoint, env_cfg.as_ref(), episodes, seed)?;
    if let Some(dir) = out {
        write_json(&dir.join("eval.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    Ok(())
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    /// Runs sharing this id differ only in mode.
    pub pair_id: u64,
    pub final_mean_return: f64,
    pub final_success_rate: f64,
    /// Time-normalised area under the evaluation mean-return curve.
    pub auc_return: f64,
    pub auc_success: f64,
    pub env_steps: u64,
    pub run_dir: String,
}

/// Trapezoid area under `(x, y)` divided by the x span.
pub fn normalized_auc(xs: &[f64], ys: &[f64]) -> f64 {
    match xs.len() {
        0 => f64::NAN,
        1 => ys[0],
        n => {
            let span = xs[n - 1] - xs[0];
            if span <= 0.0 {
                return ys.iter().sum::<f64>() / n as f64;
            }
            let area: f64 = (1..n).map(|i| 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1])).sum();
            area / span
        }
    }
}

fn eval_curve(records: &[MetricsRecord], key: &str) -> (Vec<f64>, Vec<f64>) {
    records
        .iter()
        .filter(|r| r.kind == "eval")
        .filter_map(|r| r.values.get(key).map(|v| (r.env_step as f64, *v)))
        .unzip()
}

fn ablation_row(mode: &str, seed: u64, run_dir: &Path) -> CliResult<AblationRow> {
    let records = read_run_metrics(run_dir)?;
    let (xr, yr) = eval_curve(&records, "mean_return");
    let (xs, ys) = eval_curve(&records, "success_rate");
    Ok(AblationRow {
        mode: mode.to_string(),
        seed,
        pair_id: seed,
        final_mean_return: yr.last().copied().unwrap_or(f64::NAN),
        final_success_rate: ys.last().copied().unwrap_or(f64::NAN),
        auc_return: normalized_auc(&xr, &yr),
        auc_success: normalized_auc(&xs, &ys),
        env_steps: records.iter().map(|r| r.env_step).max().unwrap_or(0),
        run_dir: run_dir.display().to_string(),
    })
}

fn finished(run_dir: &Path, cfg: &Config) -> bool {
    let snap = std::fs::read_to_string(run_dir.join(CONFIG_SNAPSHOT)).ok();
    run_dir.join("summary.json").exists() && snap.as_deref() == Some(cfg.to_toml().as_str())
}

pub fn ablate(args: &ConfigArgs, modes: &[String], seeds: &[u64], out: &Path, jobs: usize, argv: &[String]) -> CliResult<()> {
    let base = load_config(args)?;
    let modes: Vec<NeMode> = modes.iter().map(|m| m.parse::<NeMode>()).collect::<Result<_, _>>()?;
    if modes.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one mode and one seed".into()));
    }
    let mut plan = Vec::new();
    for &mode in &modes {
        for &seed in seeds {
            let cfg = base.with_overrides(&[format!("ne.mode={}", mode.as_str()), format!("seed={seed}")])?;
            let dir = out.join("runs").join(mode.as_str()).join(format!("seed{seed}"));
            plan.push((mode, seed, cfg, dir));
        }
    }
    log::info!("{} runs ({} modes x {} seeds) under {}", plan.len(), modes.len(), seeds.len(), out.display());

    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((mode, seed, cfg, dir)) = plan.get(i) else { break };
        if finished(dir, cfg) {
            log::info!("reusing finished run {}", dir.display());
            continue;
        }
        if dir.exists() {
            // An interrupted run is restarted from scratch.
            let _ = std::fs::remove_dir_all(dir);
        }
        log::info!("run {}/{}: mode {} seed {}", i + 1, plan.len(), mode.as_str(), seed);
        if let Err(e) = start_run(cfg, dir, argv) {
            failures.lock().unwrap().push(format!("{} seed {}: {e}", mode.as_str(), seed));
        }
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(plan.len()) {
            s.spawn(worker);
        }
    });
    let failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        return Err(runtime(format!("{} run(s) failed: {}", failures.len(), failures.join("; "))));
    }

    let rows: Vec<AblationRow> = plan.iter().map(|(m, s, _, d)| ablation_row(m.as_str(), *s, d)).collect::<CliResult<_>>()?;
    let csv_path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(runtime)?;
    for row in &rows {
        w.serialize(row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;

    for (key, name, ylabel) in [("success_rate", "ablation_success.svg", "success rate"), ("mean_return", "ablation_return.svg", "mean return")] {
        let mut series = Vec::new();
        for &mode in &modes {
            let curves: Vec<(Vec<f64>, Vec<f64>)> =
                plan.iter().filter(|p| p.0 == mode).map(|p| read_run_metrics(&p.3).map(|r| eval_curve(&r, key))).collect::<CliResult<_>>()?;
            if let Some(s) = aggregate(mode.as_str(), &curves, CURVE_POINTS) {
                series.push(s);
            }
        }
        write_text(&out.join(name), &line_chart(&format!("{} ablation ({} seeds)", base.env.name, seeds.len()), "env steps", ylabel, &series))?;
    }
    for row in &rows {
        println!("{:<16} seed {:<4} final return {:>7.3} success {:>5.2} auc {:>7.3}", row.mode, row.seed, row.final_mean_return, row.final_success_rate, row.auc_return);
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn read_run_metrics(run_dir: &Path) -> CliResult<Vec<MetricsRecord>> {
    let path = run_dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(runtime(format!("{}: no metrics file", path.display())));
    }
    let records = trainer::read_metrics(&path)?;
    if records.is_empty() {
        return Err(runtime(format!("{}: metrics file is empty", path.display())));
    }
    Ok(records)
}

fn run_label(run_dir: &Path) -> String {
    std::fs::read_to_string(run_dir.join(CONFIG_SNAPSHOT))
        .ok()
        .and_then(|t| Config::from_str_with_overrides(&t, &[]).ok())
        .map(|c| format!("{}/{}", c.env.name, c.ne.mode.as_str()))
        .unwrap_or_else(|| run_dir.display().to_string())
}

fn file_stem(key: &str) -> String {
    key.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

fn write_series_csv(path: &Path, series: &[Series]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    w.write_record(["label", "x", "mean", "std"]).map_err(runtime)?;
    for s in series {
        for i in 0..s.x.len() {
            let std = s.spread.as_ref().map_or(String::new(), |v| v[i].to_string());
            w.write_record([s.label.clone(), s.x[i].to_string(), s.mean[i].to_string(), std]).map_err(runtime)?;
        }
    }
    w.flush().map_err(runtime)
}

/// Curves of one metric, grouped by run label.
fn metric_series(runs: &[(String, Vec<MetricsRecord>)], kind: &str, key: &str, smooth: bool) -> Vec<Series> {
    let mut groups: BTreeMap<&str, Vec<Curve>> = BTreeMap::new();
    for (label, records) in runs {
        let (x, mut y): (Vec<f64>, Vec<f64>) =
            records.iter().filter(|r| r.kind == kind).filter_map(|r| r.values.get(key).map(|v| (r.env_step as f64, *v))).unzip();
        if x.is_empty() {
            continue;
        }
        if smooth {
            y = ema(&y, DISPLAY_EMA);
        }
        groups.entry(label).or_default().push((x, y));
    }
    groups.into_iter().filter_map(|(label, curves)| aggregate(label, &curves, CURVE_POINTS)).collect()
}

pub fn plot(run_dirs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut runs = Vec::new();
    for dir in run_dirs {
        runs.push((run_label(dir), read_run_metrics(dir)?));
    }
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let mut keys: BTreeMap<(String, String), ()> = BTreeMap::new();
    for (_, records) in &runs {
        for r in records {
            for k in r.values.keys() {
                keys.insert((r.kind.clone(), k.clone()), ());
            }
        }
    }
    let mut written = 0;
    for (kind, key) in keys.keys() {
        let smooth = kind != "eval";
        let series = metric_series(&runs, kind, key, smooth);
        if series.is_empty() {
            continue;
        }
        let stem = format!("{}_{}", kind, file_stem(key));
        let title = if smooth { format!("{key} ({kind}, EMA {DISPLAY_EMA})") } else { format!("{key} ({kind})") };
        write_text(&out.join(format!("{stem}.svg")), &line_chart(&title, "env steps", key, &series))?;
        write_series_csv(&out.join(format!("{stem}.csv")), &series)?;
        written += 1;
    }
    println!("wrote {written} plots to {}", out.display());
    Ok(())
}

pub fn diagnose(checkpoint: Option<&Path>, gradcheck: bool, episodes: usize, probe_steps: usize, seed: u64, out: Option<&Path>) -> CliResult<()> {
    if checkpoint.is_none() && !gradcheck {
        return Err(CliError::Usage("diagnose needs --checkpoint and/or --gradcheck".into()));
    }
    let out_dir = match (out, checkpoint) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(c)) => c.parent().and_then(Path::parent).unwrap_or(Path::new(".")).join("diagnostics"),
        (None, None) => return Err(CliError::Usage("--gradcheck without --checkpoint needs --out".into())),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;
    let mut failed = Vec::new();

    if let Some(path) = checkpoint {
        let (agent, step) = nedreamer::checkpoint::load(path)?;
        log::info!("checkpoint at env step {step}; collecting {episodes} episodes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = if agent.cfg.env.name == "tmaze" {
            diagnostics::collect_episodes(&agent.cfg.env, episodes, seed, diagnostics::tmaze_walk)?
        } else {
            diagnostics::collect_episodes(&agent.cfg.env, episodes, seed, |env, _| rng.gen_range(0..env.spec().num_actions))?
        };
        let repr = diagnostics::representation_report(&agent, &eps, seed)?;
        write_json(&out_dir.join("repr.json"), &repr)?;
        println!("{}", serde_json::to_string_pretty(&repr).map_err(runtime)?);
        let probe_cfg = DecoderProbeConfig { steps: probe_steps, seed, ..Default::default() };
        let probe = diagnostics::posthoc_decoder_probe(&agent, &eps, &probe_cfg, Some(&out_dir))?;
        println!("post-hoc decoder: mean mse {:.5} after {} steps", probe.mean_mse, probe.steps);
        if probe.wm_fingerprint_before != probe.wm_fingerprint_after {
            failed.push("world model changed during the decoder probe".to_string());
        }
    }

    if gradcheck {
        let suite = diagnostics::gradcheck_suite(seed)?;
        let json: BTreeMap<&str, _> = suite.iter().map(|(n, r)| (n.as_str(), r)).collect();
        write_json(&out_dir.join("gradcheck.json"), &json)?;
        for (name, report) in &suite {
            println!("{:<36} max rel error {:.3e} {}", name, report.max_rel_error, if report.passed { "ok" } else { "FAILED" });
            if !report.passed {
                failed.push(format!("gradient check {name}"));
            }
        }
    }
    if !failed.is_empty() {
        return Err(runtime(failed.join("; ")));
    }
    println!("wrote diagnostics to {}", out_dir.display());
    Ok(())
}
