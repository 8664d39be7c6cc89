//! Agent checkpoints: one JSON header line, then little-endian f64 parameter data.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{io_err, Error, Result};
use crate::params::ParamStore;
use crate::trainer::Agent;

const FORMAT: &str = "nedreamer-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    name: String,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    num_actions: usize,
    config: String,
    return_scale: f64,
    stores: Vec<StoreHeader>,
}

fn stores(agent: &Agent) -> [(&'static str, &ParamStore); 4] {
    [("wm", &agent.wm.params), ("actor", &agent.ac.actor), ("critic", &agent.ac.critic), ("slow_critic", &agent.ac.slow_critic)]
}

/// Writes parameters, the return scale, and the config needed to rebuild the agent.
pub fn save(path: &Path, agent: &Agent, step: u64) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        step,
        num_actions: agent.num_actions(),
        config: agent.cfg.to_toml(),
        return_scale: agent.ac.return_scale.value,
        stores: stores(agent)
            .iter()
            .map(|(name, s)| StoreHeader {
                name: name.to_string(),
                tensors: s.iter().map(|(n, t)| TensorHeader { name: n.into(), shape: t.shape().to_vec() }).collect(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (_, s) in stores(agent) {
            for t in s.values() {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Rebuilds the agent described by a checkpoint. Returns it with the saved step.
pub fn load(path: &Path) -> Result<(Agent, u64)> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io_err(path))?;
    let header: Header = serde_json::from_str(&line).map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported format {} v{}", path.display(), header.format, header.version)));
    }
    let cfg = Config::from_str_with_overrides(&header.config, &[])?;
    let mut agent = Agent::new(&cfg, header.num_actions, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    agent.ac.return_scale.value = header.return_scale;
    let targets: [&mut ParamStore; 4] = [&mut agent.wm.params, &mut agent.ac.actor, &mut agent.ac.critic, &mut agent.ac.slow_critic];
    if header.stores.len() != targets.len() {
        return Err(Error::Checkpoint(format!("expected {} parameter groups, found {}", targets.len(), header.stores.len())));
    }
    let mut buf = [0u8; 8];
    for (sh, store) in header.stores.iter().zip(targets) {
        let layout: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let saved: Vec<(String, Vec<usize>)> = sh.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if layout != saved {
            return Err(Error::Checkpoint(format!("parameter layout of `{}` does not match the config", sh.name)));
        }
        for t in store.values_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut buf).map_err(|_| Error::Checkpoint(format!("{}: truncated data", path.display())))?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    if r.read(&mut buf).map_err(io_err(path))? != 0 {
        return Err(Error::Checkpoint(format!("{}: trailing data", path.display())));
    }
    Ok((agent, header.step))
}
