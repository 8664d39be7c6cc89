//! Sequence replay: per-stream transition storage with global FIFO eviction
//! and uniform sampling of contiguous chunks.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    /// `H * W * 3` bytes, HWC.
    pub pixels: Vec<u8>,
    /// Action taken from this step's observation.
    pub action: usize,
    /// Reward received on entering this step.
    pub reward: f64,
    pub continuation: bool,
    pub is_first: bool,
}

#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub batch: usize,
    pub length: usize,
    /// `[B, T, H, W, 3]` in `[0, 1]`.
    pub pixels: Tensor,
    /// Row-major `B x T` fields.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<bool>,
    pub is_first: Vec<bool>,
}

impl SequenceBatch {
    pub fn index(&self, b: usize, t: usize) -> usize {
        b * self.length + t
    }

    /// Pixels for time step `t` of every sequence: `[B, H, W, 3]`.
    pub fn pixels_at(&self, t: usize) -> Tensor {
        let s = self.pixels.shape();
        let frame = s[2] * s[3] * s[4];
        let mut out = Vec::with_capacity(self.batch * frame);
        for b in 0..self.batch {
            let off = (b * self.length + t) * frame;
            out.extend_from_slice(&self.pixels.data()[off..off + frame]);
        }
        Tensor::new(&[self.batch, s[2], s[3], s[4]], out)
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    streams: Vec<VecDeque<TransitionRecord>>,
    /// Stream id of every stored step, oldest first.
    order: VecDeque<u32>,
    obs_shape: (usize, usize),
}

impl ReplayBuffer {
    pub fn new(capacity: usize, num_streams: usize, obs_height: usize, obs_width: usize) -> Self {
        assert!(capacity > 0 && num_streams > 0);
        Self { capacity, streams: vec![VecDeque::new(); num_streams], order: VecDeque::new(), obs_shape: (obs_height, obs_width) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn num_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn stream(&self, id: usize) -> &VecDeque<TransitionRecord> {
        &self.streams[id]
    }

    pub fn append(&mut self, stream_id: usize, record: TransitionRecord) -> Result<()> {
        if stream_id >= self.streams.len() {
            return Err(Error::Precondition(format!("stream {stream_id} >= {} streams", self.streams.len())));
        }
        let frame = self.obs_shape.0 * self.obs_shape.1 * 3;
        if record.pixels.len() != frame {
            return Err(Error::ShapeMismatch { expected: vec![frame], got: vec![record.pixels.len()] });
        }
        self.streams[stream_id].push_back(record);
        self.order.push_back(stream_id as u32);
        while self.order.len() > self.capacity {
            let victim = self.order.pop_front().expect("non-empty") as usize;
            self.streams[victim].pop_front();
        }
        Ok(())
    }

    /// Number of valid chunk starts per stream for length `t`.
    pub fn valid_starts(&self, t: usize) -> Vec<usize> {
        self.streams.iter().map(|s| (s.len() + 1).saturating_sub(t)).collect()
    }

    /// Draws `b` chunks of length `t`, uniform over all valid (stream, start) pairs.
    pub fn sample(&self, b: usize, t: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        let starts = self.valid_starts(t);
        let total: usize = starts.iter().sum();
        if total == 0 || t == 0 {
            let available = self.streams.iter().map(|s| s.len()).max().unwrap_or(0);
            return Err(Error::NotReady { needed: t, available });
        }
        let (h, w) = self.obs_shape;
        let frame = h * w * 3;
        let mut pixels = Vec::with_capacity(b * t * frame);
        let mut actions = Vec::with_capacity(b * t);
        let mut rewards = Vec::with_capacity(b * t);
        let mut continuations = Vec::with_capacity(b * t);
        let mut is_first = Vec::with_capacity(b * t);
        for _ in 0..b {
            let (stream, start) = locate(&starts, rng.gen_range(0..total));
            for rec in self.streams[stream].range(start..start + t) {
                pixels.extend(rec.pixels.iter().map(|&p| p as f64 / 255.0));
                actions.push(rec.action);
                rewards.push(rec.reward);
                continuations.push(rec.continuation);
                is_first.push(rec.is_first);
            }
        }
        Ok(SequenceBatch { batch: b, length: t, pixels: Tensor::new(&[b, t, h, w, 3], pixels), actions, rewards, continuations, is_first })
    }

    /// Writes the buffer as a manifest plus per-stream chunk files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut streams = Vec::new();
        for (id, s) in self.streams.iter().enumerate() {
            let mut files = Vec::new();
            let recs: Vec<&TransitionRecord> = s.iter().collect();
            for (ci, chunk) in recs.chunks(CHUNK_RECORDS).enumerate() {
                let name = format!("stream{id:03}_chunk{ci:05}.bin");
                let mut buf = Vec::with_capacity(chunk.len() * (self.frame() + 16));
                for r in chunk {
                    buf.extend_from_slice(&r.pixels);
                    buf.extend_from_slice(&(r.action as u32).to_le_bytes());
                    buf.extend_from_slice(&r.reward.to_le_bytes());
                    buf.push(r.continuation as u8);
                    buf.push(r.is_first as u8);
                }
                let path = dir.join(&name);
                fs::File::create(&path).and_then(|mut f| f.write_all(&buf)).map_err(io_err(&path))?;
                files.push(ChunkEntry { file: name, records: chunk.len() });
            }
            streams.push(StreamEntry { id, chunks: files });
        }
        let order: Vec<u32> = self.order.iter().copied().collect();
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            capacity: self.capacity,
            obs_height: self.obs_shape.0,
            obs_width: self.obs_shape.1,
            streams,
            order,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Checkpoint(format!("unsupported replay manifest version {}", manifest.version)));
        }
        let mut buf = Self::new(manifest.capacity, manifest.streams.len(), manifest.obs_height, manifest.obs_width);
        let frame = buf.frame();
        let rec_len = frame + 4 + 8 + 2;
        for entry in &manifest.streams {
            for chunk in &entry.chunks {
                let p = dir.join(&chunk.file);
                let mut bytes = Vec::new();
                fs::File::open(&p).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(&p))?;
                if bytes.len() != chunk.records * rec_len {
                    return Err(Error::Checkpoint(format!("{} has {} bytes, expected {}", chunk.file, bytes.len(), chunk.records * rec_len)));
                }
                for r in bytes.chunks_exact(rec_len) {
                    let (px, rest) = r.split_at(frame);
                    buf.streams[entry.id].push_back(TransitionRecord {
                        pixels: px.to_vec(),
                        action: u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize,
                        reward: f64::from_le_bytes(rest[4..12].try_into().unwrap()),
                        continuation: rest[12] != 0,
                        is_first: rest[13] != 0,
                    });
                }
            }
        }
        buf.order = manifest.order.into_iter().collect();
        let stored: usize = buf.streams.iter().map(|s| s.len()).sum();
        if stored != buf.order.len() {
            return Err(Error::Checkpoint("replay manifest order does not match stored records".into()));
        }
        Ok(buf)
    }

    fn frame(&self) -> usize {
        self.obs_shape.0 * self.obs_shape.1 * 3
    }
}

fn locate(starts: &[usize], mut k: usize) -> (usize, usize) {
    for (s, &n) in starts.iter().enumerate() {
        if k < n {
            return (s, k);
        }
        k -= n;
    }
    unreachable!("index within total")
}

const MANIFEST_VERSION: u32 = 1;
const CHUNK_RECORDS: usize = 4096;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    capacity: usize,
    obs_height: usize,
    obs_width: usize,
    streams: Vec<StreamEntry>,
    order: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct StreamEntry {
    id: usize,
    chunks: Vec<ChunkEntry>,
}

#[derive(Serialize, Deserialize)]
struct ChunkEntry {
    file: String,
    records: usize,
}

/// Buffer shared between a collecting writer and a training reader; every
/// call takes the lock, so appends and samples never interleave.
#[derive(Clone, Debug)]
pub struct SharedReplay(Arc<Mutex<ReplayBuffer>>);

impl SharedReplay {
    pub fn new(buffer: ReplayBuffer) -> Self {
        Self(Arc::new(Mutex::new(buffer)))
    }

    pub fn lock(&self) -> MutexGuard<'_, ReplayBuffer> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append(&self, stream_id: usize, record: TransitionRecord) -> Result<()> {
        self.lock().append(stream_id, record)
    }

    pub fn sample(&self, b: usize, t: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        self.lock().sample(b, t, rng)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }
}
