use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, EnvConfig, Frame, FrameHistory, WorldState};
use crate::error::{Error, Result};

/// One line of a trajectory log. `y`/`vy` are the state before `action`;
/// `reward` and `collision` describe the transition that action caused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub y: f64,
    pub vy: f64,
    pub action: Action,
    pub reward: i32,
    pub collision: bool,
    pub frame_idx: u64,
}

/// A single episode: per-tick records plus the 80x80 frame observed at each tick.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<TickRecord>,
    pub frames: Vec<Frame>,
    pub final_score: u64,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].tick <= w[0].tick {
                return Err(Error::Format(format!(
                    "ticks not increasing: {} then {}",
                    w[0].tick, w[1].tick
                )));
            }
        }
        if let Some(pos) = self.records.iter().position(|r| r.collision) {
            if pos + 1 != self.records.len() {
                return Err(Error::Format(format!(
                    "collision at record {pos} is not the final record"
                )));
            }
        }
        if !self.frames.is_empty() {
            if let Some(r) = self.records.iter().find(|r| r.frame_idx as usize >= self.frames.len()) {
                return Err(Error::Format(format!(
                    "frame_idx {} out of range ({} frames)",
                    r.frame_idx,
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }
}

/// Play one episode with the environment seeded from `cfg.rng_seed`.
///
/// Reward is +1 for a passed opening, -1 on collision, 0 otherwise. The policy
/// sees the state and the frame history including the current frame.
pub fn run_episode<P>(cfg: &EnvConfig, mut policy: P, max_ticks: u64) -> Result<TrajectoryLog>
where
    P: FnMut(&WorldState, &FrameHistory) -> Action,
{
    if max_ticks == 0 {
        return Err(Error::Config("max_ticks must be positive".into()));
    }
    let mut env = Env::new(cfg.clone())?;
    let mut history = FrameHistory::new();
    let mut log = TrajectoryLog::default();
    while env.state().alive && (log.records.len() as u64) < max_ticks {
        let before = env.state().clone();
        let frame = history.observe(&before, cfg).clone();
        let action = policy(&before, &history);
        let after = env.step(action)?;
        let collision = !after.alive;
        let reward = if collision {
            -1
        } else {
            (after.score - before.score) as i32
        };
        log.records.push(TickRecord {
            tick: before.tick,
            y: before.bird_y,
            vy: before.bird_vy,
            action,
            reward,
            collision,
            frame_idx: log.frames.len() as u64,
        });
        log.frames.push(frame);
    }
    log.final_score = env.state().score;
    Ok(log)
}

pub fn write_log(path: &Path, records: &[TickRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TickRecord>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            what: "trajectory log".into(),
            path: path.to_path_buf(),
        },
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TickRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

const FRAME_MAGIC: &[u8; 5] = b"IPPF1";

/// Frame sidecar: magic, u32 count, u32 width, u32 height, then f32 pixels,
/// all little-endian.
pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width, f.height));
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::Shape("frames in one sidecar must share dimensions".into()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FRAME_MAGIC)?;
    for v in [frames.len(), w, h] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for f in frames {
        for p in &f.pixels {
            out.write_all(&p.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                what: "frame sidecar".into(),
                path: path.to_path_buf(),
            },
            _ => e.into(),
        })?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 17 || &bytes[..5] != FRAME_MAGIC {
        return Err(Error::Format(format!("{}: not a frame sidecar", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (count, w, h) = (u32_at(5), u32_at(9), u32_at(13));
    let expected = 17 + count * w * h * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(count);
    let mut chunks = bytes[17..].chunks_exact(4);
    for _ in 0..count {
        let pixels: Vec<f32> = chunks
            .by_ref()
            .take(w * h)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(Frame::from_pixels(w, h, pixels)?);
    }
    Ok(frames)
}
