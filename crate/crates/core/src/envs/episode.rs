//! Episode container, on-disk format, and preprocessing transforms.
//!
//! One file per episode: magic `VPRD`, version u32, then T, H, W, C and
//! the action-space size as little-endian u32, a flags byte (bit 0 =
//! ground-truth rewards present, bit 1 = actions present), raw frame
//! bytes, actions as u8, rewards as little-endian f32. A directory of
//! episode files plus an `index.txt` (filename, task_id, variant_id,
//! total return per line) forms a dataset.

use super::Frame;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VPRD";
const VERSION: u32 = 1;

/// A sequence of frames with the actions and evaluation-only rewards that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub actions: Vec<u8>,
    /// Ground truth, for evaluation only; never a training signal.
    pub env_rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub task_id: u32,
    pub variant_id: u32,
}

impl Episode {
    pub fn total_return(&self) -> f32 {
        self.env_rewards.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(Error::input("episode has no frames"));
        }
        if self.actions.len() + 1 != t && !(self.actions.is_empty() && t == 1) {
            return Err(Error::input("actions must be one shorter than frames"));
        }
        if self.env_rewards.len() != self.actions.len() {
            return Err(Error::input("rewards misaligned with transitions"));
        }
        Ok(())
    }
}

pub fn save_episode(path: &Path, ep: &Episode) -> Result<()> {
    ep.validate()?;
    let t = ep.frames.len() as u32;
    let (h, w) = (ep.frames[0].h as u32, ep.frames[0].w as u32);
    let action_dim = match ep.task_id {
        2 => 3u32,
        _ => 5u32,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    for v in [VERSION, t, h, w, 3, action_dim] {
        f.write_all(&v.to_le_bytes())?;
    }
    let flags: u8 = 0b01 | 0b10; // rewards + actions
    f.write_all(&[flags])?;
    for frame in &ep.frames {
        f.write_all(&frame.pixels)?;
    }
    f.write_all(&ep.actions)?;
    for &r in &ep.env_rewards {
        f.write_all(&r.to_le_bytes())?;
    }
    Ok(())
}

/// Load an episode file; task and variant ids come from the dataset index.
pub fn load_episode(path: &Path, task_id: u32, variant_id: u32) -> Result<Episode> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 6 * 4 + 1 || &bytes[..4] != MAGIC {
        return Err(Error::config(format!("{} is not an episode file", path.display())));
    }
    let u = |i: usize| -> u32 {
        u32::from_le_bytes([bytes[4 + 4 * i], bytes[5 + 4 * i], bytes[6 + 4 * i], bytes[7 + 4 * i]])
    };
    let (version, t, h, w, c) = (u(0), u(1) as usize, u(2) as usize, u(3) as usize, u(4) as usize);
    if version != VERSION {
        return Err(Error::config(format!("unsupported episode version {version}")));
    }
    let flags = bytes[4 + 6 * 4];
    let has_rewards = flags & 0b01 != 0;
    let has_actions = flags & 0b10 != 0;
    let mut off = 4 + 6 * 4 + 1;
    let mut frames = Vec::with_capacity(t);
    let frame_len = h * w * c;
    for _ in 0..t {
        if off + frame_len > bytes.len() {
            return Err(Error::config("episode file truncated"));
        }
        frames.push(Frame { h, w, pixels: bytes[off..off + frame_len].to_vec() });
        off += frame_len;
    }
    let nt = t.saturating_sub(1);
    let mut actions = Vec::new();
    if has_actions {
        actions = bytes[off..off + nt].to_vec();
        off += nt;
    }
    let mut env_rewards = Vec::new();
    if has_rewards {
        for i in 0..nt {
            let b = &bytes[off + 4 * i..off + 4 * i + 4];
            env_rewards.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
    }
    let mut dones = vec![false; nt];
    if let Some(last) = dones.last_mut() {
        *last = true;
    }
    Ok(Episode { frames, actions, env_rewards, dones, task_id, variant_id })
}

/// One dataset index line.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndexEntry {
    pub filename: String,
    pub task_id: u32,
    pub variant_id: u32,
    pub total_return: f32,
}

pub fn write_index(dir: &Path, entries: &[DatasetIndexEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{} {} {} {:.6}\n",
            e.filename, e.task_id, e.variant_id, e.total_return
        ));
    }
    std::fs::write(dir.join("index.txt"), text)?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<DatasetIndexEntry>> {
    let text = std::fs::read_to_string(dir.join("index.txt"))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::config(format!("bad index line: {line}")));
        }
        out.push(DatasetIndexEntry {
            filename: parts[0].to_string(),
            task_id: parts[1].parse().map_err(|_| Error::config("bad task id"))?,
            variant_id: parts[2].parse().map_err(|_| Error::config("bad variant id"))?,
            total_return: parts[3].parse().map_err(|_| Error::config("bad return"))?,
        });
    }
    Ok(out)
}

/// Load every episode listed in a dataset directory's index.
pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    read_index(dir)?
        .iter()
        .map(|e| load_episode(&dir.join(&e.filename), e.task_id, e.variant_id))
        .collect()
}

/// Keep frames at indices 0, stride, 2*stride, ...; rewards of skipped
/// transitions are summed into the covering transition, with the tail
/// folded into the final one so total return is conserved.
pub fn subsample(ep: &Episode, stride: usize) -> Result<Episode> {
    if stride == 0 {
        return Err(Error::input("stride must be >= 1"));
    }
    if stride == 1 {
        return Ok(ep.clone());
    }
    let t = ep.frames.len();
    let kept: Vec<usize> = (0..t).step_by(stride).collect();
    if kept.len() < 2 {
        return Ok(Episode {
            frames: vec![ep.frames[0].clone()],
            actions: Vec::new(),
            env_rewards: Vec::new(),
            dones: Vec::new(),
            task_id: ep.task_id,
            variant_id: ep.variant_id,
        });
    }
    let n = kept.len();
    let mut frames = Vec::with_capacity(n);
    for &i in &kept {
        frames.push(ep.frames[i].clone());
    }
    let mut actions = Vec::with_capacity(n - 1);
    let mut env_rewards = Vec::with_capacity(n - 1);
    let mut dones = Vec::with_capacity(n - 1);
    for j in 0..n - 1 {
        let start = kept[j];
        // the final transition also absorbs any tail past the last kept frame
        let end = if j + 2 == n { t - 1 } else { kept[j + 1] };
        actions.push(ep.actions[start]);
        env_rewards.push(ep.env_rewards[start..end].iter().sum());
        dones.push(ep.dones[start..end].iter().any(|&d| d));
    }
    Ok(Episode { frames, actions, env_rewards, dones, task_id: ep.task_id, variant_id: ep.variant_id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{oracle_policy, rollout, EnvId};

    fn sample_episode() -> Episode {
        rollout(EnvId::Chase, 0, 3, |s| oracle_policy(s)).unwrap()
    }

    #[test]
    fn episode_round_trip() {
        let dir = std::env::temp_dir().join("vprd_test_rt");
        std::fs::create_dir_all(&dir).unwrap();
        let ep = sample_episode();
        let path = dir.join("ep0.vprd");
        save_episode(&path, &ep).unwrap();
        let loaded = load_episode(&path, ep.task_id, ep.variant_id).unwrap();
        assert_eq!(loaded.frames, ep.frames);
        assert_eq!(loaded.actions, ep.actions);
        assert_eq!(loaded.env_rewards, ep.env_rewards);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn index_round_trip() {
        let dir = std::env::temp_dir().join("vprd_test_idx");
        std::fs::create_dir_all(&dir).unwrap();
        let entries = vec![
            DatasetIndexEntry {
                filename: "a.vprd".into(),
                task_id: 0,
                variant_id: 1,
                total_return: 1.0,
            },
            DatasetIndexEntry {
                filename: "b.vprd".into(),
                task_id: 2,
                variant_id: 0,
                total_return: 3.5,
            },
        ];
        write_index(&dir, &entries).unwrap();
        assert_eq!(read_index(&dir).unwrap(), entries);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn subsample_stride_one_is_identity() {
        let ep = sample_episode();
        assert_eq!(subsample(&ep, 1).unwrap(), ep);
    }

    #[test]
    fn subsample_sixteen_by_four_gives_four_frames() {
        let mut ep = sample_episode();
        ep.frames.truncate(16);
        ep.actions.truncate(15);
        ep.env_rewards.truncate(15);
        ep.dones.truncate(15);
        let sub = subsample(&ep, 4).unwrap();
        assert_eq!(sub.frames.len(), 4);
        assert_eq!(sub.actions.len(), 3);
    }

    #[test]
    fn subsample_conserves_total_return() {
        for stride in [2, 3, 4, 5] {
            let ep = sample_episode();
            let sub = subsample(&ep, stride).unwrap();
            assert!(
                (sub.total_return() - ep.total_return()).abs() < 1e-6,
                "stride {stride}"
            );
        }
    }

    #[test]
    fn oversized_stride_yields_single_frame() {
        let ep = sample_episode();
        let sub = subsample(&ep, ep.len() + 10).unwrap();
        assert_eq!(sub.frames.len(), 1);
        assert!(sub.actions.is_empty());
    }
}
