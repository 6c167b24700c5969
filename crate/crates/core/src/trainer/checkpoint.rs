//! Binary checkpoints: a magic tag, a format version, a JSON header and the
//! raw little-endian `f64` arrays (student, momentum, then teacher if any).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::{Layout, ParameterVector};

use super::{Ablation, Mode, RunState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub t: u64,
    pub mode: Mode,
    pub ablation: Ablation,
    pub config: TrainConfig,
    pub layout: Layout,
    pub has_teacher: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: RunState,
}

fn put(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes to a temporary sibling and renames, so a reader never sees a
/// partial file.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, state: &RunState) -> Result<()> {
    if header.t != state.t || header.has_teacher != state.teacher.is_some() {
        return Err(Error::Invalid("checkpoint header does not describe the state".into()));
    }
    let json = serde_json::to_vec(header).expect("header serializes");
    let n = state.student.len();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * 3 * n);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put(&mut out, state.student.values());
    put(&mut out, &state.momentum);
    if let Some(teacher) = &state.teacher {
        put(&mut out, teacher.values());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if raw.len() < 16 || &raw[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes")) as usize;
    let body = raw.get(16..).ok_or_else(|| bad("truncated header"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, e.to_string()))?;
    let n = header.layout.total_len();
    let arrays = if header.has_teacher { 3 } else { 2 };
    let data = &body[hlen..];
    if data.len() != 8 * n * arrays {
        return Err(bad("parameter data has the wrong length"));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = || values.by_ref().take(n).collect::<Vec<f64>>();
    let layout = Arc::new(header.layout.clone());
    let student = ParameterVector::from_values(layout.clone(), take())?;
    let momentum = take();
    let teacher = if header.has_teacher {
        Some(ParameterVector::from_values(layout, take())?)
    } else {
        None
    };
    let state = RunState {
        t: header.t,
        student,
        momentum,
        teacher,
    };
    Ok(Checkpoint { header, state })
}
