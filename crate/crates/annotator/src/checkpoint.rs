//! Binary checkpoint format (little-endian):
//!
//! ```text
//! b"MQAN" | u32 version | u32 len | config TOML | u32 len | state JSON
//!        | u64 n_params | n_params x f64
//! ```
//!
//! The state JSON holds the metadata normaliser and training history.
//! Parameters are stored as raw IEEE-754 doubles, so a round trip is
//! bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::AnnotatorConfig;
use crate::error::AnnotatorError;
use crate::model::{EpochRecord, TrainedAnnotator};
use crate::network::MetaNormalizer;

pub const MAGIC: &[u8; 4] = b"MQAN";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct State {
    normalizer: MetaNormalizer,
    history: Vec<EpochRecord>,
}

pub fn to_bytes(model: &TrainedAnnotator) -> Vec<u8> {
    let config = model.config.to_toml();
    let state = serde_json::to_string(&State { normalizer: model.normalizer, history: model.history.clone() })
        .expect("state serializes");
    let mut out = Vec::with_capacity(32 + config.len() + state.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for text in [&config, &state] {
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], AnnotatorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            AnnotatorError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, AnnotatorError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str, AnnotatorError> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| AnnotatorError::Checkpoint(format!("{what}: {e}")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TrainedAnnotator, AnnotatorError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(AnnotatorError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(AnnotatorError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config = AnnotatorConfig::from_toml(r.text("config")?)?;
    let state: State =
        serde_json::from_str(r.text("state")?).map_err(|e| AnnotatorError::Checkpoint(format!("state: {e}")))?;
    let n = u64::from_le_bytes(r.take(8, "parameter count")?.try_into().unwrap());
    let n = usize::try_from(n).map_err(|_| AnnotatorError::Checkpoint(format!("parameter count {n} too large")))?;
    let bytes = r.take(n.checked_mul(8).ok_or_else(|| AnnotatorError::Checkpoint("overflow".into()))?, "parameters")?;
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if r.pos != buf.len() {
        return Err(AnnotatorError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    TrainedAnnotator::from_parts(config, state.normalizer, state.history, params)
}

pub fn save(model: &TrainedAnnotator, path: &Path) -> Result<(), AnnotatorError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedAnnotator, AnnotatorError> {
    from_bytes(&fs::read(path)?)
}
