//! Binary checkpoint files.
//!
//! Layout (all integers little-endian): the magic `BLMCKPT1`; a parameter
//! section and a state section, each a `u32` record count followed by records
//! of name length (`u32`), name bytes, rank (`u32`), dims (`u64` each) and
//! `f64` values; then the footer.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BLMCKPT1";
const MAX_RANK: usize = 8;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Loop position and schedule bookkeeping needed to resume exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub learning_rate: f64,
    pub best_valid_nll: f64,
    pub rng: RngState,
    pub adam_step: u64,
    pub epoch: u64,
    pub cursor: u64,
    pub since_best: u64,
    pub plateau_best: f64,
    pub interval_loss_sum: f64,
    pub interval_windows: u64,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            step: 0,
            learning_rate: 0.0,
            best_valid_nll: f64::INFINITY,
            rng: RngState::default(),
            adam_step: 0,
            epoch: 0,
            cursor: 0,
            since_best: 0,
            plateau_best: f64::INFINITY,
            interval_loss_sum: 0.0,
            interval_windows: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    /// Optimizer moments, carried recurrent state and best parameters.
    pub state: Vec<(String, Tensor)>,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn state_tensor(&self, name: &str) -> Option<&Tensor> {
        self.state.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        write_section(&mut out, &self.params);
        write_section(&mut out, &self.state);
        let p = &self.progress;
        out.extend_from_slice(&p.step.to_le_bytes());
        out.extend_from_slice(&p.learning_rate.to_le_bytes());
        out.extend_from_slice(&p.best_valid_nll.to_le_bytes());
        out.extend_from_slice(&p.rng.seed);
        out.extend_from_slice(&p.rng.stream.to_le_bytes());
        out.extend_from_slice(&p.rng.word_pos.to_le_bytes());
        for x in [p.adam_step, p.epoch, p.cursor, p.since_best] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&p.plateau_best.to_le_bytes());
        out.extend_from_slice(&p.interval_loss_sum.to_le_bytes());
        out.extend_from_slice(&p.interval_windows.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                detail: "bad magic bytes".into(),
            });
        }
        let params = read_section(&mut r)?;
        let state = read_section(&mut r)?;
        let step = r.u64("step")?;
        let learning_rate = r.f64("learning rate")?;
        let best_valid_nll = r.f64("best validation nll")?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32, "rng seed")?);
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let progress = Progress {
            step,
            learning_rate,
            best_valid_nll,
            rng: RngState { seed, stream, word_pos },
            adam_step: r.u64("adam step")?,
            epoch: r.u64("epoch")?,
            cursor: r.u64("cursor")?,
            since_best: r.u64("plateau counter")?,
            plateau_best: r.f64("plateau best")?,
            interval_loss_sum: r.f64("interval loss")?,
            interval_windows: r.u64("interval windows")?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                offset: r.pos as u64,
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            params,
            state,
            progress,
        })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_section(out: &mut Vec<u8>, records: &[(String, Tensor)]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint {
                offset: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_section(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint {
                offset: at,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank_at = r.pos as u64;
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint {
                offset: rank_at,
                detail: format!("tensor `{name}` has implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let values_at = r.pos as u64;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint {
                offset: values_at,
                detail: format!("tensor `{name}` has invalid shape {shape:?}"),
            })?;
        let raw = r.take(n * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint {
            offset: values_at,
            detail: e.to_string(),
        })?;
        records.push((name, t));
    }
    Ok(records)
}
