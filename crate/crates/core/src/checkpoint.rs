//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "CRAD"  u32 version (1)
//! u32 config_len   config JSON (UTF-8)
//! u64 step
//! u64 n_params     n_params × f32
//! u8 optimizer tag u64 optimizer step  u32 n_vectors
//! n_vectors × (u64 len, len × f32)
//! ```

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::optim::{OptimizerKind, OptimizerState};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"CRAD";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("I/O error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Self::Truncated
        } else {
            Self::Io(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed updates.
    pub step: u64,
    pub params: Vec<f32>,
    pub optimizer: OptimizerState,
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> io::Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

/// Reads a length-prefixed `f32` vector without trusting the length for
/// the allocation.
fn read_f32s<R: Read>(r: &mut R) -> Result<Vec<f32>, CheckpointError> {
    let n = read_u64(r)?;
    let mut bytes = Vec::new();
    let want = n.checked_mul(4).ok_or(CheckpointError::Truncated)?;
    r.take(want).read_to_end(&mut bytes)?;
    if bytes.len() as u64 != want {
        return Err(CheckpointError::Truncated);
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&self.step.to_le_bytes())?;
        write_f32s(&mut w, &self.params)?;
        w.write_all(&[self.optimizer.kind.tag()])?;
        w.write_all(&self.optimizer.step.to_le_bytes())?;
        w.write_all(&(self.optimizer.vectors.len() as u32).to_le_bytes())?;
        for v in &self.optimizer.vectors {
            write_f32s(&mut w, v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let magic: [u8; 4] = read_array(&mut r)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = read_u32(&mut r)? as u64;
        let mut config = Vec::new();
        (&mut r).take(len).read_to_end(&mut config)?;
        if config.len() as u64 != len {
            return Err(CheckpointError::Truncated);
        }
        let config: TrainConfig =
            serde_json::from_slice(&config).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let step = read_u64(&mut r)?;
        let params = read_f32s(&mut r)?;
        let [tag] = read_array(&mut r)?;
        let kind =
            OptimizerKind::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("optimizer tag {tag}")))?;
        let opt_step = read_u64(&mut r)?;
        let n_vectors = read_u32(&mut r)? as usize;
        if n_vectors != kind.n_vectors() {
            return Err(CheckpointError::Corrupt(format!("{n_vectors} optimizer vectors for {kind:?}")));
        }
        let vectors = (0..n_vectors).map(|_| read_f32s(&mut r)).collect::<Result<Vec<_>, _>>()?;
        if vectors.iter().any(|v| v.len() != params.len()) {
            return Err(CheckpointError::Corrupt("optimizer state length differs from parameters".into()));
        }
        Ok(Self { config, step, params, optimizer: OptimizerState { kind, step: opt_step, vectors } })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // Write next to the target and rename so a crash never leaves half a file.
        let tmp = path.with_extension("crad.tmp");
        self.write_to(BufWriter::new(std::fs::File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(std::fs::File::open(path).map_err(CheckpointError::Io)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut optimizer = OptimizerState::new(OptimizerKind::Adan, 3);
        optimizer.step = 7;
        optimizer.vectors[2] = vec![1e-30, -0.0, f32::MIN_POSITIVE];
        Checkpoint {
            config: TrainConfig { seed: 42, ..TrainConfig::default() },
            step: 7,
            params: vec![0.1, -2.5, 3.0e7],
            optimizer,
        }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut out = Vec::new();
        c.write_to(&mut out).unwrap();
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let b = bytes(&c);
        let back = Checkpoint::read_from(&b[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn distinguishes_failure_modes() {
        let b = bytes(&sample());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(CheckpointError::BadMagic)));
        let mut ver = b.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::read_from(&ver[..]), Err(CheckpointError::Version(9))));
        for cut in [3, 10, b.len() / 2, b.len() - 1] {
            assert!(matches!(Checkpoint::read_from(&b[..cut]), Err(CheckpointError::Truncated)), "cut {cut}");
        }
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.crad");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}
