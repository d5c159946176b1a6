//! Binary model files.
//!
//! Little-endian layout:
//!
//! ```text
//! "SDF1"                      magic
//! u32                         format version
//! config block:
//!   u32 n, u32 x n levels, u32 x n channels,
//!   u32 fourier_dim, f64 fourier_scale,
//!   u8 conditional, u8 noise_conditioned, u32 input_channels, u8 input_scaling,
//!   f64 sigma_min, f64 sigma_max
//! u32 count, f64 x count      Fourier frequencies
//! u64 count, f64 x count      parameters
//! u32                         CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{ScoreModel, ScoreModelConfig};
use crate::error::{Error, Result};
use crate::sde::SigmaSchedule;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SDF1";

pub(crate) fn encode(model: &ScoreModel) -> Vec<u8> {
    let c = model.config();
    let mut b = Vec::with_capacity(64 + 8 * (model.params().len() + model.frequencies().len()));
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&(c.resolution_levels.len() as u32).to_le_bytes());
    for &l in &c.resolution_levels {
        b.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &ch in &c.channels_per_level {
        b.extend_from_slice(&(ch as u32).to_le_bytes());
    }
    b.extend_from_slice(&(c.fourier_dim as u32).to_le_bytes());
    b.extend_from_slice(&c.fourier_scale.to_le_bytes());
    b.push(c.conditional as u8);
    b.push(c.noise_conditioned as u8);
    b.extend_from_slice(&(c.input_channels as u32).to_le_bytes());
    b.push(c.input_scaling as u8);
    b.extend_from_slice(&c.schedule.sigma_min().to_le_bytes());
    b.extend_from_slice(&c.schedule.sigma_max().to_le_bytes());
    b.extend_from_slice(&(model.frequencies().len() as u32).to_le_bytes());
    for f in model.frequencies() {
        b.extend_from_slice(&f.to_le_bytes());
    }
    b.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        b.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::format(self.path, format!("invalid flag byte {v}"))),
        }
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::format(self.path, "count overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<ScoreModel> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(Error::format(path, "not a model file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::format(path, "checksum mismatch (file corrupt or truncated)"));
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 8,
        path,
    };
    let n = cur.u32()? as usize;
    if n > 64 {
        return Err(Error::format(path, format!("implausible level count {n}")));
    }
    let levels = (0..n).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let channels = (0..n).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let fourier_dim = cur.u32()? as usize;
    let fourier_scale = cur.f64()?;
    let conditional = cur.flag()?;
    let noise_conditioned = cur.flag()?;
    let input_channels = cur.u32()? as usize;
    let input_scaling = cur.flag()?;
    let sigma_min = cur.f64()?;
    let sigma_max = cur.f64()?;
    let schedule = SigmaSchedule::new(sigma_min, sigma_max)?;
    let config = ScoreModelConfig {
        resolution_levels: levels,
        channels_per_level: channels,
        fourier_dim,
        fourier_scale,
        conditional,
        noise_conditioned,
        input_channels,
        input_scaling,
        schedule,
    };
    let nf = cur.u32()? as usize;
    let frequencies = cur.f64s(nf)?;
    let np = cur.u64()? as usize;
    let params = cur.f64s(np)?;
    if cur.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after parameter block"));
    }
    ScoreModel::from_parts(config, frequencies, params).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_model(model: &ScoreModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ScoreModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ScoreModel {
        let cfg = ScoreModelConfig {
            fourier_dim: 4,
            ..ScoreModelConfig::desk(true).with_levels(&[4, 2], &[4, 4])
        };
        ScoreModel::new(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.sdf");
        let b = dir.path().join("b.sdf");
        let m = model();
        save_model(&m, &a).unwrap();
        let loaded = load_model(&a).unwrap();
        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.frequencies(), m.frequencies());
        assert_eq!(loaded.params(), m.params());
        save_model(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_and_corrupt_files_are_errors() {
        let bytes = encode(&model());
        let p = Path::new("mem");
        for cut in [0, 3, 7, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut], p).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode(&flipped, p), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic, p).is_err());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = encode(&model());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = decode(&bytes, Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: 1 }));
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }
}
