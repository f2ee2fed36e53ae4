//! Checkpoint format (all little-endian):
//!
//! ```text
//! magic "UFCM" | version u32 | count u32
//! per entry: name_len u16 | name UTF-8 | rank u8 | dims u32 × rank | float32 payload
//! ```
//!
//! Entries are written in [`UfcMilParams::named`] order; values narrow to
//! f32 on write and widen back on read, so a file→memory→file round trip is
//! bit-exact.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::params::{AttnParams, HeadParams, LevelParams, TnamParams, UfcMilParams};
use crate::bagdata::DataError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UFCM";
pub const CHECKPOINT_VERSION: u32 = 1;

type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, params: &UfcMilParams) -> Result<()> {
    let named = params.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in tensor.to_f32_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

struct Reader<'a> {
    path: &'a Path,
    data: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(DataError::Truncated {
                path: self.path.to_path_buf(),
                expected_bytes: (self.pos + n) as u64,
                actual_bytes: self.data.len() as u64,
            });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Loads named tensors and reassembles the parameter structure. The level
/// count and shapes come from the file itself.
pub fn load_checkpoint(path: &Path) -> Result<UfcMilParams> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(io_err(path))?;
    let mut r = Reader { path, data, pos: 0 };

    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| DataError::Json {
            path: path.to_path_buf(),
            detail: format!("bad tensor name: {e}"),
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_f32(shape, &values).map_err(|e| DataError::ShapeMismatch {
            path: path.to_path_buf(),
            detail: format!("tensor {name}: {e}"),
        })?;
        entries.push((name, tensor));
    }

    assemble(path, entries)
}

fn assemble(path: &Path, entries: Vec<(String, Tensor)>) -> Result<UfcMilParams> {
    let lookup = |name: &str| -> Result<Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| DataError::ShapeMismatch {
                path: path.to_path_buf(),
                detail: format!("missing tensor {name}"),
            })
    };
    let levels = entries
        .iter()
        .filter_map(|(n, _)| {
            n.strip_prefix('r')
                .and_then(|rest| rest.split('.').next())
                .and_then(|idx| idx.parse::<usize>().ok())
        })
        .max()
        .map(|max| max + 1)
        .unwrap_or(0);
    if levels == 0 {
        return Err(DataError::ShapeMismatch {
            path: path.to_path_buf(),
            detail: "checkpoint holds no level parameters".to_string(),
        });
    }
    let attn = |prefix: &str| -> Result<AttnParams> {
        Ok(AttnParams {
            wq: lookup(&format!("{prefix}.wq"))?,
            wk: lookup(&format!("{prefix}.wk"))?,
            wv: lookup(&format!("{prefix}.wv"))?,
            wo: lookup(&format!("{prefix}.wo"))?,
        })
    };
    let mut out = Vec::with_capacity(levels);
    for r in 0..levels {
        out.push(LevelParams {
            cls: lookup(&format!("r{r}.cls"))?,
            attn: attn(&format!("r{r}.attn"))?,
            tnam: TnamParams {
                w: lookup(&format!("r{r}.tnam.w"))?,
                a_t: lookup(&format!("r{r}.tnam.a_t"))?,
                a_s: lookup(&format!("r{r}.tnam.a_s"))?,
            },
            cross: if r > 0 {
                Some(attn(&format!("r{r}.cross"))?)
            } else {
                None
            },
            head: HeadParams {
                w1: lookup(&format!("r{r}.head.w1"))?,
                b1: lookup(&format!("r{r}.head.b1"))?,
                w2: lookup(&format!("r{r}.head.w2"))?,
                b2: lookup(&format!("r{r}.head.b2"))?,
            },
        });
    }
    Ok(UfcMilParams { levels: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use std::fs;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let config = ModelConfig::new(8, 2);
        let params = UfcMilParams::init(&config, 11);
        let dir = std::env::temp_dir().join(format!("ufcmil-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ufcm");

        save_checkpoint(&path, &params).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.conforms(&config));
        save_checkpoint(&path, &loaded).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second, "file → memory → file must be bit-exact");

        for ((na, ta), (nb, tb)) in params.named().iter().zip(loaded.named()) {
            assert_eq!(*na, nb);
            assert_eq!(ta.to_f32_vec(), tb.to_f32_vec(), "{na}");
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ufcmil-ckpt-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ufcm");
        fs::write(&path, b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(DataError::BadMagic { .. })
        ));
        fs::remove_dir_all(&dir).unwrap();
    }
}
