//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//! ```text
//! magic    8 bytes  "NCOCKPT\0"
//! version  u32      (currently 1)
//! width    u8       bytes per stored scalar (8 = f64, 4 = f32)
//! meta     u64 length + UTF-8 JSON document
//! nparams  u32
//!   name   u32 length + UTF-8
//!   rows   u64, cols u64, rows*cols scalars
//! adam     u8 flag; when 1:
//!   lr f64, step u64, rejected u64, config (lr, epoch_decay, beta1, beta2, eps) as f64,
//!   first moments then second moments, one array per parameter in parameter order
//! ```
//! Scalars are written with their exact bit patterns, so a load reproduces
//! the saved values bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamConfig, AdamState, Array2, ParamStore, Real, TensorError};

pub const MAGIC: &[u8; 8] = b"NCOCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

fn write_array<W: Write>(w: &mut W, a: &Array2) -> std::io::Result<()> {
    w.write_all(&(a.rows() as u64).to_le_bytes())?;
    w.write_all(&(a.cols() as u64).to_le_bytes())?;
    for v in a.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], TensorError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| err(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    Ok(u32::from_le_bytes(read_exact::<R, 4>(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    Ok(u64::from_le_bytes(read_exact::<R, 8>(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, TensorError> {
    Ok(f64::from_le_bytes(read_exact::<R, 8>(r)?))
}

fn read_array<R: Read>(r: &mut R) -> Result<Array2, TensorError> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let n = rows.checked_mul(cols).filter(|n| *n < (1 << 34)).ok_or_else(|| err("array too large"))?;
    let mut bytes = vec![0u8; n * std::mem::size_of::<Real>()];
    r.read_exact(&mut bytes).map_err(|e| err(format!("truncated array: {e}")))?;
    let data = bytes
        .chunks_exact(std::mem::size_of::<Real>())
        .map(|c| Real::from_le_bytes(c.try_into().expect("chunk width")))
        .collect();
    Ok(Array2::from_vec(rows, cols, data))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[std::mem::size_of::<Real>() as u8])?;
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| err(e.to_string()))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_array(w, value)?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(adam) => {
                w.write_all(&[1])?;
                w.write_all(&adam.lr.to_le_bytes())?;
                w.write_all(&adam.step.to_le_bytes())?;
                w.write_all(&adam.rejected_steps.to_le_bytes())?;
                let c = adam.config;
                for v in [c.lr, c.epoch_decay, c.beta1, c.beta2, c.eps] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for a in adam.m.iter().chain(&adam.v) {
                    write_array(w, a)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TensorError> {
        let magic = read_exact::<R, 8>(r)?;
        if &magic != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let [width] = read_exact::<R, 1>(r)?;
        if width as usize != std::mem::size_of::<Real>() {
            return Err(err(format!(
                "checkpoint stores {}-byte scalars but this build uses {}-byte scalars",
                width,
                std::mem::size_of::<Real>()
            )));
        }
        let meta_len = read_u64(r)? as usize;
        if meta_len > 1 << 24 {
            return Err(err("metadata block too large"));
        }
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|e| err(format!("truncated metadata: {e}")))?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| err(format!("bad metadata: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(err("parameter name too long"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| err(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| err("parameter name is not UTF-8"))?;
            let value = read_array(r)?;
            params.add(name, value);
        }
        let [flag] = read_exact::<R, 1>(r)?;
        let adam = match flag {
            0 => None,
            1 => {
                let lr = read_f64(r)?;
                let step = read_u64(r)?;
                let rejected_steps = read_u64(r)?;
                let config = AdamConfig {
                    lr: read_f64(r)?,
                    epoch_decay: read_f64(r)?,
                    beta1: read_f64(r)?,
                    beta2: read_f64(r)?,
                    eps: read_f64(r)?,
                };
                let mut m = Vec::with_capacity(count);
                for _ in 0..count {
                    m.push(read_array(r)?);
                }
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    v.push(read_array(r)?);
                }
                Some(AdamState { config, lr, step, rejected_steps, m, v })
            }
            other => return Err(err(format!("bad optimizer flag {other}"))),
        };
        Ok(Self { metadata, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamStore::new();
        params.add_uniform("a", 3, 4, &mut rng);
        params.add_uniform("b.c", 2, 1, &mut rng);
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step = 7;
        adam.lr = 0.5e-4;
        adam.m[0].data_mut()[2] = 0.125;
        Checkpoint { metadata: serde_json::json!({"episode": 2, "d": 128}), params, adam: Some(adam) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_magic_and_truncation_are_reported() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        let mut ver = buf.clone();
        ver[8] = 99;
        let e = Checkpoint::read_from(&mut ver.as_slice()).unwrap_err();
        assert!(e.to_string().contains("version"));
        let cut = &buf[..buf.len() - 5];
        assert!(Checkpoint::read_from(&mut &cut[..]).is_err());
    }
}
