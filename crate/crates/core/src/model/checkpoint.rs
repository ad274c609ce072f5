use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::NatModel;
use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::vq::Codebook;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus what is needed to turn its outputs back into pixels.
///
/// Layout (little endian): magic, version, element width (4 or 8), training
/// step, config as length-prefixed JSON, tensor count, then per tensor its
/// name, rank, dims and raw elements, then a codebook flag and the codebook.
#[derive(Clone, Debug)]
pub struct Checkpoint<F: Float> {
    pub model: NatModel<F>,
    pub codebook: Option<Codebook>,
    pub step: u64,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_len<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in u32")))?;
    put_u32(w, v)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes<R: Read>(r: &mut R, max: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > max {
        return Err(Error::Format(format!(
            "field of {n} bytes exceeds limit {max}"
        )));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn width<F: Float>() -> u32 {
    std::mem::size_of::<F>() as u32
}

impl<F: Float> Checkpoint<F> {
    pub fn new(model: NatModel<F>, codebook: Option<Codebook>, step: u64) -> Self {
        Self {
            model,
            codebook,
            step,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        put_u32(&mut w, width::<F>())?;
        w.write_all(&self.step.to_le_bytes())?;
        let cfg =
            serde_json::to_vec(self.model.config()).map_err(|e| Error::Format(e.to_string()))?;
        put_len(&mut w, cfg.len())?;
        w.write_all(&cfg)?;
        put_len(&mut w, self.model.params().len())?;
        for (spec, t) in self.model.specs().iter().zip(self.model.params()) {
            put_len(&mut w, spec.name.len())?;
            w.write_all(spec.name.as_bytes())?;
            put_len(&mut w, t.shape().len())?;
            for &d in t.shape() {
                put_len(&mut w, d)?;
            }
            let mut buf = Vec::with_capacity(t.len() * width::<F>() as usize);
            for &v in t.data() {
                if width::<F>() == 4 {
                    buf.extend_from_slice(&(v.to_f64c() as f32).to_bits().to_le_bytes());
                } else {
                    buf.extend_from_slice(&v.to_f64c().to_bits().to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        match &self.codebook {
            Some(cb) => {
                w.write_all(&[1])?;
                cb.write(&mut w)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let w = get_u32(&mut r)?;
        if w != width::<F>() {
            return Err(Error::Format(format!(
                "checkpoint stores {}-byte floats, reader expects {}",
                w,
                width::<F>()
            )));
        }
        let step = get_u64(&mut r)?;
        let cfg_bytes = get_bytes(&mut r, 1 << 20)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let (specs, _) = super::params::build_layout(&config);
        let count = get_u32(&mut r)? as usize;
        if count != specs.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, config expects {}",
                specs.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for spec in &specs {
            let name = String::from_utf8(get_bytes(&mut r, 1 << 12)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            if name != spec.name {
                return Err(Error::Format(format!(
                    "expected tensor {}, found {name}",
                    spec.name
                )));
            }
            let rank = get_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| get_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != spec.shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    spec.shape
                )));
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * w as usize];
            r.read_exact(&mut buf)?;
            let data: Vec<F> = if w == 4 {
                buf.chunks_exact(4)
                    .map(|c| F::from_f64c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect()
            } else {
                buf.chunks_exact(8)
                    .map(|c| F::from_f64c(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect()
            };
            params.push(Tensor::new(shape, data)?);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let codebook = match flag[0] {
            0 => None,
            1 => Some(Codebook::read(&mut r)?),
            f => return Err(Error::Format(format!("bad codebook flag {f}"))),
        };
        Ok(Self {
            model: NatModel::from_params(config, params)?,
            codebook,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
