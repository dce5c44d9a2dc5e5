//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DDAPCKPT" | format u32 | kind u8
//! version tag      (u32 length + utf8)
//! arch             7 x u32
//! schedule         T u32, betas f64 x T
//! vocabulary       count u32, each word u32 length + utf8
//! tensors          count u32, each: name, ndim u32, dims u64 x ndim,
//!                  data f64 x prod(dims)
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so save/load round-trips
//! bit-exactly.

use crate::error::{Error, Result};
use crate::ldm::{ArchConfig, ModelParams, ModelVersion};
use crate::nn::ParamSet;
use crate::prompt::Vocabulary;
use crate::schedule::NoiseSchedule;
use crate::tensor::Real;
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DDAPCKPT";
const FORMAT: u32 = 1;

/// What the container holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    BaseModel,
    Personalized,
    Classifier,
}

impl CheckpointKind {
    fn to_byte(self) -> u8 {
        match self {
            CheckpointKind::BaseModel => 1,
            CheckpointKind::Personalized => 2,
            CheckpointKind::Classifier => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(CheckpointKind::BaseModel),
            2 => Ok(CheckpointKind::Personalized),
            3 => Ok(CheckpointKind::Classifier),
            other => Err(Error::Config(format!("unknown checkpoint kind {other}"))),
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: Real) -> Result<()> {
    w.write_all(&v.to_bits().to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<Real> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(Real::from_bits(u64::from_le_bytes(b)))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Config(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Config(format!("invalid utf8 in checkpoint: {e}")))
}

fn write_tensors(w: &mut impl Write, tensors: &ParamSet) -> Result<()> {
    write_u32(w, tensors.len() as u32)?;
    for (name, t) in tensors.iter() {
        write_str(w, name)?;
        write_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        for &v in t.iter() {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read) -> Result<ParamSet> {
    let count = read_u32(r)? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name = read_str(r)?;
        let ndim = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(r)? as usize);
        }
        let n: usize = dims.iter().product();
        if n > 1 << 28 {
            return Err(Error::Config(format!("unreasonable tensor size {n}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_f64(r)?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Config(format!("bad tensor shape in checkpoint: {e}")))?;
        set.insert(name, arr);
    }
    Ok(set)
}

/// Save model parameters, schedule, vocabulary and version tag.
pub fn save_model(path: &Path, params: &ModelParams, kind: CheckpointKind) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT)?;
    w.write_all(&[kind.to_byte()])?;
    write_str(&mut w, params.arch.version.tag())?;
    for v in [
        params.arch.image_size,
        params.arch.in_channels,
        params.arch.latent_channels,
        params.arch.base_width,
        params.arch.token_dim,
        params.arch.time_dim,
        params.arch.vocab_size,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    write_u32(&mut w, params.schedule.t_max() as u32)?;
    for &b in &params.schedule.betas {
        write_f64(&mut w, b)?;
    }
    write_u32(&mut w, params.vocab.len() as u32)?;
    for word in params.vocab.words() {
        write_str(&mut w, word)?;
    }
    write_tensors(&mut w, &params.tensors)?;
    w.flush()?;
    Ok(())
}

/// Load a model checkpoint.
pub fn load_model(path: &Path) -> Result<(ModelParams, CheckpointKind)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!(
            "{path:?} is not a checkpoint (bad magic)"
        )));
    }
    let format = read_u32(&mut r)?;
    if format != FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {format}")));
    }
    let mut kind_b = [0u8; 1];
    r.read_exact(&mut kind_b)?;
    let kind = CheckpointKind::from_byte(kind_b[0])?;
    if kind == CheckpointKind::Classifier {
        return Err(Error::Config(
            "checkpoint holds a classifier, not a model".into(),
        ));
    }
    let tag = read_str(&mut r)?;
    let version = ModelVersion::from_tag(&tag)?;
    let dims: Vec<u32> = (0..7).map(|_| read_u32(&mut r)).collect::<Result<_>>()?;
    let t_max = read_u32(&mut r)? as usize;
    let mut betas = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        betas.push(read_f64(&mut r)?);
    }
    let schedule = NoiseSchedule::from_betas(betas)?;
    let n_words = read_u32(&mut r)? as usize;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        words.push(read_str(&mut r)?);
    }
    let vocab = Vocabulary::from_words(words)?;
    let tensors = read_tensors(&mut r)?;

    let arch = ArchConfig {
        version,
        image_size: dims[0] as usize,
        in_channels: dims[1] as usize,
        latent_channels: dims[2] as usize,
        base_width: dims[3] as usize,
        token_dim: dims[4] as usize,
        time_dim: dims[5] as usize,
        vocab_size: dims[6] as usize,
    };
    // validate tensor inventory against the architecture
    for (name, shape) in arch.param_shapes() {
        match tensors.get(&name) {
            None => {
                return Err(Error::Config(format!(
                    "checkpoint missing parameter {name}"
                )))
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    Ok((
        ModelParams {
            arch,
            schedule,
            vocab,
            tensors,
        },
        kind,
    ))
}

/// Save a bare named-tensor container (toy classifier).
pub fn save_tensors(path: &Path, tensors: &ParamSet, meta: &[(String, u64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT)?;
    w.write_all(&[CheckpointKind::Classifier.to_byte()])?;
    write_u32(&mut w, meta.len() as u32)?;
    for (k, v) in meta {
        write_str(&mut w, k)?;
        write_u64(&mut w, *v)?;
    }
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

/// Load a bare named-tensor container.
pub fn load_tensors(path: &Path) -> Result<(ParamSet, Vec<(String, u64)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!(
            "{path:?} is not a checkpoint (bad magic)"
        )));
    }
    let format = read_u32(&mut r)?;
    if format != FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {format}")));
    }
    let mut kind_b = [0u8; 1];
    r.read_exact(&mut kind_b)?;
    if CheckpointKind::from_byte(kind_b[0])? != CheckpointKind::Classifier {
        return Err(Error::Config(
            "checkpoint holds a model, not a classifier".into(),
        ));
    }
    let n_meta = read_u32(&mut r)? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = read_str(&mut r)?;
        let v = read_u64(&mut r)?;
        meta.push((k, v));
    }
    let tensors = read_tensors(&mut r)?;
    Ok((tensors, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldm::ModelVersion;

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let m = ModelParams::init(ModelVersion::VB, Vocabulary::default_toy(8), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &m, CheckpointKind::BaseModel).unwrap();
        let (loaded, kind) = load_model(&path).unwrap();
        assert_eq!(kind, CheckpointKind::BaseModel);
        assert_eq!(loaded.arch, m.arch);
        assert_eq!(loaded.vocab, m.vocab);
        assert_eq!(loaded.schedule, m.schedule);
        assert!(loaded.tensors.bit_eq(&m.tensors));
        // byte-identical on re-save
        let path2 = dir.path().join("model2.ckpt");
        save_model(&path2, &loaded, CheckpointKind::BaseModel).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_model(&path).is_err());
    }
}
