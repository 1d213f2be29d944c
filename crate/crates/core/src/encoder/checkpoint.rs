//! Binary checkpoint format (little-endian throughout):
//!
//! ```text
//! b"DSE1"  version:u32
//! embed_dim vocab_size cx cy base_side patch_side concat_group channels mixer_layers : u32
//! seed:u64  n_prompt:u32  prompt ids: n_prompt x u32
//! tensors as f32, row-major, in `EncoderParams::named_tensors` order
//! ```
//!
//! The file must end exactly after the last tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::tensor_shapes;
use super::{EncoderConfig, EncoderParams};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::patchgrid::CropConfig;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSE1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

pub fn write_checkpoint<T: Scalar>(
    mut w: impl Write,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<()> {
    params.check_shapes(config)?;
    let io = |e: std::io::Error| Error::Format(format!("writing checkpoint: {e}"));
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let c = &config.crop;
    for v in [
        config.embed_dim,
        config.vocab_size,
        c.cx,
        c.cy,
        c.base_side,
        c.patch_side,
        c.concat_group,
        config.channels,
        config.mixer_layers,
    ] {
        put_u32(&mut w, v).map_err(io)?;
    }
    w.write_all(&config.seed.to_le_bytes()).map_err(io)?;
    put_u32(&mut w, config.prompt_tokens.len()).map_err(io)?;
    for &t in &config.prompt_tokens {
        w.write_all(&t.to_le_bytes()).map_err(io)?;
    }
    let mut buf = Vec::new();
    for (_, t) in params.named_tensors() {
        buf.clear();
        for v in t.iter() {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<T: Scalar>(mut r: impl Read) -> Result<(EncoderConfig, EncoderParams<T>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
    let mut cur = Cursor::new(&bytes, "checkpoint");
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let embed_dim = cur.u32("embed_dim")? as usize;
    let vocab_size = cur.u32("vocab_size")? as usize;
    let crop = CropConfig {
        cx: cur.u32("cx")? as usize,
        cy: cur.u32("cy")? as usize,
        base_side: cur.u32("base_side")? as usize,
        patch_side: cur.u32("patch_side")? as usize,
        concat_group: cur.u32("concat_group")? as usize,
    };
    let channels = cur.u32("channels")? as usize;
    let mixer_layers = cur.u32("mixer_layers")? as usize;
    let seed = cur.u64("seed")?;
    let n_prompt = cur.u32("prompt length")? as usize;
    let prompt_tokens = (0..n_prompt)
        .map(|_| cur.u32("prompt tokens"))
        .collect::<Result<Vec<_>>>()?;
    let config = EncoderConfig {
        embed_dim,
        vocab_size,
        prompt_tokens,
        crop,
        mixer_layers,
        channels,
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let shapes = tensor_shapes(&config);
    let expected: usize = shapes.iter().map(|(_, (r, c))| r * c * 4).sum();
    let remaining = cur.remaining();
    if remaining != expected {
        return Err(Error::Format(format!(
            "checkpoint body is {remaining} bytes, header implies {expected}"
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, (rows, cols)) in &shapes {
        let raw = cur.take(rows * cols * 4, name)?;
        let values: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::lit(f64::from(f32::from_le_bytes(b.try_into().unwrap()))))
            .collect();
        tensors.push(Array2::from_shape_vec((*rows, *cols), values).expect("size checked"));
    }
    let params = EncoderParams::from_tensors(&config, tensors)?;
    Ok((config, params))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), params, config)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(EncoderConfig, EncoderParams<T>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
