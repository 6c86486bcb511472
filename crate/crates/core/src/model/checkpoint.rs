//! Binary checkpoint: a magic header, the model config as JSON, then one
//! record per parameter (name, tag as JSON, trainable flag, shape, values as
//! little-endian f64). Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::registry::{Parameter, ParameterRegistry, TaggedParam};
use super::tag::ComponentTag;
use super::transformer::Transformer;
use super::{ModelConfig, ModelError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FZFCKPT1";

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, ModelError> {
    let len = read_u64(r)?;
    if len > 1 << 32 {
        return Err(bad(format!("implausible field length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_checkpoint<W: Write>(model: &Transformer, w: &mut W) -> Result<(), ModelError> {
    let json = |e: serde_json::Error| bad(e.to_string());
    w.write_all(MAGIC)?;
    write_bytes(w, &serde_json::to_vec(model.config()).map_err(json)?)?;
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for p in model.params() {
        write_bytes(w, p.name().as_bytes())?;
        write_bytes(w, &serde_json::to_vec(p.tag()).map_err(json)?)?;
        w.write_all(&[u8::from(p.trainable())])?;
        w.write_all(&(p.shape().len() as u64).to_le_bytes())?;
        for &d in p.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in p.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Transformer, ModelError> {
    let json = |e: serde_json::Error| bad(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let config: ModelConfig = serde_json::from_slice(&read_bytes(r)?).map_err(json)?;
    let n = read_u64(r)?;
    let mut params = ParameterRegistry::new();
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(r)?).map_err(|e| bad(e.to_string()))?;
        let tag: ComponentTag = serde_json::from_slice(&read_bytes(r)?).map_err(json)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let rank = read_u64(r)?;
        if rank > 8 {
            return Err(bad(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(Parameter::new(
            name,
            Tensor::new(shape, data)?,
            tag,
            flag[0] != 0,
        ))?;
    }
    Transformer::from_parts(config, params)
}

pub fn save(model: &Transformer, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Transformer, ModelError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
