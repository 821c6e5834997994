//! Versioned binary checkpoints.
//!
//! Layout: magic `SQFM`, u32 format version, a JSON header (stage, config,
//! init seed), then one record per parameter in registry order — name,
//! shape, and raw little-endian f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelStage, SeqModel};
use crate::transformer::TransformerConfig;

const MAGIC: &[u8; 4] = b"SQFM";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    stage: ModelStage,
    config: TransformerConfig,
    init_seed: u64,
}

pub fn save(model: &SeqModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;

    let header = serde_json::to_vec(&Header {
        stage: model.stage,
        config: model.config.clone(),
        init_seed: model.init_seed,
    })?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;

    w.write_all(&(model.registry.len() as u32).to_le_bytes())?;
    for (name, param) in model.registry.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = param.shape();
        w.write_all(&[shape.len() as u8])?;
        for &extent in &shape {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for v in param.data_vec() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SeqModel> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint file: bad magic {magic:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }

    let header_len = read_u32(&mut r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let model = SeqModel::with_config(header.stage, header.config, header.init_seed)?;

    let count = read_u32(&mut r)? as usize;
    if count != model.registry.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {count}, model expects {}",
            model.registry.len()
        )));
    }
    for (name, param) in model.registry.iter() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let file_name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?;
        if file_name != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: file has {file_name}, model expects {name}"
            )));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != param.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file has {shape:?}, model expects {:?}",
                param.shape()
            )));
        }
        let mut data = vec![0.0f64; param.numel()];
        let mut buf = [0u8; 8];
        for slot in &mut data {
            r.read_exact(&mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        param.set_data(data)?;
    }
    Ok(model)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
