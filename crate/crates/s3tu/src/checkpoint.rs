//! Checkpoint container: a JSON header embedding the full model config, then
//! every named tensor (trainable parameters and batch-norm running stats) in
//! tree order using the tensor blob format. Self-describing: loading rebuilds
//! the model from the embedded config alone.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Params;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"S3CK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
}

pub fn save<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let tensors = model.named_tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, tensor, _) in &tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        tensor.write_to(w)?;
    }
    Ok(())
}

pub fn load<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("checkpoint truncated before magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = read_u64(r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| Error::Format(format!("checkpoint truncated in header: {e}")))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let n_tensors = read_u64(r)? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| Error::Format(format!("checkpoint truncated in tensor name: {e}")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let tensor = Tensor::read_from(r)?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}' in checkpoint")));
        }
    }

    // rebuild from config, then overwrite every named tensor
    let mut model = Model::new(header.config, 0)?;
    let mut missing = Vec::new();
    model.visit_mut("", &mut |name, t, _| match tensors.remove(&name) {
        Some(loaded) => {
            if loaded.shape() == t.shape() {
                *t = loaded;
            } else {
                missing.push(format!(
                    "{name}: shape {:?} in file, {:?} expected",
                    loaded.shape(),
                    t.shape()
                ));
            }
        }
        None => missing.push(format!("{name}: absent from file")),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint does not match its config: {}",
            missing.join("; ")
        )));
    }
    if !tensors.is_empty() {
        let mut extra: Vec<String> = tensors.into_keys().collect();
        extra.sort_unstable();
        return Err(Error::Format(format!(
            "checkpoint has extra tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}

pub fn save_path(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(model, &mut f)
}

pub fn load_path(path: impl AsRef<Path>) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load(&mut f)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("checkpoint truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("checkpoint truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::DropBlockParams;
    use crate::rng::Rng;
    use crate::svit::RmSvitConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            base_channels: 4,
            input_size: (16, 16),
            rm_svit: RmSvitConfig {
                grid: (2, 2),
                n_iter: 1,
                heads: 2,
                sparse: true,
                detach_iters: false,
            },
            dropblock: DropBlockParams::default(),
            lka_repeats: 1,
            structured_convs: true,
            use_rm_svit: true,
            use_s2_links: true,
        }
    }

    #[test]
    fn round_trip_reproduces_forward_bitwise() {
        let model = Model::new(cfg(), 11).unwrap();
        let mut buf = Vec::new();
        save(&model, &mut buf).unwrap();
        let loaded = load(&mut buf.as_slice()).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::rand_uniform(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
        assert_eq!(model.infer(&x).unwrap(), loaded.infer(&x).unwrap());
    }

    #[test]
    fn truncated_file_rejected() {
        let model = Model::new(cfg(), 11).unwrap();
        let mut buf = Vec::new();
        save(&model, &mut buf).unwrap();
        for cut in [3usize, 10, buf.len() / 2, buf.len() - 5] {
            assert!(load(&mut &buf[..cut]).is_err(), "cut at {cut} accepted");
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let model = Model::new(cfg(), 11).unwrap();
        let mut buf = Vec::new();
        save(&model, &mut buf).unwrap();
        buf[0] = b'Z';
        assert!(load(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn tensor_count_matches_census() {
        let model = Model::new(cfg(), 11).unwrap();
        let mut buf = Vec::new();
        save(&model, &mut buf).unwrap();
        let loaded = load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.trainable_count(), model.trainable_count());
        assert_eq!(loaded.named_tensors().len(), model.named_tensors().len());
    }
}
