//! Checkpoint layout (little-endian):
//! `"MDCK" | version u16 | json_len u32 | config JSON | n u32 |
//!  n × (name_len u16 | name | kind u8 | tensor_len u64 | MMEB f32 tensor)`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::clip::ClipModel;
use super::{ClipConfig, ModelError, Module, ParamKind};
use crate::numerics::mmeb::{DType, EmbeddingFile, Payload};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ClipConfig,
    reparameterized: bool,
}

fn kind_byte(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::NoDecay => 1,
        ParamKind::Buffer => 2,
    }
}

pub fn save_checkpoint(model: &ClipModel<f32>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        reparameterized: model.is_reparameterized(),
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let tensor = EmbeddingFile::from_matrix(&p.value).to_bytes()?;
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(kind_byte(p.kind));
        out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        out.extend_from_slice(&tensor);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClipModel<f32>, ModelError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    let mut cur = &bytes[..];
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let header: Header =
        serde_json::from_slice(take(json_len)?).map_err(|e| bad(&e.to_string()))?;
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut tensors = HashMap::with_capacity(n);
    for _ in 0..n {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name =
            String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("name not UTF-8"))?;
        let _kind = take(1)?[0];
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let file =
            EmbeddingFile::from_bytes(take(len)?).map_err(|e| bad(&format!("{name}: {e}")))?;
        if file.payload.dtype() != DType::F32 || file.dims.len() != 2 {
            return Err(bad(&format!("{name}: expected a rank-2 f32 tensor")));
        }
        let Payload::F32(data) = file.payload else {
            unreachable!()
        };
        let m = Matrix::new(file.dims[0] as usize, file.dims[1] as usize, data)?;
        if tensors.insert(name.clone(), m).is_some() {
            return Err(bad(&format!("duplicate tensor {name}")));
        }
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }

    let mut model = ClipModel::<f32>::new(header.config, 0)?;
    if header.reparameterized {
        model = model.reparameterize()?;
    }
    let mut problem = None;
    model.visit_mut(&mut |p| match tensors.remove(&p.name) {
        Some(m) if m.shape() == p.value.shape() => p.value = m,
        Some(m) => {
            problem.get_or_insert(format!(
                "{}: shape {:?}, expected {:?}",
                p.name,
                m.shape(),
                p.value.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("missing tensor {}", p.name));
        }
    });
    if let Some(p) = problem {
        return Err(bad(&p));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(&format!("unexpected tensor {extra}")));
    }
    Ok(model)
}
