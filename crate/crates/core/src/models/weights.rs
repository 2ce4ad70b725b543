use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::arch::Architecture;
use crate::models::graph::ModelGraph;
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"HFW1";
pub const VERSION: u32 = 1;

/// Serializes every parameter as 32-bit floats in name order.
pub fn encode_weights<T: Real>(params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::config("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::config(format!("tensor name `{name}` is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::config(format!("tensor `{name}` has rank above 255")))?;
        out.push(rank);
        for &e in shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::config(format!("tensor `{name}` extent {e} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "truncated: need {n} byte(s) for {what}, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn error(&self, message: String) -> Error {
        Error::Weights {
            offset: self.pos as u64,
            message,
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a weights file into named tensors in file order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Weights {
            offset: 0,
            message: "bad magic, expected `HFW1`".into(),
        });
    }
    let at = r.pos;
    let version = r.u32("format version")?;
    if version != VERSION {
        return Err(Error::Weights {
            offset: at as u64,
            message: format!("unsupported format version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Weights {
                offset: at as u64,
                message: format!("tensor {i} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.error(format!("tensor `{name}` is too large")))?;
        let data: Vec<f32> = r
            .take(n, &format!("data of `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.error(format!("{} trailing byte(s)", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Replaces every parameter of `params` with the decoded tensors. The
/// tensor set must match exactly by name and shape.
pub fn assign_weights<T: Real>(params: &mut ParamSet<T>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in &tensors {
        let p = params
            .get(name)
            .ok_or_else(|| Error::shape(format!("tensor `{name}` does not exist in the model")))?;
        if p.value.shape() != t.shape() {
            return Err(Error::shape(format!(
                "tensor `{name}` has shape {:?} in the file but {:?} in the model",
                t.shape(),
                p.value.shape()
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::shape(format!("tensor `{name}` appears twice")));
        }
    }
    if let Some((missing, _)) = params.iter().find(|(n, _)| !seen.contains(*n)) {
        return Err(Error::shape(format!("tensor `{missing}` is missing from the file")));
    }
    for (name, t) in tensors {
        params.get_mut(&name).expect("checked above").value = t.cast();
    }
    Ok(())
}

pub fn save_weights<T: Real>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    let bytes = encode_weights(model.params())?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights_into<T: Real>(model: &mut ModelGraph<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    assign_weights(model.params_mut(), decode_weights(&bytes)?)
}

/// The model card stored next to `weights`.
pub fn card_path(weights: &Path) -> PathBuf {
    weights.with_extension("model.json")
}

/// Writes the weights and the architecture card.
pub fn save_model<T: Real>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    save_weights(model, path)?;
    let card = card_path(path);
    let mut json = serde_json::to_string_pretty(model.architecture())
        .map_err(|e| Error::config(format!("cannot serialize model card: {e}")))?;
    json.push('\n');
    std::fs::write(&card, json).map_err(|e| Error::io(&card, e))
}

pub fn load_architecture(weights: &Path) -> Result<Architecture> {
    let card = card_path(weights);
    let text = std::fs::read_to_string(&card).map_err(|e| Error::io(&card, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: card,
        message: e.to_string(),
    })
}

/// Rebuilds the architecture from the card, then loads the weights into it.
pub fn load_model<T: Real>(path: &Path) -> Result<ModelGraph<T>> {
    let arch = load_architecture(path)?;
    let mut model = arch.build::<T>(0)?;
    load_weights_into(&mut model, path)?;
    Ok(model)
}
