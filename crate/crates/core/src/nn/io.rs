//! Model file: `MNET1\0`, a little-endian `u32` header length, a UTF-8 JSON
//! header, then every parameter tensor as little-endian `f32` in layer order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::{LayerSpec, ModelSpec};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 6] = b"MNET1\0";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
    blob_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    name: String,
    shape: Vec<usize>,
}

fn tensor_names(layer: &LayerSpec) -> &'static [&'static str] {
    match layer {
        LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => &["weight", "bias"],
        LayerSpec::BatchNorm { .. } => &["gamma", "beta", "running_mean", "running_var"],
        _ => &[],
    }
}

pub fn model_to_bytes(net: &Network<f32>) -> Result<Vec<u8>> {
    let spec = net.spec().clone();
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(net.param_count() * 4);
    for (li, (layer, group)) in spec.layers.iter().zip(net.params()).enumerate() {
        for ((name, shape), values) in tensor_names(layer).iter().zip(layer.param_shapes()).zip(group) {
            tensors.push(TensorEntry {
                layer: li,
                name: (*name).to_string(),
                shape,
            });
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        spec,
        tensors,
        blob_bytes: blob.len(),
    })?;
    let mut out = Vec::with_capacity(10 + header.len() + blob.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let fmt = |m: &str| Error::Format(format!("model file: {m}"));
    if bytes.len() < 10 || &bytes[..6] != MODEL_MAGIC {
        return Err(fmt("bad magic"));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header_end = 10usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[10..header_end]).map_err(|e| fmt(&format!("bad header: {e}")))?;
    let blob = &bytes[header_end..];
    if blob.len() != header.blob_bytes {
        return Err(fmt(&format!(
            "header declares {} parameter bytes, file has {}",
            header.blob_bytes,
            blob.len()
        )));
    }
    header.spec.validate().map_err(|e| fmt(&e.to_string()))?;

    let mut expected = Vec::new();
    for (li, layer) in header.spec.layers.iter().enumerate() {
        for (name, shape) in tensor_names(layer).iter().zip(layer.param_shapes()) {
            expected.push((li, *name, shape));
        }
    }
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((li, name, shape), e)| *li != e.layer || *name != e.name || *shape != e.shape)
    {
        return Err(fmt("tensor table does not match the layer list"));
    }
    let total: usize = expected.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
    if total * 4 != blob.len() {
        return Err(fmt("parameter blob size does not match tensor shapes"));
    }

    let mut params: Vec<Vec<Vec<f32>>> = vec![Vec::new(); header.spec.layers.len()];
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for (li, _, shape) in &expected {
        let len = shape.iter().product();
        params[*li].push(floats.by_ref().take(len).collect());
    }
    Network::from_params(header.spec, params).map_err(|e| fmt(&e.to_string()))
}

pub fn save_model(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(net)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network<f32>> {
    model_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Network<f32> {
        Network::init(ModelSpec::mini_net(vec!["x".into(), "y".into()]), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let n = net();
        let back = model_from_bytes(&model_to_bytes(&n).unwrap()).unwrap();
        assert_eq!(n, back);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = model_to_bytes(&net()).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let mut bytes = model_to_bytes(&net()).unwrap();
        bytes[12] = b'#';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let bytes = model_to_bytes(&net()).unwrap();
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 4]);
        assert!(matches!(model_from_bytes(&longer), Err(Error::Format(_))));
    }
}
