//! Loading standard ResNet34 residual-stage weights from a safetensors
//! file. Only `layer1` .. `layer4` tensors are used; the stem, scSE blocks
//! and decoder keep their fresh initialisation.

use std::path::Path;

use footprint_grad::{ParamStore, Tensor};
use safetensors::{Dtype, SafeTensors};

use crate::{Error, Result};

const PREFIXES: [&str; 4] = ["encoder.", "backbone.", "module.", "resnet."];

/// Maps a checkpoint tensor name to a parameter name, or `None` when it is
/// not part of a residual stage.
pub fn map_name(name: &str) -> Option<String> {
    let mut n = name;
    while let Some(p) = PREFIXES.iter().find(|p| n.starts_with(*p)) {
        n = &n[p.len()..];
    }
    let stage_ok = n.starts_with("layer") && n[5..].starts_with(|c: char| ('1'..='4').contains(&c));
    (stage_ok && !n.ends_with("num_batches_tracked")).then(|| format!("encoder.{n}"))
}

fn to_f32(view: &safetensors::tensor::TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
        Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32)
            .collect()),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
}

/// Copies residual-stage tensors into `store`; returns how many were set.
pub fn load_encoder_weights(store: &mut ParamStore, path: Option<&Path>) -> Result<usize> {
    let hint = "set `pretrained_path` to a safetensors export of ResNet34 weights (tensor names like \
                `layer1.0.conv1.weight`), or set `pretrained` to false";
    let path = path.ok_or_else(|| Error::Config(format!("pretrained weights requested but no path given; {hint}")))?;
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Config(format!("cannot read pretrained weights at {}: {e}; {hint}", path.display()))
    })?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{} is not a safetensors file: {e}", path.display())))?;
    let mut loaded = 0;
    let mut missing = Vec::new();
    for (name, view) in st.tensors() {
        let Some(target) = map_name(&name) else { continue };
        if store.id(&target).is_none() {
            missing.push(target);
            continue;
        }
        let t = Tensor::new(view.shape(), to_f32(&view)?)?;
        store.assign(&target, t)?;
        loaded += 1;
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "pretrained tensors with no matching parameter (block counts differ?): {}",
            missing.join(", ")
        )));
    }
    if loaded == 0 {
        return Err(Error::Checkpoint(format!("{} holds no residual-stage tensors; {hint}", path.display())));
    }
    Ok(loaded)
}

/// Writes the residual-stage parameters of `store` with torchvision names.
pub fn save_encoder_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (_, p) in store.iter() {
        if let Some(rest) = p.name.strip_prefix("encoder.") {
            if map_name(rest).is_some() {
                let bytes = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                owned.push((rest.to_string(), p.value.shape().to_vec(), bytes));
            }
        }
    }
    let views = owned
        .iter()
        .map(|(n, s, b)| {
            safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, None, path).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelConfig};

    #[test]
    fn name_mapping() {
        assert_eq!(map_name("layer1.0.conv1.weight").as_deref(), Some("encoder.layer1.0.conv1.weight"));
        assert_eq!(map_name("module.layer4.2.bn2.bias").as_deref(), Some("encoder.layer4.2.bn2.bias"));
        assert_eq!(map_name("conv1.weight"), None);
        assert_eq!(map_name("fc.weight"), None);
        assert_eq!(map_name("layer2.0.bn1.num_batches_tracked"), None);
        assert_eq!(map_name("layer5.0.conv1.weight"), None);
    }

    #[test]
    fn missing_file_names_remedy() {
        let cfg = ModelConfig {
            pretrained: true,
            pretrained_path: Some("/nonexistent/resnet34.safetensors".into()),
            base_channels: 2,
            block_counts: [1, 1, 1, 1],
            ..ModelConfig::resnet_pixelshuffle()
        };
        let err = build_model(&cfg).unwrap_err().to_string();
        assert!(err.contains("pretrained_path"), "{err}");
        let cfg = ModelConfig { pretrained_path: None, ..cfg };
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn round_trip_loads_stages_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.safetensors");
        let base = ModelConfig { base_channels: 2, block_counts: [1, 2, 1, 1], ..ModelConfig::resnet_pixelshuffle() };
        let donor = build_model(&ModelConfig { seed: 5, ..base.clone() }).unwrap();
        save_encoder_weights(&donor.store, &path).unwrap();
        let fresh = build_model(&base).unwrap();
        let loaded = build_model(&ModelConfig { pretrained: true, pretrained_path: Some(path), ..base }).unwrap();
        for (_, p) in loaded.store.iter() {
            let expect = if p.name.starts_with("encoder.layer") { &donor.store } else { &fresh.store };
            let id = expect.id(&p.name).unwrap();
            assert_eq!(&p.value, expect.value(id), "{}", p.name);
        }
    }
}
