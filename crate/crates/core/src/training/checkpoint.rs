//! Single-file checkpoints: weights, optimiser moments and metadata in a
//! safetensors container.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use footprint_grad::{Adam, AdamConfig, Tensor};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::models::{build_model, Model, ModelConfig};
use crate::{Error, Result};

pub const FORMAT: &str = "footprint-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub metric_name: String,
    pub metric_value: f64,
    pub adam_step: u64,
    pub adam: AdamConfigEcho,
    pub model_config: ModelConfig,
    /// Full run configuration echo.
    pub config: serde_json::Value,
    /// Seed from which every per-epoch random stream is derived.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfigEcho {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<AdamConfig> for AdamConfigEcho {
    fn from(c: AdamConfig) -> Self {
        Self { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

impl From<AdamConfigEcho> for AdamConfig {
    fn from(c: AdamConfigEcho) -> Self {
        Self { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub first_moments: Vec<(String, Tensor)>,
    pub second_moments: Vec<(String, Tensor)>,
}

fn f32_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serialises model weights, optimiser state and metadata to `path`
/// atomically.
pub fn save_checkpoint(path: &Path, model: &Model, adam: &Adam, meta: &CheckpointMeta) -> Result<()> {
    let (step, first, second) = adam.state();
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (id, p) in model.store.iter() {
        owned.push((format!("param/{}", p.name), p.value.shape().to_vec(), f32_bytes(&p.value)));
        if let Some(Some(m)) = first.get(id.index()) {
            owned.push((format!("adam.m/{}", p.name), m.shape().to_vec(), f32_bytes(m)));
        }
        if let Some(Some(v)) = second.get(id.index()) {
            owned.push((format!("adam.v/{}", p.name), v.shape().to_vec(), f32_bytes(v)));
        }
    }
    let views = owned
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = meta.clone();
    meta.adam_step = step;
    let mut info = HashMap::new();
    info.insert("meta".to_string(), serde_json::to_string(&meta)?);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("meta"))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no checkpoint metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut ck = Checkpoint { meta, params: Vec::new(), first_moments: Vec::new(), second_moments: Vec::new() };
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32 data")));
        }
        let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(view.shape(), data)?;
        if let Some(n) = name.strip_prefix("param/") {
            ck.params.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix("adam.m/") {
            ck.first_moments.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix("adam.v/") {
            ck.second_moments.push((n.to_string(), t));
        }
    }
    Ok(ck)
}

impl Checkpoint {
    /// Rebuilds the network and installs the stored weights.
    pub fn restore_model(&self) -> Result<Model> {
        let cfg = ModelConfig { pretrained: false, ..self.meta.model_config.clone() };
        let mut model = build_model(&cfg)?;
        model.config = self.meta.model_config.clone();
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            model.store.assign(name, t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    /// Optimiser with the stored moments aligned to `model`'s parameters.
    pub fn restore_adam(&self, model: &Model) -> Result<Adam> {
        let n = model.store.len();
        let place = |list: &[(String, Tensor)]| -> Result<Vec<Option<Tensor>>> {
            let mut out = vec![None; n];
            for (name, t) in list {
                let id = model
                    .store
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimiser state for unknown parameter {name}")))?;
                out[id.index()] = Some(t.clone());
            }
            Ok(out)
        };
        let mut adam = Adam::new(self.meta.adam.into());
        adam.restore(self.meta.adam_step, place(&self.first_moments)?, place(&self.second_moments)?)?;
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelVariant;
    use footprint_grad::Graph;
    use rand::SeedableRng;

    fn trained_pair() -> (Model, Adam) {
        let cfg = ModelConfig { base_channels: 2, block_counts: [1, 1, 1, 1], ..ModelConfig::for_variant(ModelVariant::ResnetScse) };
        let mut model = build_model(&cfg).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let x = Tensor::full(&[1, 3, 32, 32], 0.3);
        let target = ndarray::Array3::from_shape_fn((1, 32, 32), |(_, y, _)| (y < 10) as u8);
        for _ in 0..2 {
            let mut g = Graph::new(&model.store, true);
            let xn = g.input(x.clone());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let p = model.forward(&mut g, xn, &mut rng).unwrap();
            let (l, _) = crate::losses::attach_loss(&mut g, p, &Default::default(), target.view(), None).unwrap();
            let grads = g.backward(l).unwrap();
            let updates = g.into_buffer_updates();
            adam.step(&mut model.store, &grads).unwrap();
            model.store.apply_updates(updates);
        }
        (model, adam)
    }

    fn meta(model: &Model) -> CheckpointMeta {
        CheckpointMeta {
            format: FORMAT.into(),
            epoch: 3,
            metric_name: "accuracy".into(),
            metric_value: 0.75,
            adam_step: 0,
            adam: AdamConfig::default().into(),
            model_config: model.config.clone(),
            config: serde_json::json!({"note": "echo"}),
            seed: 9,
        }
    }

    #[test]
    fn save_load_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let (model, adam) = trained_pair();
        save_checkpoint(&path, &model, &adam, &meta(&model)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta.epoch, 3);
        assert_eq!(ck.meta.adam_step, 2);
        let back = ck.restore_model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
        let adam2 = ck.restore_adam(&back).unwrap();
        let (s1, m1, v1) = adam.state();
        let (s2, m2, v2) = adam2.state();
        assert_eq!(s1, s2);
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
