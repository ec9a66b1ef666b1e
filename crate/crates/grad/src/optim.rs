use crate::{GradError, Gradients, ParamKind, ParamStore, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-parameter first/second moment estimates. `lr` and `beta1`
/// may be changed between steps by a schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn set_beta1(&mut self, beta1: f64) {
        self.config.beta1 = beta1;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps, wd) = (beta1 as f32, beta2 as f32, eps as f32, weight_decay as f32);
        for (id, g) in grads.iter_params() {
            let entry = store.get(id);
            if entry.kind != ParamKind::Trainable || entry.frozen {
                continue;
            }
            if g.shape() != entry.value.shape() {
                return Err(GradError::Shape(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    entry.name,
                    g.shape(),
                    entry.value.shape()
                )));
            }
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv + wd * *pv;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors by parameter index, for checkpointing.
    pub fn state(&self) -> (u64, &[Option<Tensor>], &[Option<Tensor>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Option<Tensor>>, second: Vec<Option<Tensor>>) -> Result<()> {
        if first.len() != second.len() {
            return Err(GradError::Invalid("moment vectors differ in length".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}
