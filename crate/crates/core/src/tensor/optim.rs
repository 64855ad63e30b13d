use super::{shape_err, TResult, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. Moment buffers are created on the first call.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> TResult<()> {
        if params.len() != grads.len() {
            return Err(shape_err("adamw", "parameter and gradient counts differ"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(shape_err("adamw", "parameter list changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err("adamw", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (e, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * gv;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * gv * gv;
                let mh = m[e] / c1;
                let vh = v[e] / c2;
                *pv -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}
