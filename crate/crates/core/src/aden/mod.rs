//! Adaptive distance estimation network.
//!
//! Entity embeddings attend over cluster embeddings through `L` blocks of
//! multi-head attention and feed-forward layers. A shared head scores every
//! entity-cluster pair and adds a learned correction to the squared distance.

mod train;

pub use train::{
    deep_anneal, train_epoch, y_update_phase, DeepAnnealResult, EmaDistanceTable, EpochStats, LogRow,
    TrainConfig, TrainState,
};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdenConfig {
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub adb_layers: usize,
    pub attention_heads: usize,
    pub dropout_rate: f64,
    pub theta_z_init: f64,
}

impl Default for AdenConfig {
    fn default() -> Self {
        AdenConfig::paper()
    }
}

impl AdenConfig {
    /// Full-size architecture.
    pub fn paper() -> Self {
        AdenConfig {
            hidden_dim: 64,
            ff_dim: 128,
            adb_layers: 4,
            attention_heads: 8,
            dropout_rate: 0.1,
            theta_z_init: 0.0,
        }
    }

    /// Small architecture that trains in seconds on a laptop.
    pub fn desk() -> Self {
        AdenConfig {
            hidden_dim: 16,
            ff_dim: 32,
            adb_layers: 1,
            attention_heads: 2,
            dropout_rate: 0.0,
            theta_z_init: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.ff_dim == 0 || self.attention_heads == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        if self.adb_layers == 0 {
            return Err(Error::Config("adb_layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

enum Init {
    /// Glorot uniform with the given fan-in and fan-out.
    Xavier(usize, usize),
    Const(f64),
}

fn layout(cfg: &AdenConfig, dim: usize) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f) = (cfg.hidden_dim, cfg.ff_dim);
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Xavier(fan_in, fan_out)));
        out.push((format!("{name}.b"), vec![fan_out], Init::Const(0.0)));
    };
    linear(&mut out, "fx", dim, h);
    linear(&mut out, "fy", dim, h);
    for l in 0..cfg.adb_layers {
        for p in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("adb{l}.{p}"), h, h);
        }
        out.push((format!("adb{l}.ln1.g"), vec![h], Init::Const(1.0)));
        out.push((format!("adb{l}.ln1.b"), vec![h], Init::Const(0.0)));
        linear(&mut out, &format!("adb{l}.ff1"), h, f);
        linear(&mut out, &format!("adb{l}.ff2"), f, h);
        out.push((format!("adb{l}.ln2.g"), vec![h], Init::Const(1.0)));
        out.push((format!("adb{l}.ln2.b"), vec![h], Init::Const(0.0)));
    }
    linear(&mut out, "head1", 2 * h, h);
    linear(&mut out, "head2", h, 1);
    out.push(("theta_z".into(), vec![1], Init::Const(cfg.theta_z_init)));
    out
}

/// Network weights together with the architecture they belong to.
#[derive(Debug, Clone)]
pub struct Aden {
    pub config: AdenConfig,
    pub input_dim: usize,
    pub params: ParamStore,
}

/// Dropout source for a training-mode pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Aden {
    pub fn new(config: AdenConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config, input_dim) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Const(c) => vec![c; n],
                Init::Xavier(fi, fo) => {
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            params.add(name, Tensor::new(shape, data)?);
        }
        Ok(Aden {
            config,
            input_dim,
            params,
        })
    }

    /// Rebuilds a network from saved weights, checking names and shapes.
    pub fn from_params(config: AdenConfig, input_dim: usize, params: ParamStore) -> Result<Self> {
        let mut net = Aden::new(config, input_dim, 0)?;
        net.params.assign_from(&params)?;
        Ok(net)
    }

    pub fn theta_z(&self) -> f64 {
        let idx = self.params.len() - 1;
        self.params.get(idx).item()
    }

    pub fn set_theta_z(&mut self, v: f64) {
        let idx = self.params.len() - 1;
        self.params.tensors_mut()[idx] = Tensor::scalar(v);
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.tensors().iter().map(|t| tape.param(t.clone())).collect()
    }

    /// `x: [B, S, d]`, `y: [B, K, d]` to predicted distances `[B, S, K]`.
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        y: Var<'t>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var<'t>> {
        let xs = x.shape();
        let ys = y.shape();
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] || xs[2] != self.input_dim || ys[2] != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: if xs.len() == 3 { xs[2] } else { 0 },
                context: format!("ADEN inputs {xs:?} and {ys:?}"),
            });
        }
        let (b, s, k) = (xs[0], xs[1], ys[1]);
        let h = self.config.hidden_dim;
        let heads = self.config.attention_heads;
        let dk = h / heads;
        let mut cur = 0usize;
        let mut next = || {
            let v = params[cur];
            cur += 1;
            v
        };
        let linear = |inp: Var<'t>, w: Var<'t>, bias: Var<'t>| -> Result<Var<'t>> { Ok(inp.matmul(w)?.add(bias)?) };

        let x_hat = linear(x, next(), next())?;
        let y_hat = linear(y, next(), next())?;
        let mut e = x_hat;
        for _ in 0..self.config.adb_layers {
            let q = linear(e, next(), next())?;
            let kk = linear(y_hat, next(), next())?;
            let v = linear(y_hat, next(), next())?;
            let q = q.reshape(&[b, s, heads, dk])?.permute(&[0, 2, 1, 3])?;
            let kt = kk.reshape(&[b, k, heads, dk])?.permute(&[0, 2, 3, 1])?;
            let v = v.reshape(&[b, k, heads, dk])?.permute(&[0, 2, 1, 3])?;
            let att = q.matmul(kt)?.scale(1.0 / (dk as f64).sqrt()).softmax()?;
            let ctx = att.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, s, h])?;
            let mha = linear(ctx, next(), next())?;
            let mha = apply_dropout(mha, dropout.as_mut())?;
            let u = affine_norm(mha.add(e)?, next(), next())?;
            let ff = linear(u, next(), next())?.gelu();
            let ff = linear(ff, next(), next())?;
            let ff = apply_dropout(ff, dropout.as_mut())?;
            e = affine_norm(ff.add(u)?, next(), next())?;
        }
        let e_pair = e.reshape(&[b, s, 1, h])?.broadcast_to(&[b, s, k, h])?;
        let y_pair = y_hat.reshape(&[b, 1, k, h])?.broadcast_to(&[b, s, k, h])?;
        let z = Var::concat_last(&[e_pair, y_pair])?;
        let hid = linear(z, next(), next())?.gelu();
        let hid = apply_dropout(hid, dropout.as_mut())?;
        let dev = linear(hid, next(), next())?.reshape(&[b, s, k])?;
        let theta_z = next();
        let base = x.pairwise_sq_dist(y)?;
        Ok(dev.mul(theta_z)?.add(base)?.relu())
    }

    /// Evaluation-mode prediction without gradients.
    pub fn predict(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward(&params, tape.constant(x.clone()), tape.constant(y.clone()), None)?;
        Ok(out.value())
    }
}

fn affine_norm<'t>(x: Var<'t>, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    Ok(x.layer_norm(LN_EPS)?.mul(gain)?.add(shift)?)
}

fn apply_dropout<'t>(x: Var<'t>, dropout: Option<&mut Dropout<'_>>) -> Result<Var<'t>> {
    let Some(d) = dropout else { return Ok(x) };
    if d.rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = 1.0 / (1.0 - d.rate);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
        .collect();
    let tape = x.tape();
    Ok(x.mul(tape.constant(Tensor::new(shape, mask)?))?)
}

/// Stateless form of [`Aden::predict`].
pub fn aden_forward(x: &Tensor, y: &Tensor, config: &AdenConfig, params: &ParamStore) -> Result<Tensor> {
    let dim = *x.shape().last().ok_or_else(|| Error::invalid("empty input shape"))?;
    let net = Aden::from_params(config.clone(), dim, params.clone())?;
    net.predict(x, y)
}

/// Packs rows into a `[1, rows, d]` tensor.
pub fn batch_of_one(flat: &[f64], rows: usize, dim: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![1, rows, dim], flat.to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AdenConfig {
        AdenConfig {
            hidden_dim: 8,
            ff_dim: 12,
            adb_layers: 1,
            attention_heads: 2,
            dropout_rate: 0.0,
            theta_z_init: 0.0,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_theta_gives_squared_distances() {
        let net = Aden::new(tiny(), 2, 3).unwrap();
        let x = rand_tensor(&[2, 5, 2], 1);
        let y = rand_tensor(&[2, 3, 2], 2);
        let out = net.predict(&x, &y).unwrap();
        assert_eq!(out.shape(), &[2, 5, 3]);
        for bt in 0..2 {
            for i in 0..5 {
                for j in 0..3 {
                    let xi = &x.data()[(bt * 5 + i) * 2..(bt * 5 + i + 1) * 2];
                    let yj = &y.data()[(bt * 3 + j) * 2..(bt * 3 + j + 1) * 2];
                    let d = crate::model::squared_distance(xi, yj);
                    assert_eq!(out.data()[(bt * 5 + i) * 3 + j], d);
                }
            }
        }
    }

    #[test]
    fn handles_variable_sizes() {
        let net = Aden::new(tiny(), 2, 3).unwrap();
        let a = net.predict(&rand_tensor(&[1, 7, 2], 1), &rand_tensor(&[1, 3, 2], 2)).unwrap();
        let b = net.predict(&rand_tensor(&[1, 20, 2], 3), &rand_tensor(&[1, 5, 2], 4)).unwrap();
        assert_eq!(a.shape(), &[1, 7, 3]);
        assert_eq!(b.shape(), &[1, 20, 5]);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let mut cfg = tiny();
        cfg.attention_heads = 3;
        assert!(Aden::new(cfg, 2, 0).is_err());
        let net = Aden::new(tiny(), 2, 0).unwrap();
        assert!(net.predict(&rand_tensor(&[1, 4, 3], 0), &rand_tensor(&[1, 2, 3], 0)).is_err());
    }

    #[test]
    fn theta_z_is_last_parameter() {
        let mut net = Aden::new(tiny(), 2, 0).unwrap();
        assert_eq!(net.theta_z(), 0.0);
        net.set_theta_z(0.5);
        assert_eq!(net.params.names().last().unwrap(), "theta_z");
        assert_eq!(net.theta_z(), 0.5);
    }
}
