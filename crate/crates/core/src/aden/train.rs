use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Aden, AdenConfig, Dropout};
use crate::anneal::{gibbs_from_avg, SolverPath, SolverState, TraceEntry};
use crate::autonomy::{sample_categorical, Autonomy};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, norm2, softmax_in_place};
use crate::model::{harden, squared_distance, AssignmentPolicy, ClusterSet, Dataset, Mat};
use crate::tabular::OverrideEnv;
use crate::tensor::{AdamW, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batches: usize,
    pub samples_per_batch: usize,
    pub epochs_aden: usize,
    pub epochs_y: usize,
    pub lr_d: f64,
    pub lr_y: f64,
    pub weight_decay: f64,
    /// Standard deviation of the per-batch perturbation of the centers.
    pub perturb_sigma: f64,
    /// Override draws averaged per visited pair.
    pub autonomy_samples: usize,
    pub ema_lambda: f64,
    /// Exploration rate at the first stage.
    pub epsilon_greedy: f64,
    /// Exploration rate at the last stage; intermediate stages interpolate geometrically.
    pub epsilon_final: f64,
    /// Perturbation added to the centers at the start of every stage after the first.
    pub stage_noise: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batches: 32,
            samples_per_batch: 128,
            epochs_aden: 1000,
            epochs_y: 100,
            lr_d: 1e-4,
            lr_y: 1e-4,
            weight_decay: 1e-5,
            perturb_sigma: 0.01,
            autonomy_samples: 16,
            ema_lambda: 0.95,
            epsilon_greedy: 0.1,
            epsilon_final: 0.01,
            stage_noise: 1e-3,
            beta_min: 10.0,
            beta_max: 50_000.0,
            tau: 1.1,
            seed: 0,
        }
    }

    /// Budget that finishes in about a minute on the bundled presets.
    pub fn desk() -> Self {
        TrainConfig {
            batches: 4,
            samples_per_batch: 32,
            epochs_aden: 100,
            epochs_y: 100,
            lr_d: 1e-4,
            lr_y: 5e-3,
            perturb_sigma: 0.03,
            beta_min: 1.0,
            beta_max: 1000.0,
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batches == 0 || self.samples_per_batch == 0 || self.autonomy_samples == 0 {
            return bad("batches, samples_per_batch and autonomy_samples must be positive");
        }
        if !(self.ema_lambda > 0.0 && self.ema_lambda < 1.0) {
            return bad("ema_lambda must lie in (0, 1)");
        }
        if !(self.perturb_sigma >= 0.0 && self.stage_noise >= 0.0) {
            return bad("perturb_sigma and stage_noise must be nonnegative");
        }
        for e in [self.epsilon_greedy, self.epsilon_final] {
            if !(0.0..=1.0).contains(&e) {
                return bad("exploration rates must lie in [0, 1]");
            }
        }
        if !(self.lr_d > 0.0 && self.lr_y > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight_decay nonnegative");
        }
        if !(self.beta_min > 0.0 && self.beta_max > self.beta_min && self.tau > 1.0) {
            return bad("need 0 < beta_min < beta_max and tau > 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<f64> {
        let mut out = vec![self.beta_min];
        let mut b = self.beta_min;
        while b * self.tau <= self.beta_max * (1.0 + 1e-12) {
            b *= self.tau;
            out.push(b);
        }
        out
    }
}

/// Exponential moving average per pair of the realized cost in excess of the
/// nominal distance to the chosen center.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaDistanceTable {
    pub lambda: f64,
    d_bar: Mat,
    visits: Vec<u64>,
}

impl EmaDistanceTable {
    pub fn new(n: usize, k: usize, lambda: f64) -> Self {
        EmaDistanceTable {
            lambda,
            d_bar: Mat::zeros(n, k),
            visits: vec![0; n * k],
        }
    }

    /// `d_bar <- lambda d_bar + (1 - lambda) d_hat`; returns the new value.
    pub fn update(&mut self, i: usize, j: usize, d_hat: f64) -> f64 {
        let v = self.lambda * self.d_bar.get(i, j) + (1.0 - self.lambda) * d_hat;
        self.d_bar.set(i, j, v);
        self.visits[i * self.d_bar.cols() + j] += 1;
        v
    }

    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.d_bar.get(i, j)
    }

    pub fn visits(&self, i: usize, j: usize) -> u64 {
        self.visits[i * self.d_bar.cols() + j]
    }

    /// Regression target: the average with the weight lost to the zero start restored.
    pub fn target(&self, i: usize, j: usize) -> f64 {
        let n = self.visits(i, j);
        if n == 0 {
            return 0.0;
        }
        self.raw(i, j) / (1.0 - self.lambda.powi(n.min(i32::MAX as u64) as i32))
    }
}

/// Everything that evolves during training.
pub struct TrainState {
    pub net: Aden,
    pub opt: AdamW,
    pub ema: EmaDistanceTable,
    pub clusters: ClusterSet,
    pub epsilon: f64,
    rng: ChaCha8Rng,
    entity: WeightedIndex<f64>,
}

impl TrainState {
    pub fn new(data: &Dataset, net: Aden, clusters: ClusterSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if clusters.dim() != data.dim() || net.input_dim != data.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found: clusters.dim(),
                context: "training state".into(),
            });
        }
        let entity = WeightedIndex::new(data.weights()).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(TrainState {
            opt: AdamW::new(cfg.lr_d, cfg.weight_decay),
            ema: EmaDistanceTable::new(data.len(), clusters.k(), cfg.ema_lambda),
            net,
            clusters,
            epsilon: cfg.epsilon_greedy,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            entity,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    /// Mean `|d_theta - d_avg|` over the visited pairs, when a reference model is known.
    pub mean_abs_error: Option<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One optimizer step on a fresh set of mini-batches.
pub fn train_epoch(
    state: &mut TrainState,
    data: &Dataset,
    env: &dyn OverrideEnv,
    beta: f64,
    cfg: &TrainConfig,
    reference: Option<&Autonomy>,
) -> Result<EpochStats> {
    let (b, s, k, d) = (cfg.batches, cfg.samples_per_batch, state.clusters.k(), data.dim());
    let mut idx = Vec::with_capacity(b * s);
    let mut xs = Vec::with_capacity(b * s * d);
    for _ in 0..b * s {
        let i = state.entity.sample(&mut state.rng);
        idx.push(i);
        xs.extend_from_slice(data.point(i));
    }
    let mut perturbed = Vec::with_capacity(b);
    let mut ys = Vec::with_capacity(b * k * d);
    for _ in 0..b {
        let mut yb = state.clusters.clone();
        for v in yb.as_mut_slice() {
            *v += cfg.perturb_sigma * gaussian(&mut state.rng);
        }
        ys.extend_from_slice(yb.as_slice());
        perturbed.push(yb);
    }

    let tape = Tape::new();
    let params = state.net.bind(&tape);
    let x = tape.constant(Tensor::new(vec![b, s, d], xs)?);
    let y = tape.constant(Tensor::new(vec![b, k, d], ys)?);
    let rate = state.net.config.dropout_rate;
    let out = state.net.forward(
        &params,
        x,
        y,
        Some(Dropout {
            rate,
            rng: &mut state.rng,
        }),
    )?;
    let pred = out.value();

    let mut mask = vec![0.0; b * s * k];
    let mut target = vec![0.0; b * s * k];
    let mut probs = vec![0.0; k];
    let mut kernel = vec![0.0; k];
    let mut abs_err = 0.0;
    let mut visited = 0usize;
    for bt in 0..b {
        let yb = &perturbed[bt];
        let mut seen: Vec<(usize, usize)> = Vec::with_capacity(s);
        for q in 0..s {
            let i = idx[bt * s + q];
            let row = &pred.data()[(bt * s + q) * k..(bt * s + q + 1) * k];
            let j = if state.rng.random::<f64>() < state.epsilon {
                state.rng.random_range(0..k)
            } else {
                for (p, dv) in probs.iter_mut().zip(row) {
                    *p = -beta * dv;
                }
                softmax_in_place(&mut probs);
                sample_categorical(&probs, &mut state.rng)
            };
            let mut d_hat = 0.0;
            for _ in 0..cfg.autonomy_samples {
                let kk = env.realize(i, j, yb, &mut state.rng)?;
                d_hat += squared_distance(data.point(i), yb.center(kk));
            }
            d_hat /= cfg.autonomy_samples as f64;
            let nominal = squared_distance(data.point(i), yb.center(j));
            state.ema.update(i, j, d_hat - nominal);
            if seen.contains(&(i, j)) {
                continue;
            }
            seen.push((i, j));
            let o = (bt * s + q) * k + j;
            mask[o] = 1.0;
            target[o] = nominal + state.ema.target(i, j);
            if let Some(r) = reference {
                r.kernel_row(i, j, data, yb, &mut kernel)?;
                let exact: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(c, p)| p * squared_distance(data.point(i), yb.center(c)))
                    .sum();
                abs_err += (row[j] - exact).abs();
                visited += 1;
            }
        }
    }
    let shape = vec![b, s, k];
    let diff = tape.constant(Tensor::new(shape.clone(), target)?).sub(out)?;
    let loss = diff
        .mul(diff)?
        .mul(tape.constant(Tensor::new(shape, mask)?))?
        .sum()
        .scale(1.0 / b as f64);
    let grads = loss.backward()?;
    let g: Vec<Tensor> = params.iter().map(|p| grads.get_or_zero(*p)).collect();
    state.opt.step(state.net.params.tensors_mut(), &g)?;
    Ok(EpochStats {
        loss: loss.item(),
        mean_abs_error: reference.map(|_| abs_err / visited.max(1) as f64),
    })
}

/// Predicted distances for every entity against `clusters`, evaluation mode.
pub fn predicted_distances(net: &Aden, data: &Dataset, clusters: &ClusterSet) -> Result<Mat> {
    let x = Tensor::new(vec![1, data.len(), data.dim()], data.points().to_vec())?;
    let y = Tensor::new(vec![1, clusters.k(), clusters.dim()], clusters.as_slice().to_vec())?;
    let out = net.predict(&x, &y)?;
    Mat::from_vec(data.len(), clusters.k(), out.into_data())
}

/// Substituted free energy `-(1/beta) sum_i rho_i log sum_j exp(-beta d_theta)` and
/// its gradient with respect to the centers.
pub fn surrogate_free_energy(net: &Aden, data: &Dataset, clusters: &ClusterSet, beta: f64) -> Result<(f64, Vec<f64>)> {
    let (n, k, d) = (data.len(), clusters.k(), data.dim());
    let tape = Tape::new();
    let params: Vec<Var> = net.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let x = tape.constant(Tensor::new(vec![1, n, d], data.points().to_vec())?);
    let y = tape.param(Tensor::new(vec![1, k, d], clusters.as_slice().to_vec())?);
    let dist = net.forward(&params, x, y, None)?;
    let rho = tape.constant(Tensor::new(vec![1, n], data.weights().to_vec())?);
    let f = dist
        .scale(-beta)
        .logsumexp_last()?
        .mul(rho)?
        .sum()
        .scale(-1.0 / beta);
    let grads = f.backward()?;
    Ok((f.item(), grads.get_or_zero(y).into_data()))
}

/// `epochs_y` steps of `Y <- Y - lr_y grad F` with the network frozen.
pub fn y_update_phase(net: &Aden, data: &Dataset, clusters: &ClusterSet, beta: f64, cfg: &TrainConfig) -> Result<ClusterSet> {
    let mut y = clusters.clone();
    for _ in 0..cfg.epochs_y {
        let (_, g) = surrogate_free_energy(net, data, &y, beta)?;
        if g.iter().all(|v| *v == 0.0) {
            break;
        }
        for (v, gv) in y.as_mut_slice().iter_mut().zip(&g) {
            *v -= cfg.lr_y * gv;
        }
        if !y.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::NonConvergence {
                beta,
                iterations: cfg.epochs_y,
                residual: f64::INFINITY,
                path: "y_update".into(),
            });
        }
    }
    Ok(y)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub beta: f64,
    pub epoch: usize,
    pub loss: f64,
    pub mean_abs_distance_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DeepAnnealResult {
    pub final_state: SolverState,
    pub hardened: AssignmentPolicy,
    pub trace: Vec<TraceEntry>,
    pub log: Vec<LogRow>,
    pub net: Aden,
}

fn surrogate_objectives(davg: &Mat, weights: &[f64], beta: f64) -> (f64, f64) {
    let k = davg.cols();
    let mut buf = vec![0.0; k];
    let (mut f, mut dist) = (0.0, 0.0);
    for (i, w) in weights.iter().enumerate() {
        let row = davg.row(i);
        for (b, v) in buf.iter_mut().zip(row) {
            *b = -beta * v;
        }
        f += w * log_sum_exp(&buf);
        softmax_in_place(&mut buf);
        dist += w * buf.iter().zip(row).map(|(p, v)| p * v).sum::<f64>();
    }
    (-f / beta, dist)
}

/// Anneals with the network standing in for the unknown average distances.
pub fn deep_anneal(
    data: &Dataset,
    env: &dyn OverrideEnv,
    k: usize,
    cfg: &TrainConfig,
    aden: &AdenConfig,
    reference: Option<&Autonomy>,
) -> Result<DeepAnnealResult> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let net = Aden::new(aden.clone(), data.dim(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut y = ClusterSet::replicated(&data.weighted_mean(), k);
    for v in y.as_mut_slice() {
        *v += cfg.perturb_sigma * gaussian(&mut rng);
    }
    let mut state = TrainState::new(data, net, y, cfg)?;
    let schedule = cfg.schedule();
    let stages = schedule.len();
    let mut trace = Vec::with_capacity(stages);
    let mut log = Vec::new();
    let mut prev: Option<ClusterSet> = None;

    for (s, &beta) in schedule.iter().enumerate() {
        state.epsilon = if stages > 1 && cfg.epsilon_greedy > 0.0 && cfg.epsilon_final > 0.0 {
            cfg.epsilon_greedy * (cfg.epsilon_final / cfg.epsilon_greedy).powf(s as f64 / (stages - 1) as f64)
        } else {
            cfg.epsilon_greedy
        };
        if s > 0 {
            for v in state.clusters.as_mut_slice() {
                *v += cfg.stage_noise * gaussian(&mut rng);
            }
        }
        for epoch in 0..cfg.epochs_aden {
            let stats = train_epoch(&mut state, data, env, beta, cfg, reference).map_err(|e| stage_err(e, beta))?;
            log.push(LogRow {
                beta,
                epoch,
                loss: stats.loss,
                mean_abs_distance_error: stats.mean_abs_error,
            });
        }
        state.clusters = y_update_phase(&state.net, data, &state.clusters, beta, cfg).map_err(|e| stage_err(e, beta))?;
        let davg = predicted_distances(&state.net, data, &state.clusters)?;
        let (free_energy, distortion) = surrogate_objectives(&davg, data.weights(), beta);
        let delta_y_norm = match &prev {
            Some(p) => {
                let diff: Vec<f64> = state.clusters.as_slice().iter().zip(p.as_slice()).map(|(a, b)| a - b).collect();
                norm2(&diff)
            }
            None => 0.0,
        };
        trace.push(TraceEntry {
            beta,
            free_energy,
            distortion,
            delta_y_norm,
            path: SolverPath::Sgd,
            transition_flag: false,
            iterations: cfg.epochs_y,
            clusters: state.clusters.clone(),
        });
        prev = Some(state.clusters.clone());
    }

    let beta = *schedule.last().expect("schedule is never empty");
    let davg = predicted_distances(&state.net, data, &state.clusters)?;
    let policy = gibbs_from_avg(&davg, beta);
    let hardened = harden(&policy);
    let (free_energy, distortion) = surrogate_objectives(&davg, data.weights(), beta);
    let mut masses = vec![0.0; k];
    for i in 0..data.len() {
        for (j, m) in masses.iter_mut().enumerate() {
            *m += data.weight(i) * policy.prob(i, j);
        }
    }
    Ok(DeepAnnealResult {
        final_state: SolverState {
            beta,
            clusters: state.clusters,
            policy,
            free_energy,
            distortion,
            path: SolverPath::Sgd,
            iterations: cfg.epochs_y,
            masses,
        },
        hardened,
        trace,
        log,
        net: state.net,
    })
}

fn stage_err(e: Error, beta: f64) -> Error {
    match e {
        Error::NonConvergence { .. } => e,
        other => Error::InvalidInput(format!("at beta={beta}: {other}")),
    }
}
