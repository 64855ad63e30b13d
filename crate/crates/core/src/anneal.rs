//! Deterministic annealing with autonomy-aware distances.
//!
//! Each temperature stage alternates the Gibbs policy update with the
//! centroid update until the centers stop moving, falling back to Armijo
//! gradient descent when a sweep looks unstable.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autonomy::{Autonomy, KernelTensor};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, max_abs_diff, norm2, softmax_in_place};
use crate::model::{
    avg_distance_with_kernel, distance_matrix, harden, objective_from_avg, AssignmentPolicy,
    ClusterSet, Dataset, Mat, PolicyMode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub k: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Multiplicative step `beta <- tau * beta`; must exceed one.
    pub tau: f64,
    /// Standard deviation of the perturbation added after every stage.
    pub noise_scale: f64,
    /// Stop when no coordinate moves more than this. `None` means `1e-7 (1 + R)`
    /// with `R` the data diameter.
    pub inner_tol: Option<f64>,
    pub inner_max_iters: usize,
    pub armijo_step: f64,
    pub armijo_rho: f64,
    pub armijo_xi: f64,
    /// Switch to Armijo when a cluster mass grows by this factor in one sweep.
    pub mass_growth_limit: f64,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            k: 4,
            beta_min: 1e-3,
            beta_max: 1e3,
            tau: 1.1,
            noise_scale: 1e-4,
            inner_tol: None,
            inner_max_iters: 20_000,
            armijo_step: 1.0,
            armijo_rho: 1e-4,
            armijo_xi: 0.5,
            mass_growth_limit: 4.0,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.beta_min > 0.0) || !(self.beta_max >= self.beta_min) || !self.beta_max.is_finite() {
            return Err(Error::Config("require 0 < beta_min <= beta_max < inf".into()));
        }
        if !(self.tau > 1.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must exceed 1, got {}", self.tau)));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be nonnegative".into()));
        }
        if let Some(t) = self.inner_tol {
            if !(t > 0.0) {
                return Err(Error::Config("inner_tol must be positive".into()));
            }
        }
        if self.inner_max_iters == 0 {
            return Err(Error::Config("inner_max_iters must be positive".into()));
        }
        if !(self.armijo_step > 0.0)
            || !(self.armijo_rho > 0.0 && self.armijo_rho < 1.0)
            || !(self.armijo_xi > 0.0 && self.armijo_xi < 1.0)
        {
            return Err(Error::Config("Armijo parameters need s > 0 and rho, xi in (0, 1)".into()));
        }
        if !(self.mass_growth_limit > 1.0) {
            return Err(Error::Config("mass_growth_limit must exceed 1".into()));
        }
        Ok(())
    }

    pub fn resolved_tol(&self, data: &Dataset) -> f64 {
        self.inner_tol
            .unwrap_or_else(|| 1e-7 * (1.0 + data.diameter()))
    }

    /// Temperature schedule `beta_min, tau beta_min, ...` up to `beta_max`.
    pub fn schedule(&self) -> Vec<f64> {
        let mut out = vec![self.beta_min];
        let mut b = self.beta_min;
        loop {
            let next = b * self.tau;
            if next > self.beta_max * (1.0 + 1e-12) {
                break;
            }
            out.push(next);
            b = next;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    FixedPoint,
    Armijo,
    /// Stochastic center updates from a learner.
    Sgd,
}

impl SolverPath {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverPath::FixedPoint => "fixed_point",
            SolverPath::Armijo => "armijo",
            SolverPath::Sgd => "sgd",
        }
    }
}

/// Converged state at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub beta: f64,
    pub clusters: ClusterSet,
    pub policy: AssignmentPolicy,
    pub free_energy: f64,
    /// Distortion under the Gibbs policy.
    pub distortion: f64,
    pub path: SolverPath,
    pub iterations: usize,
    pub masses: Vec<f64>,
}

/// Cached evaluator for `F`, `D` and their ingredients.
pub(crate) struct Objective<'a> {
    pub data: &'a Dataset,
    pub autonomy: &'a Autonomy,
    fixed: Option<KernelTensor>,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a Dataset, autonomy: &'a Autonomy, clusters: &ClusterSet) -> Result<Self> {
        if data.dim() != clusters.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found: clusters.dim(),
                context: "cluster dimension".into(),
            });
        }
        autonomy.check(data.len(), clusters.k())?;
        let fixed = if autonomy.depends_on_y() {
            None
        } else {
            Some(autonomy.full_tensor(data, clusters)?)
        };
        Ok(Objective {
            data,
            autonomy,
            fixed,
        })
    }

    pub fn kernel(&self, clusters: &ClusterSet) -> Result<Cow<'_, KernelTensor>> {
        match &self.fixed {
            Some(k) => Ok(Cow::Borrowed(k)),
            None => Ok(Cow::Owned(self.autonomy.full_tensor(self.data, clusters)?)),
        }
    }

    pub fn davg(&self, clusters: &ClusterSet) -> Result<Mat> {
        let dist = distance_matrix(self.data, clusters)?;
        let kernel = self.kernel(clusters)?;
        Ok(avg_distance_with_kernel(&dist, &kernel))
    }

    pub fn free_energy(&self, clusters: &ClusterSet, beta: f64) -> Result<f64> {
        Ok(free_energy_from_avg(self.data.weights(), &self.davg(clusters)?, beta))
    }

    pub fn gradient(&self, clusters: &ClusterSet, beta: f64) -> Result<Vec<f64>> {
        if self.fixed.is_some() {
            let davg = self.davg(clusters)?;
            let policy = gibbs_from_avg(&davg, beta);
            let kernel = self.kernel(clusters)?;
            let (mass, sums) = mass_and_sums(self.data, &policy, &kernel);
            let d = clusters.dim();
            let mut g = vec![0.0; clusters.as_slice().len()];
            for l in 0..clusters.k() {
                for c in 0..d {
                    g[l * d + c] = 2.0 * (mass[l] * clusters.center(l)[c] - sums[l * d + c]);
                }
            }
            Ok(g)
        } else {
            let h = 1e-5 * (1.0 + clusters.max_abs());
            let mut g = vec![0.0; clusters.as_slice().len()];
            let mut probe = clusters.clone();
            for (idx, slot) in g.iter_mut().enumerate() {
                let orig = probe.as_slice()[idx];
                probe.as_mut_slice()[idx] = orig + h;
                let fp = self.free_energy(&probe, beta)?;
                probe.as_mut_slice()[idx] = orig - h;
                let fm = self.free_energy(&probe, beta)?;
                probe.as_mut_slice()[idx] = orig;
                *slot = (fp - fm) / (2.0 * h);
            }
            Ok(g)
        }
    }
}

pub(crate) fn free_energy_from_avg(weights: &[f64], davg: &Mat, beta: f64) -> f64 {
    let k = davg.cols();
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    for (i, w) in weights.iter().enumerate() {
        for (b, d) in buf.iter_mut().zip(davg.row(i)) {
            *b = -beta * d;
        }
        total += w * log_sum_exp(&buf);
    }
    -total / beta
}

/// `pi(j|i) = softmax_j(-beta d_avg(i, j))`.
pub fn gibbs_from_avg(davg: &Mat, beta: f64) -> AssignmentPolicy {
    let mut probs = Mat::zeros(davg.rows(), davg.cols());
    for i in 0..davg.rows() {
        let row = probs.row_mut(i);
        for (p, d) in row.iter_mut().zip(davg.row(i)) {
            *p = -beta * d;
        }
        softmax_in_place(row);
    }
    AssignmentPolicy::from_mat(probs, PolicyMode::Soft)
}

/// Gibbs policy at the given centers.
pub fn gibbs_policy(
    data: &Dataset,
    clusters: &ClusterSet,
    autonomy: &Autonomy,
    beta: f64,
) -> Result<AssignmentPolicy> {
    let obj = Objective::new(data, autonomy, clusters)?;
    Ok(gibbs_from_avg(&obj.davg(clusters)?, beta))
}

/// Cluster masses `sum rho pi p` and mass-weighted coordinate sums.
fn mass_and_sums(data: &Dataset, policy: &AssignmentPolicy, kernel: &KernelTensor) -> (Vec<f64>, Vec<f64>) {
    let (n, k, d) = (data.len(), kernel.k(), data.dim());
    let mut mass = vec![0.0; k];
    let mut sums = vec![0.0; k * d];
    let mut w = vec![0.0; k];
    for i in 0..n {
        w.fill(0.0);
        for (j, pj) in policy.probs.row(i).iter().enumerate() {
            if *pj == 0.0 {
                continue;
            }
            for (wl, p) in w.iter_mut().zip(kernel.row(i, j)) {
                *wl += pj * p;
            }
        }
        let rho = data.weight(i);
        let x = data.point(i);
        for l in 0..k {
            let a = rho * w[l];
            mass[l] += a;
            for c in 0..d {
                sums[l * d + c] += a * x[c];
            }
        }
    }
    (mass, sums)
}

/// Centroid step; zero-mass clusters keep their position. Returns the masses.
fn centroid_step(
    data: &Dataset,
    policy: &AssignmentPolicy,
    kernel: &KernelTensor,
    clusters: &ClusterSet,
) -> (ClusterSet, Vec<f64>) {
    let d = data.dim();
    let (mass, sums) = mass_and_sums(data, policy, kernel);
    let mut next = clusters.clone();
    for (l, m) in mass.iter().enumerate() {
        if *m > 0.0 {
            for c in 0..d {
                next.center_mut(l)[c] = sums[l * d + c] / m;
            }
        }
    }
    (next, mass)
}

/// `y_l = sum_{i,j} rho_i p(l|j,i) pi(j|i) x_i / sum_{i,j} rho_i p(l|j,i) pi(j|i)`.
///
/// `clusters` supplies the positions at which a position-dependent kernel is
/// evaluated.
pub fn centroid_update(
    data: &Dataset,
    policy: &AssignmentPolicy,
    clusters: &ClusterSet,
    autonomy: &Autonomy,
) -> Result<ClusterSet> {
    if policy.n() != data.len() || policy.k() != clusters.k() {
        return Err(Error::DimensionMismatch {
            expected: data.len() * clusters.k(),
            found: policy.n() * policy.k(),
            context: "policy shape".into(),
        });
    }
    let obj = Objective::new(data, autonomy, clusters)?;
    let kernel = obj.kernel(clusters)?;
    let (next, mass) = centroid_step(data, policy, &kernel, clusters);
    if let Some(l) = mass.iter().position(|m| *m <= 0.0) {
        return Err(Error::DegenerateCluster { cluster: l });
    }
    Ok(next)
}

/// `F(Y) = -(1/beta) sum_i rho_i log sum_j exp(-beta d_avg(i, j))`.
pub fn free_energy(data: &Dataset, clusters: &ClusterSet, autonomy: &Autonomy, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Objective::new(data, autonomy, clusters)?.free_energy(clusters, beta)
}

/// Gradient of `F` in stacked `Kd` layout. Analytic for position-independent
/// kernels, central differences otherwise.
pub fn grad_free_energy(
    data: &Dataset,
    clusters: &ClusterSet,
    autonomy: &Autonomy,
    beta: f64,
) -> Result<Vec<f64>> {
    check_beta(beta)?;
    Objective::new(data, autonomy, clusters)?.gradient(clusters, beta)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be positive and finite, got {beta}")));
    }
    Ok(())
}

fn finish_state(
    obj: &Objective,
    clusters: ClusterSet,
    beta: f64,
    path: SolverPath,
    iterations: usize,
) -> Result<SolverState> {
    let davg = obj.davg(&clusters)?;
    let policy = gibbs_from_avg(&davg, beta);
    let kernel = obj.kernel(&clusters)?;
    let (masses, _) = mass_and_sums(obj.data, &policy, &kernel);
    let free_energy = free_energy_from_avg(obj.data.weights(), &davg, beta);
    let distortion = objective_from_avg(obj.data.weights(), &policy, &davg);
    Ok(SolverState {
        beta,
        clusters,
        policy,
        free_energy,
        distortion,
        path,
        iterations,
        masses,
    })
}

/// Preconditioned stationarity residual `max |grad_l| / (2 m_l)`.
fn armijo_residual(grad: &[f64], masses: &[f64], d: usize) -> f64 {
    grad.iter()
        .enumerate()
        .fold(0.0f64, |m, (idx, g)| m.max(g.abs() / (2.0 * masses[idx / d].max(1e-12))))
}

fn armijo_loop(
    obj: &Objective,
    start: ClusterSet,
    beta: f64,
    cfg: &AnnealConfig,
    tol: f64,
    used: usize,
) -> Result<SolverState> {
    let d = start.dim();
    let mut y = start;
    let mut f = obj.free_energy(&y, beta)?;
    let mut iters = used;
    let mut residual = f64::INFINITY;
    while iters < cfg.inner_max_iters {
        iters += 1;
        let g = obj.gradient(&y, beta)?;
        let davg = obj.davg(&y)?;
        let pol = gibbs_from_avg(&davg, beta);
        let kernel = obj.kernel(&y)?;
        let (masses, _) = mass_and_sums(obj.data, &pol, &kernel);
        residual = armijo_residual(&g, &masses, d);
        if residual < tol {
            return finish_state(obj, y, beta, SolverPath::Armijo, iters);
        }
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let mut sigma = cfg.armijo_step;
        let mut accepted = None;
        for _ in 0..200 {
            let mut trial = y.clone();
            for (t, gi) in trial.as_mut_slice().iter_mut().zip(&g) {
                *t -= sigma * gi;
            }
            let ft = obj.free_energy(&trial, beta)?;
            if ft - f <= -cfg.armijo_rho * sigma * gg {
                accepted = Some((trial, ft));
                break;
            }
            sigma *= cfg.armijo_xi;
        }
        match accepted {
            Some((trial, ft)) => {
                y = trial;
                f = ft;
            }
            // No representable descent step left: stationary to working precision.
            None => return finish_state(obj, y, beta, SolverPath::Armijo, iters),
        }
    }
    Err(Error::NonConvergence {
        beta,
        iterations: iters,
        residual,
        path: SolverPath::Armijo.as_str().into(),
    })
}

fn fixed_point_loop(
    obj: &Objective,
    start: ClusterSet,
    beta: f64,
    cfg: &AnnealConfig,
    tol: f64,
) -> Result<SolverState> {
    let mut y = start;
    let mut prev_mass: Option<Vec<f64>> = None;
    let mut prev_f = f64::INFINITY;
    let check_f = obj.autonomy.depends_on_y();
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.inner_max_iters {
        let kernel = obj.kernel(&y)?;
        let dist = distance_matrix(obj.data, &y)?;
        let davg = avg_distance_with_kernel(&dist, &kernel);
        let f = free_energy_from_avg(obj.data.weights(), &davg, beta);
        let policy = gibbs_from_avg(&davg, beta);
        let (next, mass) = centroid_step(obj.data, &policy, &kernel, &y);
        drop(kernel);
        let grew = prev_mass.as_ref().is_some_and(|pm| {
            pm.iter()
                .zip(&mass)
                .any(|(a, b)| *a > 0.0 && *b > 1e-12 && *b >= cfg.mass_growth_limit * a)
        });
        let rose = check_f && f > prev_f + 1e-12 * (1.0 + prev_f.abs());
        if grew || rose {
            return armijo_loop(obj, y, beta, cfg, tol, it);
        }
        residual = max_abs_diff(next.as_slice(), y.as_slice());
        y = next;
        if residual < tol {
            return finish_state(obj, y, beta, SolverPath::FixedPoint, it);
        }
        prev_mass = Some(mass);
        prev_f = f;
    }
    Err(Error::NonConvergence {
        beta,
        iterations: cfg.inner_max_iters,
        residual,
        path: SolverPath::FixedPoint.as_str().into(),
    })
}

/// Solves one temperature stage starting from `y0`.
pub fn inner_fixed_point(
    data: &Dataset,
    y0: &ClusterSet,
    autonomy: &Autonomy,
    beta: f64,
    cfg: &AnnealConfig,
) -> Result<SolverState> {
    check_beta(beta)?;
    let obj = Objective::new(data, autonomy, y0)?;
    fixed_point_loop(&obj, y0.clone(), beta, cfg, cfg.resolved_tol(data))
}

/// Armijo backtracking gradient descent on `F` from `y0`.
pub fn armijo_descent(
    data: &Dataset,
    y0: &ClusterSet,
    autonomy: &Autonomy,
    beta: f64,
    cfg: &AnnealConfig,
) -> Result<SolverState> {
    check_beta(beta)?;
    let obj = Objective::new(data, autonomy, y0)?;
    armijo_loop(&obj, y0.clone(), beta, cfg, cfg.resolved_tol(data), 0)
}

/// One row of the annealing trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub beta: f64,
    pub free_energy: f64,
    pub distortion: f64,
    /// Euclidean norm of the change in stacked centers since the previous stage.
    pub delta_y_norm: f64,
    pub path: SolverPath,
    pub transition_flag: bool,
    pub iterations: usize,
    pub clusters: ClusterSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealResult {
    pub final_state: SolverState,
    pub hardened: AssignmentPolicy,
    /// Distortion of the hardened policy at the final centers.
    pub hard_distortion: f64,
    pub trace: Vec<TraceEntry>,
}

fn add_noise(y: &mut ClusterSet, scale: f64, rng: &mut ChaCha8Rng) {
    if scale == 0.0 {
        return;
    }
    for v in y.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += scale * z;
    }
}

/// Full annealing run from the perturbed weighted mean at `beta_min` to `beta_max`.
pub fn anneal(data: &Dataset, autonomy: &Autonomy, cfg: &AnnealConfig) -> Result<AnnealResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = ClusterSet::replicated(&data.weighted_mean(), cfg.k);
    let obj = Objective::new(data, autonomy, &y)?;
    let tol = cfg.resolved_tol(data);
    add_noise(&mut y, cfg.noise_scale, &mut rng);

    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut last: Option<SolverState> = None;
    for beta in cfg.schedule() {
        if let Some(prev) = &last {
            y = prev.clusters.clone();
            add_noise(&mut y, cfg.noise_scale, &mut rng);
        }
        let state = fixed_point_loop(&obj, y.clone(), beta, cfg, tol)?;
        let delta_y_norm = match &last {
            Some(prev) => {
                let diff: Vec<f64> = state
                    .clusters
                    .as_slice()
                    .iter()
                    .zip(prev.clusters.as_slice())
                    .map(|(a, b)| a - b)
                    .collect();
                norm2(&diff)
            }
            None => 0.0,
        };
        trace.push(TraceEntry {
            beta,
            free_energy: state.free_energy,
            distortion: state.distortion,
            delta_y_norm,
            path: state.path,
            transition_flag: false,
            iterations: state.iterations,
            clusters: state.clusters.clone(),
        });
        last = Some(state);
    }
    let last = last.expect("schedule is never empty");
    let mut y = last.clusters.clone();
    add_noise(&mut y, cfg.noise_scale, &mut rng);
    let final_state = fixed_point_loop(&obj, y, last.beta, cfg, tol)?;
    let hardened = harden(&final_state.policy);
    let davg = obj.davg(&final_state.clusters)?;
    let hard_distortion = objective_from_avg(data.weights(), &hardened, &davg);
    Ok(AnnealResult {
        final_state,
        hardened,
        hard_distortion,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::objective_d;

    fn line_data() -> Dataset {
        Dataset::new(&[vec![-1.0], vec![1.0]], None).unwrap()
    }

    #[test]
    fn gibbs_rows_are_distributions() {
        let davg = Mat::from_vec(2, 3, vec![0.0, 1.0, 2.0, 1e9, 0.0, 1e9]).unwrap();
        let pol = gibbs_from_avg(&davg, 1e3);
        for i in 0..2 {
            let s: f64 = pol.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(pol.probs.get(1, 1), 1.0);
    }

    #[test]
    fn free_energy_small_beta_limit() {
        // As beta -> 0, F + log(K)/beta -> sum_i rho_i mean_j d_avg(i, j).
        let data = line_data();
        let y = ClusterSet::new(&[vec![0.5], vec![-0.25]]).unwrap();
        let beta = 1e-7;
        let f = free_energy(&data, &y, &Autonomy::Identity, beta).unwrap();
        let mean_d = 0.5 * (0.5 * (1.5f64.powi(2) + 0.75f64.powi(2)) + 0.5 * (0.5f64.powi(2) + 1.25f64.powi(2)));
        assert!((f + 2f64.ln() / beta - mean_d).abs() < 1e-6);
    }

    #[test]
    fn free_energy_large_beta_limit() {
        let data = line_data();
        let y = ClusterSet::new(&[vec![0.5], vec![-0.25]]).unwrap();
        let f = free_energy(&data, &y, &Autonomy::Identity, 1e8).unwrap();
        let hard = 0.5 * 0.25 + 0.5 * 0.75f64.powi(2);
        assert!((f - hard).abs() < 1e-7);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let data = Dataset::new(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]], None).unwrap();
        let y = ClusterSet::new(&[vec![0.3, 0.1], vec![1.0, -0.2]]).unwrap();
        let a = Autonomy::honor(0.8).unwrap();
        let beta = 1.7;
        let g = grad_free_energy(&data, &y, &a, beta).unwrap();
        let h = 1e-6;
        for idx in 0..4 {
            let mut p = y.clone();
            p.as_mut_slice()[idx] += h;
            let fp = free_energy(&data, &p, &a, beta).unwrap();
            p.as_mut_slice()[idx] -= 2.0 * h;
            let fm = free_energy(&data, &p, &a, beta).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7 * (1.0 + g[idx].abs()), "{idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn fixed_point_sweep_is_preconditioned_gradient_step() {
        let data = Dataset::new(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]], None).unwrap();
        let y = ClusterSet::new(&[vec![0.3, 0.1], vec![1.0, -0.2]]).unwrap();
        let a = Autonomy::honor(0.7).unwrap();
        let beta = 0.9;
        let pol = gibbs_policy(&data, &y, &a, beta).unwrap();
        let next = centroid_update(&data, &pol, &y, &a).unwrap();
        let g = grad_free_energy(&data, &y, &a, beta).unwrap();
        let kernel = a.full_tensor(&data, &y).unwrap();
        let (mass, _) = mass_and_sums(&data, &pol, &kernel);
        for idx in 0..4 {
            let expect = y.as_slice()[idx] - 0.5 * g[idx] / mass[idx / 2];
            assert!((next.as_slice()[idx] - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn degenerate_cluster_is_reported() {
        let data = line_data();
        let y = ClusterSet::new(&[vec![0.0], vec![5.0]]).unwrap();
        let probs = Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let pol = AssignmentPolicy::from_mat(probs, PolicyMode::Hard);
        assert!(matches!(
            centroid_update(&data, &pol, &y, &Autonomy::Identity),
            Err(Error::DegenerateCluster { cluster: 1 })
        ));
    }

    #[test]
    fn inner_solve_decreases_free_energy() {
        let data = Dataset::new(&[vec![0.0], vec![0.2], vec![3.0], vec![3.1]], None).unwrap();
        let y0 = ClusterSet::new(&[vec![1.0], vec![1.5]]).unwrap();
        let a = Autonomy::honor(0.9).unwrap();
        let cfg = AnnealConfig::default();
        let f0 = free_energy(&data, &y0, &a, 2.0).unwrap();
        let s = inner_fixed_point(&data, &y0, &a, 2.0, &cfg).unwrap();
        assert!(s.free_energy <= f0);
        assert_eq!(s.path, SolverPath::FixedPoint);
    }

    #[test]
    fn fixed_point_and_armijo_agree() {
        let data = Dataset::new(&[vec![0.0, 0.0], vec![0.1, 0.0], vec![1.0, 1.0], vec![1.1, 0.9]], None).unwrap();
        let y0 = ClusterSet::new(&[vec![0.2, 0.1], vec![0.9, 0.8]]).unwrap();
        let a = Autonomy::honor(0.85).unwrap();
        let cfg = AnnealConfig {
            inner_tol: Some(1e-11),
            inner_max_iters: 100_000,
            ..Default::default()
        };
        let fp = inner_fixed_point(&data, &y0, &a, 5.0, &cfg).unwrap();
        let ar = armijo_descent(&data, &y0, &a, 5.0, &cfg).unwrap();
        assert!(max_abs_diff(fp.clusters.as_slice(), ar.clusters.as_slice()) < 1e-8);
        assert_eq!(ar.path, SolverPath::Armijo);
    }

    #[test]
    fn anneal_separates_two_groups() {
        let data = Dataset::new(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]], None).unwrap();
        let cfg = AnnealConfig {
            k: 2,
            beta_max: 100.0,
            ..Default::default()
        };
        let res = anneal(&data, &Autonomy::Identity, &cfg).unwrap();
        let mut c: Vec<f64> = res.final_state.clusters.as_slice().to_vec();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((c[0] - 0.05).abs() < 1e-6 && (c[1] - 5.05).abs() < 1e-6);
        assert!(res.hard_distortion < 0.01);
        let d = objective_d(&data, &res.hardened, &res.final_state.clusters, &Autonomy::Identity).unwrap();
        assert!((d - res.hard_distortion).abs() < 1e-15);
    }

    #[test]
    fn schedule_respects_bounds() {
        let cfg = AnnealConfig {
            beta_min: 1.0,
            beta_max: 2.0,
            tau: 1.5,
            ..Default::default()
        };
        assert_eq!(cfg.schedule(), vec![1.0, 1.5]);
        let bad = AnnealConfig {
            tau: 0.99,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn k_one_centers_at_mean() {
        let data = Dataset::new(&[vec![0.0, 2.0], vec![4.0, 0.0]], Some(vec![3.0, 1.0])).unwrap();
        let cfg = AnnealConfig {
            k: 1,
            beta_max: 1.0,
            ..Default::default()
        };
        let res = anneal(&data, &Autonomy::Identity, &cfg).unwrap();
        assert!(max_abs_diff(res.final_state.clusters.center(0), &[1.0, 1.5]) < 1e-9);
    }
}
