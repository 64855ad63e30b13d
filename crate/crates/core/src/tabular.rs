//! Model-free annealing with a tabular estimate of the average distances.
//!
//! The learner never sees `p(k|j,i)`. It prescribes a cluster, observes
//! which cluster the entity actually joined, and records the realized cost.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anneal::{gibbs_from_avg, AnnealConfig, SolverPath, SolverState, TraceEntry};
use crate::autonomy::{sample_categorical, Autonomy};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, norm2, softmax_in_place};
use crate::model::{harden, squared_distance, AssignmentPolicy, ClusterSet, Dataset, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    RobbinsMonro,
    Constant,
}

/// Step sizes for the asynchronous `q` iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: StepKind,
    pub c0: f64,
    pub exponent: f64,
}

impl StepSchedule {
    /// `eps = c0 / (1 + count)^exponent`, with `exponent` in `(0.5, 1]`.
    pub fn robbins_monro(c0: f64, exponent: f64) -> Result<Self> {
        let s = StepSchedule {
            kind: StepKind::RobbinsMonro,
            c0,
            exponent,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(eps: f64) -> Result<Self> {
        let s = StepSchedule {
            kind: StepKind::Constant,
            c0: eps,
            exponent: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0 && self.c0 <= 1.0) {
            return Err(Error::Config(format!("step size c0 must lie in (0, 1], got {}", self.c0)));
        }
        if self.kind == StepKind::RobbinsMonro && !(self.exponent > 0.5 && self.exponent <= 1.0) {
            return Err(Error::Config(format!(
                "Robbins-Monro exponent must lie in (0.5, 1], got {}",
                self.exponent
            )));
        }
        Ok(())
    }

    /// Step size for an entry that has been visited `count` times.
    pub fn rate(&self, count: u64) -> f64 {
        match self.kind {
            StepKind::Constant => self.c0,
            StepKind::RobbinsMonro => self.c0 / (1.0 + count as f64).powf(self.exponent),
        }
    }
}

/// Estimates `q(i, j)` of `d_avg(x_i, y_j)` with visit counters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub q: Mat,
    visits: Vec<u64>,
}

impl QTable {
    pub fn new(n: usize, k: usize) -> Self {
        QTable {
            q: Mat::zeros(n, k),
            visits: vec![0; n * k],
        }
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn k(&self) -> usize {
        self.q.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q.get(i, j)
    }

    /// Visits of `(i, j)` so far; they index the step size.
    pub fn visits(&self, i: usize, j: usize) -> u64 {
        self.visits[i * self.k() + j]
    }
}

/// `q(i,j) <- (1 - eps) q(i,j) + eps cost`; returns the new value.
pub fn q_update(table: &mut QTable, i: usize, j: usize, observed_cost: f64, schedule: &StepSchedule) -> f64 {
    let idx = i * table.k() + j;
    let eps = schedule.rate(table.visits[idx]);
    let old = table.q.get(i, j);
    let new = (1.0 - eps) * old + eps * observed_cost;
    table.q.set(i, j, new);
    table.visits[idx] += 1;
    new
}

/// Row-wise `softmax(-beta q)`.
pub fn policy_from_q(table: &QTable, beta: f64) -> AssignmentPolicy {
    gibbs_from_avg(&table.q, beta)
}

/// One realized association: entity `i`, prescription `j`, joined cluster `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// `y_l <- y_l - alpha (1/|S|) sum_{(i,j,k) in S, k = l} (y_l - x_i)`.
pub fn sgd_center_step(
    clusters: &ClusterSet,
    minibatch: &[Sample],
    data: &Dataset,
    alpha: f64,
) -> Result<ClusterSet> {
    if minibatch.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    let d = clusters.dim();
    let mut grad = vec![0.0; clusters.k() * d];
    for s in minibatch {
        let y = clusters.center(s.k);
        let x = data.point(s.i);
        for c in 0..d {
            grad[s.k * d + c] += y[c] - x[c];
        }
    }
    let scale = alpha / minibatch.len() as f64;
    let mut next = clusters.clone();
    for (v, g) in next.as_mut_slice().iter_mut().zip(&grad) {
        *v -= scale * g;
    }
    Ok(next)
}

/// Source of realized associations. The learner only ever calls this.
pub trait OverrideEnv {
    /// Cluster that entity `i` joins when prescribed `j` under centers `clusters`.
    fn realize(&self, i: usize, j: usize, clusters: &ClusterSet, rng: &mut dyn RngCore) -> Result<usize>;

    /// Whether the override law moves with the centers.
    fn position_dependent(&self) -> bool {
        false
    }
}

/// Environment that draws overrides from a known autonomy model.
pub struct SimulatedEnv<'a> {
    pub data: &'a Dataset,
    pub autonomy: &'a Autonomy,
}

impl OverrideEnv for SimulatedEnv<'_> {
    fn realize(&self, i: usize, j: usize, clusters: &ClusterSet, rng: &mut dyn RngCore) -> Result<usize> {
        self.autonomy.sample_override(i, j, self.data, clusters, rng)
    }

    fn position_dependent(&self) -> bool {
        self.autonomy.depends_on_y()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub q_c0: f64,
    pub q_exponent: f64,
    /// SGD step at the first stage.
    pub sgd_alpha: f64,
    /// Per-stage geometric decay of the SGD step.
    pub alpha_decay: f64,
    /// `q` updates between consecutive center steps.
    pub updates_per_step: usize,
    /// Most recent samples fed to each center step.
    pub minibatch: usize,
    pub steps_per_stage: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            q_c0: 1.0,
            q_exponent: 0.75,
            sgd_alpha: 0.5,
            alpha_decay: 0.98,
            updates_per_step: 32,
            minibatch: 32,
            steps_per_stage: 200,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if !(self.sgd_alpha > 0.0 && self.sgd_alpha <= 1.0) {
            return Err(Error::Config("sgd_alpha must lie in (0, 1]".into()));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return Err(Error::Config("alpha_decay must lie in (0, 1]".into()));
        }
        if self.updates_per_step == 0 || self.steps_per_stage == 0 {
            return Err(Error::Config("updates_per_step and steps_per_stage must be positive".into()));
        }
        if self.minibatch == 0 || self.minibatch > self.updates_per_step {
            return Err(Error::Config("minibatch must lie in 1..=updates_per_step".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<StepSchedule> {
        StepSchedule::robbins_monro(self.q_c0, self.q_exponent)
    }
}

fn sample_prescription(q_row: &[f64], beta: f64, buf: &mut [f64], rng: &mut dyn RngCore) -> usize {
    for (b, q) in buf.iter_mut().zip(q_row) {
        *b = -beta * q;
    }
    softmax_in_place(buf);
    sample_categorical(buf, rng)
}

/// Runs `updates` draws against frozen centers and a frozen prescription policy.
pub fn estimate_q_frozen(
    data: &Dataset,
    env: &dyn OverrideEnv,
    clusters: &ClusterSet,
    policy: &AssignmentPolicy,
    updates: usize,
    schedule: &StepSchedule,
    seed: u64,
) -> Result<QTable> {
    if policy.n() != data.len() || policy.k() != clusters.k() {
        return Err(Error::DimensionMismatch {
            expected: data.len() * clusters.k(),
            found: policy.n() * policy.k(),
            context: "policy shape".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entity = WeightedIndex::new(data.weights()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut table = QTable::new(data.len(), clusters.k());
    for _ in 0..updates {
        let i = entity.sample(&mut rng);
        let j = sample_categorical(policy.probs.row(i), &mut rng);
        let k = env.realize(i, j, clusters, &mut rng)?;
        q_update(&mut table, i, j, squared_distance(data.point(i), clusters.center(k)), schedule);
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct TabularResult {
    pub final_state: SolverState,
    pub hardened: AssignmentPolicy,
    pub q: QTable,
    pub trace: Vec<TraceEntry>,
    /// Per-stage policy-weighted mean `|q - d_avg|`, present when a reference
    /// autonomy was supplied.
    pub q_errors: Option<Vec<f64>>,
}

fn q_error(data: &Dataset, table: &QTable, clusters: &ClusterSet, reference: &Autonomy, beta: f64) -> Result<f64> {
    let davg = crate::model::avg_distance_matrix(data, clusters, reference)?;
    let pol = policy_from_q(table, beta);
    let mut total = 0.0;
    for i in 0..data.len() {
        let mut row = 0.0;
        for j in 0..table.k() {
            row += pol.prob(i, j) * (table.get(i, j) - davg.get(i, j)).abs();
        }
        total += data.weight(i) * row;
    }
    Ok(total)
}

/// Annealed learning loop. Each stage alternates `updates_per_step` sampled
/// `q` updates with one SGD step on the centers. `F` and `D` in the trace are the learner's own estimates from `q`.
pub fn learn_tabular(
    data: &Dataset,
    env: &dyn OverrideEnv,
    anneal: &AnnealConfig,
    rl: &RlConfig,
    reference: Option<&Autonomy>,
) -> Result<TabularResult> {
    anneal.validate()?;
    rl.validate()?;
    if env.position_dependent() {
        return Err(Error::PositionDependentAutonomy("tabular learning".into()));
    }
    let (n, k) = (data.len(), anneal.k);
    let schedule = rl.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(anneal.seed);
    let entity = WeightedIndex::new(data.weights()).map_err(|e| Error::invalid(e.to_string()))?;

    let mut y = ClusterSet::replicated(&data.weighted_mean(), k);
    let mut table = QTable::new(n, k);
    let mut buf = vec![0.0; k];
    let mut batch: Vec<Sample> = Vec::with_capacity(rl.updates_per_step);
    let mut trace = Vec::new();
    let mut q_errors = reference.map(|_| Vec::new());
    let mut prev: Option<ClusterSet> = None;
    let mut alpha = rl.sgd_alpha;
    let mut landed = vec![0u64; k];

    for beta in anneal.schedule() {
        perturb(&mut y, anneal.noise_scale, &mut rng);
        landed.fill(0);
        for _ in 0..rl.steps_per_stage {
            batch.clear();
            for _ in 0..rl.updates_per_step {
                let i = entity.sample(&mut rng);
                let j = sample_prescription(table.q.row(i), beta, &mut buf, &mut rng);
                let kk = env.realize(i, j, &y, &mut rng)?;
                q_update(&mut table, i, j, squared_distance(data.point(i), y.center(kk)), &schedule);
                landed[kk] += 1;
                batch.push(Sample { i, j, k: kk });
            }
            y = sgd_center_step(&y, &batch[batch.len() - rl.minibatch..], data, alpha)?;
        }
        alpha *= rl.alpha_decay;

        let (free_energy, distortion) = q_objectives(data, &table, beta);
        let delta_y_norm = match &prev {
            Some(p) => {
                let diff: Vec<f64> = y.as_slice().iter().zip(p.as_slice()).map(|(a, b)| a - b).collect();
                norm2(&diff)
            }
            None => 0.0,
        };
        if let (Some(errs), Some(r)) = (q_errors.as_mut(), reference) {
            errs.push(q_error(data, &table, &y, r, beta)?);
        }
        trace.push(TraceEntry {
            beta,
            free_energy,
            distortion,
            delta_y_norm,
            path: SolverPath::Sgd,
            transition_flag: false,
            iterations: rl.steps_per_stage,
            clusters: y.clone(),
        });
        prev = Some(y.clone());
    }

    let last_beta = trace.last().map(|e| e.beta).unwrap_or(anneal.beta_min);
    let policy = policy_from_q(&table, last_beta);
    let hardened = harden(&policy);
    let total: u64 = landed.iter().sum();
    let masses = landed.iter().map(|c| *c as f64 / total.max(1) as f64).collect();
    let (free_energy, distortion) = q_objectives(data, &table, last_beta);
    Ok(TabularResult {
        final_state: SolverState {
            beta: last_beta,
            clusters: y,
            policy,
            free_energy,
            distortion,
            path: SolverPath::Sgd,
            iterations: rl.steps_per_stage,
            masses,
        },
        hardened,
        q: table,
        trace,
        q_errors,
    })
}

fn perturb(y: &mut ClusterSet, scale: f64, rng: &mut ChaCha8Rng) {
    if scale == 0.0 {
        return;
    }
    for v in y.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += scale * z;
    }
}

/// Free energy and Gibbs distortion with `q` standing in for `d_avg`.
fn q_objectives(data: &Dataset, table: &QTable, beta: f64) -> (f64, f64) {
    let mut f = 0.0;
    let mut d = 0.0;
    let mut buf = vec![0.0; table.k()];
    for i in 0..data.len() {
        let row = table.q.row(i);
        for (b, q) in buf.iter_mut().zip(row) {
            *b = -beta * q;
        }
        f += data.weight(i) * log_sum_exp(&buf);
        softmax_in_place(&mut buf);
        d += data.weight(i) * buf.iter().zip(row).map(|(p, q)| p * q).sum::<f64>();
    }
    (-f / beta, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anneal::gibbs_policy;
    use crate::autonomy::TabularAutonomy;

    #[test]
    fn first_visit_with_unit_rate_copies_cost() {
        let s = StepSchedule::robbins_monro(1.0, 0.8).unwrap();
        let mut t = QTable::new(2, 2);
        t.q.set(0, 1, 17.0);
        assert_eq!(q_update(&mut t, 0, 1, 3.25, &s), 3.25);
        assert_eq!(t.get(0, 0), 0.0);
        assert_eq!(t.visits(0, 1), 1);
    }

    #[test]
    fn constant_cost_is_a_fixed_point() {
        let s = StepSchedule::constant(0.3).unwrap();
        let mut t = QTable::new(1, 1);
        t.q.set(0, 0, 50.0);
        for _ in 0..100 {
            q_update(&mut t, 0, 0, 2.0, &s);
        }
        assert!((t.get(0, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn two_outcome_average() {
        // Costs 1 and 3 with equal probability; the expectation is 2.
        let data = Dataset::new(&[vec![0.0]], None).unwrap();
        let y = ClusterSet::new(&[vec![1.0], vec![3f64.sqrt()]]).unwrap();
        let a = Autonomy::Tabular(TabularAutonomy::shared(1, &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
        let env = SimulatedEnv { data: &data, autonomy: &a };
        let pol = AssignmentPolicy::from_mat(Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap(), crate::model::PolicyMode::Hard);
        let s = StepSchedule::robbins_monro(1.0, 1.0).unwrap();
        let t = estimate_q_frozen(&data, &env, &y, &pol, 10_000, &s, 7).unwrap();
        assert!((t.get(0, 0) - 2.0).abs() < 0.05, "{}", t.get(0, 0));
        assert_eq!(t.visits(0, 1), 0);
    }

    #[test]
    fn rates_follow_the_formula() {
        let s = StepSchedule::robbins_monro(0.5, 0.75).unwrap();
        assert_eq!(s.rate(0), 0.5);
        assert!((s.rate(15) - 0.5 / 8.0).abs() < 1e-15);
        assert!(StepSchedule::robbins_monro(1.0, 0.5).is_err());
        assert!(StepSchedule::robbins_monro(1.5, 0.7).is_err());
    }

    #[test]
    fn policy_matches_gibbs_on_exact_distances() {
        let data = Dataset::new(&[vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.3, 2.0]], None).unwrap();
        let y = ClusterSet::new(&[vec![0.2, 0.1], vec![0.9, 1.1]]).unwrap();
        let a = Autonomy::honor(0.7).unwrap();
        let mut t = QTable::new(3, 2);
        t.q = crate::model::avg_distance_matrix(&data, &y, &a).unwrap();
        let p = policy_from_q(&t, 2.3);
        let g = gibbs_policy(&data, &y, &a, 2.3).unwrap();
        for (u, v) in p.probs.as_slice().iter().zip(g.probs.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
        let uniform = policy_from_q(&t, 0.0);
        assert!(uniform.probs.as_slice().iter().all(|p| *p == 0.5));
    }

    #[test]
    fn sgd_step_moves_only_hit_clusters() {
        let data = Dataset::new(&[vec![1.0, 1.0]], None).unwrap();
        let y = ClusterSet::new(&[vec![0.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let batch = vec![Sample { i: 0, j: 1, k: 0 }; 4];
        let next = sgd_center_step(&y, &batch, &data, 0.25).unwrap();
        assert_eq!(next.center(1), &[5.0, 5.0]);
        assert!((next.center(0)[0] - 0.25).abs() < 1e-15);
        assert!(sgd_center_step(&y, &[], &data, 0.25).is_err());
    }

    #[test]
    fn learner_rejects_position_dependent_autonomy() {
        let data = Dataset::new(&[vec![0.0], vec![1.0]], None).unwrap();
        let a = Autonomy::parametric(0.2, 1.0, 0.0, 1.0).unwrap();
        let env = SimulatedEnv { data: &data, autonomy: &a };
        let cfg = AnnealConfig { k: 2, ..Default::default() };
        let err = learn_tabular(&data, &env, &cfg, &RlConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::PositionDependentAutonomy(_)));
    }

    #[test]
    fn rejects_bad_minibatch() {
        let cfg = RlConfig { minibatch: 64, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
