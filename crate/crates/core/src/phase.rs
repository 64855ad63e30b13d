//! Second-order analysis of the annealing path: Hessian assembly, critical
//! temperatures, sensitivity bounds and transition detection.

use serde::{Deserialize, Serialize};

use crate::anneal::{gibbs_from_avg, Objective, TraceEntry};
use crate::autonomy::Autonomy;
use crate::error::{Error, Result};
use crate::math::{median, symmetric_eigenvalues};
use crate::model::{squared_distance, ClusterSet, Dataset};

/// Largest stacked dimension `K d` for which a dense Hessian is assembled.
pub const MAX_HESSIAN_DIM: usize = 512;

/// Ingredients of `d^2 F / dY^2` at one state, all in stacked `Kd` layout.
///
/// `hessian = 2 (P_hat - 2 beta Delta)` is the exact second derivative of `F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianBundle {
    pub beta: f64,
    pub dim: usize,
    /// Diagonal of `P_hat`: each cluster mass repeated `d` times.
    pub p_hat: Vec<f64>,
    /// Row-major `Kd x Kd`, symmetric positive semidefinite.
    pub delta: Vec<f64>,
    pub hessian: Vec<f64>,
}

impl HessianBundle {
    /// `P_hat^{-1/2} Delta P_hat^{-1/2}`.
    pub fn normalized_delta(&self) -> Result<Vec<f64>> {
        let n = self.dim;
        if let Some(idx) = self.p_hat.iter().position(|m| !(*m > 0.0)) {
            return Err(Error::DegenerateCluster { cluster: idx });
        }
        let s: Vec<f64> = self.p_hat.iter().map(|m| 1.0 / m.sqrt()).collect();
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = s[r] * self.delta[r * n + c] * s[c];
            }
        }
        Ok(out)
    }

    /// Largest eigenvalue of the normalized `Delta`.
    pub fn lambda_max(&self) -> Result<f64> {
        let m = self.normalized_delta()?;
        Ok(*symmetric_eigenvalues(self.dim, &m).last().unwrap())
    }

    pub fn min_hessian_eig(&self) -> f64 {
        symmetric_eigenvalues(self.dim, &self.hessian)[0]
    }
}

/// Assembles `P_hat`, `Delta` and the Hessian of `F` at `(Y, beta)` under the
/// Gibbs policy. Position-dependent kernels are rejected.
pub fn assemble_hessian(
    data: &Dataset,
    clusters: &ClusterSet,
    autonomy: &Autonomy,
    beta: f64,
) -> Result<HessianBundle> {
    if autonomy.depends_on_y() {
        return Err(Error::PositionDependentAutonomy("Hessian assembly".into()));
    }
    let (k, d) = (clusters.k(), clusters.dim());
    let dim = k * d;
    if dim > MAX_HESSIAN_DIM {
        return Err(Error::TooLarge {
            what: "K*d".into(),
            size: dim,
            limit: MAX_HESSIAN_DIM,
        });
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be finite and nonnegative, got {beta}")));
    }
    let obj = Objective::new(data, autonomy, clusters)?;
    let kernel = obj.kernel(clusters)?;
    let policy = gibbs_from_avg(&obj.davg(clusters)?, beta);

    let mut mass = vec![0.0; k];
    let mut delta = vec![0.0; dim * dim];
    let mut c = vec![0.0; k * k];
    let mut w = vec![0.0; k];
    let mut z = vec![0.0; dim];
    for i in 0..data.len() {
        let rho = data.weight(i);
        let x = data.point(i);
        c.fill(0.0);
        w.fill(0.0);
        for (j, pj) in policy.probs.row(i).iter().enumerate() {
            if *pj == 0.0 {
                continue;
            }
            let p = kernel.row(i, j);
            for a in 0..k {
                if p[a] == 0.0 {
                    continue;
                }
                w[a] += pj * p[a];
                let s = pj * p[a];
                for b in 0..k {
                    c[a * k + b] += s * p[b];
                }
            }
        }
        for a in 0..k {
            mass[a] += rho * w[a];
            for e in 0..d {
                z[a * d + e] = clusters.center(a)[e] - x[e];
            }
        }
        for a in 0..k {
            for b in 0..k {
                let coef = rho * (c[a * k + b] - w[a] * w[b]);
                if coef == 0.0 {
                    continue;
                }
                for e in 0..d {
                    let za = coef * z[a * d + e];
                    let row = (a * d + e) * dim + b * d;
                    for f in 0..d {
                        delta[row + f] += za * z[b * d + f];
                    }
                }
            }
        }
    }
    // Symmetrize away rounding asymmetry.
    for r in 0..dim {
        for cc in (r + 1)..dim {
            let v = 0.5 * (delta[r * dim + cc] + delta[cc * dim + r]);
            delta[r * dim + cc] = v;
            delta[cc * dim + r] = v;
        }
    }
    let p_hat: Vec<f64> = (0..dim).map(|idx| mass[idx / d]).collect();
    let mut hessian = vec![0.0; dim * dim];
    for r in 0..dim {
        for cc in 0..dim {
            let diag = if r == cc { p_hat[r] } else { 0.0 };
            hessian[r * dim + cc] = 2.0 * (diag - 2.0 * beta * delta[r * dim + cc]);
        }
    }
    Ok(HessianBundle {
        beta,
        dim,
        p_hat,
        delta,
        hessian,
    })
}

/// `1 / (2 lambda_max(P_hat^{-1/2} Delta P_hat^{-1/2}))`, or infinity when
/// `Delta` vanishes.
pub fn critical_beta(bundle: &HessianBundle) -> Result<f64> {
    let lm = bundle.lambda_max()?;
    Ok(if lm <= 1e-14 { f64::INFINITY } else { 1.0 / (2.0 * lm) })
}

/// Bound on `||dY/dbeta||`: `N sqrt(K) R / (e beta delta)` with
/// `delta = lambda_min(I - 2 beta P_hat^{-1/2} Delta P_hat^{-1/2})`.
/// Returns `None` when `delta <= 0`.
pub fn sensitivity_bound(bundle: &HessianBundle, n: usize, k: usize, diameter: f64) -> Result<Option<f64>> {
    let delta = stability_margin(bundle)?;
    if delta <= 0.0 || bundle.beta <= 0.0 {
        return Ok(None);
    }
    Ok(Some(
        n as f64 * (k as f64).sqrt() * diameter / (std::f64::consts::E * bundle.beta * delta),
    ))
}

/// `lambda_min(I - 2 beta P_hat^{-1/2} Delta P_hat^{-1/2})`.
pub fn stability_margin(bundle: &HessianBundle) -> Result<f64> {
    Ok(1.0 - 2.0 * bundle.beta * bundle.lambda_max()?)
}

/// Number of groups when centers closer than `merge_tol` are linked.
pub fn distinct_centers(clusters: &ClusterSet, merge_tol: f64) -> usize {
    let k = clusters.k();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut a: usize) -> usize {
        while p[a] != a {
            p[a] = p[p[a]];
            a = p[a];
        }
        a
    }
    let tol2 = merge_tol * merge_tol;
    for a in 0..k {
        for b in (a + 1)..k {
            if squared_distance(clusters.center(a), clusters.center(b)) <= tol2 {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    (0..k).filter(|&a| find(&mut parent, a) == a).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    /// Centers closer than this count as one.
    pub merge_tol: f64,
    pub spike_factor: f64,
    /// Trailing steps used for the baseline median.
    pub window: usize,
    /// Smallest baseline used for spike tests, so that steps shorter than
    /// `spike_factor * floor` never count as spikes.
    pub floor: f64,
    /// An open event closes once a step moves less than this fraction of the
    /// event's largest step.
    pub tail_fraction: f64,
}

impl DetectConfig {
    /// Defaults scaled to a data diameter `r`.
    pub fn for_diameter(r: f64) -> Self {
        DetectConfig {
            merge_tol: 1e-3 * r,
            spike_factor: 10.0,
            window: 5,
            floor: 1e-4 * r,
            tail_fraction: 0.05,
        }
    }
}

/// A run of consecutive annealing steps where the centers reorganize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEvent {
    /// Trace index of the first step in the run.
    pub index: usize,
    pub end_index: usize,
    pub beta: f64,
    pub distinct_before: usize,
    pub distinct_after: usize,
    /// Largest per-step `||Delta Y||` within the run.
    pub delta_y_norm: f64,
}

/// Flags steps whose `||Delta Y||` exceeds `spike_factor` times the trailing
/// median, or where the distinct-center count rises. An event opens on a
/// flagged step and stays open until a step moves less than `tail_fraction`
/// of the event's peak without the count rising.
pub fn detect_transitions(trace: &[TraceEntry], cfg: &DetectConfig) -> Vec<TransitionEvent> {
    let counts: Vec<usize> = trace
        .iter()
        .map(|e| distinct_centers(&e.clusters, cfg.merge_tol))
        .collect();
    let deltas: Vec<f64> = trace.iter().map(|e| e.delta_y_norm).collect();
    let mut events = Vec::new();
    let mut n = 1;
    while n < trace.len() {
        let lo = n.saturating_sub(cfg.window).max(1);
        let base = if lo < n { median(&deltas[lo..n]) } else { 0.0 };
        let threshold = cfg.spike_factor * base.max(cfg.floor);
        let rises = |m: usize| counts[m] > counts[m - 1];
        if deltas[n] > threshold || rises(n) {
            let start = n;
            let mut peak = deltas[n];
            let mut m = n + 1;
            while m < trace.len()
                && (rises(m) || deltas[m] >= cfg.tail_fraction * peak)
            {
                peak = peak.max(deltas[m]);
                m += 1;
            }
            events.push(TransitionEvent {
                index: start,
                end_index: m - 1,
                beta: trace[start].beta,
                distinct_before: counts[start - 1],
                distinct_after: counts[m - 1],
                delta_y_norm: peak,
            });
            n = m;
        } else {
            n += 1;
        }
    }
    events
}

/// Sets `transition_flag` on every step covered by an event.
pub fn mark_transitions(trace: &mut [TraceEntry], events: &[TransitionEvent]) {
    for e in trace.iter_mut() {
        e.transition_flag = false;
    }
    for ev in events {
        for e in &mut trace[ev.index..=ev.end_index] {
            e.transition_flag = true;
        }
    }
}

/// One row of a phase scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub beta: f64,
    pub lambda_max: f64,
    pub beta_cr_estimate: f64,
    pub min_hessian_eig: f64,
    pub distinct_centers: usize,
}

/// Evaluates the second-order quantities at every step of a trace.
pub fn phase_scan(
    data: &Dataset,
    autonomy: &Autonomy,
    trace: &[TraceEntry],
    merge_tol: f64,
) -> Result<Vec<PhaseRow>> {
    trace
        .iter()
        .map(|e| {
            let b = assemble_hessian(data, &e.clusters, autonomy, e.beta)?;
            let lambda_max = b.lambda_max()?;
            Ok(PhaseRow {
                beta: e.beta,
                lambda_max,
                beta_cr_estimate: if lambda_max <= 1e-14 {
                    f64::INFINITY
                } else {
                    1.0 / (2.0 * lambda_max)
                },
                min_hessian_eig: b.min_hessian_eig(),
                distinct_centers: distinct_centers(&e.clusters, merge_tol),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anneal::{free_energy, SolverPath};

    fn two_points() -> (Dataset, ClusterSet) {
        (
            Dataset::new(&[vec![-1.0], vec![1.0]], None).unwrap(),
            ClusterSet::new(&[vec![0.0], vec![0.0]]).unwrap(),
        )
    }

    #[test]
    fn symmetric_pair_critical_beta() {
        let (data, y) = two_points();
        let b = assemble_hessian(&data, &y, &Autonomy::Identity, 0.3).unwrap();
        assert!((critical_beta(&b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_point_at_center() {
        let data = Dataset::new(&[vec![0.0, 0.0]], None).unwrap();
        let y = ClusterSet::new(&[vec![0.0, 0.0]]).unwrap();
        let b = assemble_hessian(&data, &y, &Autonomy::Identity, 3.0).unwrap();
        assert!(b.delta.iter().all(|v| *v == 0.0));
        assert_eq!(b.hessian, vec![2.0, 0.0, 0.0, 2.0]);
        assert_eq!(critical_beta(&b).unwrap(), f64::INFINITY);
    }

    #[test]
    fn uniform_autonomy_never_splits() {
        let data = Dataset::new(&[vec![0.0, 1.0], vec![3.0, -1.0], vec![2.0, 2.0]], None).unwrap();
        let y = ClusterSet::new(&[vec![0.1, 0.2], vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let b = assemble_hessian(&data, &y, &Autonomy::uniform(3), 5.0).unwrap();
        assert_eq!(critical_beta(&b).unwrap(), f64::INFINITY);
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let data = Dataset::new(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5], vec![1.5, 1.5]], None).unwrap();
        let y = ClusterSet::new(&[vec![0.3, 0.1], vec![1.0, -0.2], vec![1.2, 1.0]]).unwrap();
        let a = Autonomy::honor(0.8).unwrap();
        let beta = 1.3;
        let b = assemble_hessian(&data, &y, &a, beta).unwrap();
        let h = 1e-4;
        let n = b.dim;
        for r in 0..n {
            for c in 0..n {
                let f = |dr: f64, dc: f64| {
                    let mut p = y.clone();
                    p.as_mut_slice()[r] += dr;
                    p.as_mut_slice()[c] += dc;
                    free_energy(&data, &p, &a, beta).unwrap()
                };
                let fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
                assert!((fd - b.hessian[r * n + c]).abs() < 1e-6, "({r},{c}) {fd} vs {}", b.hessian[r * n + c]);
            }
        }
    }

    #[test]
    fn position_dependent_rejected() {
        let (data, y) = two_points();
        let a = Autonomy::parametric(0.2, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            assemble_hessian(&data, &y, &a, 1.0),
            Err(Error::PositionDependentAutonomy(_))
        ));
    }

    #[test]
    fn oversize_rejected() {
        let data = Dataset::new(&[vec![0.0; 300]], None).unwrap();
        let y = ClusterSet::replicated(&[0.0; 300], 2);
        assert!(matches!(
            assemble_hessian(&data, &y, &Autonomy::Identity, 1.0),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn sensitivity_bound_needs_margin() {
        let (data, y) = two_points();
        let b = assemble_hessian(&data, &y, &Autonomy::Identity, 0.25).unwrap();
        assert!((stability_margin(&b).unwrap() - 0.5).abs() < 1e-12);
        let bound = sensitivity_bound(&b, 2, 2, 2.0).unwrap().unwrap();
        let expect = 2.0 * 2f64.sqrt() * 2.0 / (std::f64::consts::E * 0.25 * 0.5);
        assert!((bound - expect).abs() < 1e-9);
        let b = assemble_hessian(&data, &y, &Autonomy::Identity, 0.6).unwrap();
        assert!(sensitivity_bound(&b, 2, 2, 2.0).unwrap().is_none());
    }

    #[test]
    fn distinct_center_grouping() {
        let y = ClusterSet::new(&[vec![0.0], vec![1e-5], vec![1.0], vec![1.0 + 2e-5], vec![3.0]]).unwrap();
        assert_eq!(distinct_centers(&y, 1e-3), 3);
        assert_eq!(distinct_centers(&y, 10.0), 1);
    }

    fn entry(beta: f64, delta: f64, centers: &[f64]) -> TraceEntry {
        let rows: Vec<Vec<f64>> = centers.iter().map(|c| vec![*c]).collect();
        TraceEntry {
            beta,
            free_energy: 0.0,
            distortion: 0.0,
            delta_y_norm: delta,
            path: SolverPath::FixedPoint,
            transition_flag: false,
            iterations: 1,
            clusters: ClusterSet::new(&rows).unwrap(),
        }
    }

    #[test]
    fn constant_trace_has_no_events() {
        let trace: Vec<TraceEntry> = (0..20).map(|n| entry(n as f64, 0.0, &[1.0, 1.0])).collect();
        assert!(detect_transitions(&trace, &DetectConfig::for_diameter(1.0)).is_empty());
    }

    #[test]
    fn split_detected_once() {
        let mut trace: Vec<TraceEntry> = (0..10).map(|n| entry(n as f64, 1e-9, &[0.5, 0.5])).collect();
        trace.push(entry(10.0, 0.6, &[0.2, 0.8]));
        trace.push(entry(11.0, 0.1, &[0.1, 0.9]));
        trace.extend((12..20).map(|n| entry(n as f64, 1e-9, &[0.1, 0.9])));
        let ev = detect_transitions(&trace, &DetectConfig::for_diameter(1.0));
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].distinct_before, ev[0].distinct_after), (1, 2));
        assert_eq!((ev[0].index, ev[0].end_index), (10, 11));
        mark_transitions(&mut trace, &ev);
        assert_eq!(trace.iter().filter(|e| e.transition_flag).count(), 2);
    }
}
