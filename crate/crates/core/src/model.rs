//! Data containers and the autonomy-aware distortion objective.
//!
//! Distances are squared Euclidean throughout. Policies are row-stochastic
//! `N x K` matrices stored row-major.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autonomy::{Autonomy, KernelTensor};
use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
                context: "matrix buffer".into(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Entity locations with probability weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from rows. Missing weights default to `1/N`; supplied
    /// weights are normalized to sum to one.
    pub fn new(rows: &[Vec<f64>], weights: Option<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("no data rows"));
        }
        let dim = rows[0].len();
        let mut points = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                    context: format!("row {i}"),
                });
            }
            points.extend_from_slice(r);
        }
        Self::from_flat(dim, points, weights)
    }

    pub fn from_flat(dim: usize, points: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if points.is_empty() {
            return Err(Error::invalid("no data rows"));
        }
        if points.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: points.len() % dim,
                context: "flat point buffer".into(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        let n = points.len() / dim;
        let weights = match weights {
            None => vec![1.0 / n as f64; n],
            Some(w) => {
                if w.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: w.len(),
                        context: "weights".into(),
                    });
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid("weights must be finite and nonnegative"));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::invalid("weights sum to zero"));
                }
                w.iter().map(|v| v / total).collect()
            }
        };
        Ok(Dataset {
            dim,
            points,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weighted_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            let w = self.weights[i];
            for (a, b) in m.iter_mut().zip(self.point(i)) {
                *a += w * b;
            }
        }
        m
    }

    /// Diameter of the point set, `max_{i,i'} ||x_i - x_i'||`.
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.max(squared_distance(self.point(i), self.point(j)));
            }
        }
        best.sqrt()
    }

    /// Reads `x0..x{d-1}[,weight]` with a header row.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let has_weight = headers.iter().last().map(|h| h == "weight").unwrap_or(false);
        let dim = if has_weight {
            headers.len() - 1
        } else {
            headers.len()
        };
        for (c, h) in headers.iter().take(dim).enumerate() {
            if h != format!("x{c}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unexpected header column '{h}', expected 'x{c}'"),
                });
            }
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = r + 2;
            if rec.len() != headers.len() {
                return Err(Error::DimensionMismatch {
                    expected: headers.len(),
                    found: rec.len(),
                    context: format!("line {line}"),
                });
            }
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric value '{field}'"),
                })?;
                if c < dim {
                    points.push(v);
                } else {
                    weights.push(v);
                }
            }
        }
        if points.is_empty() {
            return Err(Error::invalid("no data rows"));
        }
        Self::from_flat(dim, points, has_weight.then_some(weights))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the dataset with an explicit weight column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|c| format!("x{c}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.point(i).iter().map(|v| fmt_f64(*v)).collect();
            rec.push(fmt_f64(self.weights[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cluster representatives `y_1..y_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    dim: usize,
    centers: Vec<f64>,
}

impl ClusterSet {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cluster set must contain at least one center"));
        }
        let dim = rows[0].len();
        let mut centers = Vec::with_capacity(rows.len() * dim);
        for (k, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                    context: format!("center {k}"),
                });
            }
            centers.extend_from_slice(r);
        }
        Self::from_flat(dim, centers)
    }

    pub fn from_flat(dim: usize, centers: Vec<f64>) -> Result<Self> {
        if dim == 0 || centers.is_empty() || centers.len() % dim != 0 {
            return Err(Error::invalid("cluster buffer must hold K >= 1 centers of positive dimension"));
        }
        Ok(ClusterSet { dim, centers })
    }

    /// `k` copies of `center`.
    pub fn replicated(center: &[f64], k: usize) -> Self {
        let mut centers = Vec::with_capacity(center.len() * k);
        for _ in 0..k {
            centers.extend_from_slice(center);
        }
        ClusterSet {
            dim: center.len(),
            centers,
        }
    }

    pub fn k(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn center_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.centers[k * self.dim..(k + 1) * self.dim]
    }

    /// Stacked `Kd` vector.
    pub fn as_slice(&self) -> &[f64] {
        &self.centers
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.centers
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.k()).map(|k| self.center(k).to_vec()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.centers.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Soft,
    Hard,
}

/// Row-stochastic prescription matrix `pi(j|i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPolicy {
    pub probs: Mat,
    pub mode: PolicyMode,
}

impl AssignmentPolicy {
    pub fn uniform(n: usize, k: usize) -> Self {
        AssignmentPolicy {
            probs: Mat::filled(n, k, 1.0 / k as f64),
            mode: PolicyMode::Soft,
        }
    }

    pub fn from_mat(probs: Mat, mode: PolicyMode) -> Self {
        AssignmentPolicy { probs, mode }
    }

    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    pub fn k(&self) -> usize {
        self.probs.cols()
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs.get(i, j)
    }

    /// Index of the prescribed cluster for each entity (argmax, lowest index on ties).
    pub fn assignments(&self) -> Vec<usize> {
        (0..self.n()).map(|i| argmax(self.probs.row(i))).collect()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn check_shapes(data: &Dataset, clusters: &ClusterSet) -> Result<()> {
    if data.dim() != clusters.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: clusters.dim(),
            context: "cluster dimension".into(),
        });
    }
    Ok(())
}

/// `N x K` matrix of squared distances `d(x_i, y_k)`.
pub fn distance_matrix(data: &Dataset, clusters: &ClusterSet) -> Result<Mat> {
    check_shapes(data, clusters)?;
    let (n, k) = (data.len(), clusters.k());
    let mut out = Mat::zeros(n, k);
    for i in 0..n {
        let x = data.point(i);
        for (c, slot) in out.row_mut(i).iter_mut().enumerate() {
            *slot = squared_distance(x, clusters.center(c));
        }
    }
    Ok(out)
}

/// `d_avg(i, j) = sum_k p(k|j,i) d(x_i, y_k)` for a materialized kernel.
pub fn avg_distance_with_kernel(dist: &Mat, kernel: &KernelTensor) -> Mat {
    let (n, k) = (dist.rows(), dist.cols());
    let mut out = Mat::zeros(n, k);
    for i in 0..n {
        let d = dist.row(i);
        let row = out.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let p = kernel.row(i, j);
            *slot = p.iter().zip(d).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Expected distance when entity `i` is prescribed cluster `j`.
pub fn avg_distance_matrix(
    data: &Dataset,
    clusters: &ClusterSet,
    autonomy: &Autonomy,
) -> Result<Mat> {
    let dist = distance_matrix(data, clusters)?;
    let kernel = autonomy.full_tensor(data, clusters)?;
    Ok(avg_distance_with_kernel(&dist, &kernel))
}

/// `D = sum_i rho_i sum_j pi(j|i) d_avg(i, j)`.
pub fn objective_d(
    data: &Dataset,
    policy: &AssignmentPolicy,
    clusters: &ClusterSet,
    autonomy: &Autonomy,
) -> Result<f64> {
    if policy.n() != data.len() || policy.k() != clusters.k() {
        return Err(Error::DimensionMismatch {
            expected: data.len() * clusters.k(),
            found: policy.n() * policy.k(),
            context: "policy shape".into(),
        });
    }
    let davg = avg_distance_matrix(data, clusters, autonomy)?;
    Ok(objective_from_avg(data.weights(), policy, &davg))
}

pub(crate) fn objective_from_avg(weights: &[f64], policy: &AssignmentPolicy, davg: &Mat) -> f64 {
    let mut total = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let s: f64 = policy
            .probs
            .row(i)
            .iter()
            .zip(davg.row(i))
            .map(|(p, d)| p * d)
            .sum();
        total += w * s;
    }
    total
}

/// One-hot policy at each row's argmax, lowest index on ties.
pub fn harden(policy: &AssignmentPolicy) -> AssignmentPolicy {
    let (n, k) = (policy.n(), policy.k());
    let mut probs = Mat::zeros(n, k);
    for i in 0..n {
        probs.set(i, argmax(policy.probs.row(i)), 1.0);
    }
    AssignmentPolicy {
        probs,
        mode: PolicyMode::Hard,
    }
}

/// Formats with 17 significant digits so values round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
