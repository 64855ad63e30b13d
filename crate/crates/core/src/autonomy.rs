//! Override kernels `p(k | j, i)`: the probability that entity `i`, prescribed
//! cluster `j`, actually joins cluster `k`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fmt_f64, squared_distance, ClusterSet, Dataset};

/// Largest kernel tensor (`N * K * K` entries) that will be materialized.
pub const MAX_TENSOR_ENTRIES: usize = 50_000_000;

/// Distance-driven overrides: stay with probability `1 - kappa`, otherwise move
/// to `k != j` with probability proportional to
/// `exp(-(zeta d(y_j, y_k) + gamma d(x_i, y_k)) / temperature)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricAutonomy {
    pub kappa: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub temperature: f64,
}

impl ParametricAutonomy {
    pub fn new(kappa: f64, gamma: f64, zeta: f64, temperature: f64) -> Result<Self> {
        let p = ParametricAutonomy {
            kappa,
            gamma,
            zeta,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::invalid(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if !(self.gamma >= 0.0 && self.zeta >= 0.0) || !self.gamma.is_finite() || !self.zeta.is_finite() {
            return Err(Error::invalid("gamma and zeta must be finite and nonnegative"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        Ok(())
    }

    fn fill_row(&self, x: &[f64], clusters: &ClusterSet, j: usize, out: &mut [f64]) {
        let k = clusters.k();
        if k == 1 {
            out[0] = 1.0;
            return;
        }
        let yj = clusters.center(j);
        let mut max_logit = f64::NEG_INFINITY;
        for t in 0..k {
            if t == j {
                continue;
            }
            let yt = clusters.center(t);
            let mut c = 0.0;
            if self.zeta != 0.0 {
                c += self.zeta * squared_distance(yj, yt);
            }
            if self.gamma != 0.0 {
                c += self.gamma * squared_distance(x, yt);
            }
            out[t] = -c / self.temperature;
            max_logit = max_logit.max(out[t]);
        }
        let mut z = 0.0;
        for (t, v) in out.iter_mut().enumerate() {
            if t != j {
                *v = (*v - max_logit).exp();
                z += *v;
            }
        }
        for (t, v) in out.iter_mut().enumerate() {
            *v = if t == j {
                1.0 - self.kappa
            } else {
                self.kappa * *v / z
            };
        }
    }
}

/// Explicit `p(k|j,i)` table, position independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularAutonomy {
    n: usize,
    k: usize,
    /// Indexed `[i][j][k]`.
    probs: Vec<f64>,
}

impl TabularAutonomy {
    /// `probs` is indexed `[i][j][k]`; every `(i, j)` row must sum to one.
    pub fn new(n: usize, k: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * k * k {
            return Err(Error::DimensionMismatch {
                expected: n * k * k,
                found: probs.len(),
                context: "tabular autonomy entries".into(),
            });
        }
        let t = TabularAutonomy { n, k, probs };
        t.validate()?;
        Ok(t)
    }

    /// Same `K x K` kernel (indexed `[j][k]`) for every entity.
    pub fn shared(n: usize, kernel: &[Vec<f64>]) -> Result<Self> {
        let k = kernel.len();
        let mut probs = Vec::with_capacity(n * k * k);
        for _ in 0..n {
            for row in kernel {
                if row.len() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        found: row.len(),
                        context: "shared kernel row".into(),
                    });
                }
                probs.extend_from_slice(row);
            }
        }
        Self::new(n, k, probs)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            for j in 0..self.k {
                let row = self.row(i, j);
                if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                    return Err(Error::invalid(format!("negative or non-finite probability at i={i}, j={j}")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("row i={i}, j={j} sums to {s}")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.k + j) * self.k;
        &self.probs[o..o + self.k]
    }

    /// Reads rows `i,j,k,p` with a header. Unlisted entries are zero.
    pub fn read_csv<R: Read>(reader: R, n: usize, k: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut probs = vec![0.0; n * k * k];
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = r + 2;
            if rec.len() != 4 {
                return Err(Error::DimensionMismatch {
                    expected: 4,
                    found: rec.len(),
                    context: format!("line {line}"),
                });
            }
            let idx = |c: usize, bound: usize| -> Result<usize> {
                let v: usize = rec[c].parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad index '{}'", &rec[c]),
                })?;
                if v >= bound {
                    return Err(Error::Parse {
                        line,
                        message: format!("index {v} out of range (< {bound})"),
                    });
                }
                Ok(v)
            };
            let (i, j, kk) = (idx(0, n)?, idx(1, k)?, idx(2, k)?);
            let p: f64 = rec[3].parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric probability '{}'", &rec[3]),
            })?;
            probs[(i * k + j) * k + kk] = p;
        }
        Self::new(n, k, probs)
    }

    pub fn load_csv(path: impl AsRef<Path>, n: usize, k: usize) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, n, k)
    }

    /// Writes every nonzero entry.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "j", "k", "p"])?;
        for i in 0..self.n {
            for j in 0..self.k {
                for (kk, p) in self.row(i, j).iter().enumerate() {
                    if *p != 0.0 {
                        w.write_record([i.to_string(), j.to_string(), kk.to_string(), fmt_f64(*p)])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// How entities respond to prescriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Autonomy {
    /// Entities always follow the prescription.
    Identity,
    Tabular(TabularAutonomy),
    Parametric(ParametricAutonomy),
}

impl Autonomy {
    /// `p(k|j,i) = 1/K` for every entity and prescription.
    pub fn uniform(k: usize) -> Self {
        let kappa = if k > 1 { (k - 1) as f64 / k as f64 } else { 0.0 };
        Autonomy::Parametric(ParametricAutonomy {
            kappa,
            gamma: 0.0,
            zeta: 0.0,
            temperature: 1.0,
        })
    }

    /// Follow the prescription with probability `honor`, otherwise pick one of
    /// the other clusters uniformly.
    pub fn honor(honor: f64) -> Result<Self> {
        Ok(Autonomy::Parametric(ParametricAutonomy::new(1.0 - honor, 0.0, 0.0, 1.0)?))
    }

    pub fn parametric(kappa: f64, gamma: f64, zeta: f64, temperature: f64) -> Result<Self> {
        Ok(Autonomy::Parametric(ParametricAutonomy::new(kappa, gamma, zeta, temperature)?))
    }

    pub fn depends_on_y(&self) -> bool {
        match self {
            Autonomy::Parametric(p) => p.kappa > 0.0 && (p.gamma > 0.0 || p.zeta > 0.0),
            _ => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Autonomy::Identity => "identity",
            Autonomy::Tabular(_) => "tabular",
            Autonomy::Parametric(_) => "parametric",
        }
    }

    /// Checks that the model is usable with `n` entities and `k` clusters.
    pub fn check(&self, n: usize, k: usize) -> Result<()> {
        match self {
            Autonomy::Identity => Ok(()),
            Autonomy::Tabular(t) => {
                if t.n != n || t.k != k {
                    return Err(Error::DimensionMismatch {
                        expected: n * k,
                        found: t.n * t.k,
                        context: format!("tabular autonomy is {}x{}, problem is {n}x{k}", t.n, t.k),
                    });
                }
                Ok(())
            }
            Autonomy::Parametric(p) => {
                p.validate()?;
                if k == 1 && p.kappa > 0.0 {
                    return Err(Error::invalid("override probability kappa > 0 requires K >= 2"));
                }
                Ok(())
            }
        }
    }

    /// Fills `out` with `p(. | j, i)` at the current cluster positions.
    pub fn kernel_row(
        &self,
        i: usize,
        j: usize,
        data: &Dataset,
        clusters: &ClusterSet,
        out: &mut [f64],
    ) -> Result<()> {
        let k = clusters.k();
        if j >= k || out.len() != k || i >= data.len() {
            return Err(Error::invalid(format!("index out of range: i={i}, j={j}, K={k}")));
        }
        match self {
            Autonomy::Identity => {
                out.fill(0.0);
                out[j] = 1.0;
            }
            Autonomy::Tabular(t) => {
                self.check(data.len(), k)?;
                out.copy_from_slice(t.row(i, j));
            }
            Autonomy::Parametric(p) => {
                self.check(data.len(), k)?;
                p.fill_row(data.point(i), clusters, j, out);
            }
        }
        Ok(())
    }

    /// Single entry `p(k | j, i)`.
    pub fn prob(
        &self,
        i: usize,
        j: usize,
        k: usize,
        data: &Dataset,
        clusters: &ClusterSet,
    ) -> Result<f64> {
        let mut row = vec![0.0; clusters.k()];
        self.kernel_row(i, j, data, clusters, &mut row)?;
        row.get(k)
            .copied()
            .ok_or_else(|| Error::invalid(format!("cluster index {k} out of range")))
    }

    /// Materializes the whole kernel at the current positions.
    pub fn full_tensor(&self, data: &Dataset, clusters: &ClusterSet) -> Result<KernelTensor> {
        let (n, k) = (data.len(), clusters.k());
        if data.dim() != clusters.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found: clusters.dim(),
                context: "cluster dimension".into(),
            });
        }
        let size = n.saturating_mul(k).saturating_mul(k);
        if size > MAX_TENSOR_ENTRIES {
            return Err(Error::TooLarge {
                what: "N*K*K kernel entries".into(),
                size,
                limit: MAX_TENSOR_ENTRIES,
            });
        }
        self.check(n, k)?;
        let mut probs = vec![0.0; size];
        match self {
            Autonomy::Tabular(t) => probs.copy_from_slice(&t.probs),
            Autonomy::Identity => {
                for i in 0..n {
                    for j in 0..k {
                        probs[(i * k + j) * k + j] = 1.0;
                    }
                }
            }
            Autonomy::Parametric(p) => {
                let shared = !self.depends_on_y() || p.gamma == 0.0;
                for i in 0..n {
                    for j in 0..k {
                        let o = (i * k + j) * k;
                        if shared && i > 0 {
                            let src = j * k;
                            probs.copy_within(src..src + k, o);
                        } else {
                            p.fill_row(data.point(i), clusters, j, &mut probs[o..o + k]);
                        }
                    }
                }
            }
        }
        Ok(KernelTensor { n, k, probs })
    }

    /// Draws the realized cluster for entity `i` under prescription `j`.
    pub fn sample_override<R: Rng + ?Sized>(
        &self,
        i: usize,
        j: usize,
        data: &Dataset,
        clusters: &ClusterSet,
        rng: &mut R,
    ) -> Result<usize> {
        let mut row = vec![0.0; clusters.k()];
        self.kernel_row(i, j, data, clusters, &mut row)?;
        Ok(sample_categorical(&row, rng))
    }
}

/// Inverse-CDF draw from an unnormalized-safe probability row.
pub fn sample_categorical<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let total: f64 = row.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in row.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Materialized `p(k|j,i)`, stored so that `row(i, j)` is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    n: usize,
    k: usize,
    probs: Vec<f64>,
}

impl KernelTensor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Entry `[k, j, i]`, i.e. `p(k | j, i)`.
    pub fn get(&self, k: usize, j: usize, i: usize) -> f64 {
        self.probs[(i * self.k + j) * self.k + k]
    }

    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.k + j) * self.k;
        &self.probs[o..o + self.k]
    }
}
