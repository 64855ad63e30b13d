//! Synthetic and file-backed datasets used by the examples and benchmarks.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Isotropic Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub centers: Vec<Vec<f64>>,
    pub per_blob: usize,
    pub spread: f64,
}

/// Points and their generating blob index.
#[derive(Debug, Clone)]
pub struct LabeledData {
    pub data: Dataset,
    pub labels: Vec<usize>,
}

pub fn make_blobs(spec: &BlobSpec, seed: u64) -> Result<LabeledData> {
    if spec.centers.is_empty() || spec.per_blob == 0 {
        return Err(Error::invalid("need at least one blob with at least one point"));
    }
    if !(spec.spread >= 0.0) {
        return Err(Error::invalid("spread must be nonnegative"));
    }
    let dim = spec.centers[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(spec.centers.len() * spec.per_blob);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (b, c) in spec.centers.iter().enumerate() {
        if c.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: c.len(),
                context: format!("blob center {b}"),
            });
        }
        for _ in 0..spec.per_blob {
            rows.push(
                c.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + spec.spread * z
                    })
                    .collect::<Vec<f64>>(),
            );
            labels.push(b);
        }
    }
    Ok(LabeledData {
        data: Dataset::new(&rows, None)?,
        labels,
    })
}

/// Four tight blobs on the corners of a square inside the unit box.
pub fn four_blobs(per_blob: usize) -> BlobSpec {
    BlobSpec {
        centers: vec![
            vec![0.25, 0.25],
            vec![0.75, 0.25],
            vec![0.25, 0.75],
            vec![0.75, 0.75],
        ],
        per_blob,
        spread: 0.03,
    }
}

/// Sixteen blobs on a 4 x 4 grid with three nested spacings: four groups on
/// the corners of a square, each holding two pairs split along `x`, each pair
/// split along `y`.
pub fn nested_grid(per_blob: usize) -> BlobSpec {
    nested_grid_with(per_blob, 1.0, 0.5, 0.22, 0.02)
}

pub fn nested_grid_with(per_blob: usize, outer: f64, middle: f64, inner: f64, spread: f64) -> BlobSpec {
    let mut centers = Vec::with_capacity(16);
    for gx in [-outer, outer] {
        for gy in [-outer, outer] {
            for px in [-middle, middle] {
                for py in [-inner, inner] {
                    centers.push(vec![gx + px, gy + py]);
                }
            }
        }
    }
    BlobSpec {
        centers,
        per_blob,
        spread,
    }
}

/// Named dataset presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 4 blobs x 50 points.
    Blobs4,
    /// 16 nested blobs x 200 points.
    Grid16,
}

impl Preset {
    pub fn spec(&self) -> BlobSpec {
        match self {
            Preset::Blobs4 => four_blobs(50),
            Preset::Grid16 => nested_grid(200),
        }
    }

    pub fn default_k(&self) -> usize {
        match self {
            Preset::Blobs4 => 4,
            Preset::Grid16 => 16,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "blobs4" => Ok(Preset::Blobs4),
            "grid16" => Ok(Preset::Grid16),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected blobs4 or grid16)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Blobs4 => "blobs4",
            Preset::Grid16 => "grid16",
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        Ok(make_blobs(&self.spec(), seed)?.data)
    }
}

/// Per-column affine map onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub lo: Vec<f64>,
    /// `hi - lo` per column; zero for constant columns.
    pub span: Vec<f64>,
}

impl MinMax {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for r in rows {
            for c in 0..dim {
                lo[c] = lo[c].min(r[c]);
                hi[c] = hi[c].max(r[c]);
            }
        }
        let span = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
        MinMax { lo, span }
    }

    /// Constant columns map to zero.
    pub fn normalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lo.iter().zip(&self.span))
            .map(|(v, (l, s))| if *s > 0.0 { (v - l) / s } else { 0.0 })
            .collect()
    }

    pub fn denormalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lo.iter().zip(&self.span))
            .map(|(v, (l, s))| l + v * s)
            .collect()
    }
}

/// Normalized coordinates together with the map back to the file's units.
#[derive(Debug, Clone)]
pub struct GeoData {
    pub data: Dataset,
    pub transform: MinMax,
}

/// Reads a CSV of coordinates (any header names, optional `weight` column)
/// and rescales every coordinate to `[0, 1]`.
pub fn read_geocsv<R: Read>(reader: R) -> Result<GeoData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let weight_col = headers.iter().position(|h| h.eq_ignore_ascii_case("weight"));
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut weights = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let mut row = Vec::with_capacity(rec.len());
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("expected a finite number, found '{field}'"),
                })?;
            if Some(c) == weight_col {
                weights.push(v);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid("no data rows"));
    }
    let transform = MinMax::fit(&rows);
    let normalized: Vec<Vec<f64>> = rows.iter().map(|r| transform.normalize(r)).collect();
    Ok(GeoData {
        data: Dataset::new(&normalized, weight_col.map(|_| weights))?,
        transform,
    })
}

pub fn load_geocsv(path: impl AsRef<Path>) -> Result<GeoData> {
    read_geocsv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_reproducible() {
        let a = make_blobs(&four_blobs(10), 3).unwrap();
        let b = make_blobs(&four_blobs(10), 3).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.labels.len(), 40);
    }

    #[test]
    fn grid_preset_size() {
        let d = Preset::Grid16.generate(0).unwrap();
        assert_eq!(d.len(), 3200);
        assert_eq!(d.dim(), 2);
    }

    #[test]
    fn geocsv_normalizes() {
        let csv = "lon,lat\n10,50\n20,52\n15,54\n";
        let g = read_geocsv(csv.as_bytes()).unwrap();
        let d = &g.data;
        assert_eq!(d.point(0), &[0.0, 0.0]);
        assert_eq!(d.point(1), &[1.0, 0.5]);
        assert_eq!(d.point(2), &[0.5, 1.0]);
        assert_eq!(g.transform.denormalize(d.point(1)), vec![20.0, 52.0]);
    }

    #[test]
    fn geocsv_rejects_non_finite() {
        let err = read_geocsv("x,y\n0,1\n2,inf\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn geocsv_header_only_fails() {
        let err = read_geocsv("lon,lat\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("no data rows"));
    }

    #[test]
    fn geocsv_weight_column() {
        let d = read_geocsv("x,weight,y\n0,1,0\n1,3,2\n".as_bytes()).unwrap().data;
        assert_eq!(d.weights(), &[0.25, 0.75]);
        assert_eq!(d.point(1), &[1.0, 1.0]);
    }
}
