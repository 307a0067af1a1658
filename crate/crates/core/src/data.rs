//! Toy texture datasets on Gr(1,3), CSV ingestion and splits.
//!
//! The five planar textures (2 spirals, swissroll, 2 circles, 2 sines,
//! target) are drawn in 2-D, normalized by the largest row norm of the
//! batch, lifted to unit 3-vectors by prepending a constant one and
//! renormalizing rows -- every sample is then a representative of a line in
//! R^3, i.e. a point of Gr(1,3). Generation is seeded and matches the
//! distributions (not the bit streams) of the usual numpy-based generators.
//!
//! External matrices arrive as CSV (one sample per line, D*k floats,
//! row-major) and are orthonormalized column-wise by Gram-Schmidt.

use crate::error::DataError;
use crate::geometry::{gram_schmidt, StiefelPoint};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// The five planar textures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    TwoSpirals,
    Swissroll,
    TwoCircles,
    TwoSines,
    Target,
}

impl TextureKind {
    pub const ALL: [TextureKind; 5] = [
        TextureKind::TwoSpirals,
        TextureKind::Swissroll,
        TextureKind::TwoCircles,
        TextureKind::TwoSines,
        TextureKind::Target,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TextureKind::TwoSpirals => "2spirals",
            TextureKind::Swissroll => "swissroll",
            TextureKind::TwoCircles => "2circles",
            TextureKind::TwoSines => "2sines",
            TextureKind::Target => "target",
        }
    }
}

impl std::str::FromStr for TextureKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "2spirals" => Ok(TextureKind::TwoSpirals),
            "swissroll" => Ok(TextureKind::Swissroll),
            "2circles" => Ok(TextureKind::TwoCircles),
            "2sines" => Ok(TextureKind::TwoSines),
            "target" => Ok(TextureKind::Target),
            other => Err(DataError::UnknownName(other.to_string())),
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceKind {
    Texture(TextureKind),
    Csv,
}

/// Parses the dataset name, `csv` included.
pub fn parse_source(name: &str) -> Result<SourceKind, DataError> {
    if name == "csv" {
        return Ok(SourceKind::Csv);
    }
    name.parse::<TextureKind>().map(SourceKind::Texture)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: SourceKind,
    pub n: usize,
    pub seed: u64,
    /// CSV path; required when `source` is [`SourceKind::Csv`].
    pub path: Option<String>,
    /// (D, k)
    pub dims: (usize, usize),
}

impl DatasetSpec {
    pub fn texture(kind: TextureKind, n: usize, seed: u64) -> Self {
        Self {
            source: SourceKind::Texture(kind),
            n,
            seed,
            path: None,
            dims: (3, 1),
        }
    }
}

/// A batch of subspace representatives.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub points: Vec<StiefelPoint>,
    pub dims: (usize, usize),
    /// File line numbers for CSV provenance; empty for generated data.
    pub origin_rows: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// ---- planar texture stage ------------------------------------------------------

/// Draws the raw 2-D samples of a texture before normalization and lifting.
pub fn planar_texture<R: Rng + ?Sized>(kind: TextureKind, n: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(n);
    let normal = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
    match kind {
        TextureKind::TwoSpirals => {
            while out.len() < n {
                let u: f64 = rng.gen::<f64>();
                let arc = u.sqrt() * 540.0 * TAU / 360.0;
                let d1x = -arc.cos() * arc + rng.gen::<f64>() * 0.1;
                let d1y = arc.sin() * arc + rng.gen::<f64>() * 0.1;
                let n1 = [d1x / 3.0 + normal(rng) * 0.1, d1y / 3.0 + normal(rng) * 0.1];
                out.push(n1);
                if out.len() < n {
                    out.push([-d1x / 3.0 + normal(rng) * 0.1, -d1y / 3.0 + normal(rng) * 0.1]);
                }
            }
        }
        TextureKind::Swissroll => {
            for _ in 0..n {
                let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.gen::<f64>());
                let x = t * t.cos() + 0.3 * normal(rng);
                let z = t * t.sin() + 0.3 * normal(rng);
                out.push([x / 5.0, z / 5.0]);
            }
        }
        TextureKind::TwoCircles => {
            let n_out = n / 2;
            let n_in = n - n_out;
            for i in 0..n_out {
                let a = TAU * i as f64 / n_out as f64;
                out.push([
                    (a.cos() + 0.05 * normal(rng)) * 3.0,
                    (a.sin() + 0.05 * normal(rng)) * 3.0,
                ]);
            }
            for i in 0..n_in {
                let a = TAU * i as f64 / n_in as f64;
                out.push([
                    (0.5 * a.cos() + 0.05 * normal(rng)) * 3.0,
                    (0.5 * a.sin() + 0.05 * normal(rng)) * 3.0,
                ]);
            }
        }
        TextureKind::TwoSines => {
            for _ in 0..n {
                let x = (rng.gen::<f64>() - 0.5) * TAU;
                let u = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let y = u * x.sin() * 2.5;
                out.push([x + normal(rng) * 0.1, y + normal(rng) * 0.1]);
            }
        }
        TextureKind::Target => {
            // crosshair bars at +-2 and 0 plus a unit circle
            for _ in 0..n {
                let shape = rng.gen_range(0..7u8);
                let theta = rng.gen::<f64>() * TAU;
                let unif = (rng.gen::<f64>() - 0.5) * 4.0;
                let (mut x, mut y) = match shape {
                    0 => (unif, -2.0),
                    1 => (unif, 0.0),
                    2 => (unif, 2.0),
                    3 => (-2.0, unif),
                    4 => (0.0, unif),
                    5 => (2.0, unif),
                    _ => (theta.cos(), theta.sin()),
                };
                x += normal(rng) * 0.1;
                y += normal(rng) * 0.1;
                out.push([x, y]);
            }
        }
    }
    out
}

/// Largest row norm of a planar batch; the batch normalization constant.
pub fn max_row_norm(planar: &[[f64; 2]]) -> f64 {
    planar
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
        .fold(0.0, f64::max)
}

/// Lifts planar samples to Gr(1,3) representatives: scale the batch by its
/// largest row norm, prepend a constant one, renormalize each row.
pub fn lift_to_gr13(planar: &[[f64; 2]]) -> Vec<StiefelPoint> {
    let scale = max_row_norm(planar);
    planar
        .iter()
        .map(|p| {
            let nx = p[0] / scale;
            let ny = p[1] / scale;
            let norm = (1.0 + nx * nx + ny * ny).sqrt();
            StiefelPoint::new_unchecked(DMatrix::from_column_slice(
                3,
                1,
                &[1.0 / norm, nx / norm, ny / norm],
            ))
        })
        .collect()
}

/// Generates one of the five textures as Gr(1,3) representatives.
pub fn generate_texture(spec: &DatasetSpec) -> Result<SampleBatch, DataError> {
    let kind = match &spec.source {
        SourceKind::Texture(k) => *k,
        SourceKind::Csv => return Err(DataError::UnknownName("csv".into())),
    };
    if spec.n == 0 {
        return Err(DataError::EmptySpec);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let planar = planar_texture(kind, spec.n, &mut rng);
    Ok(SampleBatch {
        points: lift_to_gr13(&planar),
        dims: (3, 1),
        origin_rows: Vec::new(),
    })
}

/// Generates or loads according to the spec.
pub fn materialize(spec: &DatasetSpec) -> Result<SampleBatch, DataError> {
    match &spec.source {
        SourceKind::Texture(_) => generate_texture(spec),
        SourceKind::Csv => {
            let path = spec.path.as_deref().ok_or_else(|| {
                DataError::Parse {
                    path: "<none>".into(),
                    line: 0,
                    message: "csv source requires a path".into(),
                }
            })?;
            let (d, k) = spec.dims;
            load_csv(path, d, k, true)
        }
    }
}

// ---- CSV -------------------------------------------------------------------------

/// Loads row-major D x k samples, one per line, and orthonormalizes each via
/// Gram-Schmidt. `has_header` skips the first line.
pub fn load_csv(
    path: impl AsRef<Path>,
    d: usize,
    k: usize,
    has_header: bool,
) -> Result<SampleBatch, DataError> {
    let path_str = path.as_ref().display().to_string();
    let file = std::fs::File::open(path.as_ref()).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut points = Vec::new();
    let mut origin_rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path_str.clone(),
            source,
        })?;
        if idx == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d * k {
            return Err(DataError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: format!("expected {} fields, found {}", d * k, fields.len()),
            });
        }
        let mut m = DMatrix::zeros(d, k);
        for (fi, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: format!("field {} is not a float: `{}`", fi + 1, f.trim()),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    message: format!("field {} is not finite", fi + 1),
                });
            }
            // row-major layout on disk
            m[(fi / k, fi % k)] = v;
        }
        let point = gram_schmidt(&m).map_err(|source| DataError::RankDeficient {
            row: line_no,
            source,
        })?;
        points.push(point);
        origin_rows.push(line_no);
    }
    Ok(SampleBatch {
        points,
        dims: (d, k),
        origin_rows,
    })
}

/// Writes a batch as row-major CSV with a header line.
pub fn save_csv(path: impl AsRef<Path>, batch: &SampleBatch) -> Result<(), DataError> {
    let path_str = path.as_ref().display().to_string();
    let mut file = std::fs::File::create(path.as_ref()).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let io_err = |source| DataError::Io {
        path: path_str.clone(),
        source,
    };
    let (d, k) = batch.dims;
    let header: Vec<String> = (0..d)
        .flat_map(|i| (0..k).map(move |j| format!("e{i}{j}")))
        .collect();
    writeln!(file, "{}", header.join(",")).map_err(io_err)?;
    for p in &batch.points {
        let m = p.matrix();
        let row: Vec<String> = (0..d)
            .flat_map(|i| (0..k).map(move |j| format!("{}", m[(i, j)])))
            .collect();
        writeln!(file, "{}", row.join(",")).map_err(|source| DataError::Io {
            path: path_str.clone(),
            source,
        })?;
    }
    Ok(())
}

// ---- split -----------------------------------------------------------------------

/// Deterministic shuffle + disjoint cover into (train, val, test).
pub fn split(
    batch: &SampleBatch,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(SampleBatch, SampleBatch, SampleBatch), DataError> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(total));
    }
    let n = batch.len();
    if n == 0 {
        return Err(DataError::EmptySplit);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = ((fractions.1 * n as f64).round() as usize).min(n - n_train);
    let take = |ids: &[usize]| SampleBatch {
        points: ids.iter().map(|&i| batch.points[i].clone()).collect(),
        dims: batch.dims,
        origin_rows: if batch.origin_rows.is_empty() {
            Vec::new()
        } else {
            ids.iter().map(|&i| batch.origin_rows[i]).collect()
        },
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_pvalue, pearson};

    #[test]
    fn all_textures_produce_unit_rows_with_positive_first_coordinate() {
        for kind in TextureKind::ALL {
            let spec = DatasetSpec::texture(kind, 500, 7);
            let batch = generate_texture(&spec).unwrap();
            assert_eq!(batch.len(), 500);
            for p in &batch.points {
                let m = p.matrix();
                let norm = (m[(0, 0)].powi(2) + m[(1, 0)].powi(2) + m[(2, 0)].powi(2)).sqrt();
                assert!((norm - 1.0).abs() < 1e-12, "{kind:?} norm {norm}");
                assert!(m[(0, 0)] > 0.0, "{kind:?} first coordinate not positive");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = DatasetSpec::texture(TextureKind::Target, 200, 99);
        let a = generate_texture(&spec).unwrap();
        let b = generate_texture(&spec).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.matrix(), y.matrix());
        }
    }

    #[test]
    fn lift_inversion_recovers_normalized_planar() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let planar = planar_texture(TextureKind::TwoSines, 300, &mut rng);
        let scale = max_row_norm(&planar);
        let lifted = lift_to_gr13(&planar);
        for (p, y) in planar.iter().zip(&lifted) {
            let m = y.matrix();
            let rx = m[(1, 0)] / m[(0, 0)];
            let ry = m[(2, 0)] / m[(0, 0)];
            assert!((rx - p[0] / scale).abs() < 1e-12);
            assert!((ry - p[1] / scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_of_different_sizes_share_a_distribution() {
        let a = generate_texture(&DatasetSpec::texture(TextureKind::TwoSpirals, 4000, 1)).unwrap();
        let b = generate_texture(&DatasetSpec::texture(TextureKind::TwoSpirals, 9000, 2)).unwrap();
        let angles = |batch: &SampleBatch| -> Vec<f64> {
            batch
                .points
                .iter()
                .map(|p| p.matrix()[(1, 0)].atan2(p.matrix()[(2, 0)]))
                .collect()
        };
        let p = ks_pvalue(&angles(&a), &angles(&b));
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn two_spirals_match_an_independent_reimplementation() {
        // straight-line rewrite of the numpy generator: exact half/half
        // stacking, then the same normalization and lift
        let n = 10_000;
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let mut planar_ref: Vec<[f64; 2]> = Vec::with_capacity(n);
        {
            let half = n / 2;
            let mut firsts = Vec::with_capacity(half);
            for _ in 0..half {
                let u: f64 = rng.gen::<f64>();
                let arc = u.sqrt() * 540.0 * TAU / 360.0;
                let d1x = -arc.cos() * arc + rng.gen::<f64>() * 0.1;
                let d1y = arc.sin() * arc + rng.gen::<f64>() * 0.1;
                firsts.push((d1x, d1y));
            }
            for &(x, y) in &firsts {
                planar_ref.push([x / 3.0, y / 3.0]);
            }
            for &(x, y) in &firsts {
                planar_ref.push([-x / 3.0, -y / 3.0]);
            }
            for p in planar_ref.iter_mut() {
                p[0] += rng.sample::<f64, _>(StandardNormal) * 0.1;
                p[1] += rng.sample::<f64, _>(StandardNormal) * 0.1;
            }
        }
        let ours = generate_texture(&DatasetSpec::texture(TextureKind::TwoSpirals, n, 77)).unwrap();

        // Smoothed 2-D histogram correlation of the planar projections, each
        // cloud rescaled by its mean radius so the comparison is insensitive
        // to the batch-max normalization statistic.
        let bins = 16usize;
        let rescale = |pts: &mut Vec<[f64; 2]>| {
            let mr: f64 = pts
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
                .sum::<f64>()
                / pts.len() as f64;
            for p in pts.iter_mut() {
                p[0] /= mr;
                p[1] /= mr;
            }
        };
        let hist = |pts: &[[f64; 2]]| -> Vec<f64> {
            let mut h = vec![0.0; bins * bins];
            for p in pts {
                let bx = (((p[0] + 2.0) / 4.0) * bins as f64).floor();
                let by = (((p[1] + 2.0) / 4.0) * bins as f64).floor();
                if bx >= 0.0 && by >= 0.0 && (bx as usize) < bins && (by as usize) < bins {
                    h[bx as usize * bins + by as usize] += 1.0;
                }
            }
            // two 3x3 box-blur passes
            let mut cur = h;
            for _ in 0..2 {
                let mut next = vec![0.0; bins * bins];
                for i in 0..bins {
                    for j in 0..bins {
                        let mut acc = 0.0;
                        let mut w = 0.0;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                                if ii >= 0 && jj >= 0 && (ii as usize) < bins && (jj as usize) < bins
                                {
                                    acc += cur[ii as usize * bins + jj as usize];
                                    w += 1.0;
                                }
                            }
                        }
                        next[i * bins + j] = acc / w;
                    }
                }
                cur = next;
            }
            cur
        };
        let scale_ref = max_row_norm(&planar_ref);
        let mut ref_pts: Vec<[f64; 2]> = planar_ref
            .iter()
            .map(|p| [p[0] / scale_ref, p[1] / scale_ref])
            .collect();
        let mut our_pts: Vec<[f64; 2]> = ours
            .points
            .iter()
            .map(|y| {
                let m = y.matrix();
                [m[(1, 0)] / m[(0, 0)], m[(2, 0)] / m[(0, 0)]]
            })
            .collect();
        rescale(&mut ref_pts);
        rescale(&mut our_pts);
        let c = pearson(&hist(&ref_pts), &hist(&our_pts));
        assert!(c > 0.99, "histogram correlation {c}");
    }

    #[test]
    fn unknown_name_is_rejected_with_valid_list() {
        let err = parse_source("bogus").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2spirals") && msg.contains("target"), "{msg}");
    }

    #[test]
    fn csv_roundtrip_preserves_orthonormal_rows() {
        let dir = std::env::temp_dir().join("grassflow_test_csv_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.csv");
        let spec = DatasetSpec::texture(TextureKind::TwoCircles, 50, 5);
        let batch = generate_texture(&spec).unwrap();
        save_csv(&path, &batch).unwrap();
        let loaded = load_csv(&path, 3, 1, true).unwrap();
        assert_eq!(loaded.len(), 50);
        for (a, b) in batch.points.iter().zip(&loaded.points) {
            assert!((a.matrix() - b.matrix()).norm() < 1e-15);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_identity_rows_pass_through() {
        let dir = std::env::temp_dir().join("grassflow_test_csv_identity");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("id.csv");
        // the first 2 columns of I_4 as one row-major line
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "1,0,0,1,0,0,0,0").unwrap();
        drop(f);
        let batch = load_csv(&path, 4, 2, false).unwrap();
        assert_eq!(batch.len(), 1);
        let expected = DMatrix::<f64>::identity(4, 4).columns(0, 2).into_owned();
        assert!((batch.points[0].matrix() - expected).norm() < 1e-15);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_orthonormalizes_and_preserves_span() {
        let dir = std::env::temp_dir().join("grassflow_test_csv_span");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rand.csv");
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        let mut mats = Vec::new();
        for _ in 0..20 {
            let m = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0f64));
            let flat: Vec<String> = (0..4)
                .flat_map(|i| (0..2).map({
                    let m = m.clone();
                    move |j| format!("{}", m[(i, j)])
                }))
                .collect();
            rows.push(flat.join(","));
            mats.push(m);
        }
        std::fs::write(&path, rows.join("\n")).unwrap();
        let batch = load_csv(&path, 4, 2, false).unwrap();
        for (p, m) in batch.points.iter().zip(&mats) {
            assert!(p.orthonormality_residual() < 1e-10);
            let qqt = p.matrix() * p.matrix().transpose();
            let pinv = (m.transpose() * m).try_inverse().unwrap();
            let proj = m * pinv * m.transpose();
            assert!((qqt - proj).norm() < 1e-9, "span changed");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_malformed_row_names_line() {
        let dir = std::env::temp_dir().join("grassflow_test_csv_malformed");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "1,0,0\n0,oops,0\n").unwrap();
        let err = load_csv(&path, 3, 1, false).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_all_train_and_determinism() {
        let batch = generate_texture(&DatasetSpec::texture(TextureKind::Swissroll, 100, 3)).unwrap();
        let (train, val, test) = split(&batch, (1.0, 0.0, 0.0), 5).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (100, 0, 0));

        let (a, _, _) = split(&batch, (0.6, 0.2, 0.2), 9).unwrap();
        let (b, _, _) = split(&batch, (0.6, 0.2, 0.2), 9).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.matrix(), y.matrix());
        }
    }

    #[test]
    fn split_matches_requested_counts() {
        let batch = generate_texture(&DatasetSpec::texture(TextureKind::Target, 2000, 1)).unwrap();
        // 1000 train, 500 validation, 500 test
        let (train, val, test) = split(&batch, (0.5, 0.25, 0.25), 2).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (1000, 500, 500));
        // disjoint cover
        assert_eq!(train.len() + val.len() + test.len(), batch.len());
    }

    #[test]
    fn split_rejects_bad_fractions_and_empty() {
        let batch = generate_texture(&DatasetSpec::texture(TextureKind::Target, 10, 1)).unwrap();
        assert!(matches!(
            split(&batch, (0.5, 0.1, 0.1), 0),
            Err(DataError::BadFractions(_))
        ));
        let empty = SampleBatch {
            points: vec![],
            dims: (3, 1),
            origin_rows: vec![],
        };
        assert!(matches!(
            split(&empty, (1.0, 0.0, 0.0), 0),
            Err(DataError::EmptySplit)
        ));
    }
}
