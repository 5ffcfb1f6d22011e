//! Synthetic shapes, outlier injection, metrics and ASCII PLY.
//!
//! Shapes are generated at a canonical pose: centered at the origin with unit
//! extent (sphere of radius 0.5, unit cube, unit square in `z = 0`, cylinder
//! of radius 0.5 and height 1 along `z`), then perturbed by isotropic
//! Gaussian noise.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Plane,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Sphere, Self::Cube, Self::Plane, Self::Cylinder];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Plane => "plane",
            Self::Cylinder => "cylinder",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 8 {
            return Err(Error::InvalidArgument(format!(
                "a shape needs at least 8 points, got {}",
                self.n_points
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn square(rng: &mut Rng) -> (f64, f64) {
    (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
}

fn surface_point(kind: ShapeKind, rng: &mut Rng) -> Point {
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break [0.5 * v[0] / n, 0.5 * v[1] / n, 0.5 * v[2] / n];
            }
        },
        ShapeKind::Cube => {
            let face = rng.random_range(0..6usize);
            let (u, v) = square(rng);
            let side = if face % 2 == 0 { -0.5 } else { 0.5 };
            match face / 2 {
                0 => [side, u, v],
                1 => [u, side, v],
                _ => [u, v, side],
            }
        }
        ShapeKind::Plane => {
            let (u, v) = square(rng);
            [u, v, 0.0]
        }
        ShapeKind::Cylinder => {
            // lateral area pi, caps pi/2 together
            if rng.random_bool(2.0 / 3.0) {
                let t = rng.random_range(0.0..2.0 * PI);
                [0.5 * t.cos(), 0.5 * t.sin(), rng.random_range(-0.5..0.5)]
            } else {
                let t = rng.random_range(0.0..2.0 * PI);
                let r = 0.5 * rng.random::<f64>().sqrt();
                let z = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
                [r * t.cos(), r * t.sin(), z]
            }
        }
    }
}

/// Uniform surface samples of `spec.kind` plus Gaussian noise, every point
/// labeled with the kind.
pub fn generate_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = seeded(derive_seed(&[spec.kind.label() as u64, spec.seed]));
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let coords = (0..spec.n_points)
        .map(|_| {
            let p = surface_point(spec.kind, &mut rng);
            if spec.noise_sigma > 0.0 {
                [
                    p[0] + noise.sample(&mut rng),
                    p[1] + noise.sample(&mut rng),
                    p[2] + noise.sample(&mut rng),
                ]
            } else {
                p
            }
        })
        .collect();
    PointCloud::new(coords)?.with_labels(vec![spec.kind.label(); spec.n_points])
}

/// Replaces `floor(fraction * N)` randomly chosen points with uniform draws
/// from the box of half-width `spread` around the cloud's bounding-box
/// center. Returns the new cloud and the per-point outlier mask.
pub fn inject_outliers(
    cloud: &PointCloud,
    fraction: f64,
    spread: f64,
    seed: u64,
) -> Result<(PointCloud, Vec<bool>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "outlier fraction must be in [0, 1), got {fraction}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "outlier spread must be nonnegative, got {spread}"
        )));
    }
    let n = cloud.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut mask = vec![false; n];
    if count == 0 {
        return Ok((cloud.clone(), mask));
    }
    let (lo, hi) = bounds(cloud.coords());
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let mut rng = seeded(seed);
    let picked = index::sample(&mut rng, n, count).into_vec();
    let mut coords = cloud.coords().to_vec();
    let mut sorted = picked;
    sorted.sort_unstable();
    for i in sorted {
        mask[i] = true;
        for (c, m) in coords[i].iter_mut().zip(center) {
            *c = m + if spread > 0.0 {
                rng.random_range(-spread..=spread)
            } else {
                0.0
            };
        }
    }
    let mut out = PointCloud::new(coords)?;
    if let Some((w, f)) = cloud.features() {
        out = out.with_features(w, f.to_vec())?;
    }
    if let Some(l) = cloud.labels() {
        out = out.with_labels(l.to_vec())?;
    }
    Ok((out, mask))
}

pub fn bounds(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    (lo, hi)
}

/// Rotation by `angle` radians about the vertical (`z`) axis.
pub fn rotate_z(points: &[Point], angle: f64) -> Vec<Point> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect()
}

/// Adds `N(0, sigma^2)` noise clipped to `[-clip, clip]` per coordinate.
pub fn jitter(points: &[Point], sigma: f64, clip: f64, rng: &mut Rng) -> Vec<Point> {
    points
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in &mut q {
                let e: f64 = StandardNormal.sample(rng);
                *c += (sigma * e).clamp(-clip, clip);
            }
            q
        })
        .collect()
}

/// One object of a shape-classification split.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub points: Vec<Point>,
    pub label: usize,
    pub outliers: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub points: usize,
    pub noise: f64,
    pub outlier_fraction: f64,
    pub outlier_spread: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            points: 1024,
            noise: 0.01,
            outlier_fraction: 0.0,
            outlier_spread: 1.0,
        }
    }
}

const OUTLIER_STREAM: u64 = 0x6f75_746c;

/// Objects with shape seeds in `seeds` for every kind, class-major.
/// Training splits use seeds `0..train` and test splits the following
/// range, so the two never share an object.
pub fn shape_split(cfg: &DatasetConfig, seeds: std::ops::Range<u64>) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(ShapeKind::ALL.len() * seeds.clone().count());
    for kind in ShapeKind::ALL {
        for seed in seeds.clone() {
            let cloud = generate_shape(&ShapeSpec {
                kind,
                n_points: cfg.points,
                noise_sigma: cfg.noise,
                seed,
            })?;
            let stream = derive_seed(&[kind.label() as u64, seed, OUTLIER_STREAM]);
            let (cloud, outliers) =
                inject_outliers(&cloud, cfg.outlier_fraction, cfg.outlier_spread, stream)?;
            out.push(Sample {
                points: cloud.coords().to_vec(),
                label: kind.label(),
                outliers,
            });
        }
    }
    Ok(out)
}

/// Confusion counts and the derived scores. Rows of `confusion` are true
/// classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_classes: usize,
    pub confusion: Vec<u64>,
    pub miou: f64,
    pub oa: f64,
    pub macc: f64,
    /// `NaN` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<f64>,
}

impl MetricsReport {
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.confusion[truth * self.n_classes + pred]
    }

    /// `(tp, fp, fn)` of class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let n = self.n_classes;
        let tp = self.count(c, c);
        let row: u64 = (0..n).map(|p| self.count(c, p)).sum();
        let col: u64 = (0..n).map(|t| self.count(t, c)).sum();
        (tp, col - tp, row - tp)
    }

    /// `class,tp,fp,fn,iou`, one row per class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,tp,fp,fn,iou\n");
        for c in 0..self.n_classes {
            let (tp, fp, fn_) = self.class_counts(c);
            let _ = writeln!(s, "{c},{tp},{fp},{fn_},{}", self.per_class_iou[c]);
        }
        s
    }
}

/// Scores a labeling. Classes that appear in neither `pred` nor `truth` are
/// left out of the mIoU and mAcc means.
pub fn compute_metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    let mut confusion = vec![0u64; n_classes * n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: n_classes,
                });
            }
        }
        confusion[t * n_classes + p] += 1;
    }
    let mut report = MetricsReport {
        n_classes,
        confusion,
        miou: 0.0,
        oa: 0.0,
        macc: 0.0,
        per_class_iou: vec![f64::NAN; n_classes],
    };
    let mut present = 0usize;
    let mut trace = 0u64;
    let (mut iou_sum, mut acc_sum) = (0.0, 0.0);
    for c in 0..n_classes {
        let (tp, fp, fn_) = report.class_counts(c);
        trace += tp;
        if tp + fp + fn_ == 0 {
            continue;
        }
        present += 1;
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        report.per_class_iou[c] = iou;
        iou_sum += iou;
        // a class that is only ever predicted has no recall to speak of
        acc_sum += if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
    }
    report.oa = trace as f64 / pred.len() as f64;
    report.miou = iou_sum / present as f64;
    report.macc = acc_sum / present as f64;
    Ok(report)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?
        .to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A cloud read from PLY plus its optional `heat` column.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub cloud: PointCloud,
    pub heat: Option<Vec<f64>>,
}

/// ASCII PLY text with `x y z`, then `label` if the cloud has labels, then
/// `heat` if given. Reals are printed with 9 significant digits.
pub fn format_ply(cloud: &PointCloud, heat: Option<&[f64]>) -> Result<String> {
    if let Some(h) = heat {
        if h.len() != cloud.len() {
            return Err(Error::ShapeMismatch {
                op: "format_ply",
                left: vec![cloud.len()],
                right: vec![h.len()],
            });
        }
    }
    let mut s = String::with_capacity(64 * cloud.len() + 200);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.labels().is_some() {
        s.push_str("property int label\n");
    }
    if heat.is_some() {
        s.push_str("property double heat\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.coords().iter().enumerate() {
        let _ = write!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
        if let Some(l) = cloud.labels() {
            let _ = write!(s, " {}", l[i]);
        }
        if let Some(h) = heat {
            let _ = write!(s, " {:.8e}", h[i]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, heat: Option<&[f64]>) -> Result<()> {
    write_atomic(path, format_ply(cloud, heat)?.as_bytes())
}

pub fn read_cloud(path: &Path) -> Result<PlyCloud> {
    parse_ply(&fs::read_to_string(path)?)
}

#[derive(Clone, Copy, PartialEq)]
enum Column {
    X,
    Y,
    Z,
    Label,
    Heat,
    Other,
}

/// Parses the ASCII PLY subset written by [`format_ply`]. Unknown vertex
/// properties are skipped; other elements must follow the vertices.
pub fn parse_ply(text: &str) -> Result<PlyCloud> {
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(perr(1, "missing `ply` magic".into())),
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut columns: Vec<Column> = Vec::new();
    let mut header_end = None;
    for (ln, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(perr(ln, format!("unsupported format `{fmt}`")));
                }
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(
                        n.parse()
                            .map_err(|_| perr(ln, format!("bad vertex count `{n}`")))?,
                    );
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(perr(
                        ln,
                        "list properties on vertices are not supported".into(),
                    ));
                }
            }
            ["property", _, name] => {
                if in_vertex {
                    columns.push(match *name {
                        "x" => Column::X,
                        "y" => Column::Y,
                        "z" => Column::Z,
                        "label" => Column::Label,
                        "heat" => Column::Heat,
                        _ => Column::Other,
                    });
                }
            }
            ["end_header"] => {
                header_end = Some(ln);
                break;
            }
            _ => return Err(perr(ln, format!("unexpected header line `{line}`"))),
        }
    }
    let header_end =
        header_end.ok_or_else(|| perr(text.lines().count(), "missing end_header".into()))?;
    let n = count.ok_or_else(|| perr(header_end, "no vertex element declared".into()))?;
    for c in [Column::X, Column::Y, Column::Z] {
        if !columns.contains(&c) {
            return Err(perr(header_end, "vertex element lacks x, y or z".into()));
        }
    }
    let has_label = columns.contains(&Column::Label);
    let has_heat = columns.contains(&Column::Heat);
    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(if has_label { n } else { 0 });
    let mut heat = Vec::with_capacity(if has_heat { n } else { 0 });
    let mut last = header_end;
    for (ln, line) in lines {
        if coords.len() == n {
            break;
        }
        last = ln;
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != columns.len() {
            return Err(perr(
                ln,
                format!("expected {} values, found {}", columns.len(), vals.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (col, v) in columns.iter().zip(vals) {
            let real = || {
                v.parse::<f64>()
                    .map_err(|_| perr(ln, format!("bad number `{v}`")))
            };
            match col {
                Column::X => p[0] = real()?,
                Column::Y => p[1] = real()?,
                Column::Z => p[2] = real()?,
                Column::Heat => heat.push(real()?),
                Column::Label => labels.push(
                    v.parse()
                        .map_err(|_| perr(ln, format!("bad label `{v}`")))?,
                ),
                Column::Other => {}
            }
        }
        if !p.iter().all(|c| c.is_finite()) {
            return Err(perr(ln, "non-finite coordinate".into()));
        }
        coords.push(p);
    }
    if coords.len() < n {
        return Err(perr(
            last,
            format!("expected {n} vertex rows, found {}", coords.len()),
        ));
    }
    let mut cloud = PointCloud::new(coords)?;
    if has_label {
        cloud = cloud.with_labels(labels)?;
    }
    Ok(PlyCloud {
        cloud,
        heat: has_heat.then_some(heat),
    })
}
