//! Point containers, sampling and grouping.
//!
//! All routines are brute-force scans over the input; at the scales this
//! crate targets (a few thousand points per object) a spatial index buys
//! little. Ties are always broken by the lowest point index.

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// A point set with optional per-point feature rows and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point>,
    features: Option<(usize, Vec<f64>)>,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyInput);
        }
        check_finite(&coords)?;
        Ok(Self {
            coords,
            features: None,
            labels: None,
        })
    }

    /// Attaches an `N x width` row-major feature matrix.
    pub fn with_features(mut self, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * self.len() {
            return Err(Error::ShapeMismatch {
                op: "PointCloud::with_features",
                left: vec![self.len(), width],
                right: vec![data.len()],
            });
        }
        self.features = Some((width, data));
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "PointCloud::with_labels",
                left: vec![self.len()],
                right: vec![labels.len()],
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn features(&self) -> Option<(usize, &[f64])> {
        self.features.as_ref().map(|(w, d)| (*w, d.as_slice()))
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Applies `f` to every coordinate, keeping features and labels.
    pub fn map_coords(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        let coords: Vec<Point> = self.coords.iter().map(|&p| f(p)).collect();
        check_finite(&coords)?;
        Ok(Self {
            coords,
            features: self.features.clone(),
            labels: self.labels.clone(),
        })
    }
}

/// One grouping result: a center plus `k` member slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub center: usize,
    pub members: Vec<usize>,
    /// `coords[center] - coords[member]` per slot.
    pub rel: Vec<Point>,
    pub dist: Vec<f64>,
    /// Number of slots filled by duplicating the first qualifying member.
    pub refilled: usize,
}

impl Neighborhood {
    fn build(points: &[Point], center: usize, members: Vec<usize>, refilled: usize) -> Self {
        let c = points[center];
        let mut rel = Vec::with_capacity(members.len());
        let mut dist = Vec::with_capacity(members.len());
        for &m in &members {
            let p = points[m];
            rel.push(sub(c, p));
            dist.push(norm(sub(p, c)));
        }
        Self {
            center,
            members,
            rel,
            dist,
            refilled,
        }
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// Flattened slot indexing for a list of equally sized neighborhoods:
/// slot `i * k + j` is member `j` of neighborhood `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLayout {
    pub k: usize,
    /// Member point index per slot.
    pub members: Vec<usize>,
    /// Neighborhood ordinal per slot.
    pub owners: Vec<usize>,
}

impl SlotLayout {
    pub fn new(nbhs: &[Neighborhood]) -> Result<Self> {
        let k = nbhs.first().map_or(0, Neighborhood::k);
        if nbhs.iter().any(|n| n.k() != k) {
            return Err(Error::InvalidArgument(
                "neighborhoods differ in size".into(),
            ));
        }
        let members = nbhs
            .iter()
            .flat_map(|n| n.members.iter().copied())
            .collect();
        let owners = (0..nbhs.len())
            .flat_map(|i| std::iter::repeat_n(i, k))
            .collect();
        Ok(Self { k, members, owners })
    }

    pub fn groups(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.members.len() / self.k
        }
    }
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
pub fn dist_sq(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn check_finite(points: &[Point]) -> Result<()> {
    match points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        Some(index) => Err(Error::NonFiniteCoordinate { index }),
        None => Ok(()),
    }
}

fn check_index(points: &[Point], idx: usize) -> Result<()> {
    if idx >= points.len() {
        return Err(Error::InvalidArgument(format!(
            "point index {idx} out of range for {} points",
            points.len()
        )));
    }
    Ok(())
}

/// Greedy farthest point sampling starting from `start`.
pub fn farthest_point_sample(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::SampleCountExceedsPopulation {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    check_index(points, start)?;
    check_finite(points)?;

    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist_sq(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Closed-ball grouping. Members are scanned in ascending point index; empty
/// slots repeat the first qualifying member.
pub fn ball_query_group(
    points: &[Point],
    centers: &[usize],
    radius: f64,
    k: usize,
) -> Result<Vec<Neighborhood>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be positive, got {radius}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    check_finite(points)?;
    centers
        .iter()
        .map(|&center| {
            check_index(points, center)?;
            let c = points[center];
            let mut members = Vec::with_capacity(k);
            for (i, p) in points.iter().enumerate() {
                if norm(sub(*p, c)) <= radius {
                    members.push(i);
                    if members.len() == k {
                        break;
                    }
                }
            }
            // the center itself always qualifies
            let refilled = k - members.len();
            let first = members[0];
            members.resize(k, first);
            Ok(Neighborhood::build(points, center, members, refilled))
        })
        .collect()
}

/// Exact k-nearest grouping, ordered by (distance, index).
pub fn knn_group(points: &[Point], centers: &[usize], k: usize) -> Result<Vec<Neighborhood>> {
    if k > points.len() {
        return Err(Error::SampleCountExceedsPopulation {
            requested: k,
            available: points.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    check_finite(points)?;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    centers
        .iter()
        .map(|&center| {
            check_index(points, center)?;
            let c = points[center];
            order.clear();
            order.extend(points.iter().enumerate().map(|(i, p)| (dist_sq(*p, c), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let nearest = &mut order[..k];
            nearest.sort_unstable_by(cmp);
            let members = nearest.iter().map(|&(_, i)| i).collect();
            Ok(Neighborhood::build(points, center, members, 0))
        })
        .collect()
}

/// `coords[center] - coords[member]` for every slot of `nbh`.
pub fn relative_coords(nbh: &Neighborhood, points: &[Point]) -> Vec<Point> {
    let c = points[nbh.center];
    nbh.members.iter().map(|&m| sub(c, points[m])).collect()
}
