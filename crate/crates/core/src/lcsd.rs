//! Lightweight cross-stage structure descriptor.
//!
//! Each stage's descriptor concatenates eight octant blocks. Block `o` of
//! center `i` sums, over the members of `i`'s neighborhood lying in octant
//! `o`, the member's compressed previous-stage descriptor scaled by a linear
//! distance falloff. The stage-0 descriptor uses a constant 1 in place of the
//! compressed descriptor, giving 8 columns.

use crate::error::{Error, Result};
use crate::geom::{Neighborhood, Point};
use crate::nn::Linear;
use crate::tensor::{Binding, GatherEntry, Real, Tape, Tensor, Var};

pub const OCTANTS: usize = 8;

/// Octant of a member offset (member minus center):
/// `4*[x>=0] + 2*[y>=0] + [z>=0]`.
#[inline]
pub fn octant_index(offset: Point) -> usize {
    (usize::from(offset[0] >= 0.0) << 2)
        | (usize::from(offset[1] >= 0.0) << 1)
        | usize::from(offset[2] >= 0.0)
}

/// Linear falloff from 1 at the center to 0 at `radius`; the center itself
/// weighs 0.
#[inline]
pub fn distance_weight(dist: f64, radius: f64, is_center: bool) -> f64 {
    if is_center || radius <= 0.0 {
        0.0
    } else {
        (1.0 - dist / radius).clamp(0.0, 1.0)
    }
}

/// Radius used by [`distance_weight`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightRadius {
    /// The grouping radius (ball query).
    Fixed(f64),
    /// Largest member distance of each neighborhood (k-NN grouping).
    NeighborhoodMax,
}

/// How stage-0 descriptors are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitEncoding {
    /// Per-octant sums of distance weights (8 columns).
    #[default]
    OctantDistribution,
    /// Per-octant mean member offset, zeros for empty octants (24 columns).
    OctantCentroid,
}

impl InitEncoding {
    pub fn width(self) -> usize {
        match self {
            Self::OctantDistribution => OCTANTS,
            Self::OctantCentroid => OCTANTS * 3,
        }
    }
}

/// Per-stage descriptor matrix, `N x (8 * a_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<T> {
    pub values: Tensor<T>,
    pub stage: usize,
}

impl<T: Real> Descriptor<T> {
    pub fn a_dim(&self) -> usize {
        self.values.cols() / OCTANTS
    }
}

/// Octant assignment and weight of every neighborhood slot, ready for
/// [`Tape::weighted_gather_sum`].
#[derive(Debug, Clone, PartialEq)]
pub struct OctantPlan<T> {
    entries: Vec<GatherEntry<T>>,
    centers: usize,
}

impl OctantPlan<f64> {
    /// Builds the plan for `nbhs`, whose member indices address the rows of
    /// the previous stage. Within a neighborhood, entries are ordered by
    /// member index so the summation order does not depend on slot order.
    /// Without `distance_weighting` every non-center member weighs 1.
    pub fn build(nbhs: &[Neighborhood], radius: WeightRadius, distance_weighting: bool) -> Self {
        let mut entries = Vec::with_capacity(nbhs.iter().map(Neighborhood::k).sum());
        let mut order: Vec<usize> = Vec::new();
        for (row, nbh) in nbhs.iter().enumerate() {
            let r = match radius {
                WeightRadius::Fixed(r) => r,
                WeightRadius::NeighborhoodMax => nbh.dist.iter().copied().fold(0.0, f64::max),
            };
            order.clear();
            order.extend(0..nbh.k());
            order.sort_by_key(|&j| nbh.members[j]);
            for &j in &order {
                let is_center = nbh.members[j] == nbh.center;
                let weight = if distance_weighting {
                    distance_weight(nbh.dist[j], r, is_center)
                } else if is_center {
                    0.0
                } else {
                    1.0
                };
                let rel = nbh.rel[j];
                entries.push(GatherEntry {
                    out_row: row as u32,
                    block: octant_index([-rel[0], -rel[1], -rel[2]]) as u32,
                    src_row: nbh.members[j] as u32,
                    weight,
                });
            }
        }
        Self {
            entries,
            centers: nbhs.len(),
        }
    }
}

impl<T: Real> OctantPlan<T> {
    pub fn entries(&self) -> &[GatherEntry<T>] {
        &self.entries
    }

    pub fn centers(&self) -> usize {
        self.centers
    }

    pub fn cast<U: Real>(&self) -> OctantPlan<U> {
        OctantPlan {
            entries: self
                .entries
                .iter()
                .map(|e| GatherEntry {
                    out_row: e.out_row,
                    block: e.block,
                    src_row: e.src_row,
                    weight: U::from_f64(e.weight.to_f64()),
                })
                .collect(),
            centers: self.centers,
        }
    }
}

/// Stage-0 descriptor: one neighborhood per point, a constant 1 per member.
pub fn init_descriptor(n_points: usize, plan: &OctantPlan<f64>) -> Result<Descriptor<f64>> {
    if plan.centers() != n_points {
        return Err(Error::InvalidArgument(format!(
            "{} neighborhoods for {n_points} points",
            plan.centers()
        )));
    }
    let mut d = Tensor::zeros(&[n_points, OCTANTS]);
    for e in plan.entries() {
        d.data_mut()[e.out_row as usize * OCTANTS + e.block as usize] += e.weight;
    }
    Ok(Descriptor {
        values: d,
        stage: 0,
    })
}

/// Stage-0 centroid variant: per octant, the mean member offset
/// (member minus center); empty octants stay zero.
pub fn init_descriptor_centroid(
    points: &[Point],
    nbhs: &[Neighborhood],
) -> Result<Descriptor<f64>> {
    if nbhs.len() != points.len() {
        return Err(Error::InvalidArgument(format!(
            "{} neighborhoods for {} points",
            nbhs.len(),
            points.len()
        )));
    }
    let width = OCTANTS * 3;
    let mut d = Tensor::zeros(&[points.len(), width]);
    for (row, nbh) in nbhs.iter().enumerate() {
        let mut sums = [[0.0f64; 3]; OCTANTS];
        let mut counts = [0usize; OCTANTS];
        let mut order: Vec<usize> = (0..nbh.k()).collect();
        order.sort_by_key(|&j| nbh.members[j]);
        for j in order {
            if nbh.members[j] == nbh.center {
                continue;
            }
            let off = [-nbh.rel[j][0], -nbh.rel[j][1], -nbh.rel[j][2]];
            let o = octant_index(off);
            counts[o] += 1;
            for c in 0..3 {
                sums[o][c] += off[c];
            }
        }
        let out = &mut d.data_mut()[row * width..(row + 1) * width];
        for o in 0..OCTANTS {
            if counts[o] > 0 {
                for c in 0..3 {
                    out[o * 3 + c] = sums[o][c] / counts[o] as f64;
                }
            }
        }
    }
    Ok(Descriptor {
        values: d,
        stage: 0,
    })
}

/// Compresses descriptor rows to `a_dim` columns with a linear map.
pub fn compress_descriptor<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    lin: &Linear,
    desc: Var,
) -> Result<Var> {
    let width = tape.value(desc).cols();
    if width != lin.in_dim {
        return Err(Error::ShapeMismatch {
            op: "compress_descriptor",
            left: tape.shape(desc).to_vec(),
            right: vec![lin.out_dim, lin.in_dim],
        });
    }
    lin.forward(tape, bind, desc)
}

/// Next-stage descriptor: per center and octant, the weighted sum of member
/// rows of `compressed`, concatenated in octant order.
pub fn aggregate_descriptor<T: Real>(
    tape: &mut Tape<T>,
    plan: &OctantPlan<T>,
    compressed: Var,
) -> Result<Var> {
    tape.weighted_gather_sum(compressed, plan.entries(), plan.centers(), OCTANTS)
}
