mod common;

use common::{cloud, rng, tensor};
use pdsa_core::geom::{ball_query_group, knn_group, Neighborhood, Point};
use pdsa_core::lcsd::{
    aggregate_descriptor, compress_descriptor, distance_weight, init_descriptor, octant_index,
    OctantPlan, WeightRadius, OCTANTS,
};
use pdsa_core::nn::Linear;
use pdsa_core::tensor::{grad_check, Binding, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// Octant of the member-relative offset, written out from the sign rule.
fn octant_oracle(off: Point) -> usize {
    let bit = |v: f64| usize::from(v >= 0.0);
    4 * bit(off[0]) + 2 * bit(off[1]) + bit(off[2])
}

fn weight_oracle(d: f64, r: f64, center: bool) -> f64 {
    if center {
        0.0
    } else {
        (1.0 - d / r).max(0.0)
    }
}

/// `O[i][o][ch] = sum over slots j of t^o_ij * r_ij * a[member_j][ch]`.
fn aggregate_oracle(
    pts: &[Point],
    nbhs: &[Neighborhood],
    a: &Tensor<f64>,
    radius: f64,
) -> Vec<f64> {
    let w = a.cols();
    let mut out = vec![0.0; nbhs.len() * OCTANTS * w];
    for (i, nb) in nbhs.iter().enumerate() {
        for &m in &nb.members {
            let off = [
                pts[m][0] - pts[nb.center][0],
                pts[m][1] - pts[nb.center][1],
                pts[m][2] - pts[nb.center][2],
            ];
            let d = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
            let r = weight_oracle(d, radius, m == nb.center);
            let o = octant_oracle(off);
            for ch in 0..w {
                out[(i * OCTANTS + o) * w + ch] += r * a.data()[m * w + ch];
            }
        }
    }
    out
}

fn aggregate(nbhs: &[Neighborhood], a: &Tensor<f64>, radius: f64) -> Vec<f64> {
    let plan = OctantPlan::build(nbhs, WeightRadius::Fixed(radius), true);
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let d = aggregate_descriptor(&mut t, &plan, av).unwrap();
    t.value(d).data().to_vec()
}

#[test]
fn init_descriptor_matches_loop_oracle() {
    let mut g = rng(31);
    for trial in 0..20 {
        let pts = cloud(&mut g, 64, 1.0);
        let all: Vec<usize> = (0..64).collect();
        let radius = 0.3 + 0.05 * trial as f64;
        let nbhs = ball_query_group(&pts, &all, radius, 16).unwrap();
        let plan = OctantPlan::build(&nbhs, WeightRadius::Fixed(radius), true);
        let d = init_descriptor(64, &plan).unwrap();
        let ones = Tensor::full(&[64, 1], 1.0);
        let expect = aggregate_oracle(&pts, &nbhs, &ones, radius);
        assert_eq!(d.values.shape(), [64, 8]);
        for (x, y) in d.values.data().iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn aggregate_matches_triple_loop_oracle() {
    let mut g = rng(32);
    for trial in 0..20 {
        let pts = cloud(&mut g, 48, 1.0);
        let centers: Vec<usize> = (0..48).step_by(4).collect();
        let radius = 0.4 + 0.03 * trial as f64;
        let nbhs = ball_query_group(&pts, &centers, radius, 8).unwrap();
        let a = tensor(&mut g, &[48, 3], 2.0);
        let got = aggregate(&nbhs, &a, radius);
        let expect = aggregate_oracle(&pts, &nbhs, &a, radius);
        for (x, y) in got.iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn knn_radius_is_neighborhood_max() {
    let pts = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
    let nbhs = knn_group(&pts, &[0], 3).unwrap();
    let plan = OctantPlan::build(&nbhs, WeightRadius::NeighborhoodMax, true);
    assert!(
        init_descriptor(3, &plan).is_err(),
        "one neighborhood for three points"
    );
    let w: Vec<f64> = plan.entries().iter().map(|e| e.weight).collect();
    assert_eq!(w, [0.0, 0.5, 0.0]);
}

#[test]
fn compress_gradients() {
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "c", 24, 3, &mut rng(33));
    let d = tensor(&mut rng(34), &[10, 24], 1.0);
    let mut params = store.tensors().to_vec();
    params.push(d);
    let err = grad_check(
        |t, v| {
            let bind = Binding::from_vars(v[..2].to_vec());
            let a = compress_descriptor(t, &bind, &lin, v[2])?;
            let w = t.constant(Tensor::from_fn(&[10, 3], |i| (i as f64 * 0.37).sin()));
            let z = t.mul(a, w)?;
            Ok(t.sum_all(z))
        },
        &params,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let mut t = Tape::<f64>::new();
    let bind = store.bind(&mut t);
    let wrong = t.constant(Tensor::zeros(&[2, 8]));
    assert!(compress_descriptor(&mut t, &bind, &lin, wrong).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_octant_per_offset(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0, zero_mask in 0u8..8) {
        let mut off = [x, y, z];
        for (i, v) in off.iter_mut().enumerate() {
            if zero_mask & (1 << i) != 0 {
                *v = 0.0;
            }
        }
        let o = octant_index(off);
        prop_assert!(o < 8);
        prop_assert_eq!(o, octant_oracle(off));
        let fired = (0..8).filter(|&q| q == o).count();
        prop_assert_eq!(fired, 1);
    }

    #[test]
    fn distance_weight_bounded_and_monotone(r in 0.01f64..5.0, d1 in 0.0f64..10.0, d2 in 0.0f64..10.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (wl, wh) = (distance_weight(lo, r, false), distance_weight(hi, r, false));
        prop_assert!((0.0..=1.0).contains(&wl) && (0.0..=1.0).contains(&wh));
        prop_assert!(wl >= wh);
        prop_assert_eq!(distance_weight(lo, r, true), 0.0);
    }

    #[test]
    fn aggregate_ignores_member_order(seed in any::<u64>()) {
        let mut g = rng(seed);
        let pts = cloud(&mut g, 40, 1.0);
        let centers: Vec<usize> = (0..40).step_by(5).collect();
        let nbhs = ball_query_group(&pts, &centers, 0.9, 8).unwrap();
        let shuffled: Vec<Neighborhood> = nbhs
            .iter()
            .map(|nb| {
                let mut order: Vec<usize> = (0..nb.k()).collect();
                order.shuffle(&mut g);
                Neighborhood {
                    center: nb.center,
                    members: order.iter().map(|&j| nb.members[j]).collect(),
                    rel: order.iter().map(|&j| nb.rel[j]).collect(),
                    dist: order.iter().map(|&j| nb.dist[j]).collect(),
                    refilled: nb.refilled,
                }
            })
            .collect();
        let a = tensor(&mut g, &[40, 3], 1.0);
        let x = aggregate(&nbhs, &a, 0.9);
        let y = aggregate(&shuffled, &a, 0.9);
        prop_assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn aggregate_is_linear_in_members(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut g = rng(seed);
        let pts = cloud(&mut g, 30, 1.0);
        let centers: Vec<usize> = (0..30).step_by(3).collect();
        let nbhs = ball_query_group(&pts, &centers, 0.8, 6).unwrap();
        let a = tensor(&mut g, &[30, 2], 1.0);
        let scaled = Tensor::from_fn(&[30, 2], |i| a.data()[i] * c);
        let x = aggregate(&nbhs, &a, 0.8);
        let y = aggregate(&nbhs, &scaled, 0.8);
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p * c - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn descriptors_ignore_translation(seed in any::<u64>(), shift in -20.0f64..20.0) {
        let mut g = rng(seed);
        let pts = cloud(&mut g, 40, 1.0);
        let moved: Vec<Point> = pts.iter().map(|p| [p[0] + shift, p[1] - shift, p[2] + 0.5 * shift]).collect();
        let all: Vec<usize> = (0..40).collect();
        let d = |p: &[Point]| {
            let nbhs = ball_query_group(p, &all, 0.7, 10).unwrap();
            let plan = OctantPlan::build(&nbhs, WeightRadius::Fixed(0.7), true);
            (nbhs.iter().map(|n| n.members.clone()).collect::<Vec<_>>(), init_descriptor(40, &plan).unwrap().values)
        };
        let (ma, da) = d(&pts);
        let (mb, db) = d(&moved);
        // membership can only differ for points within rounding of the radius
        if ma == mb {
            for (x, y) in da.data().iter().zip(db.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
