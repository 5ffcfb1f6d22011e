mod common;

use common::{cloud, linear_oracle, mlp_oracle, randomize, rng, tensor};
use pdsa_core::cdip::{
    cdip_correction, corrected_neighbor_features, neighbor_row_variance, CdipParams,
    NeighborCorrection,
};
use pdsa_core::cics::{
    apply_cics, sat_full, sat_keypoint, select_key_points, KeySelection, SatParams,
};
use pdsa_core::geom::{ball_query_group, Neighborhood, Point, SlotLayout};
use pdsa_core::nn::Mlp;
use pdsa_core::rng::Rng;
use pdsa_core::tensor::{grad_check, Binding, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

struct Fixture {
    store: ParamStore<f64>,
    cdip: CdipParams,
    mlp: Mlp,
}

fn fixture(seed: u64, c_in: usize, c: usize) -> Fixture {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let cdip = CdipParams::new(&mut store, "cdip", 24, 8, 16, c, &mut g);
    let mlp = Mlp::new(&mut store, "m", &[c_in + 3, c, c], false, &mut g);
    randomize(&mut store, &mut g, 1.0);
    Fixture { store, cdip, mlp }
}

fn layout(groups: usize, k: usize, members: usize, g: &mut Rng) -> SlotLayout {
    SlotLayout {
        k,
        members: (0..groups * k)
            .map(|_| g.random_range(0..members))
            .collect(),
        owners: (0..groups)
            .flat_map(|i| std::iter::repeat_n(i, k))
            .collect(),
    }
}

#[test]
fn cdip_gradients() {
    let f = fixture(41, 0, 4);
    let mut g = rng(42);
    let lay = layout(3, 4, 5, &mut g);
    let mut params = f.store.tensors().to_vec();
    let n = params.len();
    params.push(tensor(&mut g, &[3, 24], 1.0));
    params.push(tensor(&mut g, &[5, 8], 1.0));
    let err = grad_check(
        |t, v| {
            let bind = Binding::from_vars(v[..n].to_vec());
            let corr = cdip_correction(t, &bind, &f.cdip, v[n], v[n + 1], &lay)?;
            let wv = t.mul(corr.weights, corr.codes)?;
            let probe = t.constant(Tensor::from_fn(&[3, 4, 4], |i| {
                ((i * 5 % 11) as f64 - 5.0) / 4.0
            }));
            let a = t.mul(wv, probe)?;
            let b = t.mul(corr.weights, probe)?;
            let s = t.add(a, b)?;
            Ok(t.sum_all(s))
        },
        &params,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn corrected_features_match_row_oracle() {
    let f = fixture(43, 5, 6);
    let mut g = rng(44);
    let (groups, k) = (4, 3);
    let members = tensor(&mut g, &[groups * k, 5], 1.0);
    let rel = tensor(&mut g, &[groups * k, 3], 0.5);
    let w = tensor(&mut g, &[groups, k, 6], 1.0);
    let v = tensor(&mut g, &[groups, k, 6], 1.0);
    let mut t = Tape::new();
    let bind = f.store.bind(&mut t);
    let (mv, rv) = (t.constant(members.clone()), t.constant(rel.clone()));
    let (wv, vv) = (t.constant(w.clone()), t.constant(v.clone()));
    let corr = NeighborCorrection {
        weights: wv,
        codes: vv,
    };
    let out =
        corrected_neighbor_features(&mut t, &bind, &f.mlp, Some(mv), rv, Some(&corr), k).unwrap();
    assert_eq!(t.shape(out), [groups, k, 6]);
    for s in 0..groups * k {
        let mut x = members.row(s).to_vec();
        x.extend_from_slice(rel.row(s));
        let base = mlp_oracle(&f.store, "m", &x);
        for c in 0..6 {
            let expect = base[c] + w.data()[s * 6 + c] * v.data()[s * 6 + c];
            assert!((t.value(out).data()[s * 6 + c] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_base_with_uniform_weights_gives_codes_over_k() {
    let mut f = fixture(45, 0, 4);
    for t in f.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = rng(46);
    let k = 5;
    let v = tensor(&mut g, &[2, k, 4], 1.0);
    let mut t = Tape::new();
    let bind = f.store.bind(&mut t);
    let rel = t.constant(tensor(&mut g, &[2 * k, 3], 1.0));
    let corr = NeighborCorrection {
        weights: t.constant(Tensor::full(&[2, k, 4], 1.0 / k as f64)),
        codes: t.constant(v.clone()),
    };
    let out =
        corrected_neighbor_features(&mut t, &bind, &f.mlp, None, rel, Some(&corr), k).unwrap();
    for (a, b) in t.value(out).data().iter().zip(v.data()) {
        assert!((a - b / k as f64).abs() <= 1e-15);
    }
}

fn variance_oracle(rows: &[Vec<f64>]) -> (f64, f64) {
    let k = rows.len();
    let c = rows[0].len();
    let mean: Vec<f64> = (0..c)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k as f64)
        .collect();
    let mv = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / k as f64;
    let mut mp = 0.0f64;
    for a in rows {
        for b in rows {
            mp = mp.max(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    (mv, mp)
}

#[test]
fn row_variance_matches_double_loop() {
    let mut g = rng(47);
    for _ in 0..50 {
        let k = g.random_range(1..10);
        let c = g.random_range(1..8);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..c).map(|_| g.random_range(-3.0..3.0)).collect())
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let (a, b) = neighbor_row_variance(&flat, k, c);
        let (x, y) = variance_oracle(&rows);
        assert!((a - x).abs() <= 1e-12 && (b - y).abs() <= 1e-12);
    }
    let (mv, mp) = neighbor_row_variance(&[0.0, 0.0, 3.0, 0.0], 2, 2);
    assert_eq!((mv, mp), (9.0 / 4.0, 3.0));
}

/// O(N^2) attention written with explicit loops.
fn sat_oracle(store: &ParamStore<f64>, d: &Tensor<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = d.rows();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| linear_oracle(store, "sat.q", d.row(i)))
        .collect();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| linear_oracle(store, "sat.k", d.row(i)))
        .collect();
    let v: Vec<Vec<f64>> = (0..n)
        .map(|i| linear_oracle(store, "sat.v", d.row(i)))
        .collect();
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let mut attn = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mixed: Vec<f64> = (0..v[0].len())
            .map(|c| (0..n).map(|j| a[j] * v[j][c]).sum())
            .collect();
        out.push(linear_oracle(store, "sat.out", &mixed));
        attn.push(a);
    }
    (attn, out)
}

fn sat_fixture(seed: u64) -> (ParamStore<f64>, SatParams) {
    let mut store = ParamStore::new();
    let p = SatParams::new(&mut store, "sat", 24, 24, 6, &mut rng(seed));
    (store, p)
}

#[test]
fn sat_full_matches_loop_oracle() {
    let (store, p) = sat_fixture(48);
    let mut g = rng(49);
    for _ in 0..10 {
        let d = tensor(&mut g, &[8, 24], 1.0);
        let mut t = Tape::new();
        let bind = store.bind(&mut t);
        let dv = t.constant(d.clone());
        let out = sat_full(&mut t, &bind, &p, dv).unwrap();
        let (attn, expect) = sat_oracle(&store, &d);
        for i in 0..8 {
            let row = &t.value(out.attention).row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..8 {
                assert!((row[j] - attn[i][j]).abs() <= 1e-10);
            }
            for c in 0..6 {
                let x = t.value(out.corrections).row(i)[c];
                assert!((x - expect[i][c]).abs() <= 1e-10 * expect[i][c].abs().max(1.0));
            }
        }
    }
}

#[test]
fn sat_keypoint_half_matches_key_subset_oracle() {
    let (store, p) = sat_fixture(50);
    let mut g = rng(51);
    let pts = cloud(&mut g, 10, 1.0);
    let all: Vec<usize> = (0..10).collect();
    let nbhs = ball_query_group(&pts, &all, 0.8, 4).unwrap();
    let scores: Vec<f64> = (0..40).map(|_| g.random_range(0.0..1.0)).collect();
    let sel = select_key_points(&scores, &nbhs, &pts, 0.5).unwrap();
    assert_eq!(sel.keys.len(), 5);
    let d = tensor(&mut g, &[10, 24], 1.0);
    let sub = Tensor::new(
        vec![5, 24],
        sel.keys.iter().flat_map(|&k| d.row(k).to_vec()).collect(),
    )
    .unwrap();
    let (_, key_out) = sat_oracle(&store, &sub);
    let mut t = Tape::new();
    let bind = store.bind(&mut t);
    let dv = t.constant(d);
    let out = sat_keypoint(&mut t, &bind, &p, dv, &sel).unwrap();
    for i in 0..10 {
        let pos = sel.keys.iter().position(|&k| k == sel.assign[i]).unwrap();
        for c in 0..6 {
            let x = t.value(out).row(i)[c];
            assert!((x - key_out[pos][c]).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }
}

#[test]
fn uniform_scores_count_memberships() {
    let mut g = rng(52);
    let pts = cloud(&mut g, 30, 1.0);
    let centers: Vec<usize> = (0..30).step_by(2).collect();
    let nbhs = ball_query_group(&pts, &centers, 0.6, 6).unwrap();
    let coords: Vec<Point> = centers.iter().map(|&c| pts[c]).collect();
    let scores = vec![1.0 / 6.0; 15 * 6];
    let sel = select_key_points(&scores, &nbhs, &coords, 0.4).unwrap();
    // counting oracle: slots in which each center appears as a member
    let count: Vec<usize> = centers
        .iter()
        .map(|&c| {
            nbhs.iter()
                .flat_map(|n| &n.members)
                .filter(|&&m| m == c)
                .count()
        })
        .collect();
    let mut ranked: Vec<usize> = (0..15).collect();
    ranked.sort_by(|&a, &b| count[b].cmp(&count[a]).then(a.cmp(&b)));
    let mut expect: Vec<usize> = ranked[..6].to_vec();
    expect.sort_unstable();
    assert_eq!(sel.keys, expect);
}

fn nbhs_for(seed: u64, n: usize) -> (Vec<Point>, Vec<Neighborhood>, Vec<f64>) {
    let mut g = rng(seed);
    let pts = cloud(&mut g, n, 1.0);
    let all: Vec<usize> = (0..n).collect();
    let nbhs = ball_query_group(&pts, &all, 0.7, 5).unwrap();
    let scores = (0..n * 5).map(|_| g.random_range(0.0..1.0)).collect();
    (pts, nbhs, scores)
}

#[test]
fn apply_cics_examples() {
    let mut g = rng(53);
    let f = tensor(&mut g, &[4, 3], 1.0);
    let c1 = tensor(&mut g, &[4, 3], 1.0);
    let c2 = tensor(&mut g, &[4, 3], 1.0);
    let mut t = Tape::<f64>::new();
    let (fv, a, b) = (
        t.constant(f.clone()),
        t.constant(c1.clone()),
        t.constant(c2.clone()),
    );
    let once = apply_cics(&mut t, fv, a).unwrap();
    let twice = apply_cics(&mut t, once, b).unwrap();
    for i in 0..12 {
        assert_eq!(t.value(once).data()[i], f.data()[i] + c1.data()[i]);
        assert!(
            (t.value(twice).data()[i] - (f.data()[i] + c1.data()[i] + c2.data()[i])).abs() <= 1e-15
        );
    }
    let wrong = t.constant(Tensor::zeros(&[3, 3]));
    assert!(apply_cics(&mut t, fv, wrong).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_are_member_distributions(seed in any::<u64>(), k in 1usize..8) {
        let f = fixture(seed, 0, 4);
        let mut g = rng(seed ^ 1);
        let lay = layout(3, k, 6, &mut g);
        let mut t = Tape::new();
        let bind = f.store.bind(&mut t);
        let dn = t.constant(tensor(&mut g, &[3, 24], 1.0));
        let dm = t.constant(tensor(&mut g, &[6, 8], 1.0));
        let corr = cdip_correction(&mut t, &bind, &f.cdip, dn, dm, &lay).unwrap();
        let w = t.value(corr.weights).data();
        for grp in 0..3 {
            for c in 0..4 {
                let col: Vec<f64> = (0..k).map(|j| w[(grp * k + j) * 4 + c]).collect();
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(col.iter().all(|&x| x > 0.0 && x <= 1.0));
            }
        }
    }

    #[test]
    fn cdip_is_member_permutation_equivariant(seed in any::<u64>()) {
        let f = fixture(seed, 0, 4);
        let mut g = rng(seed ^ 2);
        let k = 5;
        let lay = layout(2, k, 7, &mut g);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut g);
        let permuted = SlotLayout {
            k,
            members: (0..2).flat_map(|grp| perm.iter().map(move |&j| (grp, j))).map(|(grp, j)| lay.members[grp * k + j]).collect(),
            owners: lay.owners.clone(),
        };
        let dn = tensor(&mut g, &[2, 24], 1.0);
        let dm = tensor(&mut g, &[7, 8], 1.0);
        let run = |l: &SlotLayout| {
            let mut t = Tape::new();
            let bind = f.store.bind(&mut t);
            let (a, b) = (t.constant(dn.clone()), t.constant(dm.clone()));
            let c = cdip_correction(&mut t, &bind, &f.cdip, a, b, l).unwrap();
            (t.value(c.weights).data().to_vec(), t.value(c.codes).data().to_vec())
        };
        let (w0, v0) = run(&lay);
        let (w1, v1) = run(&permuted);
        for grp in 0..2 {
            for (pos, &j) in perm.iter().enumerate() {
                for c in 0..4 {
                    let (a, b) = ((grp * k + pos) * 4 + c, (grp * k + j) * 4 + c);
                    prop_assert!((w1[a] - w0[b]).abs() <= 1e-14);
                    prop_assert_eq!(v1[a], v0[b]);
                }
            }
        }
    }

    #[test]
    fn constant_weights_make_pooling_order_free(seed in any::<u64>()) {
        let mut f = fixture(seed, 2, 4);
        // constant M_W output: zero its last dense map
        let last = f.cdip.mw.last_linear();
        for id in [last.weight, last.bias] {
            f.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = rng(seed ^ 3);
        let k = 6;
        let lay = layout(1, k, 8, &mut g);
        let feats = tensor(&mut g, &[8, 2], 1.0);
        let rel = tensor(&mut g, &[k, 3], 1.0);
        let dn = tensor(&mut g, &[1, 24], 1.0);
        let dm = tensor(&mut g, &[8, 8], 1.0);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut g);
        let run = |order: &[usize]| {
            let l = SlotLayout { k, members: order.iter().map(|&j| lay.members[j]).collect(), owners: vec![0; k] };
            let r = Tensor::new(vec![k, 3], order.iter().flat_map(|&j| rel.row(j).to_vec()).collect()).unwrap();
            let mut t = Tape::new();
            let bind = f.store.bind(&mut t);
            let (a, b, fv, rv) = (t.constant(dn.clone()), t.constant(dm.clone()), t.constant(feats.clone()), t.constant(r));
            let corr = cdip_correction(&mut t, &bind, &f.cdip, a, b, &l).unwrap();
            let mem = t.gather_rows(fv, &l.members).unwrap();
            let nf = corrected_neighbor_features(&mut t, &bind, &f.mlp, Some(mem), rv, Some(&corr), k).unwrap();
            let (p, _) = t.max_reduce(nf, 1).unwrap();
            t.value(p).data().to_vec()
        };
        let ident: Vec<usize> = (0..k).collect();
        let (x, y) = (run(&ident), run(&perm));
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sat_full_is_row_permutation_equivariant(seed in any::<u64>(), n in 1usize..10) {
        let (store, p) = sat_fixture(seed);
        let mut g = rng(seed ^ 4);
        let d = tensor(&mut g, &[n, 24], 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut g);
        let mut t = Tape::new();
        let bind = store.bind(&mut t);
        let dv = t.constant(d);
        let a = sat_full(&mut t, &bind, &p, dv).unwrap().corrections;
        let pd = t.gather_rows(dv, &perm).unwrap();
        let b = sat_full(&mut t, &bind, &p, pd).unwrap().corrections;
        for (i, &j) in perm.iter().enumerate() {
            for (x, y) in t.value(b).row(i).iter().zip(t.value(a).row(j)) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn keypoint_at_rho_one_equals_full(seed in any::<u64>(), n in 1usize..12) {
        let (pts, nbhs, scores) = nbhs_for(seed, n);
        let sel = select_key_points(&scores, &nbhs, &pts, 1.0).unwrap();
        let (store, p) = sat_fixture(seed ^ 5);
        let mut t = Tape::new();
        let bind = store.bind(&mut t);
        let dv = t.constant(tensor(&mut rng(seed ^ 6), &[n, 24], 1.0));
        let full = sat_full(&mut t, &bind, &p, dv).unwrap().corrections;
        let kp = sat_keypoint(&mut t, &bind, &p, dv, &sel).unwrap();
        for (x, y) in t.value(full).data().iter().zip(t.value(kp).data()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn key_selection_contract(seed in any::<u64>(), n in 1usize..30, rho in 0.01f64..1.0) {
        let (pts, nbhs, scores) = nbhs_for(seed, n);
        let sel = select_key_points(&scores, &nbhs, &pts, rho).unwrap();
        prop_assert_eq!(sel.keys.len(), KeySelection::key_count(n, rho));
        prop_assert_eq!(sel.keys.len(), ((rho * n as f64).ceil() as usize).clamp(1, n));
        let mut uniq = sel.keys.clone();
        uniq.dedup();
        prop_assert_eq!(&uniq, &sel.keys);
        prop_assert!(sel.keys.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sel.assign.iter().all(|a| sel.keys.contains(a)));
        // ties: equal scores everywhere must still give one fixed answer
        let flat = vec![0.5; scores.len()];
        let a = select_key_points(&flat, &nbhs, &pts, rho).unwrap();
        let b = select_key_points(&flat, &nbhs, &pts, rho).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn correction_for(
    f: &Fixture,
    lay: &SlotLayout,
    dn: &Tensor<f64>,
    dm: &Tensor<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let bind = f.store.bind(&mut t);
    let (a, b) = (t.constant(dn.clone()), t.constant(dm.clone()));
    let c = cdip_correction(&mut t, &bind, &f.cdip, a, b, lay).unwrap();
    (
        t.value(c.weights).data().to_vec(),
        t.value(c.codes).data().to_vec(),
    )
}

#[test]
fn single_member_gets_all_weight() {
    let f = fixture(54, 0, 4);
    let mut g = rng(55);
    let lay = layout(3, 1, 4, &mut g);
    let (w, _) = correction_for(
        &f,
        &lay,
        &tensor(&mut g, &[3, 24], 1.0),
        &tensor(&mut g, &[4, 8], 1.0),
    );
    assert!(w.iter().all(|&x| x == 1.0));
}

#[test]
fn equal_deltas_give_uniform_weights() {
    let mut f = fixture(56, 0, 4);
    for id in [f.cdip.lk.weight, f.cdip.lk.bias] {
        f.store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let mut g = rng(57);
    let k = 6;
    let lay = layout(2, k, 9, &mut g);
    let (w, _) = correction_for(
        &f,
        &lay,
        &tensor(&mut g, &[2, 24], 1.0),
        &tensor(&mut g, &[9, 8], 1.0),
    );
    assert!(w.iter().all(|&x| (x - 1.0 / k as f64).abs() <= 1e-15));
}

#[test]
fn zero_codes_reduce_to_plain_embedding() {
    let f = fixture(58, 3, 5);
    let mut g = rng(59);
    let k = 4;
    let mut t = Tape::new();
    let bind = f.store.bind(&mut t);
    let mem = t.constant(tensor(&mut g, &[2 * k, 3], 1.0));
    let rel = t.constant(tensor(&mut g, &[2 * k, 3], 1.0));
    let corr = NeighborCorrection {
        weights: t.constant(tensor(&mut g, &[2, k, 5], 1.0)),
        codes: t.constant(Tensor::zeros(&[2, k, 5])),
    };
    let plain =
        corrected_neighbor_features(&mut t, &bind, &f.mlp, Some(mem), rel, None, k).unwrap();
    let fixed =
        corrected_neighbor_features(&mut t, &bind, &f.mlp, Some(mem), rel, Some(&corr), k).unwrap();
    assert_eq!(t.value(plain).data(), t.value(fixed).data());
}
