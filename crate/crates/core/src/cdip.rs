//! Descriptor-driven denoising of the neighbor feature matrix.
//!
//! Each member is compared with its whole neighborhood through the
//! difference of embedded descriptors, `Lq(d_center_next) - Lk(d_member)`.
//! Two MLPs turn that difference into per-channel weights (softmax over the
//! members) and corrective codes; their product is added to the embedded
//! neighbor rows before pooling.

use crate::error::{Error, Result};
use crate::geom::SlotLayout;
use crate::nn::{Linear, Mlp};
use crate::rng::Rng;
use crate::tensor::{Binding, ParamStore, Real, Tape, Var};

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdipParams {
    pub lq: Linear,
    pub lk: Linear,
    pub mw: Mlp,
    pub mv: Mlp,
    pub hidden: usize,
}

impl CdipParams {
    /// `next_width`: width of the neighborhood-level descriptor;
    /// `member_width`: width of the member descriptors; `channels`: width of
    /// the neighbor feature rows being corrected.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        next_width: usize,
        member_width: usize,
        hidden: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            lq: Linear::new(store, &format!("{name}.lq"), next_width, hidden, rng),
            lk: Linear::new(store, &format!("{name}.lk"), member_width, hidden, rng),
            mw: Mlp::new(
                store,
                &format!("{name}.mw"),
                &[hidden, hidden, channels],
                true,
                rng,
            ),
            mv: Mlp::new(
                store,
                &format!("{name}.mv"),
                &[hidden, hidden, channels],
                true,
                rng,
            ),
            hidden,
        }
    }

    pub fn channels(&self) -> usize {
        self.mw.out_dim()
    }
}

/// Per-slot weights and codes, both `[groups, k, channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborCorrection {
    pub weights: Var,
    pub codes: Var,
}

/// Computes weights (softmax over the `k` members, per channel) and codes for
/// every slot of `layout`. `d_next` has one row per neighborhood; `d_members`
/// has one row per point addressed by `layout.members`.
pub fn cdip_correction<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &CdipParams,
    d_next: Var,
    d_members: Var,
    layout: &SlotLayout,
) -> Result<NeighborCorrection> {
    for (v, lin, what) in [
        (d_next, &params.lq, "cdip query"),
        (d_members, &params.lk, "cdip key"),
    ] {
        if tape.value(v).cols() != lin.in_dim {
            return Err(Error::ShapeMismatch {
                op: what,
                left: tape.shape(v).to_vec(),
                right: vec![lin.out_dim, lin.in_dim],
            });
        }
    }
    if layout.k == 0 {
        return Err(Error::InvalidArgument("empty neighborhoods".into()));
    }
    let groups = layout.groups();
    let c = params.channels();
    let q = params.lq.forward(tape, bind, d_next)?;
    let q = tape.gather_rows(q, &layout.owners)?;
    let kx = params.lk.forward(tape, bind, d_members)?;
    let kx = tape.gather_rows(kx, &layout.members)?;
    let delta = tape.sub(q, kx)?;
    let logits = params.mw.forward(tape, bind, delta)?;
    let logits = tape.reshape(logits, &[groups, layout.k, c])?;
    let weights = tape.softmax(logits, 1)?;
    let codes = params.mv.forward(tape, bind, delta)?;
    let codes = tape.reshape(codes, &[groups, layout.k, c])?;
    Ok(NeighborCorrection { weights, codes })
}

/// Embedded neighbor rows `M(concat(f_member, rel))`, plus `weights * codes`
/// when a correction is given. `members` is `[groups * k, c_in]` (absent for
/// the first stage), `rel` is `[groups * k, 3]`. Returns `[groups, k, c]`.
pub fn corrected_neighbor_features<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    mlp: &Mlp,
    members: Option<Var>,
    rel: Var,
    correction: Option<&NeighborCorrection>,
    k: usize,
) -> Result<Var> {
    let input = match members {
        Some(f) => tape.concat_cols(&[f, rel])?,
        None => rel,
    };
    let slots = tape.value(input).rows();
    if k == 0 || !slots.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{slots} slots do not split into groups of {k}"
        )));
    }
    let base = mlp.forward(tape, bind, input)?;
    let base = tape.reshape(base, &[slots / k, k, mlp.out_dim()])?;
    match correction {
        Some(corr) => {
            let term = tape.mul(corr.weights, corr.codes)?;
            tape.add(base, term)
        }
        None => Ok(base),
    }
}

/// Spread of the rows of a `k x c` neighbor matrix: the mean squared distance
/// of rows to their centroid, and the largest pairwise row distance.
pub fn neighbor_row_variance(rows: &[f64], k: usize, c: usize) -> (f64, f64) {
    assert!(k >= 1 && rows.len() == k * c, "expected a {k} x {c} matrix");
    let mut centroid = vec![0.0; c];
    for r in rows.chunks_exact(c) {
        for (m, &v) in centroid.iter_mut().zip(r) {
            *m += v;
        }
    }
    centroid.iter_mut().for_each(|m| *m /= k as f64);
    let mean_var = rows
        .chunks_exact(c)
        .map(|r| {
            r.iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / k as f64;
    let mut max_pair = 0.0f64;
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = rows[a * c..(a + 1) * c]
                .iter()
                .zip(&rows[b * c..(b + 1) * c])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            max_pair = max_pair.max(d.sqrt());
        }
    }
    (mean_var, max_pair)
}

/// Channel mean of `[groups, k, c]` weights: one score per slot.
pub fn slot_weight_means<T: Real>(weights: &[T], c: usize) -> Vec<f64> {
    weights
        .chunks_exact(c)
        .map(|r| r.iter().map(|&v| Real::to_f64(v)).sum::<f64>() / c as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ball_query_group;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn setup(channels: usize) -> (ParamStore<f64>, CdipParams, Mlp) {
        let mut store = ParamStore::new();
        let mut rng = seeded(3);
        let p = CdipParams::new(&mut store, "cdip", 24, 8, 16, channels, &mut rng);
        let m = Mlp::new(&mut store, "m", &[3, channels, channels], false, &mut rng);
        (store, p, m)
    }

    #[test]
    fn single_member_weights_are_one() {
        let (store, p, _) = setup(4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let dn = tape.constant(Tensor::from_fn(&[1, 24], |i| i as f64 * 0.1));
        let dm = tape.constant(Tensor::from_fn(&[1, 8], |i| i as f64 * -0.2));
        let layout = SlotLayout {
            k: 1,
            members: vec![0],
            owners: vec![0],
        };
        let corr = cdip_correction(&mut tape, &bind, &p, dn, dm, &layout).unwrap();
        assert_eq!(tape.shape(corr.weights), [1, 1, 4]);
        assert!(tape.value(corr.weights).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn identical_deltas_give_uniform_weights() {
        let (mut store, p, _) = setup(4);
        *store.get_mut(p.lk.weight) = Tensor::zeros(&[16, 8]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let dn = tape.constant(Tensor::from_fn(&[1, 24], |i| (i as f64).sin()));
        let dm = tape.constant(Tensor::from_fn(&[5, 8], |i| (i as f64).cos()));
        let layout = SlotLayout {
            k: 5,
            members: vec![0, 1, 2, 3, 4],
            owners: vec![0; 5],
        };
        let corr = cdip_correction(&mut tape, &bind, &p, dn, dm, &layout).unwrap();
        for &w in tape.value(corr.weights).data() {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch() {
        let (store, p, _) = setup(4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let dn = tape.constant(Tensor::zeros(&[1, 8]));
        let dm = tape.constant(Tensor::zeros(&[1, 8]));
        let layout = SlotLayout {
            k: 1,
            members: vec![0],
            owners: vec![0],
        };
        assert!(matches!(
            cdip_correction(&mut tape, &bind, &p, dn, dm, &layout),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_codes_reduce_to_plain_embedding() {
        let (store, _, m) = setup(4);
        let pts: Vec<[f64; 3]> = (0..6)
            .map(|i| [0.1 * i as f64, 0.05, -0.03 * i as f64])
            .collect();
        let nbhs = ball_query_group(&pts, &[0, 3], 1.0, 4).unwrap();
        let rel: Vec<f64> = nbhs
            .iter()
            .flat_map(|n| n.rel.iter().flatten().copied())
            .collect();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let relv = tape.constant(Tensor::new(vec![8, 3], rel).unwrap());
        let plain = corrected_neighbor_features(&mut tape, &bind, &m, None, relv, None, 4).unwrap();
        let w = tape.constant(Tensor::full(&[2, 4, 4], 0.25));
        let v = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let corr = NeighborCorrection {
            weights: w,
            codes: v,
        };
        let fixed =
            corrected_neighbor_features(&mut tape, &bind, &m, None, relv, Some(&corr), 4).unwrap();
        assert_eq!(tape.value(plain), tape.value(fixed));
    }

    #[test]
    fn row_variance_cases() {
        assert_eq!(
            neighbor_row_variance(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 3, 2),
            (0.0, 0.0)
        );
        let (mv, mp) = neighbor_row_variance(&[0.0, 0.0, 3.0, 4.0], 2, 2);
        assert!((mp - 5.0).abs() < 1e-12);
        assert!((mv - 25.0 / 4.0).abs() < 1e-12);
    }
}
