//! Global attention over descriptors and key-point selection.
//!
//! Pooled center features receive an additive correction computed by
//! single-head self-attention over the stage descriptors. For large stages
//! attention runs only over ranked key centers; every other center copies the
//! correction of the key it is assigned to.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::{dist_sq, Neighborhood, Point};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::tensor::{Binding, ParamStore, Real, Tape, Var};

pub const DEFAULT_RHO: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SatParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub scale: f64,
}

impl SatParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        attn_width: usize,
        out_width: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, attn_width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, attn_width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, attn_width, rng),
            out: Linear::new(store, &format!("{name}.out"), attn_width, out_width, rng),
            scale: 1.0 / (attn_width as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SatOutput {
    /// `[N, out_width]` corrections.
    pub corrections: Var,
    /// `[N, N]` row-stochastic attention matrix.
    pub attention: Var,
}

/// Scaled dot-product self-attention over all rows of `desc`, followed by
/// the output projection.
pub fn sat_full<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &SatParams,
    desc: Var,
) -> Result<SatOutput> {
    if tape.value(desc).rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let q = params.q.forward(tape, bind, desc)?;
    let k = params.k.forward(tape, bind, desc)?;
    let v = params.v.forward(tape, bind, desc)?;
    let scores = tape.matmul(q, k, true)?;
    let scores = tape.scale(scores, T::from_f64(params.scale));
    let attention = tape.softmax(scores, 1)?;
    let mixed = tape.matmul(attention, v, false)?;
    let corrections = params.out.forward(tape, bind, mixed)?;
    Ok(SatOutput {
        corrections,
        attention,
    })
}

/// Ranked representatives among the centers of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySelection {
    /// Ascending center ordinals.
    pub keys: Vec<usize>,
    /// Key ordinal each center copies its correction from.
    pub assign: Vec<usize>,
    pub rho: f64,
}

impl KeySelection {
    pub fn key_count(n: usize, rho: f64) -> usize {
        ((rho * n as f64).ceil() as usize).clamp(1, n)
    }
}

/// Scores every center by the total channel-mean weight it receives as a
/// member of any neighborhood, keeps the top `ceil(rho * N)` (ties to the
/// lowest ordinal) and assigns each center to a key.
///
/// `slot_scores` holds one value per slot of `nbhs` (neighborhood-major),
/// `nbhs[i].center` is the point index of center `i`, and `center_coords`
/// are the center positions. A key is assigned to itself; any other center
/// takes the best-scoring key among its members, or the nearest key when none
/// of its members is a key.
pub fn select_key_points(
    slot_scores: &[f64],
    nbhs: &[Neighborhood],
    center_coords: &[Point],
    rho: f64,
) -> Result<KeySelection> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must be in (0, 1], got {rho}"
        )));
    }
    let n = nbhs.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if center_coords.len() != n
        || slot_scores.len() != nbhs.iter().map(Neighborhood::k).sum::<usize>()
    {
        return Err(Error::InvalidArgument(
            "slot scores / center coordinates do not match the neighborhoods".into(),
        ));
    }
    let ordinal: HashMap<usize, usize> = nbhs
        .iter()
        .enumerate()
        .map(|(i, nb)| (nb.center, i))
        .collect();

    let mut score = vec![0.0f64; n];
    let mut slot = 0;
    for nb in nbhs {
        for &m in &nb.members {
            if let Some(&c) = ordinal.get(&m) {
                score[c] += slot_scores[slot];
            }
            slot += 1;
        }
    }

    let count = KeySelection::key_count(n, rho);
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut keys: Vec<usize> = ranked[..count].to_vec();
    keys.sort_unstable();
    let mut is_key = vec![false; n];
    for &k in &keys {
        is_key[k] = true;
    }

    let assign = (0..n)
        .map(|i| {
            if is_key[i] {
                return i;
            }
            let inside = nbhs[i]
                .members
                .iter()
                .filter_map(|m| ordinal.get(m).copied())
                .filter(|&c| is_key[c])
                .min_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
            inside.unwrap_or_else(|| {
                *keys
                    .iter()
                    .min_by(|&&a, &&b| {
                        dist_sq(center_coords[a], center_coords[i])
                            .total_cmp(&dist_sq(center_coords[b], center_coords[i]))
                            .then(a.cmp(&b))
                    })
                    .unwrap()
            })
        })
        .collect();
    Ok(KeySelection { keys, assign, rho })
}

/// Attention restricted to the key rows of `desc`; each center receives the
/// correction of its assigned key.
pub fn sat_keypoint<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &SatParams,
    desc: Var,
    sel: &KeySelection,
) -> Result<Var> {
    let n = tape.value(desc).rows();
    if sel.assign.len() != n {
        return Err(Error::InvalidArgument(format!(
            "key selection covers {} centers, descriptor has {n} rows",
            sel.assign.len()
        )));
    }
    let mut pos = vec![usize::MAX; n];
    for (p, &k) in sel.keys.iter().enumerate() {
        pos[k] = p;
    }
    let route: Vec<usize> = sel.assign.iter().map(|&a| pos[a]).collect();
    if route.contains(&usize::MAX) {
        return Err(Error::InvalidArgument(
            "assignment to a non-key center".into(),
        ));
    }
    let key_rows = tape.gather_rows(desc, &sel.keys)?;
    let out = sat_full(tape, bind, params, key_rows)?;
    tape.gather_rows(out.corrections, &route)
}

/// Adds the attention corrections to the pooled features.
pub fn apply_cics<T: Real>(tape: &mut Tape<T>, pooled: Var, corrections: Var) -> Result<Var> {
    tape.add(pooled, corrections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ball_query_group;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn params(width: usize, out: usize) -> (ParamStore<f64>, SatParams) {
        let mut store = ParamStore::new();
        let p = SatParams::new(&mut store, "sat", width, width, out, &mut seeded(5));
        (store, p)
    }

    #[test]
    fn single_row_attends_to_itself() {
        let (store, p) = params(4, 3);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let d = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64));
        let out = sat_full(&mut tape, &bind, &p, d).unwrap();
        assert_eq!(tape.value(out.attention).data(), &[1.0]);
        let v = p.v.forward(&mut tape, &bind, d).unwrap();
        let expect = p.out.forward(&mut tape, &bind, v).unwrap();
        for (a, b) in tape
            .value(out.corrections)
            .data()
            .iter()
            .zip(tape.value(expect).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let (store, p) = params(4, 3);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let d = tape.constant(Tensor::from_fn(&[5, 4], |i| (i % 4) as f64 * 0.3));
        let out = sat_full(&mut tape, &bind, &p, d).unwrap();
        let o = tape.value(out.corrections);
        for r in 1..5 {
            assert_eq!(o.row(r), o.row(0));
        }
    }

    #[test]
    fn rho_one_is_identity_assignment() {
        let pts: Vec<Point> = (0..6).map(|i| [0.1 * i as f64, 0.0, 0.0]).collect();
        let centers: Vec<usize> = (0..6).collect();
        let nbhs = ball_query_group(&pts, &centers, 0.15, 3).unwrap();
        let scores = vec![1.0; 18];
        let sel = select_key_points(&scores, &nbhs, &pts, 1.0).unwrap();
        assert_eq!(sel.keys, centers);
        assert_eq!(sel.assign, centers);
    }

    #[test]
    fn two_disjoint_neighborhoods() {
        // point 0 and 2 are centers; 1 belongs to 0's group, 3 to 2's group.
        let pts = [[0.0; 3], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [5.1, 0.0, 0.0]];
        let nbhs = ball_query_group(&pts, &[0, 2], 0.5, 2).unwrap();
        let centers = [pts[0], pts[2]];
        // center 0 receives 0.3 as a member of its own group; center 1 receives 0.8
        let scores = [0.3, 0.7, 0.8, 0.2];
        let sel = select_key_points(&scores, &nbhs, &centers, 0.5).unwrap();
        assert_eq!(sel.keys, vec![1]);
        assert_eq!(sel.assign, vec![1, 1]);
        let flipped = [0.9, 0.1, 0.4, 0.6];
        let sel = select_key_points(&flipped, &nbhs, &centers, 0.5).unwrap();
        assert_eq!(sel.keys, vec![0]);
    }

    #[test]
    fn single_key_broadcasts() {
        let (store, p) = params(4, 2);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let d = tape.constant(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.7).sin()));
        let sel = KeySelection {
            keys: vec![2],
            assign: vec![2; 4],
            rho: 0.25,
        };
        let out = sat_keypoint(&mut tape, &bind, &p, d, &sel).unwrap();
        let o = tape.value(out);
        for r in 0..4 {
            assert_eq!(o.row(r), o.row(2));
        }
    }

    #[test]
    fn invalid_rho() {
        let pts = [[0.0; 3]];
        let nbhs = ball_query_group(&pts, &[0], 1.0, 1).unwrap();
        assert!(select_key_points(&[1.0], &nbhs, &pts, 0.0).is_err());
        assert!(select_key_points(&[1.0], &nbhs, &pts, 1.5).is_err());
    }

    #[test]
    fn apply_is_additive() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let out = apply_cics(&mut tape, f, z).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
    }
}
