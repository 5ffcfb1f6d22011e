//! Encoder and decoder assembly.
//!
//! A block downsamples the previous level with farthest point sampling,
//! groups it with a ball query, aggregates the next descriptor, builds the
//! neighbor feature matrix (optionally corrected by [`crate::cdip`]),
//! max-pools it and optionally adds the [`crate::cics`] correction. Sampling
//! and grouping depend only on coordinates, so they are computed once per
//! cloud in a [`CloudGeometry`] and reused across forward passes.

use std::fmt;
use std::str::FromStr;

use crate::cdip::{
    cdip_correction, corrected_neighbor_features, slot_weight_means, CdipParams, NeighborCorrection,
};
use crate::cics::{apply_cics, sat_full, sat_keypoint, select_key_points, KeySelection, SatParams};
use crate::error::{Error, Result};
use crate::geom::{
    ball_query_group, dist_sq, farthest_point_sample, Neighborhood, Point, SlotLayout,
};
use crate::lcsd::{
    aggregate_descriptor, compress_descriptor, init_descriptor, init_descriptor_centroid,
    InitEncoding, OctantPlan, WeightRadius, OCTANTS,
};
use crate::nn::{Linear, Mlp};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Binding, GatherEntry, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Pdsa,
    SaBaseline,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pdsa" => Ok(Self::Pdsa),
            "sa_baseline" => Ok(Self::SaBaseline),
            _ => Err(Error::InvalidArgument(format!(
                "unknown variant `{s}` (expected pdsa or sa_baseline)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pdsa => "pdsa",
            Self::SaBaseline => "sa_baseline",
        })
    }
}

/// Which corrections a PDSA block applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub cdip: bool,
    /// Distance falloff in the descriptor; without it every non-center
    /// member weighs 1.
    pub dw: bool,
    pub cics: bool,
}

impl Ablation {
    pub const ALL: Self = Self {
        cdip: true,
        dw: true,
        cics: true,
    };
    pub const NONE: Self = Self {
        cdip: false,
        dw: false,
        cics: false,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub stride: usize,
    pub radius: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the first stage; stage `s` (0-based) has `channels << s`.
    pub channels: usize,
    /// Extra stride-1 blocks after each downsampling block.
    pub la_blocks: usize,
    pub stages: Vec<StageConfig>,
    pub a_dim: usize,
    pub rho: f64,
    /// Hidden width of the CDIP embeddings.
    pub hidden: usize,
    pub ablation: Ablation,
    pub init_encoding: InitEncoding,
    /// Largest center count that still uses attention over all centers.
    pub full_attention_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::pd_tiny()
    }
}

impl ModelConfig {
    pub fn pd_tiny() -> Self {
        Self {
            variant: Variant::Pdsa,
            channels: 16,
            la_blocks: 0,
            stages: vec![
                StageConfig {
                    stride: 4,
                    radius: 0.4,
                    k: 16,
                },
                StageConfig {
                    stride: 4,
                    radius: 0.8,
                    k: 16,
                },
            ],
            a_dim: 3,
            rho: crate::cics::DEFAULT_RHO,
            hidden: crate::cdip::DEFAULT_HIDDEN,
            ablation: Ablation::ALL,
            init_encoding: InitEncoding::OctantDistribution,
            full_attention_max: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 {
                return bad(format!("stage {i}: stride must be at least 1"));
            }
            if !(s.radius > 0.0 && s.radius.is_finite()) {
                return bad(format!(
                    "stage {i}: radius must be positive, got {}",
                    s.radius
                ));
            }
            if s.k == 0 {
                return bad(format!("stage {i}: k must be at least 1"));
            }
        }
        if self.channels == 0 || self.a_dim == 0 || self.hidden == 0 {
            return bad("channels, a_dim and hidden must be at least 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must be in (0, 1], got {}", self.rho));
        }
        Ok(())
    }

    /// Corrections actually applied: the baseline variant disables all.
    pub fn effective_ablation(&self) -> Ablation {
        match self.variant {
            Variant::Pdsa => self.ablation,
            Variant::SaBaseline => Ablation::NONE,
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels << stage
    }

    /// One entry per block, in execution order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut c_in = 0;
        for (s, st) in self.stages.iter().enumerate() {
            let c = self.stage_channels(s);
            for b in 0..=self.la_blocks {
                out.push(BlockSpec {
                    stage: s,
                    stride: if b == 0 { st.stride } else { 1 },
                    radius: st.radius,
                    k: st.k,
                    c_in,
                    c_out: c,
                });
                c_in = c;
            }
        }
        out
    }

    pub fn desc_width(&self) -> usize {
        OCTANTS * self.a_dim
    }

    /// Number of centers after each stage for an input of `n` points.
    pub fn stage_sizes(&self, n: usize) -> Vec<usize> {
        let mut m = n;
        self.stages
            .iter()
            .map(|s| {
                m = m.div_ceil(s.stride);
                m
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub stage: usize,
    pub stride: usize,
    pub radius: f64,
    pub k: usize,
    /// Feature width of the previous level (0 for raw points).
    pub c_in: usize,
    pub c_out: usize,
}

/// Sampling and grouping of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGeometry<T> {
    /// Center indices into the previous level.
    pub centers: Vec<usize>,
    pub nbhs: Vec<Neighborhood>,
    pub layout: SlotLayout,
    /// `[centers * k, 3]`, center minus member.
    pub rel: Tensor<T>,
    pub plan: OctantPlan<T>,
    pub coords: Vec<Point>,
}

impl BlockGeometry<f64> {
    pub fn build(prev: &[Point], spec: &BlockSpec, distance_weighting: bool) -> Result<Self> {
        if spec.stride > prev.len() {
            return Err(Error::InvalidArgument(format!(
                "stride {} exceeds the {} points of the previous level",
                spec.stride,
                prev.len()
            )));
        }
        let centers = if spec.stride == 1 {
            (0..prev.len()).collect()
        } else {
            farthest_point_sample(prev, prev.len().div_ceil(spec.stride), 0)?
        };
        let nbhs = ball_query_group(prev, &centers, spec.radius, spec.k)?;
        let layout = SlotLayout::new(&nbhs)?;
        let rel: Vec<f64> = nbhs
            .iter()
            .flat_map(|n| n.rel.iter().flatten().copied())
            .collect();
        let rel = Tensor::new(vec![layout.members.len(), 3], rel)?;
        let plan = OctantPlan::build(&nbhs, WeightRadius::Fixed(spec.radius), distance_weighting);
        let coords = centers.iter().map(|&c| prev[c]).collect();
        Ok(Self {
            centers,
            nbhs,
            layout,
            rel,
            plan,
            coords,
        })
    }
}

impl<T: Real> BlockGeometry<T> {
    pub fn cast<U: Real>(&self) -> BlockGeometry<U> {
        BlockGeometry {
            centers: self.centers.clone(),
            nbhs: self.nbhs.clone(),
            layout: self.layout.clone(),
            rel: self.rel.cast(),
            plan: self.plan.cast(),
            coords: self.coords.clone(),
        }
    }
}

/// Everything a forward pass needs that depends only on coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGeometry<T> {
    pub points: Vec<Point>,
    /// Stage-0 descriptor, one row per input point.
    pub init_desc: Tensor<T>,
    pub blocks: Vec<BlockGeometry<T>>,
}

impl CloudGeometry<f64> {
    /// The stage-0 descriptor groups every point with the first stage's
    /// radius and `k`.
    pub fn build(points: &[Point], config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dw = config.effective_ablation().dw;
        let first = config.stages[0];
        let all: Vec<usize> = (0..points.len()).collect();
        let nbhs0 = ball_query_group(points, &all, first.radius, first.k)?;
        let init = match config.init_encoding {
            InitEncoding::OctantDistribution => {
                let plan = OctantPlan::build(&nbhs0, WeightRadius::Fixed(first.radius), dw);
                init_descriptor(points.len(), &plan)?
            }
            InitEncoding::OctantCentroid => init_descriptor_centroid(points, &nbhs0)?,
        };
        let mut blocks: Vec<BlockGeometry<f64>> = Vec::new();
        for spec in config.blocks() {
            let prev = blocks.last().map_or(points, |b| &b.coords);
            let g = BlockGeometry::build(prev, &spec, dw)?;
            blocks.push(g);
        }
        Ok(Self {
            points: points.to_vec(),
            init_desc: init.values,
            blocks,
        })
    }
}

impl<T: Real> CloudGeometry<T> {
    pub fn cast<U: Real>(&self) -> CloudGeometry<U> {
        CloudGeometry {
            points: self.points.clone(),
            init_desc: self.init_desc.cast(),
            blocks: self.blocks.iter().map(BlockGeometry::cast).collect(),
        }
    }
}

/// Interface between blocks: positions, features and descriptor of one level.
#[derive(Debug, Clone)]
pub struct StageState {
    pub coords: Vec<Point>,
    /// `[M, c]`; absent for raw input points.
    pub features: Option<Var>,
    /// `[M, descriptor width]`.
    pub descriptor: Var,
}

/// Intermediate values of one block, kept for inspection.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Embedded neighbor rows before the CDIP term, `[M, k, c]`.
    pub base_neighbors: Var,
    /// Neighbor feature matrix that was pooled, `[M, k, c]`.
    pub neighbors: Var,
    pub correction: Option<NeighborCorrection>,
    /// Channel-mean CDIP weight per slot (uniform `1/k` without CDIP).
    pub slot_scores: Vec<f64>,
    /// Present when attention ran over key points only.
    pub keys: Option<KeySelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub compress: Linear,
    pub mlp: Mlp,
    pub cdip: Option<CdipParams>,
    pub sat: Option<SatParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub task: Task,
    pub n_classes: usize,
    pub blocks: Vec<BlockParams>,
    /// Feature propagation MLPs, deepest level first (segmentation only).
    pub decoder: Vec<Mlp>,
    pub head: Mlp,
    pub params: ParamStore<T>,
}

const COMPRESS: u64 = 0;
const EMBED: u64 = 1;
const CDIP: u64 = 2;
const SAT: u64 = 3;
const HEAD: u64 = 4;
const DECODER: u64 = 5;

impl<T: Real> Model<T> {
    /// Every component draws from its own stream, so variants that share a
    /// component start from identical values for it.
    pub fn new(config: ModelConfig, task: Task, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(Error::InvalidArgument(
                "at least one class is required".into(),
            ));
        }
        let flags = config.effective_ablation();
        let mut params = ParamStore::new();
        let dw = config.desc_width();
        let mut blocks = Vec::new();
        let specs = config.blocks();
        for (b, spec) in specs.iter().enumerate() {
            let stream = |component: u64| seeded(derive_seed(&[seed, b as u64, component]));
            let prev_width = if b == 0 {
                config.init_encoding.width()
            } else {
                dw
            };
            let name = format!("block{b}");
            let compress = Linear::new(
                &mut params,
                &format!("{name}.compress"),
                prev_width,
                config.a_dim,
                &mut stream(COMPRESS),
            );
            let mlp = Mlp::new(
                &mut params,
                &format!("{name}.mlp"),
                &[spec.c_in + 3, spec.c_out, spec.c_out],
                false,
                &mut stream(EMBED),
            );
            let cdip = flags.cdip.then(|| {
                CdipParams::new(
                    &mut params,
                    &format!("{name}.cdip"),
                    dw,
                    prev_width,
                    config.hidden,
                    spec.c_out,
                    &mut stream(CDIP),
                )
            });
            let sat = flags.cics.then(|| {
                SatParams::new(
                    &mut params,
                    &format!("{name}.sat"),
                    dw,
                    dw,
                    spec.c_out,
                    &mut stream(SAT),
                )
            });
            blocks.push(BlockParams {
                compress,
                mlp,
                cdip,
                sat,
            });
        }
        let top = specs.last().unwrap().c_out;
        let mut decoder = Vec::new();
        if task == Task::Segmentation {
            let mut coarse = top;
            for s in (0..config.stages.len()).rev() {
                let (skip, out) = if s == 0 {
                    (0, config.channels)
                } else {
                    let c = config.stage_channels(s - 1);
                    (c, c)
                };
                let mut rng = seeded(derive_seed(&[seed, s as u64, DECODER]));
                decoder.push(Mlp::new(
                    &mut params,
                    &format!("fp{s}"),
                    &[coarse + skip, out, out],
                    false,
                    &mut rng,
                ));
                coarse = out;
            }
        }
        let head_in = if task == Task::Segmentation {
            config.channels
        } else {
            top
        };
        let head = Mlp::new(
            &mut params,
            "head",
            &[head_in, head_in, n_classes],
            true,
            &mut seeded(derive_seed(&[seed, u64::MAX, HEAD])),
        );
        Ok(Self {
            config,
            task,
            n_classes,
            blocks,
            decoder,
            head,
            params,
        })
    }

    /// Same architecture with parameters converted to `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            task: self.task,
            n_classes: self.n_classes,
            blocks: self.blocks.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
        }
    }

    pub fn geometry(&self, points: &[Point]) -> Result<CloudGeometry<T>> {
        Ok(CloudGeometry::build(points, &self.config)?.cast())
    }
}

/// Runs one block with the given corrections. The baseline and every ablation
/// share this path; disabled corrections are skipped, never zeroed.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &BlockParams,
    geo: &BlockGeometry<T>,
    state: &StageState,
    flags: Ablation,
    config: &ModelConfig,
) -> Result<(StageState, BlockTrace)> {
    let m = geo.centers.len();
    let k = geo.layout.k;
    let a = compress_descriptor(tape, bind, &params.compress, state.descriptor)?;
    let d_next = aggregate_descriptor(tape, &geo.plan, a)?;

    let members = match state.features {
        Some(f) => Some(tape.gather_rows(f, &geo.layout.members)?),
        None => None,
    };
    let rel = tape.constant(geo.rel.clone());
    let base = corrected_neighbor_features(tape, bind, &params.mlp, members, rel, None, k)?;

    let mut correction = None;
    let mut neighbors = base;
    let mut slot_scores = vec![1.0 / k as f64; m * k];
    if flags.cdip {
        let p = params.cdip.as_ref().ok_or_else(|| missing("cdip"))?;
        let corr = cdip_correction(tape, bind, p, d_next, state.descriptor, &geo.layout)?;
        let term = tape.mul(corr.weights, corr.codes)?;
        neighbors = tape.add(base, term)?;
        slot_scores = slot_weight_means(tape.value(corr.weights).data(), p.channels());
        correction = Some(corr);
    }

    let (pooled, _) = tape.max_reduce(neighbors, 1)?;
    let mut keys = None;
    let features = if flags.cics {
        let sat = params.sat.as_ref().ok_or_else(|| missing("sat"))?;
        let corrections = if m <= config.full_attention_max {
            sat_full(tape, bind, sat, d_next)?.corrections
        } else {
            let sel = select_key_points(&slot_scores, &geo.nbhs, &geo.coords, config.rho)?;
            let c = sat_keypoint(tape, bind, sat, d_next, &sel)?;
            keys = Some(sel);
            c
        };
        apply_cics(tape, pooled, corrections)?
    } else {
        pooled
    };

    Ok((
        StageState {
            coords: geo.coords.clone(),
            features: Some(features),
            descriptor: d_next,
        },
        BlockTrace {
            base_neighbors: base,
            neighbors,
            correction,
            slot_scores,
            keys,
        },
    ))
}

fn missing(what: &str) -> Error {
    Error::InvalidArgument(format!("block has no {what} parameters"))
}

/// A block with the configured corrections.
pub fn pdsa_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &BlockParams,
    geo: &BlockGeometry<T>,
    state: &StageState,
    config: &ModelConfig,
) -> Result<(StageState, BlockTrace)> {
    block_forward(
        tape,
        bind,
        params,
        geo,
        state,
        config.effective_ablation(),
        config,
    )
}

/// Plain set abstraction: group, embed, max-pool. The descriptor is still
/// aggregated so the output state has the same shape.
pub fn sa_baseline_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &BlockParams,
    geo: &BlockGeometry<T>,
    state: &StageState,
    config: &ModelConfig,
) -> Result<(StageState, BlockTrace)> {
    block_forward(tape, bind, params, geo, state, Ablation::NONE, config)
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Input level followed by one state per block.
    pub levels: Vec<StageState>,
    pub traces: Vec<BlockTrace>,
    /// Index into `levels` of the last block of each stage.
    pub stage_ends: Vec<usize>,
}

impl EncoderOutput {
    pub fn stage(&self, s: usize) -> &StageState {
        &self.levels[self.stage_ends[s]]
    }

    pub fn last(&self) -> &StageState {
        self.levels.last().unwrap()
    }
}

pub fn encoder_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    model: &Model<T>,
    geo: &CloudGeometry<T>,
) -> Result<EncoderOutput> {
    if geo.blocks.len() != model.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "geometry has {} blocks, model has {}",
            geo.blocks.len(),
            model.blocks.len()
        )));
    }
    let descriptor = tape.constant(geo.init_desc.clone());
    let mut levels = vec![StageState {
        coords: geo.points.clone(),
        features: None,
        descriptor,
    }];
    let mut traces = Vec::with_capacity(geo.blocks.len());
    for (p, g) in model.blocks.iter().zip(&geo.blocks) {
        let (next, trace) = pdsa_forward(tape, bind, p, g, levels.last().unwrap(), &model.config)?;
        levels.push(next);
        traces.push(trace);
    }
    let per_stage = model.config.la_blocks + 1;
    let stage_ends = (1..=model.config.stages.len())
        .map(|s| s * per_stage)
        .collect();
    Ok(EncoderOutput {
        levels,
        traces,
        stage_ends,
    })
}

/// Global max-pool over points followed by the head MLP; returns `[1, classes]`.
pub fn classify_head<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    head: &Mlp,
    state: &StageState,
) -> Result<Var> {
    let f = state
        .features
        .ok_or_else(|| Error::InvalidArgument("classification needs features".into()))?;
    let c = tape.value(f).cols();
    let (g, _) = tape.max_reduce(f, 0)?;
    let g = tape.reshape(g, &[1, c])?;
    head.forward(tape, bind, g)
}

pub fn classify_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    model: &Model<T>,
    geo: &CloudGeometry<T>,
) -> Result<(Var, EncoderOutput)> {
    let enc = encoder_forward(tape, bind, model, geo)?;
    let logits = classify_head(tape, bind, &model.head, enc.last())?;
    Ok((logits, enc))
}

/// Inverse-distance weights of the (up to) 3 nearest coarse points of every
/// fine point, normalized per fine point.
pub fn interpolation_entries<T: Real>(
    coarse: &[Point],
    fine: &[Point],
) -> Result<Vec<GatherEntry<T>>> {
    if coarse.is_empty() {
        return Err(Error::EmptyInput);
    }
    let nn = coarse.len().min(3);
    let mut entries = Vec::with_capacity(fine.len() * nn);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(coarse.len());
    for (r, &p) in fine.iter().enumerate() {
        order.clear();
        order.extend(coarse.iter().enumerate().map(|(i, &c)| (dist_sq(p, c), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if nn < order.len() {
            order.select_nth_unstable_by(nn - 1, cmp);
        }
        let near = &mut order[..nn];
        near.sort_unstable_by(cmp);
        let inv: Vec<f64> = near
            .iter()
            .map(|&(d2, _)| 1.0 / d2.sqrt().max(1e-8))
            .collect();
        let total: f64 = inv.iter().sum();
        for (&(_, i), w) in near.iter().zip(inv) {
            entries.push(GatherEntry {
                out_row: r as u32,
                block: 0,
                src_row: i as u32,
                weight: T::from_f64(w / total),
            });
        }
    }
    Ok(entries)
}

/// Feature propagation: 3-NN inverse-distance interpolation of `coarse`
/// features onto `fine_coords`, concatenated with `skip` and embedded by `mlp`.
pub fn fp_interpolate<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    mlp: &Mlp,
    coarse_coords: &[Point],
    coarse_features: Var,
    fine_coords: &[Point],
    skip: Option<Var>,
) -> Result<Var> {
    let entries = interpolation_entries(coarse_coords, fine_coords)?;
    let interp = tape.weighted_gather_sum(coarse_features, &entries, fine_coords.len(), 1)?;
    let input = match skip {
        Some(s) => tape.concat_cols(&[interp, s])?,
        None => interp,
    };
    mlp.forward(tape, bind, input)
}

/// Per-point logits `[N, classes]` for a segmentation model.
pub fn segment_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    model: &Model<T>,
    geo: &CloudGeometry<T>,
) -> Result<(Var, EncoderOutput)> {
    if model.task != Task::Segmentation {
        return Err(Error::InvalidArgument(
            "model was built for classification".into(),
        ));
    }
    let enc = encoder_forward(tape, bind, model, geo)?;
    let s_count = model.config.stages.len();
    let mut coarse_coords = enc.stage(s_count - 1).coords.clone();
    let mut coarse = enc.stage(s_count - 1).features.unwrap();
    for (i, mlp) in model.decoder.iter().enumerate() {
        let s = s_count - 1 - i;
        let fine = if s == 0 {
            &enc.levels[0]
        } else {
            enc.stage(s - 1)
        };
        coarse = fp_interpolate(
            tape,
            bind,
            mlp,
            &coarse_coords,
            coarse,
            &fine.coords,
            fine.features,
        )?;
        coarse_coords = fine.coords.clone();
    }
    let logits = model.head.forward(tape, bind, coarse)?;
    Ok((logits, enc))
}
