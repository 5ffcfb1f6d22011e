//! The four subcommands. Each returns an error instead of exiting so the
//! binary decides the exit code and tests can call them directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pdsa_core::cdip::neighbor_row_variance;
use pdsa_core::cics::select_key_points;
use pdsa_core::data::{
    compute_metrics, read_cloud, shape_split, write_atomic, write_cloud, MetricsReport, Sample,
    ShapeKind,
};
use pdsa_core::geom::PointCloud;
use pdsa_core::network::{
    classify_forward, encoder_forward, Ablation, Model, ModelConfig, Task, Variant,
};
use pdsa_core::rng::{derive_seed, seeded};
use pdsa_core::tensor::{load_checkpoint, save_checkpoint, Tape};
use rand::Rng as _;

use crate::config::{RunConfig, Sweep};
use crate::train::{predict, prepare, train, with_threads, EpochLog, Prepared, TrainConfig};

pub const N_CLASSES: usize = ShapeKind::ALL.len();

pub const LOG_HEADER: &str = "epoch,loss,train_acc,test_acc";
pub const ABLATION_HEADER: &str = "variant,seed,test_oa,mean_nbr_var";

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
    write_atomic(&cfg.out_dir.join("config.txt"), cfg.to_text().as_bytes())
        .with_context(|| format!("writing to output directory {}", cfg.out_dir.display()))?;
    Ok(())
}

/// Training and test objects. Test shapes use the seeds right after the
/// training ones, so the splits never overlap.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (n_train, n_test) = (cfg.data.train_per_class, cfg.data.test_per_class);
    let train = shape_split(&cfg.data.dataset, 0..n_train)?;
    let test = shape_split(&cfg.data.dataset, n_train..n_train + n_test)?;
    Ok((train, test))
}

fn log_line(l: &EpochLog) -> String {
    format!("{},{},{},{}\n", l.epoch, l.loss, l.train_acc, l.test_acc)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Trains the configured model, writing `train_log.csv`, the best checkpoint
/// (by test accuracy) to `best.ckpt` and the final one to `io.checkpoint`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    prepare_out_dir(cfg)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let best_path = cfg.out_dir.join("best.ckpt");
    let mut log = format!("{LOG_HEADER}\n");
    write_atomic(&log_path, log.as_bytes())?;
    let logs = with_threads(cfg.train.threads, || -> Result<Vec<EpochLog>> {
        let (train_set, test_set) = load_splits(cfg)?;
        let train_p = prepare(&cfg.model, &train_set)?;
        let test_p = prepare(&cfg.model, &test_set)?;
        let mut model = Model::<f32>::new(
            cfg.model.clone(),
            Task::Classification,
            N_CLASSES,
            cfg.train.seed,
        )?;
        if cfg.train.epochs == 0 {
            save_checkpoint(&best_path, &model.params)?;
        }
        let mut best = f64::NEG_INFINITY;
        let logs = train(&mut model, &train_p, &test_p, &cfg.train, |l, m| {
            log.push_str(&log_line(l));
            write_atomic(&log_path, log.as_bytes())?;
            if l.test_acc > best {
                best = l.test_acc;
                save_checkpoint(&best_path, &m.params)?;
            }
            Ok(())
        })?;
        if let Some(parent) = cfg
            .checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
        {
            fs::create_dir_all(parent)?;
        }
        save_checkpoint(&cfg.checkpoint, &model.params)
            .with_context(|| format!("writing {}", cfg.checkpoint.display()))?;
        Ok(logs)
    })??;
    Ok(TrainOutcome {
        logs,
        final_checkpoint: cfg.checkpoint.clone(),
        best_checkpoint: best_path,
    })
}

/// Builds the configured model and fills it from `path`.
pub fn load_model(model: &ModelConfig, seed: u64, path: &Path) -> Result<Model<f32>> {
    let mut m = Model::<f32>::new(model.clone(), Task::Classification, N_CLASSES, seed)?;
    load_checkpoint(path, &mut m.params)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(m)
}

/// Scores the checkpoint on the test split. Writes `metrics.csv` (per class)
/// and `eval_summary.csv` (`oa,miou,macc`); returns the report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let model = load_model(&cfg.model, cfg.train.seed, &cfg.checkpoint)?;
    prepare_out_dir(cfg)?;
    let report = with_threads(cfg.train.threads, || -> Result<MetricsReport> {
        let (_, test_set) = load_splits(cfg)?;
        let test_p = prepare(&cfg.model, &test_set)?;
        let pred = predict(&model, &test_p)?;
        let truth: Vec<usize> = test_p.iter().map(|p| p.label).collect();
        Ok(compute_metrics(&pred, &truth, N_CLASSES)?)
    })??;
    write_atomic(&cfg.out_dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    let summary = format!(
        "oa,miou,macc\n{},{},{}\n",
        report.oa, report.miou, report.macc
    );
    write_atomic(&cfg.out_dir.join("eval_summary.csv"), summary.as_bytes())?;
    Ok(report)
}

/// One trained configuration of an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub test_oa: f64,
    pub mean_nbr_var: f64,
    /// Variance of every sampled neighborhood, in [`sample_neighborhoods`]
    /// order; the same neighborhoods are used for every variant of a seed.
    pub nbr_vars: Vec<f64>,
}

/// The correction ladder, each rung adding one correction.
pub fn ladder(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let rung = |variant, cdip, dw, cics| ModelConfig {
        variant,
        ablation: Ablation { cdip, dw, cics },
        ..base.clone()
    };
    vec![
        (
            "baseline".into(),
            rung(Variant::SaBaseline, false, false, false),
        ),
        ("cdip".into(), rung(Variant::Pdsa, true, false, false)),
        ("cdip_dw".into(), rung(Variant::Pdsa, true, true, false)),
        ("cdip_dw_cics".into(), rung(Variant::Pdsa, true, true, true)),
    ]
}

/// The configured model at each descriptor width.
pub fn a_dim_sweep(base: &ModelConfig, dims: &[usize]) -> Vec<(String, ModelConfig)> {
    dims.iter()
        .map(|&a| {
            (
                format!("a_dim_{a}"),
                ModelConfig {
                    a_dim: a,
                    ..base.clone()
                },
            )
        })
        .collect()
}

/// `(test object, first-block center)` pairs drawn from `seed`.
pub fn sample_neighborhoods(
    seed: u64,
    count: usize,
    objects: usize,
    centers: usize,
) -> Vec<(usize, usize)> {
    let mut rng = seeded(derive_seed(&[seed, 0x6e62_7673]));
    let mut out: Vec<(usize, usize)> = (0..count)
        .map(|_| (rng.random_range(0..objects), rng.random_range(0..centers)))
        .collect();
    out.sort_unstable();
    out
}

/// Mean squared distance of neighbor rows to their centroid, in the pooled
/// neighbor matrix of the first block, for each sampled neighborhood.
pub fn neighbor_variances(
    model: &Model<f32>,
    test: &[Prepared],
    picks: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(picks.len());
    let mut i = 0;
    while i < picks.len() {
        let obj = picks[i].0;
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let enc = encoder_forward(&mut tape, &bind, model, &test[obj].geo)?;
        let v = tape.value(enc.traces[0].neighbors);
        let (k, c) = (v.shape()[1], v.shape()[2]);
        while i < picks.len() && picks[i].0 == obj {
            let center = picks[i].1;
            let rows: Vec<f64> = v.data()[center * k * c..(center + 1) * k * c]
                .iter()
                .map(|&x| x as f64)
                .collect();
            out.push(neighbor_row_variance(&rows, k, c).0);
            i += 1;
        }
    }
    Ok(out)
}

/// Trains every variant for every seed and measures test accuracy and
/// neighbor-row variance.
pub fn run_ablation(
    cfg: &RunConfig,
    variants: &[(String, ModelConfig)],
    mut on_row: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let (train_set, test_set) = load_splits(cfg)?;
    if test_set.is_empty() {
        bail!("the test split is empty");
    }
    let mut rows = Vec::new();
    for s in 0..cfg.ablate.seeds as u64 {
        let seed = cfg.train.seed + s;
        let mut picks = None;
        for (name, model_cfg) in variants {
            let train_p = prepare(model_cfg, &train_set)?;
            let test_p = prepare(model_cfg, &test_set)?;
            let centers = test_p[0].geo.blocks[0].centers.len();
            let picks = picks.get_or_insert_with(|| {
                sample_neighborhoods(seed, cfg.ablate.neighborhoods, test_p.len(), centers)
            });
            let mut model =
                Model::<f32>::new(model_cfg.clone(), Task::Classification, N_CLASSES, seed)?;
            let tc = TrainConfig { seed, ..cfg.train };
            let logs = train(&mut model, &train_p, &test_p, &tc, |_, _| Ok(()))?;
            let test_oa = match logs.last() {
                Some(l) => l.test_acc,
                None => crate::train::accuracy(&model, &test_p)?,
            };
            let nbr_vars = neighbor_variances(&model, &test_p, picks)?;
            let mean_nbr_var = if nbr_vars.is_empty() {
                f64::NAN
            } else {
                nbr_vars.iter().sum::<f64>() / nbr_vars.len() as f64
            };
            let row = AblationRow {
                variant: name.clone(),
                seed,
                test_oa,
                mean_nbr_var,
                nbr_vars,
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Runs the configured sweep and writes `ablation.csv` plus the
/// per-neighborhood variances in `ablation_neighborhoods.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    prepare_out_dir(cfg)?;
    let variants = match cfg.ablate.sweep {
        Sweep::Ladder => ladder(&cfg.model),
        Sweep::ADim => a_dim_sweep(&cfg.model, &cfg.ablate.a_dims),
    };
    let csv_path = cfg.out_dir.join("ablation.csv");
    let mut csv = format!("{ABLATION_HEADER}\n");
    write_atomic(&csv_path, csv.as_bytes())?;
    let rows = with_threads(cfg.train.threads, || {
        run_ablation(cfg, &variants, |r| {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                r.variant, r.seed, r.test_oa, r.mean_nbr_var
            );
            write_atomic(&csv_path, csv.as_bytes())?;
            Ok(())
        })
    })??;
    let mut detail = String::from("variant,seed,sample,variance\n");
    for r in &rows {
        for (i, v) in r.nbr_vars.iter().enumerate() {
            let _ = writeln!(detail, "{},{},{i},{v}", r.variant, r.seed);
        }
    }
    write_atomic(
        &cfg.out_dir.join("ablation_neighborhoods.csv"),
        detail.as_bytes(),
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    /// Per input point, in `[0, 1]`.
    pub heat: Vec<f64>,
    /// Input point indices of the selected key centers of the first block.
    pub key_points: Vec<usize>,
    pub predicted: usize,
}

/// Heat of every input point: the channel-mean denoising weight it receives
/// as a member of first-block neighborhoods, summed and min-max normalized
/// (all zeros when constant).
pub fn inspect_model(model: &Model<f32>, points: &[[f64; 3]]) -> Result<Inspection> {
    let geo = model.geometry(points)?;
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape);
    let (logits, enc) = classify_forward(&mut tape, &bind, model, &geo)?;
    let row = tape.value(logits).data();
    let predicted = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
    let block = &geo.blocks[0];
    let scores = &enc.traces[0].slot_scores;
    let mut heat = vec![0.0; points.len()];
    for (&m, &s) in block.layout.members.iter().zip(scores) {
        heat[m] += s;
    }
    let lo = heat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for h in &mut heat {
        *h = if hi > lo { (*h - lo) / (hi - lo) } else { 0.0 };
    }
    let sel = select_key_points(scores, &block.nbhs, &block.coords, model.config.rho)?;
    let key_points = sel.keys.iter().map(|&k| block.centers[k]).collect();
    Ok(Inspection {
        heat,
        key_points,
        predicted,
    })
}

/// Writes `<stem>_heat.ply` and `<stem>_keys.ply` for the cloud at `input`.
pub fn cmd_inspect(cfg: &RunConfig, input: &Path) -> Result<Inspection> {
    let model = load_model(&cfg.model, cfg.train.seed, &cfg.checkpoint)?;
    let cloud = read_cloud(input).with_context(|| format!("reading {}", input.display()))?;
    prepare_out_dir(cfg)?;
    let points = cloud.cloud.coords();
    let ins = inspect_model(&model, points)?;
    let stem = input
        .file_stem()
        .map_or("cloud".into(), |s| s.to_string_lossy().into_owned());
    let plain = PointCloud::new(points.to_vec())?;
    write_cloud(
        &cfg.out_dir.join(format!("{stem}_heat.ply")),
        &plain,
        Some(&ins.heat),
    )?;
    let keys = PointCloud::new(ins.key_points.iter().map(|&i| points[i]).collect())?;
    let key_heat: Vec<f64> = ins.key_points.iter().map(|&i| ins.heat[i]).collect();
    write_cloud(
        &cfg.out_dir.join(format!("{stem}_keys.ply")),
        &keys,
        Some(&key_heat),
    )?;
    Ok(ins)
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
