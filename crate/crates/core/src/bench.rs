//! Motion-estimation benchmark: scenarios A/B over the six axes, comparing
//! the autofocus metrics (and their fine-tuned `+` variants) by misalignment
//! between annihilating and ground-truth curves and by SSIM against the clean
//! reconstruction.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::appearance::RegressorModel;
use crate::autofocus::{
    fine_tune, initial_view_mask, optimize_trajectory, AutofocusProblem, CompensationResult,
    Stage, StageSchedule,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fdk::{parker_safe_range, FdkReconstructor, SliceSet, SliceTriplets};
use crate::geometry::{compose, RigidMotion, Trajectory};
use crate::iqm::{box_mask, build_metric, ssim, BoneWindow, MetricContext};
use crate::motion::{
    annihilating_motion, curves_from_splines, uniform_nodes, Axis, MotionSplineSet,
};
use crate::phantom::{render_projections, Phantom};
use crate::rpe::MarkerSet;

/// Benchmark scenario: motion shape plus node counts for the motion and the
/// annihilating splines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub motion_nodes: usize,
    pub annihilation_nodes: usize,
    pub amplitude: f64,
}

impl Scenario {
    /// Scenario A: one smooth excursion, 20 motion and 20 annihilation nodes.
    pub fn a(amplitude: f64) -> Self {
        Self { name: "A".into(), motion_nodes: 20, annihilation_nodes: 20, amplitude }
    }

    /// Scenario B: sharper multi-lobe motion, 17 motion and 40 annihilation
    /// nodes.
    pub fn b(amplitude: f64) -> Self {
        Self { name: "B".into(), motion_nodes: 17, annihilation_nodes: 40, amplitude }
    }

    pub fn from_name(name: &str, cfg: &ExperimentConfig) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::a(cfg.bench.amplitude_a)),
            "b" => Ok(Self::b(cfg.bench.amplitude_b)),
            other => Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Deterministic bump-shaped motion curve for one axis: scenario A is a
/// single smooth excursion, scenario B a sharper three-lobe wave. Non-zero
/// nodes stay inside the Parker-safe window.
pub fn scenario_motion(
    sc: &Scenario,
    axis: Axis,
    n_views: usize,
    parker_safe: (usize, usize),
) -> Result<MotionSplineSet> {
    let positions = uniform_nodes(sc.motion_nodes, n_views)?;
    let win_len = n_views.div_ceil(3);
    let (lo, hi) = parker_safe;
    if hi < lo || hi + 1 - lo < win_len {
        return Err(Error::Config("Parker-safe range cannot hold the motion window".into()));
    }
    // Deterministic placement: centered in the safe range.
    let start = lo + (hi + 1 - lo - win_len) / 2;
    let (w0, w1) = (start as f64, (start + win_len) as f64);
    let mut values: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; sc.motion_nodes]);
    for (i, p) in positions.iter().enumerate() {
        if *p < w0 || *p >= w1 {
            continue;
        }
        let xi = (p - w0) / (w1 - w0);
        let taper = (std::f64::consts::PI * xi).sin();
        let shape = if sc.name == "A" {
            // Single smooth excursion.
            taper * taper
        } else {
            // Sharper multi-lobe wave under the same taper.
            (3.0 * std::f64::consts::PI * xi).sin() * taper
        };
        values[axis.index()][i] = sc.amplitude * shape;
    }
    MotionSplineSet::new(positions, values)
}

/// Mean absolute residual between the annihilating and ground-truth curves
/// over views and active axes, in °\mm. Complete compensation means the two
/// curves sum to zero.
pub fn misalignment(
    estimate: &MotionSplineSet,
    ground_truth: &MotionSplineSet,
    n_views: usize,
) -> Result<f64> {
    let est = curves_from_splines(estimate, n_views)?;
    let gt = curves_from_splines(ground_truth, n_views)?;
    let mut axes: Vec<Axis> = Axis::ALL
        .into_iter()
        .filter(|a| {
            estimate.values(*a).iter().any(|v| *v != 0.0)
                || ground_truth.values(*a).iter().any(|v| *v != 0.0)
        })
        .collect();
    if axes.is_empty() {
        return Ok(0.0);
    }
    axes.dedup();
    let mut total = 0.0;
    for a in &axes {
        for i in 0..n_views {
            total += (est.value(*a, i) + gt.value(*a, i)).abs();
        }
    }
    Ok(total / (axes.len() * n_views) as f64)
}

/// One benchmark measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub axis: Axis,
    pub metric: String,
    pub phantom: String,
    pub misalignment: f64,
    pub ssim: f64,
    pub ssim_voi: f64,
    /// Wall-clock seconds; written to the timing file, not the results CSV.
    pub runtime_s: f64,
}

/// Everything shared across benchmark cells for one phantom.
pub struct BenchWorld {
    pub base: Trajectory,
    pub set: SliceSet,
    pub markers: MarkerSet,
    pub window: BoneWindow,
    pub reconstructor: FdkReconstructor,
    pub clean: SliceTriplets,
    pub parker_safe: (usize, usize),
    pub model: Option<RegressorModel>,
    pub threshold: f64,
    pub phantom_name: String,
}

impl BenchWorld {
    pub fn new(
        phantom: &Phantom,
        base: &Trajectory,
        set: &SliceSet,
        markers: MarkerSet,
        window: BoneWindow,
        model: Option<RegressorModel>,
        threshold: f64,
    ) -> Result<Self> {
        let raw = render_projections(phantom, base, None)?;
        let reconstructor = FdkReconstructor::new(raw, base, set.clone())?;
        let clean =
            reconstructor.reconstruct(&compose(base, &vec![RigidMotion::identity(); base.len()])?)?;
        Ok(Self {
            base: base.clone(),
            set: set.clone(),
            markers,
            window,
            reconstructor,
            clean,
            parker_safe: parker_safe_range(base)?,
            model,
            threshold,
            phantom_name: phantom.name.clone(),
        })
    }

    fn metric_context(&self) -> MetricContext {
        MetricContext {
            window: self.window,
            markers: self.markers.clone(),
            slice_set: self.set.clone(),
            model: self.model.clone(),
        }
    }
}

/// Splits a benchmark metric name into the primary registry metric and the
/// optional fine-tuning metric (ent+ → tv, tv+/cnn+ → ent).
pub fn parse_metric_name(name: &str) -> Result<(String, Option<String>)> {
    let lower = name.to_ascii_lowercase();
    match lower.as_str() {
        "none" | "ent" | "tv" | "cnn" | "gt" => Ok((lower, None)),
        "ent+" => Ok(("ent".into(), Some("tv".into()))),
        "tv+" => Ok(("tv".into(), Some("ent".into()))),
        "cnn+" => Ok(("cnn".into(), Some("ent".into()))),
        other => Err(Error::Config(format!("unknown benchmark metric '{other}'"))),
    }
}

/// Runs one benchmark cell: applies the scenario motion to the axis, runs the
/// requested metric's compensation and measures misalignment and SSIM.
/// Returns the row, the cell's reconstruction and (for optimizing metrics)
/// the full compensation result.
pub fn run_cell(
    world: &BenchWorld,
    scenario: &Scenario,
    axis: Axis,
    metric_name: &str,
    schedule: &StageSchedule,
) -> Result<(BenchRow, SliceTriplets, Option<CompensationResult>)> {
    let n = world.base.len();
    let gt_motion = scenario_motion(scenario, axis, n, world.parker_safe)?;
    let gt_curves = curves_from_splines(&gt_motion, n)?;
    let prior = annihilating_motion(&gt_curves);
    let started = std::time::Instant::now();

    let (estimate, reconstruction, result) = if metric_name.eq_ignore_ascii_case("none") {
        let zero = MotionSplineSet::zero(scenario.annihilation_nodes, n)?;
        let eff = compose(&world.base, &prior)?;
        let corrupted = world.reconstructor.reconstruct(&eff)?;
        (zero, corrupted, None)
    } else {
        let (primary, tuner) = parse_metric_name(metric_name)?;
        let ctx = world.metric_context();
        let metric = build_metric(&primary, &ctx)?;
        // The learned metric constrains the optimization to the views its
        // soft classifier flags on the initial reconstruction.
        let mask = if primary == "cnn" {
            Some(initial_view_mask(
                metric.as_ref(),
                &world.reconstructor,
                &world.base,
                Some(&prior),
                world.threshold,
            )?)
        } else {
            None
        };
        let problem = AutofocusProblem::new(
            &world.reconstructor,
            &world.base,
            Some(prior.clone()),
            metric.as_ref(),
            mask.clone(),
        )?;
        let m0 = MotionSplineSet::zero(scenario.annihilation_nodes, n)?;
        let mut result = optimize_trajectory(&problem, &m0, &[axis], schedule)?;
        if let Some(second) = tuner {
            let second_metric = build_metric(&second, &ctx)?;
            let problem2 = AutofocusProblem::new(
                &world.reconstructor,
                &world.base,
                Some(prior.clone()),
                second_metric.as_ref(),
                mask,
            )?;
            let tail = *schedule.stages.last().unwrap();
            result = fine_tune(
                &problem2,
                &result,
                &[axis],
                Stage { step: 0.5 * tail.step, max_iterations: tail.max_iterations },
                schedule.tolerance,
            )?;
        }
        let estimate = result.estimate.clone();
        let recon = result.reconstruction.clone();
        (estimate, recon, Some(result))
    };
    let runtime_s = started.elapsed().as_secs_f64();

    let mis = misalignment(&estimate, &gt_motion, n)?;
    let score = ssim(&reconstruction.slices, &world.clean.slices, None)?;
    let row = BenchRow {
        scenario: scenario.name.clone(),
        axis,
        metric: metric_name.to_ascii_lowercase(),
        phantom: world.phantom_name.clone(),
        misalignment: mis,
        ssim: score,
        ssim_voi: f64::NAN, // filled by the caller with its VOI mask
        runtime_s,
    };
    Ok((row, reconstruction, result))
}

/// Full benchmark: every (scenario, axis, metric) cell on the given worlds,
/// plus phantom-averaged summary rows.
pub fn run_benchmark(
    worlds: &[BenchWorld],
    scenarios: &[Scenario],
    axes: &[Axis],
    metrics: &[String],
    schedule: &StageSchedule,
    voi: ([f64; 3], [f64; 3]),
) -> Result<(Vec<BenchRow>, Vec<BenchRow>)> {
    if worlds.is_empty() {
        return Err(Error::Config("benchmark needs at least one phantom".into()));
    }
    for m in metrics {
        let (primary, _) = parse_metric_name(m)?;
        if primary == "cnn" && worlds.iter().any(|w| w.model.is_none()) {
            return Err(Error::Config(
                "benchmark metric 'cnn' needs a trained model (set the model path)".into(),
            ));
        }
    }
    let mut rows = Vec::new();
    for world in worlds {
        let voi_mask = box_mask(&world.set, voi.0, voi.1);
        for sc in scenarios {
            for &axis in axes {
                for metric in metrics {
                    let (mut row, recon, _) = run_cell(world, sc, axis, metric, schedule)?;
                    row.ssim_voi = ssim(&recon.slices, &world.clean.slices, Some(&voi_mask))?;
                    rows.push(row);
                }
            }
        }
    }
    // Phantom-averaged summary per (scenario, axis, metric).
    let mut groups: BTreeMap<(String, usize, String), Vec<&BenchRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.scenario.clone(), r.axis.index(), r.metric.clone())).or_default().push(r);
    }
    let summary = groups
        .into_iter()
        .map(|((scenario, axis_idx, metric), cells)| {
            let n = cells.len() as f64;
            BenchRow {
                scenario,
                axis: Axis::ALL[axis_idx],
                metric,
                phantom: "mean".into(),
                misalignment: cells.iter().map(|c| c.misalignment).sum::<f64>() / n,
                ssim: cells.iter().map(|c| c.ssim).sum::<f64>() / n,
                ssim_voi: cells.iter().map(|c| c.ssim_voi).sum::<f64>() / n,
                runtime_s: cells.iter().map(|c| c.runtime_s).sum::<f64>() / n,
            }
        })
        .collect();
    Ok((rows, summary))
}

/// Deterministic results CSV (no runtime column).
pub fn results_csv_rows(rows: &[BenchRow]) -> impl Iterator<Item = String> + '_ {
    rows.iter().map(|r| {
        format!(
            "{},{},{},{},{},{},{}",
            r.scenario,
            r.axis.label(),
            r.metric,
            r.phantom,
            r.misalignment,
            r.ssim,
            r.ssim_voi
        )
    })
}

pub const RESULTS_CSV_HEADER: &str = "scenario,axis,metric,phantom,misalignment,ssim,ssim_voi";

/// Timing CSV rows (wall-clock varies across runs and lives separately so the
/// results file stays byte-reproducible).
pub fn timings_csv_rows(rows: &[BenchRow]) -> impl Iterator<Item = String> + '_ {
    rows.iter().map(|r| {
        format!("{},{},{},{},{:.3}", r.scenario, r.axis.label(), r.metric, r.phantom, r.runtime_s)
    })
}

pub const TIMINGS_CSV_HEADER: &str = "scenario,axis,metric,phantom,runtime_s";
