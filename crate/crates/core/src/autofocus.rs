//! Trajectory estimation by staged, node-sequential downhill-simplex
//! optimization of an image-quality metric.
//!
//! One spline node is optimized at a time, sweeping axes in the fixed order
//! (t_z, t_x, t_y, r_x, r_y, r_z) and nodes in index order. Projections are
//! filtered exactly once; during a node's line search only the views inside
//! the node's spline support are re-back-projected on top of a cached partial
//! sum over the remaining views.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fdk::{
    backproject_accumulate, finalize, view_geometries, FdkReconstructor, SliceTriplets,
    ViewGeometry,
};
use crate::geometry::{chain_motion, compose, EffectiveTrajectory, RigidMotion, Trajectory};
use crate::iqm::{soft_classify, ImageQualityMetric, IqmInput, IqmValue};
use crate::motion::{annihilating_motion, curves_from_splines, Axis, MotionCurves, MotionSplineSet};

/// One coarse-to-fine stage: initial simplex step (°\mm) and the simplex
/// iteration cap per node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub step: f64,
    pub max_iterations: usize,
}

/// The staged optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
    /// Convergence tolerance on node values, °\mm.
    pub tolerance: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage { step: 1.0, max_iterations: 2 },
                Stage { step: 1.0, max_iterations: 2 },
                Stage { step: 1.0, max_iterations: 2 },
                Stage { step: 0.5, max_iterations: 100 },
                Stage { step: 0.5, max_iterations: 100 },
            ],
            tolerance: 0.001,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule needs at least one stage".into()));
        }
        if self.stages.iter().any(|s| !(s.step > 0.0)) {
            return Err(Error::Config("stage steps must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a one-dimensional simplex run.
#[derive(Debug, Clone, Copy)]
pub struct LineSearchOutcome {
    pub x: f64,
    pub score: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Downhill simplex on a scalar variable: a two-vertex simplex with
/// reflection, expansion and contraction. Terminates on the iteration cap or
/// when the simplex size drops below `tol`.
pub fn nelder_mead_1d(
    mut f: impl FnMut(f64) -> Result<f64>,
    x0: f64,
    step: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LineSearchOutcome> {
    if max_iter == 0 {
        return Ok(LineSearchOutcome { x: x0, score: f64::NAN, iterations: 0, evaluations: 0 });
    }
    let mut evals = 0usize;
    let mut eval = |x: f64, f: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> {
        evals += 1;
        let v = f(x)?;
        if !v.is_finite() {
            return Err(Error::Divergence(format!("objective value {v} at x = {x}")));
        }
        Ok(v)
    };
    let mut b = x0;
    let mut fb = eval(b, &mut f)?;
    let mut w = x0 + step;
    let mut fw = eval(w, &mut f)?;
    if fw < fb {
        std::mem::swap(&mut b, &mut w);
        std::mem::swap(&mut fb, &mut fw);
    }
    let mut iterations = 0usize;
    while iterations < max_iter && (b - w).abs() >= tol {
        iterations += 1;
        let xr = 2.0 * b - w;
        let fr = eval(xr, &mut f)?;
        if fr < fb {
            // Try to expand past the reflected point.
            let xe = 3.0 * b - 2.0 * w;
            let fe = eval(xe, &mut f)?;
            if fe < fr {
                w = xe;
                fw = fe;
            } else {
                w = xr;
                fw = fr;
            }
        } else if fr < fw {
            w = xr;
            fw = fr;
        } else {
            // Contract toward the best vertex (coincides with the 1-D shrink).
            let xc = 0.5 * (b + w);
            let fc = eval(xc, &mut f)?;
            w = xc;
            fw = fc;
        }
        if fw < fb {
            std::mem::swap(&mut b, &mut w);
            std::mem::swap(&mut fb, &mut fw);
        }
    }
    Ok(LineSearchOutcome { x: b, score: fb, iterations, evaluations: evals })
}

/// One objective evaluation in the optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: usize,
    pub axis: Axis,
    pub node: usize,
    pub evaluation: usize,
    pub candidate: f64,
    pub score: f64,
}

/// Result bundle of one compensation run.
pub struct CompensationResult {
    /// Estimated annihilating spline set.
    pub estimate: MotionSplineSet,
    /// Per-view annihilating motion realized by the estimate.
    pub annihilating: Vec<RigidMotion>,
    /// Reconstruction at the estimate.
    pub reconstruction: SliceTriplets,
    /// Metric score re-evaluated on the returned reconstruction.
    pub final_score: f64,
    pub trace: Vec<TraceRow>,
    pub evaluations: usize,
    pub wall_clock: Duration,
}

/// The autofocus optimization state: filtered projections, the calibration,
/// an optional simulated corruption composed before every candidate, the
/// objective metric and an optional view mask from the soft classifier.
pub struct AutofocusProblem<'a> {
    reconstructor: &'a FdkReconstructor,
    base: &'a Trajectory,
    prior_motion: Option<Vec<RigidMotion>>,
    metric: &'a dyn ImageQualityMetric,
    mask: Option<Vec<bool>>,
}

impl<'a> AutofocusProblem<'a> {
    pub fn new(
        reconstructor: &'a FdkReconstructor,
        base: &'a Trajectory,
        prior_motion: Option<Vec<RigidMotion>>,
        metric: &'a dyn ImageQualityMetric,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if let Some(p) = &prior_motion {
            if p.len() != base.len() {
                return Err(Error::Shape("prior motion length must match views".into()));
            }
        }
        if let Some(m) = &mask {
            if m.len() != base.len() {
                return Err(Error::Shape("view mask length must match views".into()));
            }
        }
        Ok(Self { reconstructor, base, prior_motion, metric, mask })
    }

    pub fn metric_name(&self) -> &'static str {
        self.metric.name()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Candidate curves with the soft-classifier constraint applied: curves
    /// are projected to zero on motion-free (negative) views.
    pub fn constrained_curves(&self, m: &MotionSplineSet) -> Result<MotionCurves> {
        let mut curves = curves_from_splines(m, self.base.len())?;
        if let Some(mask) = &self.mask {
            for (i, affected) in mask.iter().enumerate() {
                if !affected {
                    curves.clear_view(i);
                }
            }
        }
        Ok(curves)
    }

    /// Effective geometry of a candidate: calibration ∘ prior ∘ annihilation.
    pub fn candidate_geometry(&self, m: &MotionSplineSet) -> Result<EffectiveTrajectory> {
        let curves = self.constrained_curves(m)?;
        let cand = annihilating_motion(&curves);
        let motions = match &self.prior_motion {
            Some(prior) => chain_motion(prior, &cand)?,
            None => cand,
        };
        compose(self.base, &motions)
    }

    /// Full objective evaluation (complete back-projection); used for final
    /// scores and tests.
    pub fn evaluate(&self, m: &MotionSplineSet) -> Result<(IqmValue, SliceTriplets)> {
        let eff = self.candidate_geometry(m)?;
        let slices = self.reconstructor.reconstruct(&eff)?;
        let value = self.metric.evaluate(&IqmInput { slices: &slices, eff: &eff })?;
        Ok((value, slices))
    }

    /// True when the metric reads the reconstructed slices (the oracle works
    /// on geometry alone and skips back-projection).
    fn needs_slices(&self) -> bool {
        self.metric.name() != "gt"
    }

    /// Objective evaluation reusing a cached partial back-projection over the
    /// views outside `support`.
    fn evaluate_incremental(
        &self,
        m: &MotionSplineSet,
        support: (usize, usize),
        static_acc: Option<&[Array2<f64>]>,
    ) -> Result<f64> {
        let eff = self.candidate_geometry(m)?;
        if !self.needs_slices() {
            return Ok(self.metric.evaluate(&IqmInput {
                slices: &SliceTriplets { slices: Vec::new() },
                eff: &eff,
            })?
            .score);
        }
        let static_acc = static_acc.expect("slice metrics carry a static accumulator");
        let mut acc: Vec<Array2<f64>> = static_acc.to_vec();
        let geoms: Vec<ViewGeometry> = view_geometries(&eff)
            .into_iter()
            .filter(|g| g.stack_index >= support.0 && g.stack_index < support.1)
            .collect();
        let set = self.reconstructor.slice_set();
        backproject_accumulate(&mut acc, set, &geoms, self.reconstructor.filtered().data());
        let slices = finalize(acc, self.reconstructor.scale());
        Ok(self.metric.evaluate(&IqmInput { slices: &slices, eff: &eff })?.score)
    }

    /// Partial back-projection of the candidate over all views outside
    /// `support`, kept fixed during one node's line search.
    fn static_accumulator(
        &self,
        m: &MotionSplineSet,
        support: (usize, usize),
    ) -> Result<Option<Vec<Array2<f64>>>> {
        if !self.needs_slices() {
            return Ok(None);
        }
        let eff = self.candidate_geometry(m)?;
        let set = self.reconstructor.slice_set();
        let mut acc: Vec<Array2<f64>> =
            set.planes.iter().map(|p| Array2::zeros((p.rows, p.cols))).collect();
        let geoms: Vec<ViewGeometry> = view_geometries(&eff)
            .into_iter()
            .filter(|g| g.stack_index < support.0 || g.stack_index >= support.1)
            .collect();
        backproject_accumulate(&mut acc, set, &geoms, self.reconstructor.filtered().data());
        Ok(Some(acc))
    }
}

/// Computes the soft-classifier view mask from the learned metric evaluated on
/// the initial (uncompensated) reconstruction. The mask is fixed before the
/// optimization starts.
pub fn initial_view_mask(
    problem_metric: &dyn ImageQualityMetric,
    reconstructor: &FdkReconstructor,
    base: &Trajectory,
    prior_motion: Option<&[RigidMotion]>,
    threshold: f64,
) -> Result<Vec<bool>> {
    let motions = match prior_motion {
        Some(p) => p.to_vec(),
        None => vec![RigidMotion::identity(); base.len()],
    };
    let eff = compose(base, &motions)?;
    let slices = reconstructor.reconstruct(&eff)?;
    let value = problem_metric.evaluate(&IqmInput { slices: &slices, eff: &eff })?;
    let scores = value.view_scores.ok_or_else(|| {
        Error::Config("view mask needs a metric with per-view outputs".into())
    })?;
    soft_classify(&scores.combined, &scores.in_plane, &scores.out_plane, threshold)
}

/// Staged node-sequential optimization of the annihilating spline set.
pub fn optimize_trajectory(
    problem: &AutofocusProblem,
    m0: &MotionSplineSet,
    axes: &[Axis],
    schedule: &StageSchedule,
) -> Result<CompensationResult> {
    schedule.validate()?;
    if axes.is_empty() {
        return Err(Error::Config("at least one axis must be optimized".into()));
    }
    let start = Instant::now();
    let n_views = problem.base.len();
    let mut m = m0.clone();
    let mut trace = Vec::new();
    let mut evaluations = 0usize;
    let axis_order: Vec<Axis> =
        Axis::OPTIMIZATION_ORDER.into_iter().filter(|a| axes.contains(a)).collect();
    'stages: for (stage_idx, stage) in schedule.stages.iter().enumerate() {
        let mut sweep_change = 0.0f64;
        for &axis in &axis_order {
            for node in 0..m.n_nodes() {
                let support = m.spline(axis).support_view_range(node, n_views);
                // Nodes whose entire support is masked motion-free cannot
                // change the objective; skip them.
                if let Some(mask) = problem.mask() {
                    if !mask[support.0..support.1].iter().any(|v| *v) {
                        continue;
                    }
                }
                let static_acc = problem.static_accumulator(&m, support)?;
                let x0 = m.value(axis, node);
                let mut node_evals = 0usize;
                let mut local_trace: Vec<TraceRow> = Vec::new();
                let outcome = {
                    let mut candidate = m.clone();
                    nelder_mead_1d(
                        |x| {
                            candidate.set_value(axis, node, x);
                            let score = problem.evaluate_incremental(
                                &candidate,
                                support,
                                static_acc.as_deref(),
                            )?;
                            node_evals += 1;
                            local_trace.push(TraceRow {
                                stage: stage_idx,
                                axis,
                                node,
                                evaluation: node_evals,
                                candidate: x,
                                score,
                            });
                            Ok(score)
                        },
                        x0,
                        stage.step,
                        stage.max_iterations,
                        schedule.tolerance,
                    )?
                };
                evaluations += outcome.evaluations;
                trace.append(&mut local_trace);
                if outcome.evaluations > 0 {
                    m.set_value(axis, node, outcome.x);
                    sweep_change = sweep_change.max((outcome.x - x0).abs());
                }
            }
        }
        // Coarse-to-fine early exit: a full sweep that barely moves any node
        // means the remaining stages cannot improve either.
        if sweep_change < schedule.tolerance {
            break 'stages;
        }
    }
    let (final_value, reconstruction) = problem.evaluate(&m)?;
    let curves = problem.constrained_curves(&m)?;
    Ok(CompensationResult {
        estimate: m,
        annihilating: annihilating_motion(&curves),
        reconstruction,
        final_score: final_value.score,
        trace,
        evaluations,
        wall_clock: start.elapsed(),
    })
}

/// One additional optimization stage under a second metric, starting from a
/// previous estimate (the `+` variants). The view mask, prior motion and
/// schedule tolerance carry over through `problem`.
pub fn fine_tune(
    problem: &AutofocusProblem,
    result: &CompensationResult,
    axes: &[Axis],
    stage: Stage,
    tolerance: f64,
) -> Result<CompensationResult> {
    let schedule = StageSchedule { stages: vec![stage], tolerance };
    let mut tuned = optimize_trajectory(problem, &result.estimate, axes, &schedule)?;
    let mut combined = result.trace.clone();
    combined.append(&mut tuned.trace);
    tuned.trace = combined;
    tuned.evaluations += result.evaluations;
    Ok(tuned)
}
