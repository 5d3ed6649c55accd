//! Short-scan FDK reconstruction: cosine weighting, Parker redundancy
//! weighting, ramp filtering and distance-weighted voxel back-projection onto
//! arbitrary slice sets.
//!
//! Projections are filtered once; every motion candidate afterwards only
//! re-runs the back-projection with freshly composed matrices. The overall
//! scale is 2·Δβ·sdd/sid: the factor 2 compensates the half-ramp |η|/2
//! together with Parker weights whose redundant pairs sum to one, and sdd/sid
//! converts filtering on the physical panel to the isocenter plane.

use nalgebra::{Matrix3x4, Vector3, Vector4};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{EffectiveTrajectory, Intrinsics, Trajectory};
use crate::phantom::{Phantom, ProjectionData, VoxelGrid};

/// Projection stack with filtering provenance flags.
#[derive(Debug, Clone)]
pub struct ProjectionStack {
    pub data: Array3<f32>,
    pub cosine_weighted: bool,
    pub parker_weighted: bool,
    pub ramp_filtered: bool,
}

impl ProjectionStack {
    pub fn raw(data: Array3<f32>) -> Self {
        Self { data, cosine_weighted: false, parker_weighted: false, ramp_filtered: false }
    }

    pub fn n_views(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Fully weighted and filtered stack, ready for back-projection.
#[derive(Debug, Clone)]
pub struct FilteredStack {
    stack: ProjectionStack,
}

impl FilteredStack {
    pub fn new(stack: ProjectionStack) -> Result<Self> {
        if !(stack.cosine_weighted && stack.parker_weighted && stack.ramp_filtered) {
            return Err(Error::State(
                "stack must be cosine-weighted, Parker-weighted and ramp-filtered".into(),
            ));
        }
        Ok(Self { stack })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.stack.data
    }
}

/// Scales every pixel by sdd/sqrt(sdd² + û² + v̂²).
pub fn cosine_weight(stack: &mut ProjectionStack, intr: &Intrinsics) -> Result<()> {
    if stack.cosine_weighted {
        return Err(Error::State("stack is already cosine-weighted".into()));
    }
    let (_, nv, nu) = stack.data.dim();
    let mut col_sq = vec![0.0f64; nu];
    for (u, w) in col_sq.iter_mut().enumerate() {
        *w = intr.u_offset_mm(u as f64).powi(2);
    }
    for mut view in stack.data.outer_iter_mut() {
        for v in 0..nv {
            let vy = intr.v_offset_mm(v as f64).powi(2);
            for u in 0..nu {
                let w = intr.sdd / (intr.sdd * intr.sdd + col_sq[u] + vy).sqrt();
                view[(v, u)] *= w as f32;
            }
        }
    }
    stack.cosine_weighted = true;
    Ok(())
}

/// Continuous Parker weight for a ray at scan angle `beta` (radians from the
/// first view) and fan angle `gamma` (radians, positive toward the detector
/// u direction), with half fan angle `gamma_m`.
///
/// Redundant rays are the pairs (β, γ) and (β + π - 2γ, -γ); their weights
/// sum to one and the interior weight is exactly one.
pub fn parker_weight(beta: f64, gamma: f64, gamma_m: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_4, PI};
    let enter_end = 2.0 * (gamma_m + gamma);
    let exit_start = PI + 2.0 * gamma;
    let w = if beta < enter_end {
        let s = (FRAC_PI_4 * beta / (gamma_m + gamma)).sin();
        s * s
    } else if beta <= exit_start {
        1.0
    } else {
        let s = (FRAC_PI_4 * (PI + 2.0 * gamma_m - beta) / (gamma_m - gamma)).sin();
        s * s
    };
    w.clamp(0.0, 1.0)
}

/// Per-view, per-column Parker weights (independent of the detector row).
pub fn parker_weights(traj: &Trajectory) -> Result<Array2<f64>> {
    let intr = traj.intrinsics();
    let gamma_m = intr.half_fan_angle();
    let span = traj.span_deg().to_radians();
    let required = std::f64::consts::PI + 2.0 * gamma_m;
    if span < required - 1e-9 {
        return Err(Error::Config(format!(
            "short-scan span {span:.4} rad is below the required {required:.4} rad"
        )));
    }
    let n = traj.len();
    let beta0 = traj.angle_deg(0);
    let mut w = Array2::<f64>::zeros((n, intr.nu));
    for i in 0..n {
        let beta = (traj.angle_deg(i) - beta0).to_radians();
        for u in 0..intr.nu {
            let gamma = (intr.u_offset_mm(u as f64) / intr.sdd).atan();
            w[(i, u)] = parker_weight(beta, gamma, gamma_m);
        }
    }
    Ok(w)
}

/// Views whose mean Parker weight exceeds 0.99: the range safe for placing
/// simulated motion (inclusive bounds).
pub fn parker_safe_range(traj: &Trajectory) -> Result<(usize, usize)> {
    let w = parker_weights(traj)?;
    let nu = w.ncols();
    let mut lo = None;
    let mut hi = 0usize;
    for i in 0..w.nrows() {
        let mean: f64 = w.row(i).sum() / nu as f64;
        if mean > 0.99 {
            if lo.is_none() {
                lo = Some(i);
            }
            hi = i;
        }
    }
    let lo = lo.ok_or_else(|| Error::Config("no Parker-safe views in trajectory".into()))?;
    Ok((lo, hi))
}

/// Multiplies the stack by per-view, per-column redundancy weights.
pub fn apply_parker(stack: &mut ProjectionStack, weights: &Array2<f64>) -> Result<()> {
    if stack.parker_weighted {
        return Err(Error::State("stack is already Parker-weighted".into()));
    }
    let (n, nv, nu) = stack.data.dim();
    if weights.dim() != (n, nu) {
        return Err(Error::Shape(format!(
            "weights are {:?}, stack needs ({n}, {nu})",
            weights.dim()
        )));
    }
    for i in 0..n {
        for v in 0..nv {
            for u in 0..nu {
                stack.data[(i, v, u)] *= weights[(i, u)] as f32;
            }
        }
    }
    stack.parker_weighted = true;
    Ok(())
}

/// Band-limited discrete ramp filter (gain |η|/2), realized as the analytic
/// spatial kernel tabulated circularly on a power-of-two padding and applied
/// per detector row through the FFT. Output is scaled by the pixel pitch so
/// values are sampling-rate consistent.
pub struct RampFilter {
    transfer: Vec<f64>,
    padded: usize,
    du: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(nu: usize, du: f64) -> Self {
        let padded = (2 * nu).next_power_of_two();
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        kernel[0].re = band_limited_ramp_kernel(0, du);
        for n in 1..=padded / 2 {
            let v = band_limited_ramp_kernel(n as i64, du);
            kernel[n].re = v;
            kernel[padded - n].re = v;
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(padded);
        let inv = planner.plan_fft_inverse(padded);
        fwd.process(&mut kernel);
        // Even real kernel: the spectrum is real.
        let transfer = kernel.iter().map(|c| c.re).collect();
        Self { transfer, padded, du, fwd, inv }
    }

    /// Filters one detector row in place.
    pub fn apply_row(&self, row: &mut [f32]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (b, r) in buf.iter_mut().zip(row.iter()) {
            b.re = *r as f64;
        }
        self.fwd.process(&mut buf);
        for (b, t) in buf.iter_mut().zip(self.transfer.iter()) {
            *b *= *t;
        }
        self.inv.process(&mut buf);
        let norm = self.du / self.padded as f64;
        for (r, b) in row.iter_mut().zip(buf.iter()) {
            *r = (b.re * norm) as f32;
        }
    }
}

/// Spatial samples of the band-limited |η|/2 ramp at integer pixel offsets.
pub fn band_limited_ramp_kernel(n: i64, du: f64) -> f64 {
    if n == 0 {
        1.0 / (8.0 * du * du)
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / (2.0 * std::f64::consts::PI.powi(2) * (n * n) as f64 * du * du)
    }
}

/// Convolves every detector row with the ramp kernel.
pub fn ramp_filter(stack: &mut ProjectionStack, intr: &Intrinsics) -> Result<()> {
    if !stack.cosine_weighted {
        return Err(Error::State("ramp filter expects a cosine-weighted stack".into()));
    }
    if stack.ramp_filtered {
        return Err(Error::State("stack is already ramp-filtered".into()));
    }
    let (_, _, nu) = stack.data.dim();
    let filter = RampFilter::new(nu, intr.du);
    let rows: Vec<&mut [f32]> = stack.data.as_slice_mut().unwrap().chunks_mut(nu).collect();
    rows.into_par_iter().for_each(|row| filter.apply_row(row));
    stack.ramp_filtered = true;
    Ok(())
}

/// Runs the full weighting and filtering pipeline in order:
/// cosine → Parker → ramp.
pub fn filter_projections(raw: ProjectionData, traj: &Trajectory) -> Result<FilteredStack> {
    let mut stack = ProjectionStack::raw(raw);
    let intr = traj.intrinsics();
    cosine_weight(&mut stack, intr)?;
    let w = parker_weights(traj)?;
    apply_parker(&mut stack, &w)?;
    ramp_filter(&mut stack, intr)?;
    FilteredStack::new(stack)
}

/// Slice orientation labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] =
        [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    pub fn label(self) -> &'static str {
        match self {
            Orientation::Axial => "ax",
            Orientation::Coronal => "co",
            Orientation::Sagittal => "sa",
        }
    }
}

/// One reconstruction plane: an affine grid of world coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicePlane {
    pub orientation: Orientation,
    pub rows: usize,
    pub cols: usize,
    pub origin: [f64; 3],
    pub row_step: [f64; 3],
    pub col_step: [f64; 3],
}

impl SlicePlane {
    pub fn world_point(&self, r: usize, c: usize) -> Vector3<f64> {
        Vector3::from(self.origin)
            + Vector3::from(self.row_step) * r as f64
            + Vector3::from(self.col_step) * c as f64
    }

    pub fn world_point_h(&self, r: usize, c: usize) -> Vector4<f64> {
        let p = self.world_point(r, c);
        Vector4::new(p[0], p[1], p[2], 1.0)
    }
}

/// Nine slice planes: triplets of axial, coronal and sagittal orientation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceSet {
    pub planes: Vec<SlicePlane>,
    pub spacing: f64,
}

impl SliceSet {
    /// Standard layout derived from a centered voxel grid: per orientation,
    /// three parallel planes at -20%, 0 and +20% of the grid extent along the
    /// orientation normal.
    ///
    /// Axial slices span (x, y) as (rows, cols); coronal slices span (z, x);
    /// sagittal slices span (z, y).
    pub fn standard(grid: &VoxelGrid) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        let sp = grid.spacing;
        let ext = [nx as f64 * sp, ny as f64 * sp, nz as f64 * sp];
        let x0 = grid.origin[0];
        let y0 = grid.origin[1];
        let z0 = grid.origin[2];
        let offsets = [-0.2, 0.0, 0.2];
        let mut planes = Vec::with_capacity(9);
        for f in offsets {
            planes.push(SlicePlane {
                orientation: Orientation::Axial,
                rows: nx,
                cols: ny,
                origin: [x0, y0, f * ext[2]],
                row_step: [sp, 0.0, 0.0],
                col_step: [0.0, sp, 0.0],
            });
        }
        for f in offsets {
            planes.push(SlicePlane {
                orientation: Orientation::Coronal,
                rows: nz,
                cols: nx,
                origin: [x0, f * ext[1], z0],
                row_step: [0.0, 0.0, sp],
                col_step: [sp, 0.0, 0.0],
            });
        }
        for f in offsets {
            planes.push(SlicePlane {
                orientation: Orientation::Sagittal,
                rows: nz,
                cols: ny,
                origin: [f * ext[0], y0, z0],
                row_step: [0.0, 0.0, sp],
                col_step: [0.0, sp, 0.0],
            });
        }
        if planes.iter().any(|p| {
            p.origin
                .iter()
                .chain(p.row_step.iter())
                .chain(p.col_step.iter())
                .any(|v| !v.is_finite())
        }) {
            return Err(Error::Config("slice coordinates must be finite".into()));
        }
        Ok(Self { planes, spacing: sp })
    }

    pub fn n_pixels(&self) -> usize {
        self.planes.iter().map(|p| p.rows * p.cols).sum()
    }

    /// Indices of the planes with the given orientation.
    pub fn orientation_indices(&self, o: Orientation) -> Vec<usize> {
        self.planes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.orientation == o)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reconstructed values for the nine slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplets {
    pub slices: Vec<Array2<f32>>,
}

impl SliceTriplets {
    pub fn zeros(set: &SliceSet) -> Self {
        Self { slices: set.planes.iter().map(|p| Array2::zeros((p.rows, p.cols))).collect() }
    }

    pub fn total_pixels(&self) -> usize {
        self.slices.iter().map(|s| s.len()).sum()
    }
}

/// Samples the phantom density at every slice pixel: the voxelized ground
/// truth on the reconstruction grid.
pub fn ground_truth_slices(phantom: &Phantom, set: &SliceSet) -> SliceTriplets {
    let slices = set
        .planes
        .par_iter()
        .map(|plane| {
            Array2::from_shape_fn((plane.rows, plane.cols), |(r, c)| {
                phantom.density_at(&plane.world_point(r, c)) as f32
            })
        })
        .collect();
    SliceTriplets { slices }
}

/// Back-projection geometry of one view: stack index, matrix entries and the
/// isocenter depth feeding the distance weight.
#[derive(Debug, Clone, Copy)]
pub struct ViewGeometry {
    pub stack_index: usize,
    pub matrix: Matrix3x4<f64>,
    pub iso_depth: f64,
}

/// Extracts per-view back-projection geometry from an effective trajectory.
pub fn view_geometries(eff: &EffectiveTrajectory) -> Vec<ViewGeometry> {
    (0..eff.len())
        .map(|i| ViewGeometry {
            stack_index: i,
            matrix: *eff.composed(i).matrix(),
            iso_depth: eff.composed(i).isocenter_depth(),
        })
        .collect()
}

/// Accumulates distance-weighted bilinear back-projection of the selected
/// views into f64 slice buffers (unscaled).
pub fn backproject_accumulate(
    acc: &mut [Array2<f64>],
    set: &SliceSet,
    views: &[ViewGeometry],
    stack: &Array3<f32>,
) {
    let (_, nv, nu) = stack.dim();
    for (plane, buf) in set.planes.iter().zip(acc.iter_mut()) {
        let cols = plane.cols;
        let rows: Vec<(usize, &mut [f64])> =
            buf.as_slice_mut().unwrap().chunks_mut(cols).enumerate().collect();
        rows.into_par_iter().for_each(|(r, row)| {
            for g in views {
                let img = stack.index_axis(ndarray::Axis(0), g.stack_index);
                let m = &g.matrix;
                let p0 = plane.world_point(r, 0);
                // Projected coordinates advance linearly along the row.
                let mut x = m[(0, 0)] * p0[0] + m[(0, 1)] * p0[1] + m[(0, 2)] * p0[2] + m[(0, 3)];
                let mut y = m[(1, 0)] * p0[0] + m[(1, 1)] * p0[1] + m[(1, 2)] * p0[2] + m[(1, 3)];
                let mut w = m[(2, 0)] * p0[0] + m[(2, 1)] * p0[1] + m[(2, 2)] * p0[2] + m[(2, 3)];
                let s = plane.col_step;
                let dx = m[(0, 0)] * s[0] + m[(0, 1)] * s[1] + m[(0, 2)] * s[2];
                let dy = m[(1, 0)] * s[0] + m[(1, 1)] * s[1] + m[(1, 2)] * s[2];
                let dw = m[(2, 0)] * s[0] + m[(2, 1)] * s[1] + m[(2, 2)] * s[2];
                for value in row.iter_mut() {
                    if w > 1e-9 {
                        let u = x / w;
                        let v = y / w;
                        if u >= 0.0 && u <= (nu - 1) as f64 && v >= 0.0 && v <= (nv - 1) as f64 {
                            let u0 = u.floor();
                            let v0 = v.floor();
                            let fu = u - u0;
                            let fv = v - v0;
                            let ui = u0 as usize;
                            let vi = v0 as usize;
                            let u1 = (ui + 1).min(nu - 1);
                            let v1 = (vi + 1).min(nv - 1);
                            let a = img[(vi, ui)] as f64;
                            let b = img[(vi, u1)] as f64;
                            let c = img[(v1, ui)] as f64;
                            let d = img[(v1, u1)] as f64;
                            let interp = a * (1.0 - fu) * (1.0 - fv)
                                + b * fu * (1.0 - fv)
                                + c * (1.0 - fu) * fv
                                + d * fu * fv;
                            let rel = g.iso_depth / w;
                            *value += rel * rel * interp;
                        }
                    }
                    x += dx;
                    y += dy;
                    w += dw;
                }
            }
        });
    }
}

/// Overall FDK scale: angular step times the short-scan and panel factors.
pub fn fdk_scale(traj: &Trajectory) -> f64 {
    let intr = traj.intrinsics();
    2.0 * traj.angular_step_rad() * intr.sdd / intr.sid
}

/// Distance-weighted back-projection of a fully filtered stack onto the slice
/// set, using the composed per-view geometry.
pub fn backproject(
    set: &SliceSet,
    eff: &EffectiveTrajectory,
    filtered: &FilteredStack,
) -> Result<SliceTriplets> {
    if eff.len() != filtered.data().shape()[0] {
        return Err(Error::Shape(format!(
            "trajectory has {} views, stack has {}",
            eff.len(),
            filtered.data().shape()[0]
        )));
    }
    let mut acc: Vec<Array2<f64>> =
        set.planes.iter().map(|p| Array2::zeros((p.rows, p.cols))).collect();
    let views = view_geometries(eff);
    backproject_accumulate(&mut acc, set, &views, filtered.data());
    let scale = fdk_scale(eff.base());
    Ok(finalize(acc, scale))
}

/// Converts accumulated f64 sums into scaled f32 slices.
pub fn finalize(acc: Vec<Array2<f64>>, scale: f64) -> SliceTriplets {
    SliceTriplets { slices: acc.into_iter().map(|a| a.mapv(|v| (v * scale) as f32)).collect() }
}

/// Filter-once reconstructor: weights and filters the raw stack at
/// construction, then serves repeated back-projections for new effective
/// trajectories from the cached filtered data.
pub struct FdkReconstructor {
    filtered: FilteredStack,
    set: SliceSet,
    scale: f64,
    filter_runs: usize,
}

impl FdkReconstructor {
    pub fn new(raw: ProjectionData, traj: &Trajectory, set: SliceSet) -> Result<Self> {
        let filtered = filter_projections(raw, traj)?;
        Ok(Self { filtered, set, scale: fdk_scale(traj), filter_runs: 1 })
    }

    pub fn slice_set(&self) -> &SliceSet {
        &self.set
    }

    pub fn filtered(&self) -> &FilteredStack {
        &self.filtered
    }

    /// Number of filter pipeline executions since construction (always 1).
    pub fn filter_runs(&self) -> usize {
        self.filter_runs
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn reconstruct(&self, eff: &EffectiveTrajectory) -> Result<SliceTriplets> {
        backproject(&self.set, eff, &self.filtered)
    }
}

/// One-shot reconstruction: cosine → Parker → ramp → back-projection.
pub fn reconstruct(
    set: &SliceSet,
    eff: &EffectiveTrajectory,
    raw: ProjectionData,
) -> Result<SliceTriplets> {
    let filtered = filter_projections(raw, eff.base())?;
    backproject(set, eff, &filtered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_short_scan, compose, project_point, RigidMotion};
    use crate::phantom::{render_projections, Ellipsoid, Phantom};

    fn intr() -> Intrinsics {
        Intrinsics { sid: 375.0, sdd: 600.0, nu: 64, nv: 48, du: 3.0, dv: 1.6, cu: 31.5, cv: 23.5 }
    }

    fn small_grid() -> VoxelGrid {
        VoxelGrid::centered([54, 64, 18], 1.68).unwrap()
    }

    #[test]
    fn cosine_weight_properties() {
        let i = intr();
        let mut stack = ProjectionStack::raw(Array3::ones((2, i.nv, i.nu)));
        cosine_weight(&mut stack, &i).unwrap();
        for v in 0..i.nv {
            for u in 0..i.nu {
                let w = stack.data[(0, v, u)];
                assert!(w > 0.0 && w <= 1.0);
                let expected = i.sdd
                    / (i.sdd * i.sdd
                        + i.u_offset_mm(u as f64).powi(2)
                        + i.v_offset_mm(v as f64).powi(2))
                    .sqrt();
                assert!((w as f64 - expected).abs() < 1e-7);
            }
        }
        assert!(matches!(cosine_weight(&mut stack, &i), Err(Error::State(_))));
    }

    #[test]
    fn cosine_weight_halves_at_sixty_degrees() {
        // û² + v̂² = 3·sdd² puts the ray at 60° off axis: weight 0.5.
        let i = Intrinsics {
            sid: 5.0,
            sdd: 10.0,
            nu: 4,
            nv: 2,
            du: 10.0 * 3.0f64.sqrt(),
            dv: 0.001,
            cu: 0.0,
            cv: 0.0,
        };
        let mut stack = ProjectionStack::raw(Array3::ones((1, 2, 4)));
        cosine_weight(&mut stack, &i).unwrap();
        // Pixel u = 1 has û = sdd·sqrt(3), v̂ ~ 0.
        assert!((stack.data[(0, 0, 1)] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn parker_interior_is_one_and_pairs_sum_to_one() {
        let i = intr();
        let traj = build_short_scan(&i, 200, 0.0).unwrap();
        let w = parker_weights(&traj).unwrap();
        let gamma_m = i.half_fan_angle();
        let beta0 = traj.angle_deg(0);
        let span = traj.span_deg().to_radians();
        let mut interior = 0usize;
        let mut pairs = 0usize;
        for vi in 0..traj.len() {
            let beta = (traj.angle_deg(vi) - beta0).to_radians();
            for u in 0..i.nu {
                let gamma = (i.u_offset_mm(u as f64) / i.sdd).atan();
                assert!((0.0..=1.0).contains(&w[(vi, u)]));
                if beta >= 2.0 * (gamma_m + gamma) && beta <= std::f64::consts::PI + 2.0 * gamma {
                    assert_eq!(w[(vi, u)], 1.0);
                    interior += 1;
                }
                // Complementarity with the redundant partner ray.
                let partner_beta = beta + std::f64::consts::PI - 2.0 * gamma;
                if partner_beta <= span + 1e-12 {
                    let sum = w[(vi, u)] + parker_weight(partner_beta, -gamma, gamma_m);
                    assert!((sum - 1.0).abs() < 1e-6, "pair sum {sum} at view {vi}, column {u}");
                    pairs += 1;
                }
            }
        }
        assert!(interior > 0);
        assert!(pairs > 0);
    }

    #[test]
    fn parker_safe_range_is_interior() {
        let i = intr();
        let traj = build_short_scan(&i, 100, 0.0).unwrap();
        let (lo, hi) = parker_safe_range(&traj).unwrap();
        assert!(lo > 0 && hi < 99 && lo < hi);
        let w = parker_weights(&traj).unwrap();
        let mean_lo: f64 = w.row(lo).sum() / i.nu as f64;
        assert!(mean_lo > 0.99);
    }

    #[test]
    fn parker_rejects_too_short_span() {
        let i = intr();
        let full = build_short_scan(&i, 40, 0.0).unwrap();
        let views: Vec<_> = (0..30).map(|k| (full.matrix(k).clone(), full.angle_deg(k))).collect();
        let short = Trajectory::new(views, i).unwrap();
        assert!(matches!(parker_weights(&short), Err(Error::Config(_))));
    }

    #[test]
    fn ramp_impulse_matches_analytic_kernel() {
        let nu = 256;
        let du = 2.0;
        let i = Intrinsics { sid: 375.0, sdd: 600.0, nu, nv: 2, du, dv: 1.0, cu: 127.5, cv: 0.5 };
        let mut stack = ProjectionStack::raw(Array3::zeros((1, 2, nu)));
        let m = nu / 2;
        stack.data[(0, 0, m)] = 1.0;
        stack.cosine_weighted = true; // bypass weighting for the pure kernel
        ramp_filter(&mut stack, &i).unwrap();
        for k in 0..nu {
            let offset = k as i64 - m as i64;
            let expected = du * band_limited_ramp_kernel(offset, du);
            let got = stack.data[(0, 0, k)] as f64;
            assert!(
                (got - expected).abs() < 1e-6,
                "offset {offset}: got {got}, expected {expected}"
            );
        }
        // Even symmetry around the impulse.
        for j in 1..60 {
            let a = stack.data[(0, 0, m - j)];
            let b = stack.data[(0, 0, m + j)];
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ramp_suppresses_constant_rows_away_from_edges() {
        let nu = 128;
        let i =
            Intrinsics { sid: 375.0, sdd: 600.0, nu, nv: 2, du: 1.5, dv: 1.0, cu: 63.5, cv: 0.5 };
        let level = 7.0f32;
        let mut stack = ProjectionStack::raw(Array3::from_elem((1, 2, nu), level));
        stack.cosine_weighted = true;
        ramp_filter(&mut stack, &i).unwrap();
        // The ramp kills the DC component; away from the row ends the response
        // stays below 1e-3 of the input level (the ends carry the step edge).
        for u in nu / 4..3 * nu / 4 {
            let v = stack.data[(0, 0, u)].abs();
            assert!(v <= 1e-3 * level, "column {u}: {v}");
        }
    }

    #[test]
    fn ramp_is_linear() {
        let nu = 64;
        let i = intr();
        let mut a = ProjectionStack::raw(Array3::from_shape_fn((1, 1, nu), |(_, _, u)| {
            (u as f32 * 0.37).sin()
        }));
        let mut b = ProjectionStack::raw(Array3::from_shape_fn((1, 1, nu), |(_, _, u)| {
            ((u * u) as f32 * 0.011).cos()
        }));
        let mut ab = ProjectionStack::raw(&a.data + &b.data);
        for s in [&mut a, &mut b, &mut ab] {
            s.cosine_weighted = true;
        }
        ramp_filter(&mut a, &i).unwrap();
        ramp_filter(&mut b, &i).unwrap();
        ramp_filter(&mut ab, &i).unwrap();
        let max = ab
            .data
            .iter()
            .zip(a.data.iter().zip(b.data.iter()))
            .map(|(ab, (a, b))| (ab - (a + b)).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-6, "linearity violated by {max}");
    }

    #[test]
    fn ramp_requires_cosine_weighting_first() {
        let i = intr();
        let mut stack = ProjectionStack::raw(Array3::ones((1, 2, i.nu)));
        assert!(matches!(ramp_filter(&mut stack, &i), Err(Error::State(_))));
    }

    #[test]
    fn backprojection_rejects_unfiltered_stack() {
        let i = intr();
        let mut stack = ProjectionStack::raw(Array3::ones((8, i.nv, i.nu)));
        cosine_weight(&mut stack, &i).unwrap();
        assert!(FilteredStack::new(stack).is_err());
    }

    #[test]
    fn zero_projections_backproject_to_zero() {
        let i = intr();
        let traj = build_short_scan(&i, 8, 0.0).unwrap();
        let eff = compose(&traj, &vec![RigidMotion::identity(); 8]).unwrap();
        let filtered = filter_projections(Array3::zeros((8, i.nv, i.nu)), &traj).unwrap();
        let set = SliceSet::standard(&small_grid()).unwrap();
        let out = backproject(&set, &eff, &filtered).unwrap();
        assert!(out.slices.iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn backprojection_matches_scalar_oracle() {
        let i = intr();
        let n = 12;
        let traj = build_short_scan(&i, n, 0.0).unwrap();
        let motion: Vec<RigidMotion> = (0..n)
            .map(|k| RigidMotion { rz: 0.2 * k as f64, tx: 0.1 * k as f64, ..Default::default() })
            .collect();
        let eff = compose(&traj, &motion).unwrap();
        // Deterministic pseudo-random "filtered" data.
        let data = Array3::from_shape_fn((n, i.nv, i.nu), |(a, b, c)| {
            (((a * 131 + b * 31 + c * 7) % 97) as f32 - 48.0) * 0.021
        });
        let filtered = FilteredStack::new(ProjectionStack {
            data: data.clone(),
            cosine_weighted: true,
            parker_weighted: true,
            ramp_filtered: true,
        })
        .unwrap();
        let set = SliceSet::standard(&small_grid()).unwrap();
        let out = backproject(&set, &eff, &filtered).unwrap();

        // Independent scalar loop for one pixel of one slice.
        let (plane_idx, r, c) = (4usize, 9usize, 21usize);
        let plane = &set.planes[plane_idx];
        let a = plane.world_point_h(r, c);
        let mut total = 0.0f64;
        for vi in 0..n {
            let p = eff.composed(vi);
            let w = p.depth(&a);
            if w <= 1e-9 {
                continue;
            }
            let (u, v) = project_point(p, &a).unwrap();
            if u < 0.0 || u > (i.nu - 1) as f64 || v < 0.0 || v > (i.nv - 1) as f64 {
                continue;
            }
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let (fu, fv) = (u - u0 as f64, v - v0 as f64);
            let (u1, v1) = ((u0 + 1).min(i.nu - 1), (v0 + 1).min(i.nv - 1));
            let interp = data[(vi, v0, u0)] as f64 * (1.0 - fu) * (1.0 - fv)
                + data[(vi, v0, u1)] as f64 * fu * (1.0 - fv)
                + data[(vi, v1, u0)] as f64 * (1.0 - fu) * fv
                + data[(vi, v1, u1)] as f64 * fu * fv;
            let rel = p.isocenter_depth() / w;
            total += rel * rel * interp;
        }
        let expected = total * fdk_scale(&traj);
        // The stored f32 slice carries its quantization; the f64 accumulation
        // itself matches the scalar loop to 1e-9.
        let mut acc: Vec<Array2<f64>> =
            set.planes.iter().map(|p| Array2::zeros((p.rows, p.cols))).collect();
        backproject_accumulate(&mut acc, &set, &view_geometries(&eff), &data);
        let got64 = acc[plane_idx][(r, c)] * fdk_scale(&traj);
        assert!((got64 - expected).abs() < 1e-9, "got {got64}, expected {expected}");
        let got32 = out.slices[plane_idx][(r, c)] as f64;
        assert!((got32 - expected).abs() < 1e-6 * expected.abs().max(1.0));
    }

    #[test]
    fn uniform_sphere_density_is_recovered() {
        // End-to-end normalization check: reconstruct a uniform sphere and
        // compare interior values against the known density.
        let i = intr();
        let n = 100;
        let traj = build_short_scan(&i, n, 0.0).unwrap();
        let ph = Phantom::new("s", vec![Ellipsoid::sphere([0.0; 3], 40.0, 1.0)]).unwrap();
        let raw = render_projections(&ph, &traj, None).unwrap();
        let eff = compose(&traj, &vec![RigidMotion::identity(); n]).unwrap();
        let set = SliceSet::standard(&small_grid()).unwrap();
        let out = reconstruct(&set, &eff, raw).unwrap();
        // Mean over interior pixels of the central axial slice.
        let plane = &set.planes[1];
        let slice = &out.slices[1];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..plane.rows {
            for c in 0..plane.cols {
                if plane.world_point(r, c).norm() < 25.0 {
                    total += slice[(r, c)] as f64;
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        assert!((mean - 1.0).abs() < 0.1, "interior mean {mean} deviates from density 1.0");
    }

    #[test]
    fn full_pipeline_is_linear_in_the_projection_data() {
        let i = intr();
        let n = 12;
        let traj = build_short_scan(&i, n, 0.0).unwrap();
        let eff = compose(&traj, &vec![RigidMotion::identity(); n]).unwrap();
        let set = SliceSet::standard(&small_grid()).unwrap();
        let a = Array3::from_shape_fn((n, i.nv, i.nu), |(x, y, z)| {
            ((x * 17 + y * 5 + z) % 23) as f32 * 0.07
        });
        let b = Array3::from_shape_fn((n, i.nv, i.nu), |(x, y, z)| {
            ((x * 3 + y * 11 + z * 2) % 19) as f32 * 0.05
        });
        let ra = reconstruct(&set, &eff, a.clone()).unwrap();
        let rb = reconstruct(&set, &eff, b.clone()).unwrap();
        let rab = reconstruct(&set, &eff, &a + &b).unwrap();
        let mut worst = 0.0f32;
        for ((sa, sb), sab) in ra.slices.iter().zip(rb.slices.iter()).zip(rab.slices.iter()) {
            for ((va, vb), vab) in sa.iter().zip(sb.iter()).zip(sab.iter()) {
                worst = worst.max((vab - (va + vb)).abs());
            }
        }
        assert!(worst < 1e-4, "linearity violated by {worst}");
    }

    #[test]
    fn identity_motion_equals_base_reconstruction_bitwise() {
        let i = intr();
        let n = 20;
        let traj = build_short_scan(&i, n, 0.0).unwrap();
        let ph = Phantom::new("s", vec![Ellipsoid::sphere([6.0, -4.0, 2.0], 25.0, 0.8)]).unwrap();
        let raw = render_projections(&ph, &traj, None).unwrap();
        let set = SliceSet::standard(&small_grid()).unwrap();
        let rec = FdkReconstructor::new(raw, &traj, set).unwrap();
        let base_eff = compose(&traj, &vec![RigidMotion::identity(); n]).unwrap();
        let a = rec.reconstruct(&base_eff).unwrap();
        let b = rec.reconstruct(&base_eff).unwrap();
        assert_eq!(a, b);
        assert_eq!(rec.filter_runs(), 1);
    }

    #[test]
    fn common_in_plane_shift_moves_the_reconstruction() {
        let i = intr();
        let n = 60;
        let traj = build_short_scan(&i, n, 0.0).unwrap();
        let ph = Phantom::new("s", vec![Ellipsoid::sphere([0.0, 0.0, 0.0], 18.0, 1.0)]).unwrap();
        let raw = render_projections(&ph, &traj, None).unwrap();
        let grid = small_grid();
        let set = SliceSet::standard(&grid).unwrap();
        let rec = FdkReconstructor::new(raw, &traj, set.clone()).unwrap();
        let still =
            rec.reconstruct(&compose(&traj, &vec![RigidMotion::identity(); n]).unwrap()).unwrap();
        // Shift every view identically: the object appears rigidly moved.
        let shift_mm = 2.0 * grid.spacing; // two pixels along +x
        let moved = rec
            .reconstruct(
                &compose(&traj, &vec![RigidMotion { tx: shift_mm, ..Default::default() }; n])
                    .unwrap(),
            )
            .unwrap();
        // Cross-correlate the central axial slice over integer row shifts
        // (rows advance along +x).
        let a = &still.slices[1];
        let b = &moved.slices[1];
        let rows = a.nrows();
        let mut best = (0i64, f64::MIN);
        for shift in -4i64..=4 {
            let mut num = 0.0;
            for r in 0..rows {
                let rs = r as i64 + shift;
                if rs < 0 || rs >= rows as i64 {
                    continue;
                }
                for c in 0..a.ncols() {
                    num += a[(r, c)] as f64 * b[(rs as usize, c)] as f64;
                }
            }
            if num > best.1 {
                best = (shift, num);
            }
        }
        // Composing P with a +x translation samples the static reconstruction
        // at shifted coordinates, so the image content moves by -shift.
        assert_eq!(best.0, -2, "correlation peak at {}", best.0);
    }
}
