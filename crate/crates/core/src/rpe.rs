//! Object-independent reprojection-error ground truth.
//!
//! Virtual markers on three concentric spheres are projected under the
//! calibrated and the motion-perturbed geometry; the detector-plane distance
//! between the two projections, in physical mm, is the per-marker error. The
//! per-view value is the RMS over markers so it carries mm units, and the mean
//! over views is the scalar regression target.

use nalgebra::{DMatrix, DVector, Matrix3x4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point, EffectiveTrajectory, ProjectionMatrix, RigidMotion};

/// Homogeneous 3-D marker positions on concentric spheres.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerSet {
    points: Vec<Vector4<f64>>,
}

impl MarkerSet {
    pub fn points(&self) -> &[Vector4<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Near-uniform deterministic sphere covering via a Fibonacci lattice, rotated
/// per sphere by a seeded rotation so different seeds give different sets.
pub fn generate_markers(radii: &[f64], per_sphere: usize, seed: u64) -> Result<MarkerSet> {
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config("marker sphere radii must be positive".into()));
    }
    if radii.len() * per_sphere < 6 {
        return Err(Error::Config("marker set needs at least six points".into()));
    }
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut points = Vec::with_capacity(radii.len() * per_sphere);
    for (si, &r) in radii.iter().enumerate() {
        // Seeded axis rotation, deterministic and cheap.
        let phase = ((seed as f64).sin() * 1e4).fract() * std::f64::consts::TAU
            + si as f64 * 0.7;
        for k in 0..per_sphere {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / per_sphere as f64;
            let phi = std::f64::consts::TAU * (k as f64 / golden + phase);
            let rho = (1.0 - z * z).sqrt();
            points.push(Vector4::new(
                r * rho * phi.cos(),
                r * rho * phi.sin(),
                r * z,
                1.0,
            ));
        }
    }
    Ok(MarkerSet { points })
}

/// Default marker layout: three spheres at 30/60/90 mm scaled to desk size,
/// 30 points each.
pub fn default_markers(desk_scale: f64, seed: u64) -> Result<MarkerSet> {
    generate_markers(&[30.0 * desk_scale, 60.0 * desk_scale, 90.0 * desk_scale], 30, seed)
}

/// Squared detector distance in mm² between the projections of one marker
/// under the calibrated and the perturbed geometry.
pub fn marker_rpe(
    p: &ProjectionMatrix,
    p_tilde: &ProjectionMatrix,
    a: &Vector4<f64>,
    pitch: (f64, f64),
) -> Result<f64> {
    let (u0, v0) = project_point(p, a)?;
    let (u1, v1) = project_point(p_tilde, a)?;
    let du = (u0 - u1) * pitch.0;
    let dv = (v0 - v1) * pitch.1;
    Ok(du * du + dv * dv)
}

/// Per-view error in mm: root of the mean squared marker error.
pub fn view_rpe(
    p: &ProjectionMatrix,
    p_tilde: &ProjectionMatrix,
    markers: &MarkerSet,
    pitch: (f64, f64),
) -> Result<f64> {
    let mut total = 0.0;
    for a in markers.points() {
        total += marker_rpe(p, p_tilde, a, pitch)?;
    }
    Ok((total / markers.len() as f64).sqrt())
}

/// Which motion components contribute to a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpeVariant {
    AllAxes,
    InPlane,
    OutPlane,
}

impl RpeVariant {
    fn mask(self, m: &RigidMotion) -> RigidMotion {
        match self {
            RpeVariant::AllAxes => *m,
            RpeVariant::InPlane => m.in_plane(),
            RpeVariant::OutPlane => m.out_plane(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RpeVariant::AllAxes => "all",
            RpeVariant::InPlane => "in_plane",
            RpeVariant::OutPlane => "out_plane",
        }
    }
}

/// Per-view reprojection errors in mm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpeProfile {
    pub values: Vec<f64>,
    pub variant: RpeVariant,
}

impl RpeProfile {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Per-view RPE of the decomposed effective trajectory, with the motion
/// restricted to the requested components.
pub fn rpe_profile(
    eff: &EffectiveTrajectory,
    markers: &MarkerSet,
    variant: RpeVariant,
) -> Result<RpeProfile> {
    let intr = eff.base().intrinsics();
    let pitch = (intr.du, intr.dv);
    let mut values = Vec::with_capacity(eff.len());
    for i in 0..eff.len() {
        let base = eff.base().matrix(i);
        let masked = variant.mask(&eff.motion()[i]);
        let v = if masked.is_identity() {
            0.0
        } else {
            let perturbed = base.compose_rigid(&masked.matrix())?;
            view_rpe(base, &perturbed, markers, pitch)?
        };
        values.push(v);
    }
    Ok(RpeProfile { values, variant })
}

/// Mean over views of the all-axes profile, in mm.
pub fn mean_rpe(eff: &EffectiveTrajectory, markers: &MarkerSet) -> Result<f64> {
    Ok(rpe_profile(eff, markers, RpeVariant::AllAxes)?.mean())
}

/// Recovers a projection matrix from >= 6 3-D/2-D correspondences by the
/// homogeneous least-squares stack (two rows per marker), solved via SVD.
pub fn solve_projection_from_markers(
    points3d: &[Vector4<f64>],
    points2d: &[(f64, f64)],
) -> Result<ProjectionMatrix> {
    if points3d.len() != points2d.len() {
        return Err(Error::Shape(format!(
            "{} 3-D points vs {} 2-D points",
            points3d.len(),
            points2d.len()
        )));
    }
    if points3d.len() < 6 {
        return Err(Error::Config(format!(
            "projection solve needs at least 6 correspondences, got {}",
            points3d.len()
        )));
    }
    let n = points3d.len();
    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for (k, (a, (u, v))) in points3d.iter().zip(points2d.iter()).enumerate() {
        for c in 0..4 {
            m[(2 * k, c)] = a[c];
            m[(2 * k, 8 + c)] = -u * a[c];
            m[(2 * k + 1, 4 + c)] = a[c];
            m[(2 * k + 1, 8 + c)] = -v * a[c];
        }
    }
    let svd = m.svd(false, true);
    let singular = &svd.singular_values;
    // Rank check: a unique solution needs rank 11.
    let s_max = singular[0];
    let rank = singular.iter().filter(|s| **s > s_max * 1e-10).count();
    if rank < 11 {
        return Err(Error::Degenerate(format!(
            "marker configuration is degenerate (measurement rank {rank} < 11)"
        )));
    }
    let vt = svd.v_t.expect("requested");
    let p: DVector<f64> = vt.row(vt.nrows() - 1).transpose().into_owned();
    let raw = Matrix3x4::from_fn(|r, c| p[4 * r + c]);
    ProjectionMatrix::new(raw)
}
