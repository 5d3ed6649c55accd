//! Projective camera model, short-scan trajectory construction, rigid-motion
//! composition and point projection.
//!
//! Conventions: the scanner rotates about the world +z axis, the source starts
//! on the -y axis at scan angle 0, angles are degrees, translations are mm.
//! Projection matrices are scale-normalized so the third row of the left 3x3
//! block has unit Euclidean norm and the isocenter has positive depth; the
//! homogeneous depth of a point is then its physical distance from the source
//! plane, which feeds the distance weight of the back-projection directly.

use nalgebra::{Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat-panel system geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Source-isocenter distance in mm.
    pub sid: f64,
    /// Source-detector distance in mm.
    pub sdd: f64,
    /// Detector columns.
    pub nu: usize,
    /// Detector rows.
    pub nv: usize,
    /// Column pitch in mm.
    pub du: f64,
    /// Row pitch in mm.
    pub dv: f64,
    /// Principal point column in pixels.
    pub cu: f64,
    /// Principal point row in pixels.
    pub cv: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.sid > 0.0) {
            return Err(Error::Config(format!("sid must be positive, got {}", self.sid)));
        }
        if !(self.sdd > self.sid) {
            return Err(Error::Config(format!(
                "sdd ({}) must exceed sid ({})",
                self.sdd, self.sid
            )));
        }
        if self.nu < 2 || self.nv < 2 {
            return Err(Error::Config(format!(
                "detector needs at least 2x2 pixels, got {}x{}",
                self.nu, self.nv
            )));
        }
        if !(self.du > 0.0 && self.dv > 0.0) {
            return Err(Error::Config("pixel pitch must be positive".into()));
        }
        Ok(())
    }

    /// Half fan angle in radians, measured to the edge of the detector.
    pub fn half_fan_angle(&self) -> f64 {
        ((self.nu as f64) * self.du * 0.5 / self.sdd).atan()
    }

    /// Short-scan angular span in degrees: 180° plus the full fan angle.
    pub fn short_scan_span_deg(&self) -> f64 {
        180.0 + 2.0 * self.half_fan_angle().to_degrees()
    }

    /// Physical column offset from the principal point in mm.
    pub fn u_offset_mm(&self, u: f64) -> f64 {
        (u - self.cu) * self.du
    }

    /// Physical row offset from the principal point in mm.
    pub fn v_offset_mm(&self, v: f64) -> f64 {
        (v - self.cv) * self.dv
    }
}

/// Scale-normalized 3x4 homogeneous camera matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    p: Matrix3x4<f64>,
}

impl ProjectionMatrix {
    /// Builds a projection matrix, rescaling so the third row of the left 3x3
    /// block has unit norm and the isocenter depth is positive.
    pub fn new(raw: Matrix3x4<f64>) -> Result<Self> {
        let r3 = Vector3::new(raw[(2, 0)], raw[(2, 1)], raw[(2, 2)]);
        let norm = r3.norm();
        if !norm.is_finite() || norm < 1e-15 {
            return Err(Error::Degenerate("projection matrix has null third row".into()));
        }
        let iso_depth = raw[(2, 3)];
        if iso_depth == 0.0 {
            return Err(Error::Degenerate("isocenter lies on the source plane".into()));
        }
        let scale = iso_depth.signum() / norm;
        // Skip the rescale when it is already exact so renormalization is a
        // bit-stable no-op.
        if scale == 1.0 {
            return Ok(Self { p: raw });
        }
        Ok(Self { p: raw * scale })
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    /// Homogeneous depth of a world point: distance from the source plane.
    pub fn depth(&self, a: &Vector4<f64>) -> f64 {
        self.p.row(2).transpose().dot(a)
    }

    /// Depth of the isocenter; positive by construction.
    pub fn isocenter_depth(&self) -> f64 {
        self.p[(2, 3)]
    }

    /// Left-multiplies the world side by a rigid 4x4 transform and renormalizes.
    pub fn compose_rigid(&self, m: &Matrix4<f64>) -> Result<Self> {
        Self::new(self.p * m)
    }
}

/// Projects a homogeneous world point to detector pixel coordinates.
///
/// Fails when the point is at or behind the source plane.
pub fn project_point(p: &ProjectionMatrix, a: &Vector4<f64>) -> Result<(f64, f64)> {
    let x = p.matrix() * a;
    let w = x[2];
    if w <= 1e-9 {
        return Err(Error::BehindSource { depth: w });
    }
    Ok((x[0] / w, x[1] / w))
}

/// Rigid motion state: intrinsic Z-Y-X Euler rotation about the isocenter in
/// degrees followed by a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidMotion {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.rx == 0.0
            && self.ry == 0.0
            && self.rz == 0.0
            && self.tx == 0.0
            && self.ty == 0.0
            && self.tz == 0.0
    }

    /// 4x4 homogeneous matrix: translation composed after R_z·R_y·R_x.
    pub fn matrix(&self) -> Matrix4<f64> {
        if self.is_identity() {
            return Matrix4::identity();
        }
        let (sx, cx) = self.rx.to_radians().sin_cos();
        let (sy, cy) = self.ry.to_radians().sin_cos();
        let (sz, cz) = self.rz.to_radians().sin_cos();
        // R = Rz * Ry * Rx, row-major entries.
        let r00 = cz * cy;
        let r01 = cz * sy * sx - sz * cx;
        let r02 = cz * sy * cx + sz * sx;
        let r10 = sz * cy;
        let r11 = sz * sy * sx + cz * cx;
        let r12 = sz * sy * cx - cz * sx;
        let r20 = -sy;
        let r21 = cy * sx;
        let r22 = cy * cx;
        Matrix4::new(
            r00, r01, r02, self.tx, //
            r10, r11, r12, self.ty, //
            r20, r21, r22, self.tz, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// Recovers the six parameters from a rigid 4x4 matrix (Z-Y-X Euler).
    ///
    /// Fails near gimbal lock (|ry| -> 90°), which does not occur for the
    /// motion amplitudes handled here.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let sy = -m[(2, 0)];
        if sy.abs() > 1.0 - 1e-9 {
            return Err(Error::Degenerate("Euler extraction at gimbal lock".into()));
        }
        let ry = sy.asin();
        let rx = m[(2, 1)].atan2(m[(2, 2)]);
        let rz = m[(1, 0)].atan2(m[(0, 0)]);
        Ok(Self {
            rx: rx.to_degrees(),
            ry: ry.to_degrees(),
            rz: rz.to_degrees(),
            tx: m[(0, 3)],
            ty: m[(1, 3)],
            tz: m[(2, 3)],
        })
    }

    /// Keeps only the in-plane components (r_z, t_x, t_y).
    pub fn in_plane(&self) -> Self {
        Self { rx: 0.0, ry: 0.0, rz: self.rz, tx: self.tx, ty: self.ty, tz: 0.0 }
    }

    /// Keeps only the out-of-plane components (r_x, r_y, t_z).
    pub fn out_plane(&self) -> Self {
        Self { rx: self.rx, ry: self.ry, rz: 0.0, tx: 0.0, ty: 0.0, tz: self.tz }
    }
}

/// Calibrated circular short-scan trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    views: Vec<(ProjectionMatrix, f64)>,
    intrinsics: Intrinsics,
}

impl Trajectory {
    pub fn new(views: Vec<(ProjectionMatrix, f64)>, intrinsics: Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        if views.len() < 2 {
            return Err(Error::Config("trajectory needs at least 2 views".into()));
        }
        for w in views.windows(2) {
            if !(w[1].1 > w[0].1) {
                return Err(Error::Config("view angles must be strictly increasing".into()));
            }
        }
        Ok(Self { views, intrinsics })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn matrix(&self, i: usize) -> &ProjectionMatrix {
        &self.views[i].0
    }

    pub fn angle_deg(&self, i: usize) -> f64 {
        self.views[i].1
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    /// Angular span from first to last view, degrees.
    pub fn span_deg(&self) -> f64 {
        self.views.last().unwrap().1 - self.views.first().unwrap().1
    }

    /// Mean angular step in radians.
    pub fn angular_step_rad(&self) -> f64 {
        (self.span_deg() / (self.views.len() - 1) as f64).to_radians()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ProjectionMatrix, f64)> {
        self.views.iter()
    }
}

/// Source position for a view at absolute scan angle `theta` (degrees).
pub fn source_position(intr: &Intrinsics, theta_deg: f64) -> Vector3<f64> {
    let (s, c) = theta_deg.to_radians().sin_cos();
    Vector3::new(intr.sid * s, -intr.sid * c, 0.0)
}

/// Orthonormal detector frame for a view: (u axis, v axis, ray direction).
pub fn detector_frame(theta_deg: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let (s, c) = theta_deg.to_radians().sin_cos();
    let u_axis = Vector3::new(c, s, 0.0);
    let v_axis = Vector3::new(0.0, 0.0, 1.0);
    let dir = Vector3::new(-s, c, 0.0);
    (u_axis, v_axis, dir)
}

/// World position of the center of detector pixel (u, v) for a view.
pub fn detector_pixel_position(intr: &Intrinsics, theta_deg: f64, u: f64, v: f64) -> Vector3<f64> {
    let src = source_position(intr, theta_deg);
    let (u_axis, v_axis, dir) = detector_frame(theta_deg);
    src + dir * intr.sdd + u_axis * intr.u_offset_mm(u) + v_axis * intr.v_offset_mm(v)
}

fn view_matrix(intr: &Intrinsics, theta_deg: f64) -> Result<ProjectionMatrix> {
    let src = source_position(intr, theta_deg);
    let (u_axis, v_axis, dir) = detector_frame(theta_deg);
    let fu = intr.sdd / intr.du;
    let fv = intr.sdd / intr.dv;
    // Rows of K[R|t] with camera axes (u_axis, v_axis, dir) and t = -R*src.
    let row = |axis: Vector3<f64>, f: f64, c: f64| -> (Vector3<f64>, f64) {
        let r = axis * f + dir * c;
        (r, -r.dot(&src))
    };
    let (r0, t0) = row(u_axis, fu, intr.cu);
    let (r1, t1) = row(v_axis, fv, intr.cv);
    let (r2, t2) = (dir, -dir.dot(&src));
    let raw = Matrix3x4::new(
        r0[0], r0[1], r0[2], t0, //
        r1[0], r1[1], r1[2], t1, //
        r2[0], r2[1], r2[2], t2,
    );
    ProjectionMatrix::new(raw)
}

/// Builds an evenly spaced short-scan trajectory covering 180° plus the fan
/// angle, endpoints included.
pub fn build_short_scan(intr: &Intrinsics, n_views: usize, start_angle_deg: f64) -> Result<Trajectory> {
    intr.validate()?;
    if n_views < 2 {
        return Err(Error::Config(format!("n_views must be >= 2, got {n_views}")));
    }
    let span = intr.short_scan_span_deg();
    let step = span / (n_views - 1) as f64;
    let mut views = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let theta = start_angle_deg + step * i as f64;
        views.push((view_matrix(intr, theta)?, theta));
    }
    Trajectory::new(views, *intr)
}

/// Calibrated trajectory composed per view with rigid motion states.
///
/// Keeps the decomposition into (calibration, motion) available by
/// construction; composed matrices are cached at build time.
#[derive(Debug, Clone)]
pub struct EffectiveTrajectory {
    base: Trajectory,
    motion: Vec<RigidMotion>,
    composed: Vec<ProjectionMatrix>,
}

impl EffectiveTrajectory {
    pub fn base(&self) -> &Trajectory {
        &self.base
    }

    pub fn motion(&self) -> &[RigidMotion] {
        &self.motion
    }

    pub fn composed(&self, i: usize) -> &ProjectionMatrix {
        &self.composed[i]
    }

    pub fn len(&self) -> usize {
        self.composed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.composed.is_empty()
    }

    /// Flattens the composed matrices into a plain trajectory.
    pub fn to_trajectory(&self) -> Trajectory {
        let views = self
            .composed
            .iter()
            .cloned()
            .zip(self.base.iter().map(|(_, a)| *a))
            .collect();
        Trajectory::new(views, *self.base.intrinsics()).expect("composed trajectory is valid")
    }
}

/// Composes a calibration with per-view motion states (element-wise matrix
/// product, renormalized). Identity motion reuses the base matrix bit-exactly.
pub fn compose(base: &Trajectory, motion: &[RigidMotion]) -> Result<EffectiveTrajectory> {
    if motion.len() != base.len() {
        return Err(Error::Shape(format!(
            "motion list has {} entries for {} views",
            motion.len(),
            base.len()
        )));
    }
    let mut composed = Vec::with_capacity(base.len());
    for (i, m) in motion.iter().enumerate() {
        if m.is_identity() {
            composed.push(base.matrix(i).clone());
        } else {
            composed.push(base.matrix(i).compose_rigid(&m.matrix())?);
        }
    }
    Ok(EffectiveTrajectory { base: base.clone(), motion: motion.to_vec(), composed })
}

/// Composes two per-view motion lists: `first` applied to the object, then
/// `second` (candidate compensation) on top, as matrices first·second.
pub fn chain_motion(first: &[RigidMotion], second: &[RigidMotion]) -> Result<Vec<RigidMotion>> {
    if first.len() != second.len() {
        return Err(Error::Shape(format!(
            "motion lists differ in length: {} vs {}",
            first.len(),
            second.len()
        )));
    }
    first
        .iter()
        .zip(second.iter())
        .map(|(a, b)| {
            if b.is_identity() {
                Ok(*a)
            } else if a.is_identity() {
                Ok(*b)
            } else {
                RigidMotion::from_matrix(&(a.matrix() * b.matrix()))
            }
        })
        .collect()
}
