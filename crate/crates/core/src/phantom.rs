//! Analytic ellipsoid head phantom: exact line integrals for projection
//! synthesis and voxelization for ground-truth comparison.
//!
//! Densities are additive attenuation values; a ray's measurement is the sum
//! over ellipsoids of density times chord length, from the closed-form
//! ray-ellipsoid intersection in each ellipsoid's local frame.

use nalgebra::{Matrix3, Vector3, Vector4};
use ndarray::{Array3, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detector_pixel_position, source_position, RigidMotion, Trajectory};

/// Solid ellipsoid with additive density.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Center in mm.
    pub center: [f64; 3],
    /// Semi-axes in mm.
    pub semi_axes: [f64; 3],
    /// Orientation as Z-Y-X Euler angles in degrees (rotation part only).
    pub rotation_deg: [f64; 3],
    /// Additive attenuation value.
    pub density: f64,
}

impl Ellipsoid {
    pub fn sphere(center: [f64; 3], radius: f64, density: f64) -> Self {
        Self { center, semi_axes: [radius; 3], rotation_deg: [0.0; 3], density }
    }

    fn validate(&self) -> Result<()> {
        if self.semi_axes.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("ellipsoid semi-axes must be positive".into()));
        }
        Ok(())
    }

    /// World-to-local rotation (transpose of the orientation matrix).
    fn world_to_local(&self) -> Matrix3<f64> {
        let m = RigidMotion {
            rx: self.rotation_deg[0],
            ry: self.rotation_deg[1],
            rz: self.rotation_deg[2],
            ..Default::default()
        }
        .matrix();
        m.fixed_view::<3, 3>(0, 0).transpose()
    }

    /// Bounding-sphere radius around the world origin.
    fn bound_from_origin(&self) -> f64 {
        let c = Vector3::from(self.center).norm();
        let s = self.semi_axes.iter().fold(0.0f64, |m, v| m.max(*v));
        c + s
    }
}

/// Pre-transformed ellipsoid for fast repeated ray queries.
struct PreparedEllipsoid {
    center: Vector3<f64>,
    // diag(1/semi) * R^T: maps world offsets into the unit-sphere frame.
    to_unit: Matrix3<f64>,
    density: f64,
}

impl PreparedEllipsoid {
    fn new(e: &Ellipsoid) -> Self {
        let rt = e.world_to_local();
        let scale = Matrix3::from_diagonal(&Vector3::new(
            1.0 / e.semi_axes[0],
            1.0 / e.semi_axes[1],
            1.0 / e.semi_axes[2],
        ));
        Self { center: Vector3::from(e.center), to_unit: scale * rt, density: e.density }
    }

    /// Chord length of a unit-direction ray through the ellipsoid, in mm.
    fn chord(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let o = self.to_unit * (origin - self.center);
        let d = self.to_unit * dir;
        let a = d.dot(&d);
        let b = o.dot(&d);
        let c = o.dot(&o) - 1.0;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            return 0.0;
        }
        // Root separation (b ± sqrt)/a is a world distance because |dir| = 1.
        2.0 * disc.sqrt() / a
    }

    /// True when the world point lies inside the ellipsoid.
    fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_unit * (p - self.center);
        l.dot(&l) <= 1.0
    }
}

/// Additive ellipsoid phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phantom {
    pub name: String,
    pub ellipsoids: Vec<Ellipsoid>,
}

impl Phantom {
    pub fn new(name: impl Into<String>, ellipsoids: Vec<Ellipsoid>) -> Result<Self> {
        if ellipsoids.is_empty() {
            return Err(Error::Config("phantom needs at least one ellipsoid".into()));
        }
        for e in &ellipsoids {
            e.validate()?;
        }
        Ok(Self { name: name.into(), ellipsoids })
    }

    /// Radius of a bounding sphere around the isocenter.
    pub fn bounding_radius(&self) -> f64 {
        self.ellipsoids.iter().map(|e| e.bound_from_origin()).fold(0.0, f64::max)
    }

    /// Summed density at a world point.
    pub fn density_at(&self, p: &Vector3<f64>) -> f64 {
        self.ellipsoids
            .iter()
            .map(PreparedEllipsoid::new)
            .filter(|e| e.contains(p))
            .map(|e| e.density)
            .sum()
    }

    fn prepared(&self) -> Vec<PreparedEllipsoid> {
        self.ellipsoids.iter().map(PreparedEllipsoid::new).collect()
    }

    /// Maximum attenuation value over a coarse interior sampling; used to set
    /// default histogram windows.
    pub fn attenuation_ceiling(&self) -> f64 {
        let r = self.bounding_radius();
        let mut max = 0.0f64;
        let n = 24;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let p = Vector3::new(
                        r * (2.0 * i as f64 / (n - 1) as f64 - 1.0),
                        r * (2.0 * j as f64 / (n - 1) as f64 - 1.0),
                        r * (2.0 * k as f64 / (n - 1) as f64 - 1.0),
                    );
                    max = max.max(self.density_at(&p));
                }
            }
        }
        max
    }
}

/// Exact attenuation line integral along a unit-direction ray.
pub fn line_integral(phantom: &Phantom, src: &Vector3<f64>, dir: &Vector3<f64>) -> Result<f64> {
    if (dir.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("ray direction must be unit, |d| = {}", dir.norm())));
    }
    Ok(phantom.prepared().iter().map(|e| e.density * e.chord(src, dir)).sum())
}

/// Optional additive i.i.d. Gaussian noise on the line integrals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

/// Stack of projection images, indexed (view, row, column).
pub type ProjectionData = Array3<f32>;

/// Renders analytic projections of the phantom for every trajectory view.
///
/// Motion never enters here; corrupted geometry is applied at reconstruction
/// time only, so the rendered data keep their characteristics.
pub fn render_projections(
    phantom: &Phantom,
    traj: &Trajectory,
    noise: Option<NoiseModel>,
) -> Result<ProjectionData> {
    let intr = *traj.intrinsics();
    let n = traj.len();
    let prepared = phantom.prepared();
    let mut stack = Array3::<f32>::zeros((n, intr.nv, intr.nu));
    let angles: Vec<f64> = (0..n).map(|i| traj.angle_deg(i)).collect();
    let views: Vec<(ArrayViewMut2<f32>, f64)> =
        stack.outer_iter_mut().zip(angles.iter().copied()).collect();
    views.into_par_iter().for_each(|(mut img, theta)| {
        render_view(&prepared, &intr, theta, &mut img);
    });
    if let Some(nm) = noise {
        if nm.sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
            let normal = Normal::new(0.0, nm.sigma).map_err(|e| Error::Config(e.to_string()))?;
            for v in stack.iter_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(stack)
}

fn render_view(
    prepared: &[PreparedEllipsoid],
    intr: &crate::geometry::Intrinsics,
    theta: f64,
    img: &mut ArrayViewMut2<f32>,
) {
    let src = source_position(intr, theta);
    for v in 0..intr.nv {
        for u in 0..intr.nu {
            let pix = detector_pixel_position(intr, theta, u as f64, v as f64);
            let dir = (pix - src).normalize();
            let val: f64 = prepared.iter().map(|e| e.density * e.chord(&src, &dir)).sum();
            img[(v, u)] = val as f32;
        }
    }
}

/// Axis-aligned voxel grid with isotropic spacing; `origin` is the world
/// position of voxel (0, 0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: [f64; 3],
}

impl VoxelGrid {
    /// Grid of the given dims centered on the isocenter.
    pub fn centered(dims: [usize; 3], spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::Config("voxel spacing must be positive".into()));
        }
        let origin = [
            -0.5 * (dims[0] as f64 - 1.0) * spacing,
            -0.5 * (dims[1] as f64 - 1.0) * spacing,
            -0.5 * (dims[2] as f64 - 1.0) * spacing,
        ];
        Ok(Self { dims, spacing, origin })
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
            self.origin[2] + k as f64 * self.spacing,
        )
    }

    /// Homogeneous voxel center.
    pub fn voxel_center_h(&self, i: usize, j: usize, k: usize) -> Vector4<f64> {
        let c = self.voxel_center(i, j, k);
        Vector4::new(c[0], c[1], c[2], 1.0)
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Half-extent of the grid along each axis in mm.
    pub fn half_extent(&self) -> [f64; 3] {
        [
            0.5 * (self.dims[0] as f64) * self.spacing,
            0.5 * (self.dims[1] as f64) * self.spacing,
            0.5 * (self.dims[2] as f64) * self.spacing,
        ]
    }
}

/// Samples the phantom density at every voxel center.
pub fn voxelize(phantom: &Phantom, grid: &VoxelGrid) -> Array3<f32> {
    let prepared = phantom.prepared();
    let [_, ny, nz] = grid.dims;
    let mut vol = Array3::<f32>::zeros(grid.dims);
    let slabs: Vec<(usize, ArrayViewMut2<f32>)> = vol.outer_iter_mut().enumerate().collect();
    slabs.into_par_iter().for_each(|(i, mut slab)| {
        for j in 0..ny {
            for k in 0..nz {
                let p = grid.voxel_center(i, j, k);
                let d: f64 = prepared.iter().filter(|e| e.contains(&p)).map(|e| e.density).sum();
                slab[(j, k)] = d as f32;
            }
        }
    });
    vol
}

/// Deterministic family of desk-scale head phantoms.
///
/// Variant 0 is the reference head (outer skull shell, inner soft tissue,
/// ventricles, small asymmetric features near the nasal region). Higher
/// variants jitter sizes, positions and densities; every third variant from
/// index 2 carries metal inserts.
pub fn head_phantom_family(count: usize, desk_scale: f64) -> Result<Vec<Phantom>> {
    (0..count).map(|v| head_phantom_variant(v, desk_scale)).collect()
}

/// Default desk-scale head phantom.
pub fn default_head_phantom(desk_scale: f64) -> Result<Phantom> {
    head_phantom_variant(0, desk_scale)
}

fn head_phantom_variant(variant: usize, desk_scale: f64) -> Result<Phantom> {
    if !(desk_scale > 0.0) {
        return Err(Error::Config("desk scale must be positive".into()));
    }
    // Deterministic per-variant jitter in [-1, 1]; variant 0 is unjittered.
    let mut state = (variant as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut jitter = move || {
        if variant == 0 {
            return 0.0;
        }
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let s = desk_scale / 0.5; // geometry below is authored at factor 0.5
    let mut j = move |amount: f64| 1.0 + amount * jitter();
    let mut ell = Vec::new();
    let skull = [42.0 * s * j(0.04), 52.0 * s * j(0.04), 46.0 * s];
    let shell = 3.5 * s;
    // Outer skull plus a negative inner ellipsoid leaves a bone-density shell
    // around the soft-tissue interior.
    ell.push(Ellipsoid {
        center: [0.0, 0.0, 0.0],
        semi_axes: skull,
        rotation_deg: [0.0, 0.0, 0.0],
        density: 0.8 * j(0.05),
    });
    ell.push(Ellipsoid {
        center: [0.0, 1.0 * s, 0.5 * s],
        semi_axes: [skull[0] - shell, skull[1] - shell, skull[2] - shell],
        rotation_deg: [0.0, 0.0, 0.0],
        density: -0.6,
    });
    // Ventricle pair.
    for side in [-1.0, 1.0] {
        ell.push(Ellipsoid {
            center: [side * 10.0 * s * j(0.08), 6.0 * s, 3.0 * s],
            semi_axes: [6.5 * s, 13.0 * s * j(0.08), 8.5 * s],
            rotation_deg: [0.0, 0.0, side * 9.0],
            density: -0.06,
        });
    }
    // Asymmetric soft-tissue blobs.
    ell.push(Ellipsoid {
        center: [13.0 * s, -13.0 * s * j(0.1), -5.0 * s],
        semi_axes: [6.5 * s, 7.5 * s, 6.0 * s],
        rotation_deg: [0.0, 0.0, 20.0],
        density: 0.10 * j(0.1),
    });
    ell.push(Ellipsoid {
        center: [-11.0 * s, -19.0 * s, 5.0 * s * j(0.2)],
        semi_axes: [4.5 * s, 5.5 * s, 4.5 * s],
        rotation_deg: [0.0, 14.0, 0.0],
        density: 0.08,
    });
    // Dense nasal features near the front (-y), intentionally asymmetric.
    ell.push(Ellipsoid {
        center: [0.0, -43.0 * s, -7.0 * s],
        semi_axes: [3.5 * s, 6.5 * s, 4.5 * s],
        rotation_deg: [0.0, 0.0, 0.0],
        density: 0.55,
    });
    ell.push(Ellipsoid {
        center: [5.5 * s, -41.0 * s, -9.0 * s],
        semi_axes: [2.5 * s, 4.5 * s, 3.5 * s],
        rotation_deg: [0.0, 0.0, -12.0],
        density: 0.5,
    });
    ell.push(Ellipsoid {
        center: [-5.0 * s, -41.5 * s, -9.5 * s],
        semi_axes: [2.0 * s, 4.0 * s, 3.0 * s],
        rotation_deg: [0.0, 0.0, 10.0],
        density: 0.45,
    });
    // Metal inserts on some variants.
    if variant >= 2 && variant % 3 == 2 {
        ell.push(Ellipsoid::sphere([16.0 * s, 9.0 * s, 1.0 * s], 2.2 * s, 4.0));
        ell.push(Ellipsoid::sphere([-14.0 * s, 20.0 * s, -3.0 * s], 1.8 * s, 4.0));
    }
    Phantom::new(format!("head-{variant:02}"), ell)
}
