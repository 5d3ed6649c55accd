//! Experiment configuration: schema-validated JSON with strict unknown-key
//! rejection, plus builders for the geometry, phantom family, markers and
//! metrics it describes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::autofocus::StageSchedule;
use crate::error::{Error, Result};
use crate::fdk::SliceSet;
use crate::geometry::{build_short_scan, Intrinsics, Trajectory};
use crate::iqm::BoneWindow;
use crate::motion::Axis;
use crate::phantom::{head_phantom_family, Phantom, VoxelGrid};
use crate::rpe::{default_markers, MarkerSet};

/// Scanner geometry block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub sid: f64,
    pub sdd: f64,
    pub nu: usize,
    pub nv: usize,
    pub du: f64,
    pub dv: f64,
    /// Principal point; defaults to the detector center.
    pub cu: Option<f64>,
    pub cv: Option<f64>,
    pub n_views: usize,
    pub start_angle_deg: f64,
    /// Scale factor applied to the reference slice dimensions and marker
    /// radii (0.5 = desk scale).
    pub desk_scale: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            sid: 375.0,
            sdd: 600.0,
            nu: 128,
            nv: 96,
            du: 1.5,
            dv: 0.8,
            cu: None,
            cv: None,
            n_views: 180,
            start_angle_deg: 0.0,
            desk_scale: 0.5,
        }
    }
}

impl GeometryConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            sid: self.sid,
            sdd: self.sdd,
            nu: self.nu,
            nv: self.nv,
            du: self.du,
            dv: self.dv,
            cu: self.cu.unwrap_or(0.5 * (self.nu as f64 - 1.0)),
            cv: self.cv.unwrap_or(0.5 * (self.nv as f64 - 1.0)),
        }
    }
}

/// Reconstruction grid block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub spacing: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { dims: [108, 128, 35], spacing: 0.84 }
    }
}

/// Phantom block: the built-in family or an ellipsoid list from a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Path to a phantom definition file; empty uses the built-in family.
    pub file: Option<PathBuf>,
    /// Number of built-in variants to generate.
    pub family_size: usize,
    /// Variant used by single-phantom commands.
    pub variant: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { file: None, family_size: 8, variant: 0 }
    }
}

/// Simulated motion block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub axis: Axis,
    pub amplitude: f64,
    pub n_nodes: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { axis: Axis::Tx, amplitude: 5.0, n_nodes: 20 }
    }
}

/// Metric block: histogram window, learned-model path, classifier threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub window_lower: f64,
    pub window_upper: f64,
    pub bins: usize,
    pub model_path: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { window_lower: 0.225, window_upper: 0.9, bins: 256, model_path: None, threshold: 0.1 }
    }
}

/// Dataset generation block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfigBlock {
    pub n_samples: usize,
    pub amplitude_lower: f64,
    pub amplitude_upper: f64,
    pub n_nodes: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DatasetConfigBlock {
    fn default() -> Self {
        Self {
            n_samples: 2048,
            amplitude_lower: 0.0,
            amplitude_upper: 10.0,
            n_nodes: 20,
            val_fraction: 0.25,
            test_fraction: 0.125,
        }
    }
}

/// Training block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfigBlock {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfigBlock {
    fn default() -> Self {
        Self { learning_rate: 1e-4, batch_size: 32, max_epochs: 120, patience: 12 }
    }
}

/// Benchmark block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfigBlock {
    pub scenarios: Vec<String>,
    pub axes: Vec<Axis>,
    pub metrics: Vec<String>,
    pub amplitude_a: f64,
    pub amplitude_b: f64,
    /// Volume of interest (axis-aligned box) for the masked SSIM column.
    pub voi_lower: [f64; 3],
    pub voi_upper: [f64; 3],
    /// Phantom variants included in the benchmark.
    pub phantom_variants: Vec<usize>,
}

impl Default for BenchConfigBlock {
    fn default() -> Self {
        Self {
            scenarios: vec!["a".into(), "b".into()],
            axes: Axis::ALL.to_vec(),
            metrics: vec!["none".into(), "ent".into(), "tv".into(), "gt".into()],
            amplitude_a: 2.0,
            amplitude_b: 5.0,
            voi_lower: [-11.0, -50.0, -14.0],
            voi_upper: [11.0, -33.0, 0.0],
            phantom_variants: vec![0],
        }
    }
}

/// Top-level experiment configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub grid: GridConfig,
    pub phantom: PhantomConfig,
    pub motion: MotionConfig,
    pub metrics: MetricConfig,
    pub optimizer: StageSchedule,
    pub dataset: DatasetConfigBlock,
    pub train: TrainConfigBlock,
    pub bench: BenchConfigBlock,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.intrinsics().validate()?;
        self.optimizer.validate()?;
        if self.phantom.family_size == 0 {
            return Err(Error::Config("phantom family must be non-empty".into()));
        }
        if self.phantom.variant >= self.phantom.family_size {
            return Err(Error::Config(format!(
                "phantom variant {} outside family of {}",
                self.phantom.variant, self.phantom.family_size
            )));
        }
        if !(self.metrics.threshold >= 0.0) {
            return Err(Error::Config("classifier threshold must be non-negative".into()));
        }
        self.bone_window()?;
        Ok(())
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        build_short_scan(
            &self.geometry.intrinsics(),
            self.geometry.n_views,
            self.geometry.start_angle_deg,
        )
    }

    pub fn voxel_grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::centered(self.grid.dims, self.grid.spacing)
    }

    pub fn slice_set(&self) -> Result<SliceSet> {
        SliceSet::standard(&self.voxel_grid()?)
    }

    pub fn markers(&self) -> Result<MarkerSet> {
        default_markers(self.geometry.desk_scale, self.seed)
    }

    pub fn bone_window(&self) -> Result<BoneWindow> {
        BoneWindow::new(self.metrics.window_lower, self.metrics.window_upper, self.metrics.bins)
    }

    /// Built-in phantom family or the ellipsoid list from the referenced file.
    pub fn phantoms(&self) -> Result<Vec<Phantom>> {
        match &self.phantom.file {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let ph: Phantom = serde_json::from_str(&text)?;
                Ok(vec![ph])
            }
            None => head_phantom_family(self.phantom.family_size, self.geometry.desk_scale),
        }
    }

    /// The single phantom used by one-phantom commands.
    pub fn active_phantom(&self) -> Result<Phantom> {
        Ok(self.phantoms()?.into_iter().nth(self.phantom.variant).expect("validated"))
    }

    /// Canonical JSON serialization.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical serialization. The output directory and
    /// thread count are execution parameters, not part of the experiment
    /// identity, and are excluded.
    pub fn hash(&self) -> Result<String> {
        let mut identity = self.clone();
        identity.output_dir = None;
        identity.threads = 0;
        let mut hasher = Sha256::new();
        hasher.update(identity.canonical_json()?.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }

    /// Hash of the blocks that determine the generated dataset (geometry,
    /// grid, phantom family, dataset block and seed); training, metric and
    /// benchmark settings do not change the samples.
    pub fn dataset_hash(&self) -> Result<String> {
        let identity = serde_json::json!({
            "geometry": self.geometry,
            "grid": self.grid,
            "phantom": self.phantom,
            "dataset": self.dataset,
            "seed": self.seed,
        });
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&identity)?.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
