//! On-disk formats: raw little-endian f32 payloads with human-readable JSON
//! sidecars, CSV emission for profiles, traces and benchmark tables, and the
//! trajectory sidecar.
//!
//! Every artifact carries a sidecar with the schema version, the hash of the
//! resolved configuration and its creation parameters, so any file can be
//! reproduced from its sidecar.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fdk::{SliceSet, SliceTriplets};
use crate::geometry::Trajectory;
use crate::rpe::RpeProfile;

pub const SCHEMA_VERSION: u32 = 1;

/// Sidecar describing one raw payload file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub config_hash: String,
    pub kind: String,
    /// Shape of the payload, outermost first.
    pub dims: Vec<usize>,
    /// Pixel/voxel spacing where applicable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    /// Slice orientation labels for slice stacks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientations: Option<Vec<String>>,
    /// Path of the trajectory sidecar the payload was produced with.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<PathBuf>,
    /// Free-form creation parameters.
    #[serde(skip_serializing_if = "serde_json::Value::is_null", default)]
    pub params: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes a raw little-endian f32 payload and its sidecar.
pub fn write_raw_f32(path: &Path, values: &[f32], sidecar: &Sidecar) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Reads a raw payload together with its sidecar.
pub fn read_raw_f32(path: &Path) -> Result<(Vec<f32>, Sidecar)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(format!("raw payload {path:?} is not f32-aligned")));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<f32>>();
    let sidecar_text = std::fs::read_to_string(sidecar_path(path))?;
    let sidecar: Sidecar = serde_json::from_str(&sidecar_text)?;
    Ok((values, sidecar))
}

/// Writes a projection stack (views, rows, columns).
pub fn write_projections(
    path: &Path,
    stack: &Array3<f32>,
    config_hash: &str,
    spacing: (f64, f64),
    trajectory: Option<PathBuf>,
) -> Result<()> {
    let (n, nv, nu) = stack.dim();
    let sidecar = Sidecar {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.into(),
        kind: "projections".into(),
        dims: vec![n, nv, nu],
        spacing: Some(vec![spacing.0, spacing.1]),
        orientations: None,
        trajectory,
        params: serde_json::Value::Null,
    };
    write_raw_f32(path, stack.as_slice().unwrap(), &sidecar)
}

/// Reads a projection stack.
pub fn read_projections(path: &Path) -> Result<(Array3<f32>, Sidecar)> {
    let (values, sidecar) = read_raw_f32(path)?;
    if sidecar.dims.len() != 3 || sidecar.dims.iter().product::<usize>() != values.len() {
        return Err(Error::Shape(format!(
            "payload has {} values, sidecar dims are {:?}",
            values.len(),
            sidecar.dims
        )));
    }
    let arr = Array3::from_shape_vec(
        (sidecar.dims[0], sidecar.dims[1], sidecar.dims[2]),
        values,
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((arr, sidecar))
}

/// Writes a voxel volume (x, y, z order).
pub fn write_volume(path: &Path, vol: &Array3<f32>, config_hash: &str, spacing: f64) -> Result<()> {
    let (nx, ny, nz) = vol.dim();
    let sidecar = Sidecar {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.into(),
        kind: "volume".into(),
        dims: vec![nx, ny, nz],
        spacing: Some(vec![spacing]),
        orientations: None,
        trajectory: None,
        params: serde_json::Value::Null,
    };
    write_raw_f32(path, vol.as_slice().unwrap(), &sidecar)
}

/// Writes nine reconstructed slices as one concatenated payload; the sidecar
/// carries per-slice shapes and orientation labels.
pub fn write_slices(
    path: &Path,
    slices: &SliceTriplets,
    set: &SliceSet,
    config_hash: &str,
) -> Result<()> {
    let mut values = Vec::new();
    let mut dims = Vec::new();
    let mut labels = Vec::new();
    for (s, p) in slices.slices.iter().zip(&set.planes) {
        values.extend(s.iter().copied());
        dims.push(p.rows);
        dims.push(p.cols);
        labels.push(p.orientation.label().to_string());
    }
    let sidecar = Sidecar {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.into(),
        kind: "slices".into(),
        dims,
        spacing: Some(vec![set.spacing]),
        orientations: Some(labels),
        trajectory: None,
        params: serde_json::Value::Null,
    };
    write_raw_f32(path, &values, &sidecar)
}

/// Reads a slice payload back into per-slice arrays.
pub fn read_slices(path: &Path) -> Result<(SliceTriplets, Sidecar)> {
    let (values, sidecar) = read_raw_f32(path)?;
    if sidecar.dims.len() % 2 != 0 {
        return Err(Error::Shape("slice sidecar dims must pair rows/cols".into()));
    }
    let expected: usize = sidecar.dims.chunks(2).map(|p| p[0] * p[1]).sum();
    if expected != values.len() {
        return Err(Error::Shape(format!(
            "payload has {} values, slice dims require {expected}",
            values.len()
        )));
    }
    let mut slices = Vec::new();
    let mut offset = 0usize;
    for pair in sidecar.dims.chunks(2) {
        let (rows, cols) = (pair[0], pair[1]);
        let end = offset + rows * cols;
        let arr = Array2::from_shape_vec((rows, cols), values[offset..end].to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        slices.push(arr);
        offset = end;
    }
    Ok((SliceTriplets { slices }, sidecar))
}

/// Motion metadata written next to simulated projections: the spline set that
/// corrupted the geometry plus its reprojection-error labels, sufficient to
/// recompute the labels from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub axis: crate::motion::Axis,
    pub amplitude: f64,
    pub n_nodes: usize,
    pub seed: u64,
    pub spline: crate::motion::MotionSplineSet,
    pub labels: crate::appearance::Labels,
}

pub fn write_motion_record(path: &Path, record: &MotionRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(record)?)?;
    Ok(())
}

pub fn read_motion_record(path: &Path) -> Result<MotionRecord> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Sidecar of one dataset record: the labels plus the metadata they can be
/// recomputed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub schema_version: u32,
    pub config_hash: String,
    pub labels: crate::appearance::Labels,
    pub meta: crate::appearance::SampleMeta,
}

/// Writes one dataset record: normalized slice floats plus the label/metadata
/// sidecar.
pub fn write_sample(
    dir: &Path,
    index: usize,
    sample: &crate::appearance::Sample,
    set: &SliceSet,
    config_hash: &str,
) -> Result<()> {
    let payload = dir.join(format!("sample_{index:05}.f32"));
    write_slices(&payload, &sample.slices, set, config_hash)?;
    let sidecar = SampleSidecar {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.into(),
        labels: sample.labels.clone(),
        meta: sample.meta.clone(),
    };
    std::fs::write(
        dir.join(format!("sample_{index:05}.labels.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Reads one dataset record back.
pub fn read_sample(dir: &Path, index: usize) -> Result<crate::appearance::Sample> {
    let (slices, _) = read_slices(&dir.join(format!("sample_{index:05}.f32")))?;
    let text = std::fs::read_to_string(dir.join(format!("sample_{index:05}.labels.json")))?;
    let sidecar: SampleSidecar = serde_json::from_str(&text)?;
    Ok(crate::appearance::Sample { slices, labels: sidecar.labels, meta: sidecar.meta })
}

/// Trajectory sidecar: per-view 3x4 row-major matrix and angle plus the
/// intrinsics block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub schema_version: u32,
    pub intrinsics: crate::geometry::Intrinsics,
    pub views: Vec<TrajectoryView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub angle_deg: f64,
    /// Row-major 3x4 entries.
    pub matrix: Vec<f64>,
}

/// Serializes a trajectory to its structured-text sidecar.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let views = (0..traj.len())
        .map(|i| {
            let m = traj.matrix(i).matrix();
            TrajectoryView {
                angle_deg: traj.angle_deg(i),
                matrix: (0..3).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect(),
            }
        })
        .collect();
    let file = TrajectoryFile {
        schema_version: SCHEMA_VERSION,
        intrinsics: *traj.intrinsics(),
        views,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Reads a trajectory sidecar back.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path)?;
    let file: TrajectoryFile = serde_json::from_str(&text)?;
    let views = file
        .views
        .iter()
        .map(|v| {
            if v.matrix.len() != 12 {
                return Err(Error::Shape("trajectory matrix needs 12 entries".into()));
            }
            let m = nalgebra::Matrix3x4::from_fn(|r, c| v.matrix[4 * r + c]);
            Ok((crate::geometry::ProjectionMatrix::new(m)?, v.angle_deg))
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(views, file.intrinsics)
}

/// Writes CSV rows with a header; values use shortest-round-trip formatting,
/// comma delimiter and decimal point.
pub fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{header}")?;
    for row in rows {
        writeln!(file, "{row}")?;
    }
    file.flush()?;
    Ok(())
}

/// CSV export of a per-view error profile.
pub fn write_rpe_profile_csv(path: &Path, profile: &RpeProfile) -> Result<()> {
    write_csv(
        path,
        "view,rpe_mm,variant",
        profile
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{i},{v},{}", profile.variant.label())),
    )
}

/// CSV export of an optimization trace.
pub fn write_trace_csv(path: &Path, trace: &[crate::autofocus::TraceRow]) -> Result<()> {
    write_csv(
        path,
        "stage,axis,node,evaluation,candidate,score",
        trace.iter().map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.stage,
                r.axis.label(),
                r.node,
                r.evaluation,
                r.candidate,
                r.score
            )
        }),
    )
}

/// CSV export of training history.
pub fn write_history_csv(path: &Path, history: &[crate::appearance::EpochStats]) -> Result<()> {
    write_csv(
        path,
        "epoch,train_loss,val_loss",
        history.iter().map(|e| format!("{},{},{}", e.epoch, e.train_loss, e.val_loss)),
    )
}

/// CSV export of per-view profile prediction errors.
pub fn write_profile_errors_csv(
    path: &Path,
    rows: &[crate::appearance::ProfileErrorRow],
) -> Result<()> {
    write_csv(
        path,
        "sample,view,predicted_all,true_all,predicted_in_plane,true_in_plane,predicted_out_plane,true_out_plane",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.sample,
                r.view,
                r.predicted_all,
                r.true_all,
                r.predicted_in_plane,
                r.true_in_plane,
                r.predicted_out_plane,
                r.true_out_plane
            )
        }),
    )
}

/// Orientation labels in slice order for sidecars.
pub fn orientation_labels(set: &SliceSet) -> Vec<&'static str> {
    set.planes.iter().map(|p| p.orientation.label()).collect()
}

/// Slice payloads of a reconstruction as one flat vector (for hashing or
/// byte comparisons in tests).
pub fn slice_bytes(slices: &SliceTriplets) -> Vec<u8> {
    let mut bytes = Vec::new();
    for s in &slices.slices {
        for v in s.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Drops the payload and sidecar of an orientation check on read-back, useful
/// in round-trip tests.
pub fn orientations_match(sidecar: &Sidecar, set: &SliceSet) -> bool {
    match &sidecar.orientations {
        Some(labels) => labels
            .iter()
            .zip(&set.planes)
            .all(|(l, p)| l == p.orientation.label()),
        None => false,
    }
}

/// Minimal deterministic SVG scatter/box plot support: per-axis category
/// means drawn as bars with value labels.
pub fn write_bar_svg(
    path: &Path,
    title: &str,
    categories: &[(String, f64)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let width = 80 + categories.len() * 70;
    let height = 260;
    let max = categories.iter().map(|(_, v)| *v).fold(f64::EPSILON, f64::max);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{title}</text>\n"
    ));
    for (i, (label, value)) in categories.iter().enumerate() {
        let h = (value / max * 170.0).max(1.0);
        let x = 50 + i * 70;
        let y = 220.0 - h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y:.1}\" width=\"40\" height=\"{h:.1}\" fill=\"#4878a8\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"236\" font-family=\"monospace\" font-size=\"11\">{label}</text>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"10\">{value:.3}</text>\n",
            y - 4.0
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Curve overlay SVG: one polyline per named curve over the view index.
pub fn write_curves_svg(path: &Path, title: &str, curves: &[(String, Vec<f64>)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let width = 640;
    let height = 280;
    let n = curves.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let lo = curves.iter().flat_map(|(_, v)| v.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = curves.iter().flat_map(|(_, v)| v.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let colors = ["#4878a8", "#a84848", "#48a878", "#a8a848"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"10\" y=\"18\" font-family=\"monospace\" font-size=\"13\">{title}</text>\n"
    ));
    for (ci, (label, values)) in curves.iter().enumerate() {
        let color = colors[ci % colors.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = 40.0 + (i as f64 / (n - 1) as f64) * 560.0;
                let y = 250.0 - (v - lo) / span * 200.0;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"32\" font-family=\"monospace\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            46 + ci * 120
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_short_scan, Intrinsics};
    use crate::phantom::VoxelGrid;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("conefocus-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn raw_payload_round_trips() {
        let stack = Array3::from_shape_fn((3, 4, 5), |(a, b, c)| (a * 20 + b * 5 + c) as f32 * 0.5);
        let path = tmp("stack.f32");
        write_projections(&path, &stack, "deadbeef", (1.5, 0.8), None).unwrap();
        let (back, sidecar) = read_projections(&path).unwrap();
        assert_eq!(stack, back);
        assert_eq!(sidecar.kind, "projections");
        assert_eq!(sidecar.config_hash, "deadbeef");
        assert_eq!(sidecar.dims, vec![3, 4, 5]);
    }

    #[test]
    fn slices_round_trip_with_orientations() {
        let grid = VoxelGrid::centered([12, 14, 6], 1.0).unwrap();
        let set = SliceSet::standard(&grid).unwrap();
        let slices = SliceTriplets {
            slices: set
                .planes
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Array2::from_shape_fn((p.rows, p.cols), |(r, c)| (i * 100 + r * 10 + c) as f32)
                })
                .collect(),
        };
        let path = tmp("slices.f32");
        write_slices(&path, &slices, &set, "cafe").unwrap();
        let (back, sidecar) = read_slices(&path).unwrap();
        assert_eq!(slices.slices, back.slices);
        assert!(orientations_match(&sidecar, &set));
        assert_eq!(
            sidecar.orientations.unwrap(),
            vec!["ax", "ax", "ax", "co", "co", "co", "sa", "sa", "sa"]
        );
    }

    #[test]
    fn trajectory_file_round_trips() {
        let intr = Intrinsics {
            sid: 375.0,
            sdd: 600.0,
            nu: 32,
            nv: 24,
            du: 6.0,
            dv: 3.2,
            cu: 15.5,
            cv: 11.5,
        };
        let traj = build_short_scan(&intr, 7, 12.0).unwrap();
        let path = tmp("traj.json");
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for i in 0..traj.len() {
            assert_eq!(back.angle_deg(i), traj.angle_deg(i));
            // Renormalization on load rounds at the ulp of the largest entry
            // (~4e4 for this geometry).
            let d = (back.matrix(i).matrix() - traj.matrix(i).matrix()).norm();
            assert!(d < 1e-9, "view {i}: {d}");
        }
    }

    #[test]
    fn csv_and_svg_are_deterministic() {
        let rows = || (0..4).map(|i| format!("{i},{}", i as f64 * 0.1));
        let a = tmp("a.csv");
        let b = tmp("b.csv");
        write_csv(&a, "k,v", rows()).unwrap();
        write_csv(&b, "k,v", rows()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let s1 = tmp("p1.svg");
        let s2 = tmp("p2.svg");
        let cats = vec![("tx".to_string(), 0.4), ("ty".to_string(), 0.8)];
        write_bar_svg(&s1, "misalignment", &cats).unwrap();
        write_bar_svg(&s2, "misalignment", &cats).unwrap();
        assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
    }

    #[test]
    fn dataset_record_round_trips() {
        use crate::appearance::{Labels, Sample, SampleMeta};
        use crate::motion::{Axis, MotionSplineSet};
        let grid = VoxelGrid::centered([10, 12, 6], 1.0).unwrap();
        let set = SliceSet::standard(&grid).unwrap();
        let sample = Sample {
            slices: SliceTriplets {
                slices: set
                    .planes
                    .iter()
                    .map(|p| Array2::from_shape_fn((p.rows, p.cols), |(r, c)| (r + c) as f32 * 0.1))
                    .collect(),
            },
            labels: Labels {
                mrpe: 0.42,
                profile_all: vec![0.0, 0.5, 0.9],
                profile_in_plane: vec![0.0, 0.5, 0.9],
                profile_out_plane: vec![0.0; 3],
            },
            meta: SampleMeta {
                phantom: "head-01".into(),
                axis: Axis::Ty,
                amplitude: 2.5,
                seed: 99,
                spline: MotionSplineSet::zero(4, 8).unwrap(),
            },
        };
        let dir = tmp("dataset");
        std::fs::create_dir_all(&dir).unwrap();
        write_sample(&dir, 3, &sample, &set, "beef").unwrap();
        let back = read_sample(&dir, 3).unwrap();
        assert_eq!(back.slices, sample.slices);
        assert_eq!(back.labels, sample.labels);
        assert_eq!(back.meta, sample.meta);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let path = tmp("bad.f32");
        let stack = Array3::<f32>::zeros((2, 2, 2));
        write_projections(&path, &stack, "x", (1.0, 1.0), None).unwrap();
        // Truncate the payload behind the sidecar's back.
        std::fs::write(&path, [0u8; 12]).unwrap();
        assert!(read_projections(&path).is_err());
    }
}
