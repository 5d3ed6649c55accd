//! Image-quality metrics over reconstructed slice triplets, behind a common
//! trait so the autofocus objective is selected by name at runtime.
//!
//! Built-in metrics: histogram entropy in a bone window (`ent`), total
//! variation (`tv`), the reprojection-error oracle (`gt`) and the learned
//! regressor score (`cnn`). Lower is always better. The registry maps names
//! to builders; the `+` fine-tuning variants are optimizer compositions and
//! live in the benchmark layer.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::LazyLock;

use crate::appearance::{forward, normalize_per_orientation, slices_to_input, RegressorModel};
use crate::error::{Error, Result};
use crate::fdk::{SlicePlane, SliceSet, SliceTriplets};
use crate::geometry::EffectiveTrajectory;
use crate::rpe::{mean_rpe, MarkerSet};

/// Metric score (lower = better) plus optional per-view head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct IqmValue {
    pub score: f64,
    pub view_scores: Option<ViewScores>,
}

/// Per-view outputs of the learned metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewScores {
    pub combined: Vec<f64>,
    pub in_plane: Vec<f64>,
    pub out_plane: Vec<f64>,
}

impl IqmValue {
    pub fn scalar(score: f64) -> Self {
        Self { score, view_scores: None }
    }
}

/// Candidate state handed to a metric: the reconstructed slices and the
/// effective geometry that produced them (decomposable into calibration and
/// residual motion).
pub struct IqmInput<'a> {
    pub slices: &'a SliceTriplets,
    pub eff: &'a EffectiveTrajectory,
}

/// A scalar image-quality objective; lower scores indicate fewer artifacts.
pub trait ImageQualityMetric: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, input: &IqmInput) -> Result<IqmValue>;
}

/// Intensity window and bin count for the histogram entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoneWindow {
    pub lower: f64,
    pub upper: f64,
    pub bins: usize,
}

impl BoneWindow {
    pub fn new(lower: f64, upper: f64, bins: usize) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::Config(format!("window lower {lower} must be below upper {upper}")));
        }
        if bins < 2 {
            return Err(Error::Config("histogram needs at least 2 bins".into()));
        }
        Ok(Self { lower, upper, bins })
    }
}

/// Shannon entropy (bits) of the joint windowed histogram of all nine slices.
pub fn entropy_iqm(slices: &SliceTriplets, w: &BoneWindow) -> Result<IqmValue> {
    let mut hist = vec![0u64; w.bins];
    let mut in_window = 0u64;
    let mut total = 0u64;
    let scale = w.bins as f64 / (w.upper - w.lower);
    for s in &slices.slices {
        for v in s.iter() {
            let v = *v as f64;
            total += 1;
            if v >= w.lower && v <= w.upper {
                in_window += 1;
            }
            let clamped = v.clamp(w.lower, w.upper);
            let bin = (((clamped - w.lower) * scale) as usize).min(w.bins - 1);
            hist[bin] += 1;
        }
    }
    if in_window == 0 {
        return Err(Error::Degenerate("all values fall outside the histogram window".into()));
    }
    let n = total as f64;
    let mut entropy = 0.0;
    for count in hist {
        if count > 0 {
            let p = count as f64 / n;
            entropy -= p * p.log2();
        }
    }
    Ok(IqmValue::scalar(entropy))
}

/// Sum over slices of the isotropic forward-difference gradient magnitude.
pub fn tv_iqm(slices: &SliceTriplets) -> IqmValue {
    let mut total = 0.0f64;
    for s in &slices.slices {
        let (rows, cols) = s.dim();
        for r in 0..rows {
            for c in 0..cols {
                let v = s[(r, c)] as f64;
                let dr = if r + 1 < rows { s[(r + 1, c)] as f64 - v } else { 0.0 };
                let dc = if c + 1 < cols { s[(r, c + 1)] as f64 - v } else { 0.0 };
                total += (dr * dr + dc * dc).sqrt();
            }
        }
    }
    IqmValue::scalar(total)
}

/// The true mean reprojection error of the candidate geometry: the metric an
/// exact regressor would produce.
pub fn oracle_iqm(eff: &EffectiveTrajectory, markers: &MarkerSet) -> Result<IqmValue> {
    Ok(IqmValue::scalar(mean_rpe(eff, markers)?))
}

/// Learned metric: normalizes the candidate slices per orientation, runs the
/// regressor and returns the scalar score with per-view outputs attached.
pub fn learned_iqm(
    slices: &SliceTriplets,
    set: &SliceSet,
    model: &RegressorModel,
) -> Result<IqmValue> {
    let mut normalized = slices.clone();
    normalize_per_orientation(&mut normalized, set);
    let out = forward(model, &slices_to_input(&normalized, set)?)?;
    Ok(IqmValue {
        score: out.score,
        view_scores: Some(ViewScores {
            combined: out.per_view_all,
            in_plane: out.per_view_in_plane,
            out_plane: out.per_view_out_plane,
        }),
    })
}

/// Flags motion-affected views: view i is motion-free (negative) iff
/// ½·combined + ¼·in_plane + ¼·out_plane ≤ threshold. Returns true for
/// affected (positive) views.
pub fn soft_classify(
    combined: &[f64],
    in_plane: &[f64],
    out_plane: &[f64],
    threshold: f64,
) -> Result<Vec<bool>> {
    if combined.len() != in_plane.len() || combined.len() != out_plane.len() {
        return Err(Error::Shape("per-view vectors differ in length".into()));
    }
    Ok(combined
        .iter()
        .zip(in_plane.iter())
        .zip(out_plane.iter())
        .map(|((a, ip), op)| 0.5 * a + 0.25 * ip + 0.25 * op > threshold)
        .collect())
}

// ---- SSIM -------------------------------------------------------------------

fn gaussian_kernel(sigma: f64, support: usize) -> Vec<f64> {
    let half = (support / 2) as i64;
    let mut k: Vec<f64> =
        (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with border renormalization (truncated windows are
/// divided by their in-image kernel mass).
fn blur(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let half = kernel.len() / 2;
    let mut tmp = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let cc = c as i64 + k as i64 - half as i64;
                if cc >= 0 && (cc as usize) < cols {
                    acc += kv * img[(r, cc as usize)];
                    mass += kv;
                }
            }
            tmp[(r, c)] = acc / mass;
        }
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let rr = r as i64 + k as i64 - half as i64;
                if rr >= 0 && (rr as usize) < rows {
                    acc += kv * tmp[(rr as usize, c)];
                    mass += kv;
                }
            }
            out[(r, c)] = acc / mass;
        }
    }
    out
}

/// Mean local structural similarity over matching image lists, scaled to
/// [0, 100]. Gaussian window σ = 1.5 with 11-sample support; stabilizers are
/// relative to the joint data range. An optional mask restricts the mean.
pub fn ssim(a: &[Array2<f32>], b: &[Array2<f32>], mask: Option<&[Array2<bool>]>) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("image lists must match and be non-empty".into()));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::Shape("mask list length mismatch".into()));
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, y) in a.iter().zip(b.iter()) {
        if x.dim() != y.dim() {
            return Err(Error::Shape(format!("image shapes differ: {:?} vs {:?}", x.dim(), y.dim())));
        }
        for v in x.iter().chain(y.iter()) {
            lo = lo.min(*v as f64);
            hi = hi.max(*v as f64);
        }
    }
    let range = (hi - lo).max(1e-9);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let kernel = gaussian_kernel(1.5, 11);
    let mut total = 0.0;
    let mut count = 0usize;
    for (idx, (xa, xb)) in a.iter().zip(b.iter()).enumerate() {
        let fa = xa.mapv(|v| v as f64);
        let fb = xb.mapv(|v| v as f64);
        let mu_a = blur(&fa, &kernel);
        let mu_b = blur(&fb, &kernel);
        let aa = blur(&(&fa * &fa), &kernel);
        let bb = blur(&(&fb * &fb), &kernel);
        let ab = blur(&(&fa * &fb), &kernel);
        let (rows, cols) = fa.dim();
        for r in 0..rows {
            for c in 0..cols {
                if let Some(m) = mask {
                    if !m[idx][(r, c)] {
                        continue;
                    }
                }
                let ma = mu_a[(r, c)];
                let mb = mu_b[(r, c)];
                let va = aa[(r, c)] - ma * ma;
                let vb = bb[(r, c)] - mb * mb;
                let cov = ab[(r, c)] - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("mask leaves no pixels for SSIM".into()));
    }
    Ok(100.0 * total / count as f64)
}

/// Per-slice mask of pixels whose world (x, y) lies inside a cylinder of the
/// given radius around the rotation axis.
pub fn cylinder_mask(set: &SliceSet, radius: f64) -> Vec<Array2<bool>> {
    mask_from(set, |_p, x, y, _z| x * x + y * y <= radius * radius)
}

/// Per-slice mask of pixels inside an axis-aligned world box.
pub fn box_mask(set: &SliceSet, lo: [f64; 3], hi: [f64; 3]) -> Vec<Array2<bool>> {
    mask_from(set, |_p, x, y, z| {
        x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1] && z >= lo[2] && z <= hi[2]
    })
}

fn mask_from(
    set: &SliceSet,
    pred: impl Fn(&SlicePlane, f64, f64, f64) -> bool,
) -> Vec<Array2<bool>> {
    set.planes
        .iter()
        .map(|p| {
            Array2::from_shape_fn((p.rows, p.cols), |(r, c)| {
                let w = p.world_point(r, c);
                pred(p, w[0], w[1], w[2])
            })
        })
        .collect()
}

// ---- Metric registry ----------------------------------------------------------

/// Everything a metric builder may need.
pub struct MetricContext {
    pub window: BoneWindow,
    pub markers: MarkerSet,
    pub slice_set: SliceSet,
    pub model: Option<RegressorModel>,
}

struct EntropyMetric {
    window: BoneWindow,
}

impl ImageQualityMetric for EntropyMetric {
    fn name(&self) -> &'static str {
        "ent"
    }

    fn evaluate(&self, input: &IqmInput) -> Result<IqmValue> {
        entropy_iqm(input.slices, &self.window)
    }
}

struct TvMetric;

impl ImageQualityMetric for TvMetric {
    fn name(&self) -> &'static str {
        "tv"
    }

    fn evaluate(&self, input: &IqmInput) -> Result<IqmValue> {
        Ok(tv_iqm(input.slices))
    }
}

struct OracleMetric {
    markers: MarkerSet,
}

impl ImageQualityMetric for OracleMetric {
    fn name(&self) -> &'static str {
        "gt"
    }

    fn evaluate(&self, input: &IqmInput) -> Result<IqmValue> {
        oracle_iqm(input.eff, &self.markers)
    }
}

struct LearnedMetric {
    model: RegressorModel,
    slice_set: SliceSet,
}

impl ImageQualityMetric for LearnedMetric {
    fn name(&self) -> &'static str {
        "cnn"
    }

    fn evaluate(&self, input: &IqmInput) -> Result<IqmValue> {
        learned_iqm(input.slices, &self.slice_set, &self.model)
    }
}

type MetricBuilder = fn(&MetricContext) -> Result<Box<dyn ImageQualityMetric>>;

static REGISTRY: LazyLock<BTreeMap<&'static str, MetricBuilder>> = LazyLock::new(|| {
    let mut m: BTreeMap<&'static str, MetricBuilder> = BTreeMap::new();
    m.insert("ent", |ctx| Ok(Box::new(EntropyMetric { window: ctx.window })));
    m.insert("tv", |_| Ok(Box::new(TvMetric)));
    m.insert("gt", |ctx| Ok(Box::new(OracleMetric { markers: ctx.markers.clone() })));
    m.insert("cnn", |ctx| {
        let model = ctx.model.clone().ok_or_else(|| {
            Error::Config("metric 'cnn' needs a trained model (set the model path)".into())
        })?;
        Ok(Box::new(LearnedMetric { model, slice_set: ctx.slice_set.clone() }))
    });
    m
});

/// Names of the registered metrics.
pub fn metric_names() -> Vec<&'static str> {
    REGISTRY.keys().copied().collect()
}

/// Builds a metric by registry name.
pub fn build_metric(name: &str, ctx: &MetricContext) -> Result<Box<dyn ImageQualityMetric>> {
    let builder = REGISTRY.get(name).ok_or_else(|| {
        Error::Config(format!("unknown metric '{name}' (available: {})", metric_names().join(", ")))
    })?;
    builder(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn triplets(values: Vec<Array2<f32>>) -> SliceTriplets {
        SliceTriplets { slices: values }
    }

    #[test]
    fn entropy_of_constant_and_two_level_images() {
        let w = BoneWindow::new(0.0, 1.0, 16).unwrap();
        let constant = triplets(vec![Array2::from_elem((8, 8), 0.49)]);
        assert_eq!(entropy_iqm(&constant, &w).unwrap().score, 0.0);
        // Half the pixels in one bin, half in another: exactly 1 bit.
        let mut img = Array2::from_elem((8, 8), 0.26);
        for c in 0..8 {
            for r in 0..4 {
                img[(r, c)] = 0.76;
            }
        }
        let two = triplets(vec![img]);
        assert!((entropy_iqm(&two, &w).unwrap().score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_fully_out_of_window_data() {
        let w = BoneWindow::new(10.0, 20.0, 8).unwrap();
        let t = triplets(vec![Array2::from_elem((4, 4), 1.0)]);
        assert!(matches!(entropy_iqm(&t, &w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn entropy_is_permutation_invariant() {
        let w = BoneWindow::new(0.0, 1.0, 32).unwrap();
        let img = Array2::from_shape_fn((6, 7), |(r, c)| ((r * 7 + c) as f32 * 0.023) % 1.0);
        let mut permuted_vec: Vec<f32> = img.iter().copied().collect();
        permuted_vec.reverse();
        permuted_vec.swap(3, 19);
        let permuted = Array2::from_shape_vec((6, 7), permuted_vec).unwrap();
        let a = entropy_iqm(&triplets(vec![img]), &w).unwrap().score;
        let b = entropy_iqm(&triplets(vec![permuted]), &w).unwrap().score;
        assert_eq!(a, b);
    }

    #[test]
    fn tv_of_constant_step_and_scaled_images() {
        let constant = triplets(vec![Array2::from_elem((5, 5), 3.0)]);
        assert_eq!(tv_iqm(&constant).score, 0.0);
        // Vertical step edge of height h crossed by L rows.
        let h = 2.5f32;
        let rows = 6;
        let mut img = Array2::<f32>::zeros((rows, 8));
        for r in 0..rows {
            for c in 4..8 {
                img[(r, c)] = h;
            }
        }
        let tv = tv_iqm(&triplets(vec![img.clone()])).score;
        assert!((tv - h as f64 * rows as f64).abs() < 1e-9);
        let doubled = img.mapv(|v| v * 2.0);
        let tv2 = tv_iqm(&triplets(vec![doubled])).score;
        assert!((tv2 - 2.0 * tv).abs() < 1e-9);
    }

    #[test]
    fn blurring_a_thin_stripe_strictly_decreases_tv() {
        // A monotone step keeps its variation under blur; a thin stripe loses
        // peak height, so its TV strictly drops.
        let mut img = Array2::<f32>::zeros((12, 16));
        for r in 0..12 {
            img[(r, 8)] = 1.0;
        }
        let sharp = tv_iqm(&triplets(vec![img.clone()])).score;
        // 3x1 horizontal box blur.
        let blurred = Array2::from_shape_fn((12, 16), |(r, c)| {
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(15);
            let mut total = 0.0;
            let mut count = 0;
            for cc in lo..=hi {
                total += img[(r, cc)];
                count += 1;
            }
            total / count as f32
        });
        let soft = tv_iqm(&triplets(vec![blurred])).score;
        assert!(soft < sharp, "blur did not decrease TV: {soft} vs {sharp}");
    }

    #[test]
    fn soft_classifier_boundary_and_zero_cases() {
        let zeros = vec![0.0; 5];
        let mask = soft_classify(&zeros, &zeros, &zeros, 0.1).unwrap();
        assert!(mask.iter().all(|v| !v));
        // Exactly at the threshold counts as motion-free.
        let boundary = vec![0.1; 4];
        let mask = soft_classify(&boundary, &boundary, &boundary, 0.1).unwrap();
        assert!(mask.iter().all(|v| !v));
        let above = vec![0.11; 4];
        let mask = soft_classify(&above, &above, &above, 0.1).unwrap();
        assert!(mask.iter().all(|v| *v));
        assert!(soft_classify(&zeros, &boundary, &zeros, 0.1).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_noise() {
        let a = vec![Array2::from_shape_fn((24, 30), |(r, c)| {
            ((r as f32 * 0.3).sin() + (c as f32 * 0.2).cos()) * 0.5
        })];
        assert!((ssim(&a, &a, None).unwrap() - 100.0).abs() < 1e-9);
        // Independent "noise" patterns score low.
        let n1 = vec![Array2::from_shape_fn((24, 30), |(r, c)| {
            (((r * 37 + c * 11) % 17) as f32 - 8.0) * 0.125
        })];
        let n2 = vec![Array2::from_shape_fn((24, 30), |(r, c)| {
            (((r * 13 + c * 29) % 19) as f32 - 9.0) * 0.111
        })];
        let low = ssim(&n1, &n2, None).unwrap();
        assert!(low < 20.0, "noise SSIM {low}");
        // Symmetry.
        let ab = ssim(&a, &n1, None).unwrap();
        let ba = ssim(&n1, &a, None).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn ssim_mask_restricts_the_mean() {
        let a = vec![Array2::from_shape_fn((16, 16), |(r, _)| r as f32)];
        let mut b = a.clone();
        // Corrupt the lower half.
        for r in 8..16 {
            for c in 0..16 {
                b[0][(r, c)] = -5.0;
            }
        }
        let full = ssim(&a, &b, None).unwrap();
        // Keep masked pixels far enough that their 11-sample windows stay in
        // the clean region.
        let mask = vec![Array2::from_shape_fn((16, 16), |(r, _)| r < 3)];
        let top = ssim(&a, &b, Some(&mask)).unwrap();
        assert!(top > full, "masked {top} vs full {full}");
        assert!(top > 99.0, "masked {top}");
    }

    #[test]
    fn registry_builds_known_metrics_and_rejects_unknown() {
        use crate::phantom::VoxelGrid;
        let grid = VoxelGrid::centered([8, 8, 4], 1.0).unwrap();
        let ctx = MetricContext {
            window: BoneWindow::new(0.0, 1.0, 16).unwrap(),
            markers: crate::rpe::default_markers(0.5, 0).unwrap(),
            slice_set: SliceSet::standard(&grid).unwrap(),
            model: None,
        };
        assert_eq!(metric_names(), vec!["cnn", "ent", "gt", "tv"]);
        for name in ["ent", "tv", "gt"] {
            let m = build_metric(name, &ctx).unwrap();
            assert_eq!(m.name(), name);
        }
        assert!(matches!(build_metric("cnn", &ctx), Err(Error::Config(_))));
        assert!(matches!(build_metric("nope", &ctx), Err(Error::Config(_))));
    }
}
