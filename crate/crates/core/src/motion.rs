//! Akima-spline parameterization of rigid motion curves, annihilating
//! trajectories and seeded random motion generation.
//!
//! Six splines (t_x, t_y, t_z, r_x, r_y, r_z) share one node grid; evaluating
//! them at every acquired view yields the per-view motion curves. Negating a
//! curve gives the candidate annihilating trajectory for single-axis motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidMotion;

/// The six rigid motion axes, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Axis::Tx, Axis::Ty, Axis::Tz, Axis::Rx, Axis::Ry, Axis::Rz];

    /// Node-sequential optimization order: translations out-of-plane first.
    pub const OPTIMIZATION_ORDER: [Axis; 6] =
        [Axis::Tz, Axis::Tx, Axis::Ty, Axis::Rx, Axis::Ry, Axis::Rz];

    pub fn index(self) -> usize {
        match self {
            Axis::Tx => 0,
            Axis::Ty => 1,
            Axis::Tz => 2,
            Axis::Rx => 3,
            Axis::Ry => 4,
            Axis::Rz => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::Tx => "tx",
            Axis::Ty => "ty",
            Axis::Tz => "tz",
            Axis::Rx => "rx",
            Axis::Ry => "ry",
            Axis::Rz => "rz",
        }
    }

    pub fn from_label(s: &str) -> Result<Axis> {
        match s {
            "tx" => Ok(Axis::Tx),
            "ty" => Ok(Axis::Ty),
            "tz" => Ok(Axis::Tz),
            "rx" => Ok(Axis::Rx),
            "ry" => Ok(Axis::Ry),
            "rz" => Ok(Axis::Rz),
            other => Err(Error::Config(format!("unknown motion axis '{other}'"))),
        }
    }

    /// True for the axes acting inside the acquisition plane (r_z, t_x, t_y).
    pub fn is_in_plane(self) -> bool {
        matches!(self, Axis::Tx | Axis::Ty | Axis::Rz)
    }
}

/// Interpolating Akima spline over strictly increasing node positions.
///
/// Slopes use Akima's five-point weighted-difference rule; the boundary slopes
/// come from his quadratic extrapolation of the secant differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AkimaSpline {
    positions: Vec<f64>,
    values: Vec<f64>,
}

impl AkimaSpline {
    pub fn new(positions: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Config("Akima spline needs at least 2 nodes".into()));
        }
        if positions.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} positions vs {} values",
                positions.len(),
                values.len()
            )));
        }
        if positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("node positions must be strictly increasing".into()));
        }
        if positions.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("node data must be finite".into()));
        }
        Ok(Self { positions, values })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Node slopes by the weighted-difference rule.
    fn slopes(&self) -> Vec<f64> {
        let n = self.positions.len();
        // Secant slopes with two extrapolated entries on each side.
        let mut m = Vec::with_capacity(n + 3);
        m.push(0.0);
        m.push(0.0);
        for i in 0..n - 1 {
            m.push(
                (self.values[i + 1] - self.values[i]) / (self.positions[i + 1] - self.positions[i]),
            );
        }
        // Quadratic extrapolation of the differences on both ends; for two
        // nodes the single secant repeats.
        let second = if n >= 3 { m[3] } else { m[2] };
        m[1] = 2.0 * m[2] - second;
        m[0] = 2.0 * m[1] - m[2];
        let last = m[m.len() - 1];
        let before_last = if n >= 3 { m[m.len() - 2] } else { last };
        m.push(2.0 * last - before_last);
        let l = m.len();
        m.push(2.0 * m[l - 1] - m[l - 2]);
        // m[i+2] is now the secant on interval i.
        (0..n)
            .map(|i| {
                let m0 = m[i];
                let m1 = m[i + 1];
                let m2 = m[i + 2];
                let m3 = m[i + 3];
                let w1 = (m3 - m2).abs();
                let w2 = (m1 - m0).abs();
                if w1 + w2 < 1e-12 {
                    0.5 * (m1 + m2)
                } else {
                    (w1 * m1 + w2 * m2) / (w1 + w2)
                }
            })
            .collect()
    }

    /// Evaluates the spline; `x` must lie within the node range.
    pub fn eval(&self, x: f64) -> Result<f64> {
        let lo = *self.positions.first().unwrap();
        let hi = *self.positions.last().unwrap();
        if !(x >= lo && x <= hi) {
            return Err(Error::Domain(format!("x = {x} outside spline range [{lo}, {hi}]")));
        }
        let s = self.slopes();
        Ok(self.eval_with_slopes(x, &s))
    }

    /// Evaluates at many in-range points, reusing the slope computation.
    pub fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        let s = self.slopes();
        xs.iter().map(|&x| self.eval_with_slopes(x, &s)).collect()
    }

    fn eval_with_slopes(&self, x: f64, s: &[f64]) -> f64 {
        let n = self.positions.len();
        // Exact node reproduction, including the last node.
        let i = match self.positions.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(k) => return self.values[k],
            Err(k) => k.saturating_sub(1).min(n - 2),
        };
        let h = self.positions[i + 1] - self.positions[i];
        let sec = (self.values[i + 1] - self.values[i]) / h;
        let c2 = (3.0 * sec - 2.0 * s[i] - s[i + 1]) / h;
        let c3 = (s[i] + s[i + 1] - 2.0 * sec) / (h * h);
        let dx = x - self.positions[i];
        self.values[i] + dx * (s[i] + dx * (c2 + dx * c3))
    }

    /// Inclusive-exclusive view range that the node at `node_idx` can
    /// influence. The slope at node j uses the secants of intervals j-2..j+1,
    /// so a node value reaches three node intervals on each side.
    pub fn support_view_range(&self, node_idx: usize, n_views: usize) -> (usize, usize) {
        let n = self.positions.len();
        let lo_pos = self.positions[node_idx.saturating_sub(3)];
        let hi_pos = self.positions[(node_idx + 3).min(n - 1)];
        let lo = lo_pos.floor().max(0.0) as usize;
        let hi = (hi_pos.ceil() as usize + 1).min(n_views);
        (lo.min(n_views), hi)
    }
}

/// Six Akima splines sharing one node grid; rows follow [`Axis::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSplineSet {
    positions: Vec<f64>,
    values: [Vec<f64>; 6],
}

impl MotionSplineSet {
    pub fn new(positions: Vec<f64>, values: [Vec<f64>; 6]) -> Result<Self> {
        for row in &values {
            AkimaSpline::new(positions.clone(), row.clone())?;
        }
        Ok(Self { positions, values })
    }

    /// All-zero spline set over a uniform node grid spanning [0, n_views-1].
    pub fn zero(n_nodes: usize, n_views: usize) -> Result<Self> {
        let positions = uniform_nodes(n_nodes, n_views)?;
        let values = std::array::from_fn(|_| vec![0.0; n_nodes]);
        Self::new(positions, values)
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn values(&self, axis: Axis) -> &[f64] {
        &self.values[axis.index()]
    }

    pub fn value(&self, axis: Axis, node: usize) -> f64 {
        self.values[axis.index()][node]
    }

    pub fn set_value(&mut self, axis: Axis, node: usize, v: f64) {
        self.values[axis.index()][node] = v;
    }

    pub fn spline(&self, axis: Axis) -> AkimaSpline {
        AkimaSpline::new(self.positions.clone(), self.values[axis.index()].clone())
            .expect("validated at construction")
    }

    /// Axes with any non-zero node value.
    pub fn active_axes(&self) -> Vec<Axis> {
        Axis::ALL
            .into_iter()
            .filter(|a| self.values[a.index()].iter().any(|v| *v != 0.0))
            .collect()
    }

    /// Node-wise negation.
    pub fn negate(&self) -> MotionSplineSet {
        let values = std::array::from_fn(|k| self.values[k].iter().map(|v| -v).collect());
        MotionSplineSet { positions: self.positions.clone(), values }
    }
}

/// Uniform node grid over [0, n_views - 1].
pub fn uniform_nodes(n_nodes: usize, n_views: usize) -> Result<Vec<f64>> {
    if n_nodes < 2 {
        return Err(Error::Config("need at least 2 spline nodes".into()));
    }
    if n_views < 2 {
        return Err(Error::Config("need at least 2 views".into()));
    }
    let last = (n_views - 1) as f64;
    Ok((0..n_nodes).map(|i| last * i as f64 / (n_nodes - 1) as f64).collect())
}

/// Per-view motion values for all six axes: a 6 x n_views matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionCurves {
    rows: [Vec<f64>; 6],
}

impl MotionCurves {
    pub fn n_views(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, axis: Axis) -> &[f64] {
        &self.rows[axis.index()]
    }

    pub fn value(&self, axis: Axis, view: usize) -> f64 {
        self.rows[axis.index()][view]
    }

    /// Rigid motion state at one view.
    pub fn motion_at(&self, view: usize) -> RigidMotion {
        RigidMotion {
            tx: self.rows[0][view],
            ty: self.rows[1][view],
            tz: self.rows[2][view],
            rx: self.rows[3][view],
            ry: self.rows[4][view],
            rz: self.rows[5][view],
        }
    }

    /// Zeroes all axes at the given view.
    pub fn clear_view(&mut self, view: usize) {
        for row in &mut self.rows {
            row[view] = 0.0;
        }
    }

    /// Mean absolute value over views and the given axes.
    pub fn mean_abs(&self, axes: &[Axis]) -> f64 {
        if axes.is_empty() || self.n_views() == 0 {
            return 0.0;
        }
        let total: f64 = axes
            .iter()
            .map(|a| self.rows[a.index()].iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        total / (axes.len() * self.n_views()) as f64
    }
}

/// Evaluates all six splines at views 0..n_views.
pub fn curves_from_splines(set: &MotionSplineSet, n_views: usize) -> Result<MotionCurves> {
    let lo = *set.positions().first().unwrap();
    let hi = *set.positions().last().unwrap();
    let last = (n_views - 1) as f64;
    if lo > 0.0 || hi < last {
        return Err(Error::Domain(format!(
            "node positions [{lo}, {hi}] do not span the view range [0, {last}]"
        )));
    }
    let xs: Vec<f64> = (0..n_views).map(|i| i as f64).collect();
    let rows = std::array::from_fn(|k| {
        let axis = Axis::ALL[k];
        if set.values(axis).iter().all(|v| *v == 0.0) {
            vec![0.0; n_views]
        } else {
            set.spline(axis).eval_many(&xs)
        }
    });
    Ok(MotionCurves { rows })
}

/// Turns per-view curve values into the per-view rigid motion list realizing
/// the candidate compensation.
pub fn annihilating_motion(curves: &MotionCurves) -> Vec<RigidMotion> {
    (0..curves.n_views()).map(|i| curves.motion_at(i)).collect()
}

/// Contiguous view window of length ceil(n_views / 3) placed uniformly at
/// random inside `safe`, the Parker-safe view range (inclusive bounds).
fn draw_window(
    rng: &mut ChaCha8Rng,
    n_views: usize,
    safe: (usize, usize),
) -> Result<(usize, usize)> {
    let win = n_views.div_ceil(3);
    let (lo, hi) = safe;
    if hi < lo || hi + 1 - lo < win {
        return Err(Error::Config(format!(
            "motion window of {win} views does not fit the Parker-safe range [{lo}, {hi}]"
        )));
    }
    let start = rng.gen_range(lo..=hi + 1 - win);
    Ok((start, start + win))
}

/// Draws a random single-axis motion spline set: node values i.i.d. uniform in
/// [-amplitude, amplitude] inside a random one-third window, zero elsewhere.
pub fn random_motion(
    axis: Axis,
    amplitude: f64,
    n_nodes: usize,
    n_views: usize,
    parker_safe: (usize, usize),
    seed: u64,
) -> Result<MotionSplineSet> {
    if amplitude < 0.0 {
        return Err(Error::Config("amplitude must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (win_lo, win_hi) = draw_window(&mut rng, n_views, parker_safe)?;
    let mut set = MotionSplineSet::zero(n_nodes, n_views)?;
    if amplitude == 0.0 {
        return Ok(set);
    }
    for node in 0..n_nodes {
        let pos = set.positions()[node];
        if pos >= win_lo as f64 && pos < win_hi as f64 {
            set.set_value(axis, node, rng.gen_range(-amplitude..=amplitude));
        }
    }
    Ok(set)
}
