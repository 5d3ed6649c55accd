//! Multi-task slice regressor: a shared convolutional trunk applied to each
//! slice orientation, channel concatenation, 1x1 fusion and four affine heads
//! producing the scalar score and the three per-view profiles.
//!
//! Everything is f64 with hand-written reverse-mode gradients so analytic
//! derivatives can be checked against central finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense CHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[ch * hw..(ch + 1) * hw]
    }
}

/// Architecture descriptor, serialized with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    /// Channel counts through the trunk, input channels first.
    pub trunk_channels: Vec<usize>,
    /// Channels after the 1x1 fusion of the concatenated trunk outputs.
    pub fused_channels: usize,
    /// Side length of the adaptive pooling at the end of the trunk.
    pub pooled: usize,
    /// Number of views each per-view head predicts.
    pub n_views: usize,
    /// Expected (rows, cols) per orientation: axial, coronal, sagittal.
    pub input_dims: [[usize; 2]; 3],
}

impl ModelDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_channels.len() < 2 {
            return Err(Error::Config("trunk needs at least one block".into()));
        }
        if self.trunk_channels[0] != 3 {
            return Err(Error::Config("trunk input must have 3 channels (slice triplet)".into()));
        }
        if self.pooled == 0 || self.fused_channels == 0 || self.n_views == 0 {
            return Err(Error::Config("descriptor dimensions must be positive".into()));
        }
        // Every block halves the spatial dims; they must stay non-zero.
        for [h, w] in self.input_dims {
            let blocks = self.trunk_channels.len() - 1;
            if h >> blocks == 0 || w >> blocks == 0 {
                return Err(Error::Config(format!(
                    "input {h}x{w} collapses after {blocks} downsampling blocks"
                )));
            }
        }
        Ok(())
    }

    fn n_blocks(&self) -> usize {
        self.trunk_channels.len() - 1
    }

    fn concat_channels(&self) -> usize {
        3 * *self.trunk_channels.last().unwrap()
    }
}

/// One named parameter group (weights or biases of one layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
}

/// Gradient buffers with the same group layout as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub groups: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &RegressorModel) -> Self {
        Self { groups: model.groups.iter().map(|g| vec![0.0; g.values.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.groups.iter_mut().zip(other.groups.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.groups {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Head outputs: scalar mean-error score and three per-view profiles
/// (combined, in-plane, out-of-plane).
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub score: f64,
    pub per_view_all: Vec<f64>,
    pub per_view_in_plane: Vec<f64>,
    pub per_view_out_plane: Vec<f64>,
}

/// Regression targets with the same layout as [`Outputs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub mean: f64,
    pub all: Vec<f64>,
    pub in_plane: Vec<f64>,
    pub out_plane: Vec<f64>,
}

// Group layout: per block (w, b), then fuse (w, b), then 4 heads (w, b).
/// The siamese-trunk multi-task regressor. The trunk parameters are stored
/// once; all three orientation branches read the same storage.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    pub desc: ModelDescriptor,
    pub groups: Vec<ParamGroup>,
}

impl RegressorModel {
    /// Deterministic scaled-uniform initialization.
    pub fn init(desc: ModelDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
        let mut uniform = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let mut groups = Vec::new();
        for bi in 0..desc.n_blocks() {
            let (ci, co) = (desc.trunk_channels[bi], desc.trunk_channels[bi + 1]);
            let fan_in = (ci * 9) as f64;
            let bound = (2.0 / fan_in).sqrt();
            groups.push(ParamGroup {
                name: format!("trunk{}.w", bi + 1),
                values: (0..co * ci * 9).map(|_| uniform() * bound).collect(),
            });
            groups.push(ParamGroup { name: format!("trunk{}.b", bi + 1), values: vec![0.0; co] });
        }
        let cc = desc.concat_channels();
        let bound = (2.0 / cc as f64).sqrt();
        groups.push(ParamGroup {
            name: "fuse.w".into(),
            values: (0..desc.fused_channels * cc).map(|_| uniform() * bound).collect(),
        });
        groups.push(ParamGroup { name: "fuse.b".into(), values: vec![0.0; desc.fused_channels] });
        let head_dims = [1, desc.n_views, desc.n_views, desc.n_views];
        let head_names = ["head_score", "head_all", "head_ip", "head_op"];
        let bound = (1.0 / desc.fused_channels as f64).sqrt();
        for (name, out) in head_names.iter().zip(head_dims) {
            groups.push(ParamGroup {
                name: format!("{name}.w"),
                values: (0..out * desc.fused_channels).map(|_| uniform() * bound).collect(),
            });
            groups.push(ParamGroup { name: format!("{name}.b"), values: vec![0.0; out] });
        }
        Ok(Self { desc, groups })
    }

    pub fn n_params(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    fn block_w(&self, bi: usize) -> &[f64] {
        &self.groups[2 * bi].values
    }

    fn block_b(&self, bi: usize) -> &[f64] {
        &self.groups[2 * bi + 1].values
    }

    fn fuse_w(&self) -> &[f64] {
        &self.groups[2 * self.desc.n_blocks()].values
    }

    fn fuse_b(&self) -> &[f64] {
        &self.groups[2 * self.desc.n_blocks() + 1].values
    }

    fn head_w(&self, hi: usize) -> &[f64] {
        &self.groups[2 * self.desc.n_blocks() + 2 + 2 * hi].values
    }

    fn head_b(&self, hi: usize) -> &[f64] {
        &self.groups[2 * self.desc.n_blocks() + 2 + 2 * hi + 1].values
    }

    /// Checks an input triplet against the descriptor.
    pub fn check_input(&self, input: &[Tensor; 3]) -> Result<()> {
        for (t, [h, w]) in input.iter().zip(self.desc.input_dims) {
            if t.c != 3 || t.h != h || t.w != w {
                return Err(Error::Shape(format!(
                    "orientation input is {}x{}x{}, model expects 3x{h}x{w}",
                    t.c, t.h, t.w
                )));
            }
        }
        Ok(())
    }
}

/// 3x3 zero-padded convolution, stride 1.
fn conv3x3(input: &Tensor, w: &[f64], b: &[f64], out_ch: usize) -> Tensor {
    let (ci, h, wd) = (input.c, input.h, input.w);
    let mut out = Tensor::zeros(out_ch, h, wd);
    for oc in 0..out_ch {
        out.plane_mut(oc).fill(b[oc]);
        for ic in 0..ci {
            let ip = input.plane(ic);
            let base = (oc * ci + ic) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = w[base + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let oy0 = 1usize.saturating_sub(ky);
                    let oy1 = (h + 1 - ky).min(h);
                    let ox0 = 1usize.saturating_sub(kx);
                    let ox1 = (wd + 1 - kx).min(wd);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - 1;
                        let irow = &ip[iy * wd..(iy + 1) * wd];
                        let orow = &mut out.data[(oc * h + oy) * wd..(oc * h + oy + 1) * wd];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * irow[ox + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of the 3x3 convolution: fills dW/dB and returns dInput.
fn conv3x3_backward(
    input: &Tensor,
    grad_out: &Tensor,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let (ci, h, wd) = (input.c, input.h, input.w);
    let co = grad_out.c;
    let mut grad_in = Tensor::zeros(ci, h, wd);
    for oc in 0..co {
        let gp = grad_out.plane(oc);
        db[oc] += gp.iter().sum::<f64>();
        for ic in 0..ci {
            let ip = input.plane(ic);
            let base = (oc * ci + ic) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let mut wgrad = 0.0;
                    let wv = w[base + ky * 3 + kx];
                    let oy0 = 1usize.saturating_sub(ky);
                    let oy1 = (h + 1 - ky).min(h);
                    let ox0 = 1usize.saturating_sub(kx);
                    let ox1 = (wd + 1 - kx).min(wd);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - 1;
                        let irow = &ip[iy * wd..(iy + 1) * wd];
                        let grow = &gp[oy * wd..(oy + 1) * wd];
                        let girow =
                            &mut grad_in.data[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                        for ox in ox0..ox1 {
                            let g = grow[ox];
                            wgrad += g * irow[ox + kx - 1];
                            girow[ox + kx - 1] += wv * g;
                        }
                    }
                    dw[base + ky * 3 + kx] += wgrad;
                }
            }
        }
    }
    grad_in
}

fn relu(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Routes gradients through the ReLU given the pre-activation values.
fn relu_backward(pre: &Tensor, grad: &mut Tensor) {
    for (g, p) in grad.data.iter_mut().zip(pre.data.iter()) {
        if *p < 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 average pooling with floor semantics on odd dims.
fn avgpool2(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.c, input.h / 2, input.w / 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let ip = input.plane(ch);
        let op = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let i0 = (2 * y) * input.w + 2 * x;
                let i1 = (2 * y + 1) * input.w + 2 * x;
                op[y * w + x] = 0.25 * (ip[i0] + ip[i0 + 1] + ip[i1] + ip[i1 + 1]);
            }
        }
    }
    out
}

fn avgpool2_backward(input_shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut grad_in = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let gp = grad_out.plane(ch);
        let gi = grad_in.plane_mut(ch);
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                let g = 0.25 * gp[y * grad_out.w + x];
                let i0 = (2 * y) * w + 2 * x;
                let i1 = (2 * y + 1) * w + 2 * x;
                gi[i0] += g;
                gi[i0 + 1] += g;
                gi[i1] += g;
                gi[i1 + 1] += g;
            }
        }
    }
    grad_in
}

fn pool_region(i: usize, n: usize, size: usize) -> (usize, usize) {
    let start = i * size / n;
    let end = ((i + 1) * size).div_ceil(n);
    (start, end.max(start + 1).min(size))
}

/// Adaptive average pooling to an n x n map.
fn adaptive_pool(input: &Tensor, n: usize) -> Tensor {
    let mut out = Tensor::zeros(input.c, n, n);
    for ch in 0..input.c {
        let ip = input.plane(ch);
        let op = out.plane_mut(ch);
        for y in 0..n {
            let (y0, y1) = pool_region(y, n, input.h);
            for x in 0..n {
                let (x0, x1) = pool_region(x, n, input.w);
                let mut total = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        total += ip[yy * input.w + xx];
                    }
                }
                op[y * n + x] = total / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

fn adaptive_pool_backward(input_shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let n = grad_out.h;
    let mut grad_in = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let gp = grad_out.plane(ch);
        let gi = grad_in.plane_mut(ch);
        for y in 0..n {
            let (y0, y1) = pool_region(y, n, h);
            for x in 0..n {
                let (x0, x1) = pool_region(x, n, w);
                let g = gp[y * n + x] / ((y1 - y0) * (x1 - x0)) as f64;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        gi[yy * w + xx] += g;
                    }
                }
            }
        }
    }
    grad_in
}

/// Per-orientation trunk activations kept for the backward pass.
struct BranchCache {
    /// Input and the pooled output of each block.
    activations: Vec<Tensor>,
    /// Pre-activation (conv output) of each block.
    pre_relu: Vec<Tensor>,
    /// Post-ReLU activations (pooling inputs).
    post_relu: Vec<Tensor>,
}

/// Forward intermediates for one sample.
pub struct ForwardCache {
    branches: Vec<BranchCache>,
    concat: Tensor,
    fuse_pre: Tensor,
    pub pooled_features: Vec<f64>,
}

fn run_trunk(model: &RegressorModel, input: &Tensor) -> BranchCache {
    let mut activations = vec![input.clone()];
    let mut pre_relu = Vec::new();
    let mut post_relu = Vec::new();
    for bi in 0..model.desc.n_blocks() {
        let x = activations.last().unwrap();
        let co = model.desc.trunk_channels[bi + 1];
        let conv = conv3x3(x, model.block_w(bi), model.block_b(bi), co);
        pre_relu.push(conv.clone());
        let mut act = conv;
        relu(&mut act);
        post_relu.push(act.clone());
        activations.push(avgpool2(&act));
    }
    BranchCache { activations, pre_relu, post_relu }
}

/// Full forward pass with cached intermediates.
pub fn forward_cached(model: &RegressorModel, input: &[Tensor; 3]) -> Result<(Outputs, ForwardCache)> {
    model.check_input(input)?;
    let desc = &model.desc;
    let n = desc.pooled;
    let mut branches = Vec::with_capacity(3);
    let mut pooled = Vec::with_capacity(3);
    for t in input {
        let cache = run_trunk(model, t);
        pooled.push(adaptive_pool(cache.activations.last().unwrap(), n));
        branches.push(cache);
    }
    // Ordered channel concatenation: axial, coronal, sagittal.
    let cc = desc.concat_channels();
    let mut concat = Tensor::zeros(cc, n, n);
    let per = cc / 3;
    for (k, p) in pooled.iter().enumerate() {
        concat.data[k * per * n * n..(k + 1) * per * n * n].copy_from_slice(&p.data);
    }
    // 1x1 fusion with ReLU.
    let fw = model.fuse_w();
    let fb = model.fuse_b();
    let fc = desc.fused_channels;
    let mut fuse_pre = Tensor::zeros(fc, n, n);
    for oc in 0..fc {
        let op = fuse_pre.plane_mut(oc);
        op.fill(fb[oc]);
        for ic in 0..cc {
            let wv = fw[oc * cc + ic];
            let ip = concat.plane(ic);
            for (o, i) in op.iter_mut().zip(ip.iter()) {
                *o += wv * i;
            }
        }
    }
    let mut fused = fuse_pre.clone();
    relu(&mut fused);
    // Global average pooling.
    let inv = 1.0 / (n * n) as f64;
    let pooled_features: Vec<f64> =
        (0..fc).map(|c| fused.plane(c).iter().sum::<f64>() * inv).collect();
    // Affine heads.
    let head = |hi: usize, out_dim: usize| -> Vec<f64> {
        let w = model.head_w(hi);
        let b = model.head_b(hi);
        (0..out_dim)
            .map(|o| {
                b[o] + w[o * fc..(o + 1) * fc]
                    .iter()
                    .zip(pooled_features.iter())
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
            })
            .collect()
    };
    let outputs = Outputs {
        score: head(0, 1)[0],
        per_view_all: head(1, desc.n_views),
        per_view_in_plane: head(2, desc.n_views),
        per_view_out_plane: head(3, desc.n_views),
    };
    Ok((outputs, ForwardCache { branches, concat, fuse_pre, pooled_features }))
}

/// Forward pass without keeping intermediates.
pub fn forward(model: &RegressorModel, input: &[Tensor; 3]) -> Result<Outputs> {
    forward_cached(model, input).map(|(o, _)| o)
}

/// Sum of squared errors over the four tasks.
pub fn loss(outputs: &Outputs, targets: &Targets) -> f64 {
    let mut total = (outputs.score - targets.mean).powi(2);
    for (o, t) in outputs.per_view_all.iter().zip(&targets.all) {
        total += (o - t) * (o - t);
    }
    for (o, t) in outputs.per_view_in_plane.iter().zip(&targets.in_plane) {
        total += (o - t) * (o - t);
    }
    for (o, t) in outputs.per_view_out_plane.iter().zip(&targets.out_plane) {
        total += (o - t) * (o - t);
    }
    total
}

/// Reverse pass of `loss(forward(input), targets)`; accumulates parameter
/// gradients into `grads` and returns the loss.
pub fn backward(
    model: &RegressorModel,
    input: &[Tensor; 3],
    targets: &Targets,
    grads: &mut Gradients,
) -> Result<f64> {
    let (outputs, cache) = forward_cached(model, input)?;
    let value = loss(&outputs, targets);
    let desc = &model.desc;
    let fc = desc.fused_channels;
    let n = desc.pooled;
    let nb = desc.n_blocks();

    // Head gradients and the gradient on the pooled feature vector.
    let mut d_features = vec![0.0; fc];
    let head_outputs: [(usize, Vec<f64>); 4] = [
        (0, vec![2.0 * (outputs.score - targets.mean)]),
        (1, diff2(&outputs.per_view_all, &targets.all)),
        (2, diff2(&outputs.per_view_in_plane, &targets.in_plane)),
        (3, diff2(&outputs.per_view_out_plane, &targets.out_plane)),
    ];
    for (hi, dout) in &head_outputs {
        let w = model.head_w(*hi);
        let gi = 2 * nb + 2 + 2 * hi;
        for (o, g) in dout.iter().enumerate() {
            grads.groups[gi + 1][o] += g;
            for (c, f) in cache.pooled_features.iter().enumerate() {
                grads.groups[gi][o * fc + c] += g * f;
            }
        }
        for c in 0..fc {
            let mut acc = 0.0;
            for (o, g) in dout.iter().enumerate() {
                acc += g * w[o * fc + c];
            }
            d_features[c] += acc;
        }
    }

    // Global average pool backward.
    let inv = 1.0 / (n * n) as f64;
    let mut d_fused = Tensor::zeros(fc, n, n);
    for c in 0..fc {
        let g = d_features[c] * inv;
        d_fused.plane_mut(c).fill(g);
    }
    relu_backward(&cache.fuse_pre, &mut d_fused);

    // 1x1 fusion backward.
    let cc = desc.concat_channels();
    let fuse_wi = 2 * nb;
    let fw = model.fuse_w();
    let mut d_concat = Tensor::zeros(cc, n, n);
    for oc in 0..fc {
        let gp = d_fused.plane(oc);
        grads.groups[fuse_wi + 1][oc] += gp.iter().sum::<f64>();
        for ic in 0..cc {
            let ip = cache.concat.plane(ic);
            let mut acc = 0.0;
            let dip = d_concat.plane_mut(ic);
            let wv = fw[oc * cc + ic];
            for ((g, i), di) in gp.iter().zip(ip.iter()).zip(dip.iter_mut()) {
                acc += g * i;
                *di += wv * g;
            }
            grads.groups[fuse_wi][oc * cc + ic] += acc;
        }
    }

    // Split the concatenation and run each branch backward through the shared
    // trunk; gradients sum into the single trunk storage.
    let per = cc / 3;
    for (k, branch) in cache.branches.iter().enumerate() {
        let mut d_pool = Tensor::zeros(per, n, n);
        d_pool.data.copy_from_slice(&d_concat.data[k * per * n * n..(k + 1) * per * n * n]);
        let last = branch.activations.last().unwrap();
        let mut d_act = adaptive_pool_backward((last.c, last.h, last.w), &d_pool);
        for bi in (0..nb).rev() {
            let post = &branch.post_relu[bi];
            let mut d_post = avgpool2_backward((post.c, post.h, post.w), &d_act);
            relu_backward(&branch.pre_relu[bi], &mut d_post);
            let input_t = &branch.activations[bi];
            let (dw, db) = {
                // Two disjoint groups: split to borrow both mutably.
                let (a, b) = grads.groups.split_at_mut(2 * bi + 1);
                (&mut a[2 * bi], &mut b[0])
            };
            d_act = conv3x3_backward(input_t, &d_post, model.block_w(bi), dw, db);
        }
    }
    Ok(value)
}

fn diff2(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| 2.0 * (x - y)).collect()
}

/// ADAM optimizer state over the model's parameter groups.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &RegressorModel, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: model.groups.iter().map(|g| vec![0.0; g.values.len()]).collect(),
            v: model.groups.iter().map(|g| vec![0.0; g.values.len()]).collect(),
        }
    }

    /// One ADAM update with bias-corrected moment estimates.
    pub fn apply(&mut self, model: &mut RegressorModel, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((group, grad), (m, v)) in model
            .groups
            .iter_mut()
            .zip(grads.groups.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..group.values.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                group.values[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean batch loss and gradient, then one ADAM step. Samples are processed in
/// index order; with non-finite loss the update aborts.
pub fn backward_and_step(
    model: &mut RegressorModel,
    batch: &[(&[Tensor; 3], &Targets)],
    state: &mut AdamState,
) -> Result<f64> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let snapshot = model.clone();
    let results: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|(input, targets)| {
            let mut g = Gradients::zeros_like(&snapshot);
            let l = backward(&snapshot, input, targets, &mut g)?;
            Ok((l, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(model);
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    if !total.is_finite() {
        return Err(Error::Divergence(format!("non-finite batch loss {total}")));
    }
    grads.scale(inv);
    state.apply(model, &grads);
    Ok(total * inv)
}

// ---- Model container serialization -----------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"CFRM";
const MODEL_VERSION: u32 = 1;

/// Writes the architecture descriptor plus flat little-endian f64 parameter
/// blocks.
pub fn save_model(model: &RegressorModel, path: &std::path::Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let desc = serde_json::to_vec(&model.desc)?;
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(model.groups.len() as u32).to_le_bytes());
    for g in &model.groups {
        let name = g.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(g.values.len() as u64).to_le_bytes());
        for v in &g.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<RegressorModel> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Config("model file truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MODEL_MAGIC {
        return Err(Error::Config("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::Config(format!("unsupported model version {version}")));
    }
    let dlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let desc: ModelDescriptor = serde_json::from_slice(take(&mut pos, dlen)?)?;
    desc.validate()?;
    let n_groups = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| Error::Config("bad group name".into()))?;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, count * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        groups.push(ParamGroup { name, values });
    }
    Ok(RegressorModel { desc, groups })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_descriptor() -> ModelDescriptor {
        ModelDescriptor {
            trunk_channels: vec![3, 2, 2],
            fused_channels: 4,
            pooled: 2,
            n_views: 3,
            input_dims: [[10, 12], [6, 10], [6, 12]],
        }
    }

    pub(crate) fn tiny_input(seed: u64, desc: &ModelDescriptor) -> [Tensor; 3] {
        let mut state = seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(7);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        std::array::from_fn(|k| {
            let [h, w] = desc.input_dims[k];
            Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| next()).collect()).unwrap()
        })
    }

    fn tiny_targets(desc: &ModelDescriptor) -> Targets {
        Targets {
            mean: 0.7,
            all: vec![0.1, 0.9, 0.4][..desc.n_views].to_vec(),
            in_plane: vec![0.0, 0.5, 0.2][..desc.n_views].to_vec(),
            out_plane: vec![0.3, 0.0, 0.1][..desc.n_views].to_vec(),
        }
    }

    #[test]
    fn output_shapes_match_view_count() {
        let desc = tiny_descriptor();
        let model = RegressorModel::init(desc.clone(), 1).unwrap();
        let out = forward(&model, &tiny_input(3, &desc)).unwrap();
        assert_eq!(out.per_view_all.len(), desc.n_views);
        assert_eq!(out.per_view_in_plane.len(), desc.n_views);
        assert_eq!(out.per_view_out_plane.len(), desc.n_views);
        // Deterministic: identical input and weights give identical output.
        let again = forward(&model, &tiny_input(3, &desc)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn orientation_order_matters() {
        // Swapping coronal and sagittal inputs must change the outputs, which
        // requires same-shape orientations.
        let desc = ModelDescriptor {
            input_dims: [[8, 8], [8, 8], [8, 8]],
            ..tiny_descriptor()
        };
        let model = RegressorModel::init(desc.clone(), 2).unwrap();
        let input = tiny_input(5, &desc);
        let swapped = [input[0].clone(), input[2].clone(), input[1].clone()];
        let a = forward(&model, &input).unwrap();
        let b = forward(&model, &swapped).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn doubling_trunk_weights_scales_pre_head_features() {
        // ReLU is positive-homogeneous, so with zero biases doubling every
        // trunk weight scales the pooled features by 2^blocks.
        let desc = tiny_descriptor();
        let mut model = RegressorModel::init(desc.clone(), 4).unwrap();
        let nb = desc.trunk_channels.len() - 1;
        for bi in 0..nb {
            let b = &mut model.groups[2 * bi + 1].values;
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let fuse_wi = 2 * nb;
        model.groups[fuse_wi + 1].values.iter_mut().for_each(|v| *v = 0.0);
        let input = tiny_input(9, &desc);
        let (_, cache) = forward_cached(&model, &input).unwrap();
        let mut doubled = model.clone();
        for bi in 0..nb {
            doubled.groups[2 * bi].values.iter_mut().for_each(|v| *v *= 2.0);
        }
        let (_, cache2) = forward_cached(&doubled, &input).unwrap();
        let factor = 2.0f64.powi(nb as i32);
        for (a, b) in cache.pooled_features.iter().zip(cache2.pooled_features.iter()) {
            assert!((b - a * factor).abs() < 1e-9, "{b} vs {}", a * factor);
        }
    }

    #[test]
    fn loss_zero_iff_exact_and_hand_computed_case() {
        let desc = tiny_descriptor();
        let out = Outputs {
            score: 0.7,
            per_view_all: vec![0.1, 0.9, 0.4],
            per_view_in_plane: vec![0.0, 0.5, 0.2],
            per_view_out_plane: vec![0.3, 0.0, 0.1],
        };
        let t = tiny_targets(&desc);
        assert_eq!(loss(&out, &t), 0.0);
        // Two-view toy case by scalar arithmetic.
        let out = Outputs {
            score: 1.0,
            per_view_all: vec![1.0, 0.0],
            per_view_in_plane: vec![0.5, 0.5],
            per_view_out_plane: vec![0.0, 0.0],
        };
        let t = Targets {
            mean: 0.5,
            all: vec![0.5, 0.5],
            in_plane: vec![0.0, 1.0],
            out_plane: vec![0.0, 0.0],
        };
        // (0.5)² + (0.5² + 0.5²) + (0.5² + 0.5²) + 0 = 0.25 + 0.5 + 0.5
        assert!((loss(&out, &t) - 1.25).abs() < 1e-15);
        assert!(loss(&out, &tiny_targets(&desc)) >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let desc = tiny_descriptor();
        let model = RegressorModel::init(desc.clone(), 11).unwrap();
        assert!(model.n_params() <= 2000, "instance has {} params", model.n_params());
        let input = tiny_input(13, &desc);
        let targets = tiny_targets(&desc);
        let mut grads = Gradients::zeros_like(&model);
        backward(&model, &input, &targets, &mut grads).unwrap();
        let h = 1e-5;
        for (gi, group) in model.groups.iter().enumerate() {
            // Check a spread of parameters per group to keep the test fast.
            let stride = (group.values.len() / 7).max(1);
            for k in (0..group.values.len()).step_by(stride) {
                let mut plus = model.clone();
                plus.groups[gi].values[k] += h;
                let mut minus = model.clone();
                minus.groups[gi].values[k] -= h;
                let lp = loss(&forward(&plus, &input).unwrap(), &targets);
                let lm = loss(&forward(&minus, &input).unwrap(), &targets);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.groups[gi][k];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() <= 1e-4,
                    "group {} ({}) param {k}: fd {fd} vs analytic {an}",
                    group.name,
                    gi
                );
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let desc = tiny_descriptor();
        let mut model = RegressorModel::init(desc.clone(), 21).unwrap();
        let before = model.clone();
        let input = tiny_input(1, &desc);
        let targets = tiny_targets(&desc);
        let mut adam = AdamState::new(&model, 0.0);
        backward_and_step(&mut model, &[(&input, &targets)], &mut adam).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn single_step_descends_on_the_batch() {
        let desc = tiny_descriptor();
        let mut model = RegressorModel::init(desc.clone(), 31).unwrap();
        let input = tiny_input(2, &desc);
        let targets = tiny_targets(&desc);
        let l0 = loss(&forward(&model, &input).unwrap(), &targets);
        let mut adam = AdamState::new(&model, 1e-3);
        backward_and_step(&mut model, &[(&input, &targets)], &mut adam).unwrap();
        let l1 = loss(&forward(&model, &input).unwrap(), &targets);
        assert!(l1 < l0, "loss went from {l0} to {l1}");
    }

    #[test]
    fn trunk_parameters_are_stored_once() {
        // The three orientation branches read identical trunk storage: there
        // is exactly one weight group per trunk block, not one per branch.
        let model = RegressorModel::init(tiny_descriptor(), 3).unwrap();
        let trunk_groups: Vec<&str> = model
            .groups
            .iter()
            .map(|g| g.name.as_str())
            .filter(|n| n.starts_with("trunk"))
            .collect();
        let blocks = model.desc.trunk_channels.len() - 1;
        assert_eq!(trunk_groups.len(), 2 * blocks, "groups: {trunk_groups:?}");
        let unique: std::collections::BTreeSet<&str> = trunk_groups.iter().copied().collect();
        assert_eq!(unique.len(), trunk_groups.len());
    }

    #[test]
    fn model_file_round_trips() {
        let desc = tiny_descriptor();
        let model = RegressorModel::init(desc.clone(), 41).unwrap();
        let dir = std::env::temp_dir().join("conefocus-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.model");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
        let input = tiny_input(4, &desc);
        assert_eq!(forward(&model, &input).unwrap(), forward(&loaded, &input).unwrap());
    }
}
