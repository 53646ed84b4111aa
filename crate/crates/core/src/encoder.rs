//! The shared image encoder that maps super images to class logits.
//!
//! Both pathways call the same [`Encoder`] value, so they always see one set
//! of parameters. [`ReferenceEncoder`] is a small vision transformer (patch
//! embedding, learned position embedding, pre-norm attention blocks with
//! stochastic depth, mean-pooled head) with hand-written backward passes.
//!
//! The patch embedding may be preceded by a stem: every token's patch is cut
//! into `stem_patch`-sized sub-patches, each is embedded linearly and passed
//! through GELU, and the concatenated sub-patch features are projected to the
//! token width. This gives tokens nonlinear local features at the cost of one
//! extra small matrix product.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SitarError};
use crate::linalg::{gemm, softmax_in_place, Matrix};
use crate::superimage::SuperImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_side: usize,
    pub num_classes: usize,
    pub width: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
    /// Side of the stem's sub-patches; `0` disables the stem.
    #[serde(default)]
    pub stem_patch: usize,
    /// Channels of the stem's sub-patch features.
    #[serde(default)]
    pub stem_width: usize,
}

impl EncoderSpec {
    /// Desk-scale reference configuration for 96 px super images.
    pub fn desk(num_classes: usize) -> Self {
        EncoderSpec {
            input_side: 96,
            num_classes,
            width: 32,
            depth: 2,
            patch_size: 16,
            heads: 2,
            mlp_ratio: 2,
            drop_path_rate: 0.1,
            stem_patch: 4,
            stem_width: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SitarError::Config(m));
        if self.input_side == 0 || self.patch_size == 0 || self.input_side % self.patch_size != 0 {
            return bad(format!(
                "input_side {} must be a positive multiple of patch_size {}",
                self.input_side, self.patch_size
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.stem_patch > 0
            && (self.patch_size % self.stem_patch != 0 || self.stem_width == 0)
        {
            return bad(format!(
                "stem_patch {} must divide patch_size {} and stem_width must be positive",
                self.stem_patch, self.patch_size
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!(
                "drop_path_rate must be in [0, 1), got {}",
                self.drop_path_rate
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.input_side / self.patch_size;
        g * g
    }

    /// Side of the pixel blocks fed to the first linear layer.
    pub fn leaf_patch(&self) -> usize {
        if self.stem_patch > 0 {
            self.stem_patch
        } else {
            self.patch_size
        }
    }

    /// Sub-patches per token (1 without a stem).
    pub fn leaves_per_token(&self) -> usize {
        let s = self.patch_size / self.leaf_patch();
        s * s
    }

    /// Input width of the token projection.
    pub fn patch_dim(&self) -> usize {
        if self.stem_patch > 0 {
            self.leaves_per_token() * self.stem_width
        } else {
            self.patch_size * self.patch_size * 3
        }
    }

    /// Stochastic-depth rate of residual branch `block`, rising linearly to
    /// `drop_path_rate` at the last block.
    pub fn block_drop_rate(&self, block: usize) -> f64 {
        if self.depth <= 1 {
            self.drop_path_rate
        } else {
            self.drop_path_rate * block as f64 / (self.depth - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Fast,
    Slow,
}

/// Per-sample representation vectors (the logits) of one pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBatch {
    pub values: Matrix,
    pub pathway: Pathway,
}

impl RepresentationBatch {
    pub fn new(values: Matrix, pathway: Pathway) -> Self {
        RepresentationBatch { values, pathway }
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>, decay: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
            decay,
        });
        self.params.len() - 1
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Gradients aligned with [`ParamSet::params`].
pub type Grads = Vec<Vec<f64>>;

pub fn add_grads(into: &mut Grads, other: &Grads) {
    for (a, b) in into.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Images flattened to `count x side x side x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl ImageBatch {
    pub fn from_super_images(images: &[SuperImage]) -> Result<Self> {
        let side = images.first().map_or(0, |s| s.side());
        let mut data = Vec::with_capacity(images.len() * side * side * 3);
        for (i, im) in images.iter().enumerate() {
            if im.side() != side {
                return Err(SitarError::Argument(format!(
                    "super image {i} has side {} but the batch uses {side}",
                    im.side()
                )));
            }
            data.extend(im.pixels.iter().map(|&v| v as f64));
        }
        Ok(ImageBatch {
            count: images.len(),
            side,
            data,
        })
    }

    pub fn from_raw(count: usize, side: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), count * side * side * 3);
        ImageBatch { count, side, data }
    }
}

/// Multipliers for each sample's residual branches: `0` drops the branch,
/// `1 / keep_prob` keeps it. Evaluation uses all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropPlan {
    pub factors: Vec<Vec<f64>>,
}

impl DropPlan {
    pub fn keep_all(batch: usize, branches: usize) -> Self {
        DropPlan {
            factors: vec![vec![1.0; branches]; batch],
        }
    }
}

pub trait Encoder {
    type Cache;

    fn spec(&self) -> &EncoderSpec;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Drop-path decisions for a training batch, drawn sample by sample.
    fn sample_drop_plan<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> DropPlan;
    fn eval_plan(&self, batch: usize) -> DropPlan;

    fn forward(&self, batch: &ImageBatch, plan: &DropPlan) -> Result<(Matrix, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, dlogits: &Matrix) -> Grads;
}

/// Runs one pathway through the encoder. `train` enables drop path.
pub fn encode<E: Encoder, R: Rng + ?Sized>(
    model: &E,
    images: &[SuperImage],
    pathway: Pathway,
    train: bool,
    rng: &mut R,
) -> Result<RepresentationBatch> {
    let batch = ImageBatch::from_super_images(images)?;
    let plan = if train {
        model.sample_drop_plan(batch.count, rng)
    } else {
        model.eval_plan(batch.count)
    };
    let (logits, _) = model.forward(&batch, &plan)?;
    Ok(RepresentationBatch::new(logits, pathway))
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    norm1_w: usize,
    norm1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    spec: EncoderSpec,
    params: ParamSet,
    stem: Option<(usize, usize)>,
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    blocks: Vec<BlockParams>,
    norm_w: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention probabilities, `[sample][head]` blocks of `N x N`.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LayerNormCache,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub struct ReferenceCache {
    batch: usize,
    /// Pixel blocks, grouped token by token.
    patches: Vec<f64>,
    /// Stem pre-activations and activations.
    stem: Option<(Vec<f64>, Vec<f64>)>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    pooled: Vec<f64>,
    factors: Vec<Vec<f64>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect()
}

impl ReferenceEncoder {
    /// Builds a freshly initialized encoder; identical seeds give identical
    /// parameters.
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.width;
        let hidden = d * spec.mlp_ratio;
        let n = spec.tokens();
        let pd = spec.patch_dim();
        let c = spec.num_classes;
        let mut ps = ParamSet::default();
        let stem = (spec.stem_patch > 0).then(|| {
            let fan_in = spec.stem_patch * spec.stem_patch * 3;
            let sw = spec.stem_width;
            (
                ps.push("stem.weight", vec![fan_in, sw], xavier(&mut rng, fan_in, sw), true),
                ps.push("stem.bias", vec![sw], vec![0.0; sw], false),
            )
        });
        let patch_w = ps.push("patch_embed.weight", vec![pd, d], xavier(&mut rng, pd, d), true);
        let patch_b = ps.push("patch_embed.bias", vec![d], vec![0.0; d], false);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let pos = ps.push(
            "pos_embed",
            vec![n, d],
            (0..n * d).map(|_| normal.sample(&mut rng)).collect(),
            false,
        );
        let mut blocks = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockParams {
                norm1_w: ps.push(p("norm1.weight"), vec![d], vec![1.0; d], false),
                norm1_b: ps.push(p("norm1.bias"), vec![d], vec![0.0; d], false),
                qkv_w: ps.push(p("attn.qkv.weight"), vec![d, 3 * d], xavier(&mut rng, d, 3 * d), true),
                qkv_b: ps.push(p("attn.qkv.bias"), vec![3 * d], vec![0.0; 3 * d], false),
                proj_w: ps.push(p("attn.proj.weight"), vec![d, d], xavier(&mut rng, d, d), true),
                proj_b: ps.push(p("attn.proj.bias"), vec![d], vec![0.0; d], false),
                norm2_w: ps.push(p("norm2.weight"), vec![d], vec![1.0; d], false),
                norm2_b: ps.push(p("norm2.bias"), vec![d], vec![0.0; d], false),
                fc1_w: ps.push(p("mlp.fc1.weight"), vec![d, hidden], xavier(&mut rng, d, hidden), true),
                fc1_b: ps.push(p("mlp.fc1.bias"), vec![hidden], vec![0.0; hidden], false),
                fc2_w: ps.push(p("mlp.fc2.weight"), vec![hidden, d], xavier(&mut rng, hidden, d), true),
                fc2_b: ps.push(p("mlp.fc2.bias"), vec![d], vec![0.0; d], false),
            });
        }
        let norm_w = ps.push("norm.weight", vec![d], vec![1.0; d], false);
        let norm_b = ps.push("norm.bias", vec![d], vec![0.0; d], false);
        let head_w = ps.push("head.weight", vec![d, c], xavier(&mut rng, d, c), true);
        let head_b = ps.push("head.bias", vec![c], vec![0.0; c], false);
        Ok(ReferenceEncoder {
            spec,
            params: ps,
            stem,
            patch_w,
            patch_b,
            pos,
            blocks,
            norm_w,
            norm_b,
            head_w,
            head_b,
        })
    }

    /// Rebuilds an encoder around stored parameters, checking names and shapes.
    pub fn from_params(spec: EncoderSpec, params: ParamSet) -> Result<Self> {
        let mut model = ReferenceEncoder::new(spec, 0)?;
        if model.params.params.len() != params.params.len() {
            return Err(SitarError::Data(format!(
                "expected {} parameter tensors, found {}",
                model.params.params.len(),
                params.params.len()
            )));
        }
        for (want, got) in model.params.params.iter().zip(&params.params) {
            if want.name != got.name || want.shape != got.shape {
                return Err(SitarError::Data(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Zeroes the classification head so every input maps to zero logits.
    pub fn zero_head(&mut self) {
        for idx in [self.head_w, self.head_b] {
            self.params.params[idx].data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn p(&self, idx: usize) -> &[f64] {
        &self.params.params[idx].data
    }

    /// Cuts images into `leaf_patch` blocks, ordered token by token and
    /// row-major within each token.
    fn patchify(&self, batch: &ImageBatch) -> Vec<f64> {
        let s = self.spec.input_side;
        let ps = self.spec.patch_size;
        let lp = self.spec.leaf_patch();
        let (g, sub) = (s / ps, ps / lp);
        let mut out = Vec::with_capacity(batch.data.len());
        for b in 0..batch.count {
            let img = &batch.data[b * s * s * 3..(b + 1) * s * s * 3];
            for ty in 0..g {
                for tx in 0..g {
                    for sy in 0..sub {
                        for sx in 0..sub {
                            for py in 0..lp {
                                let start = ((ty * ps + sy * lp + py) * s + tx * ps + sx * lp) * 3;
                                out.extend_from_slice(&img[start..start + lp * 3]);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn layer_norm(x: &[f64], rows: usize, d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = gamma[j] * xh + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dgamma`, `dbeta`.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    d: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let rows = cache.rstd.len();
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `x * w + b` for `rows x fan_in` input.
fn linear(x: &[f64], rows: usize, fan_in: usize, fan_out: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * fan_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, fan_in, fan_out, x, false, w, false, &mut y, true);
    y
}

/// Accumulates weight and bias gradients; returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(fan_in, rows, fan_out, x, true, dy, false, dw, true);
    for r in 0..rows {
        for (acc, v) in db.iter_mut().zip(&dy[r * fan_out..(r + 1) * fan_out]) {
            *acc += v;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * fan_in];
        gemm(rows, fan_out, fan_in, dy, false, w, true, &mut dx, false);
        dx
    })
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Two-dimensional gradient slices for two distinct parameter indices.
fn two_mut(g: &mut Grads, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

impl Encoder for ReferenceEncoder {
    type Cache = ReferenceCache;

    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn sample_drop_plan<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> DropPlan {
        let factors = (0..batch)
            .map(|_| {
                (0..2 * self.spec.depth)
                    .map(|branch| {
                        let rate = self.spec.block_drop_rate(branch / 2);
                        if rate <= 0.0 {
                            1.0
                        } else if rng.gen::<f64>() < rate {
                            0.0
                        } else {
                            1.0 / (1.0 - rate)
                        }
                    })
                    .collect()
            })
            .collect();
        DropPlan { factors }
    }

    fn eval_plan(&self, batch: usize) -> DropPlan {
        DropPlan::keep_all(batch, 2 * self.spec.depth)
    }

    fn forward(&self, batch: &ImageBatch, plan: &DropPlan) -> Result<(Matrix, ReferenceCache)> {
        if batch.side != self.spec.input_side && batch.count > 0 {
            return Err(SitarError::Argument(format!(
                "super image side {} does not match encoder input_side {}",
                batch.side, self.spec.input_side
            )));
        }
        if plan.factors.len() != batch.count {
            return Err(SitarError::Argument("drop plan does not match batch size".into()));
        }
        let bsz = batch.count;
        let n = self.spec.tokens();
        let d = self.spec.width;
        let pd = self.spec.patch_dim();
        let hidden = d * self.spec.mlp_ratio;
        let heads = self.spec.heads;
        let dh = d / heads;
        let rows = bsz * n;
        let scale = 1.0 / (dh as f64).sqrt();

        let patches = self.patchify(batch);
        let stem = self.stem.map(|(w, b)| {
            let leaves = rows * self.spec.leaves_per_token();
            let fan_in = self.spec.stem_patch * self.spec.stem_patch * 3;
            let u = linear(&patches, leaves, fan_in, self.spec.stem_width, self.p(w), self.p(b));
            let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            (u, g)
        });
        let token_in = stem.as_ref().map_or(&patches, |(_, g)| g);
        let mut h = linear(token_in, rows, pd, d, self.p(self.patch_w), self.p(self.patch_b));
        let pos = self.p(self.pos);
        for b in 0..bsz {
            for (v, p) in h[b * n * d..(b + 1) * n * d].iter_mut().zip(pos) {
                *v += p;
            }
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, bp) in self.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&h, rows, d, self.p(bp.norm1_w), self.p(bp.norm1_b));
            let qkv = linear(&a, rows, d, 3 * d, self.p(bp.qkv_w), self.p(bp.qkv_b));
            let mut probs = vec![0.0; bsz * heads * n * n];
            let mut o = vec![0.0; rows * d];
            let mut q = vec![0.0; n * dh];
            let mut k = vec![0.0; n * dh];
            let mut v = vec![0.0; n * dh];
            let mut ob = vec![0.0; n * dh];
            for b in 0..bsz {
                for hd in 0..heads {
                    for t in 0..n {
                        let base = (b * n + t) * 3 * d + hd * dh;
                        q[t * dh..(t + 1) * dh].copy_from_slice(&qkv[base..base + dh]);
                        k[t * dh..(t + 1) * dh].copy_from_slice(&qkv[base + d..base + d + dh]);
                        v[t * dh..(t + 1) * dh].copy_from_slice(&qkv[base + 2 * d..base + 2 * d + dh]);
                    }
                    let pblk = &mut probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                    gemm(n, dh, n, &q, false, &k, true, pblk, false);
                    for row in pblk.chunks_mut(n) {
                        row.iter_mut().for_each(|s| *s *= scale);
                        softmax_in_place(row);
                    }
                    gemm(n, n, dh, pblk, false, &v, false, &mut ob, false);
                    for t in 0..n {
                        let dst = (b * n + t) * d + hd * dh;
                        o[dst..dst + dh].copy_from_slice(&ob[t * dh..(t + 1) * dh]);
                    }
                }
            }
            let y = linear(&o, rows, d, d, self.p(bp.proj_w), self.p(bp.proj_b));
            for b in 0..bsz {
                let f = plan.factors[b][2 * l];
                for (hv, yv) in h[b * n * d..(b + 1) * n * d].iter_mut().zip(&y[b * n * d..]) {
                    *hv += f * yv;
                }
            }
            let (m, ln2) = layer_norm(&h, rows, d, self.p(bp.norm2_w), self.p(bp.norm2_b));
            let u = linear(&m, rows, d, hidden, self.p(bp.fc1_w), self.p(bp.fc1_b));
            let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            let z = linear(&g, rows, hidden, d, self.p(bp.fc2_w), self.p(bp.fc2_b));
            for b in 0..bsz {
                let f = plan.factors[b][2 * l + 1];
                for (hv, zv) in h[b * n * d..(b + 1) * n * d].iter_mut().zip(&z[b * n * d..]) {
                    *hv += f * zv;
                }
            }
            caches.push(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                o,
                ln2,
                m,
                u,
                g,
            });
        }

        let (fnorm, final_ln) = layer_norm(&h, rows, d, self.p(self.norm_w), self.p(self.norm_b));
        let mut pooled = vec![0.0; bsz * d];
        for b in 0..bsz {
            let dst = &mut pooled[b * d..(b + 1) * d];
            for t in 0..n {
                for (acc, v) in dst.iter_mut().zip(&fnorm[(b * n + t) * d..(b * n + t + 1) * d]) {
                    *acc += v;
                }
            }
            dst.iter_mut().for_each(|v| *v /= n as f64);
        }
        let c = self.spec.num_classes;
        let logits = linear(&pooled, bsz, d, c, self.p(self.head_w), self.p(self.head_b));
        let logits = Matrix::from_vec(bsz, c, logits);
        if !logits.is_finite() {
            return Err(SitarError::Numeric("encoder produced non-finite logits".into()));
        }
        Ok((
            logits,
            ReferenceCache {
                batch: bsz,
                patches,
                stem,
                blocks: caches,
                final_ln,
                pooled,
                factors: plan.factors.clone(),
            },
        ))
    }

    fn backward(&self, cache: &ReferenceCache, dlogits: &Matrix) -> Grads {
        let bsz = cache.batch;
        assert_eq!(dlogits.rows, bsz, "dlogits row count");
        let n = self.spec.tokens();
        let d = self.spec.width;
        let pd = self.spec.patch_dim();
        let hidden = d * self.spec.mlp_ratio;
        let heads = self.spec.heads;
        let dh = d / heads;
        let rows = bsz * n;
        let c = self.spec.num_classes;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = self.params.zeros_like();

        let dpooled = {
            let (gw, gb) = two_mut(&mut grads, self.head_w, self.head_b);
            linear_backward(&cache.pooled, &dlogits.data, bsz, d, c, self.p(self.head_w), gw, gb, true)
                .unwrap()
        };
        let mut df = vec![0.0; rows * d];
        for b in 0..bsz {
            for t in 0..n {
                for j in 0..d {
                    df[(b * n + t) * d + j] = dpooled[b * d + j] / n as f64;
                }
            }
        }
        let mut dh_res = {
            let (gw, gb) = two_mut(&mut grads, self.norm_w, self.norm_b);
            layer_norm_backward(&df, &cache.final_ln, d, self.p(self.norm_w), gw, gb)
        };

        let mut q = vec![0.0; n * dh];
        let mut k = vec![0.0; n * dh];
        let mut v = vec![0.0; n * dh];
        let mut dob = vec![0.0; n * dh];
        let mut dp = vec![0.0; n * n];
        let mut dq = vec![0.0; n * dh];
        let mut dk = vec![0.0; n * dh];
        let mut dv = vec![0.0; n * dh];
        for (l, (bp, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // MLP branch
            let mut dz = dh_res.clone();
            for b in 0..bsz {
                let f = cache.factors[b][2 * l + 1];
                dz[b * n * d..(b + 1) * n * d].iter_mut().for_each(|x| *x *= f);
            }
            let dg = {
                let (gw, gb) = two_mut(&mut grads, bp.fc2_w, bp.fc2_b);
                linear_backward(&bc.g, &dz, rows, hidden, d, self.p(bp.fc2_w), gw, gb, true).unwrap()
            };
            let du: Vec<f64> = dg.iter().zip(&bc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let dm = {
                let (gw, gb) = two_mut(&mut grads, bp.fc1_w, bp.fc1_b);
                linear_backward(&bc.m, &du, rows, d, hidden, self.p(bp.fc1_w), gw, gb, true).unwrap()
            };
            let dln2 = {
                let (gw, gb) = two_mut(&mut grads, bp.norm2_w, bp.norm2_b);
                layer_norm_backward(&dm, &bc.ln2, d, self.p(bp.norm2_w), gw, gb)
            };
            for (a, b) in dh_res.iter_mut().zip(&dln2) {
                *a += b;
            }

            // attention branch
            let mut dy = dh_res.clone();
            for b in 0..bsz {
                let f = cache.factors[b][2 * l];
                dy[b * n * d..(b + 1) * n * d].iter_mut().for_each(|x| *x *= f);
            }
            let do_ = {
                let (gw, gb) = two_mut(&mut grads, bp.proj_w, bp.proj_b);
                linear_backward(&bc.o, &dy, rows, d, d, self.p(bp.proj_w), gw, gb, true).unwrap()
            };
            let mut dqkv = vec![0.0; rows * 3 * d];
            for b in 0..bsz {
                for hd in 0..heads {
                    for t in 0..n {
                        let base = (b * n + t) * 3 * d + hd * dh;
                        q[t * dh..(t + 1) * dh].copy_from_slice(&bc.qkv[base..base + dh]);
                        k[t * dh..(t + 1) * dh].copy_from_slice(&bc.qkv[base + d..base + d + dh]);
                        v[t * dh..(t + 1) * dh].copy_from_slice(&bc.qkv[base + 2 * d..base + 2 * d + dh]);
                        let src = (b * n + t) * d + hd * dh;
                        dob[t * dh..(t + 1) * dh].copy_from_slice(&do_[src..src + dh]);
                    }
                    let p = &bc.probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                    gemm(n, dh, n, &dob, false, &v, true, &mut dp, false);
                    gemm(n, n, dh, p, true, &dob, false, &mut dv, false);
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dpr = &mut dp[r * n..(r + 1) * n];
                        let inner: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dpr.iter_mut().zip(pr) {
                            *x = pv * (*x - inner) * scale;
                        }
                    }
                    gemm(n, n, dh, &dp, false, &k, false, &mut dq, false);
                    gemm(n, n, dh, &dp, true, &q, false, &mut dk, false);
                    for t in 0..n {
                        let base = (b * n + t) * 3 * d + hd * dh;
                        dqkv[base..base + dh].copy_from_slice(&dq[t * dh..(t + 1) * dh]);
                        dqkv[base + d..base + d + dh].copy_from_slice(&dk[t * dh..(t + 1) * dh]);
                        dqkv[base + 2 * d..base + 2 * d + dh].copy_from_slice(&dv[t * dh..(t + 1) * dh]);
                    }
                }
            }
            let da = {
                let (gw, gb) = two_mut(&mut grads, bp.qkv_w, bp.qkv_b);
                linear_backward(&bc.a, &dqkv, rows, d, 3 * d, self.p(bp.qkv_w), gw, gb, true).unwrap()
            };
            let dln1 = {
                let (gw, gb) = two_mut(&mut grads, bp.norm1_w, bp.norm1_b);
                layer_norm_backward(&da, &bc.ln1, d, self.p(bp.norm1_w), gw, gb)
            };
            for (a, b) in dh_res.iter_mut().zip(&dln1) {
                *a += b;
            }
        }

        {
            let gpos = &mut grads[self.pos];
            for b in 0..bsz {
                for (acc, v) in gpos.iter_mut().zip(&dh_res[b * n * d..(b + 1) * n * d]) {
                    *acc += v;
                }
            }
        }
        let token_in = cache.stem.as_ref().map_or(&cache.patches, |(_, g)| g);
        let dtoken = {
            let (gw, gb) = two_mut(&mut grads, self.patch_w, self.patch_b);
            linear_backward(token_in, &dh_res, rows, pd, d, self.p(self.patch_w), gw, gb, self.stem.is_some())
        };
        if let (Some((w, b)), Some((u, _)), Some(dg)) = (self.stem, cache.stem.as_ref(), dtoken) {
            let leaves = rows * self.spec.leaves_per_token();
            let fan_in = self.spec.stem_patch * self.spec.stem_patch * 3;
            let du: Vec<f64> = dg.iter().zip(u).map(|(g, &x)| g * gelu_grad(x)).collect();
            let (gw, gb) = two_mut(&mut grads, w, b);
            linear_backward(&cache.patches, &du, leaves, fan_in, self.spec.stem_width, self.p(w), gw, gb, false);
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            input_side: 4,
            num_classes: 3,
            width: 4,
            depth: 2,
            patch_size: 2,
            heads: 2,
            mlp_ratio: 2,
            drop_path_rate: 0.3,
            stem_patch: 0,
            stem_width: 0,
        }
    }

    fn tiny_stem_spec() -> EncoderSpec {
        EncoderSpec {
            input_side: 8,
            patch_size: 4,
            stem_patch: 2,
            stem_width: 3,
            ..tiny_spec()
        }
    }

    fn random_batch(count: usize, side: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::from_raw(count, side, (0..count * side * side * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn loss_of(model: &ReferenceEncoder, batch: &ImageBatch, plan: &DropPlan, w: &Matrix) -> f64 {
        let (logits, _) = model.forward(batch, plan).unwrap();
        logits.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn init_is_seeded() {
        let a = ReferenceEncoder::new(tiny_spec(), 3).unwrap();
        let b = ReferenceEncoder::new(tiny_spec(), 3).unwrap();
        let c = ReferenceEncoder::new(tiny_spec(), 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = tiny_spec();
        s.patch_size = 3;
        assert!(ReferenceEncoder::new(s, 0).is_err());
        let mut s = tiny_spec();
        s.drop_path_rate = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = ReferenceEncoder::new(tiny_spec(), 1).unwrap();
        m.zero_head();
        let batch = random_batch(3, 4, 2);
        let (logits, _) = m.forward(&batch, &m.eval_plan(3)).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_mismatch_is_an_argument_error() {
        let m = ReferenceEncoder::new(tiny_spec(), 1).unwrap();
        let batch = random_batch(1, 6, 0);
        assert!(matches!(m.forward(&batch, &m.eval_plan(1)), Err(SitarError::Argument(_))));
    }

    /// Central differences over every parameter for a random linear
    /// functional of the logits, with a fixed drop-path plan.
    #[test]
    fn backward_matches_finite_differences() {
        check_gradients(tiny_spec(), 4);
    }

    #[test]
    fn stem_backward_matches_finite_differences() {
        check_gradients(tiny_stem_spec(), 8);
    }

    #[test]
    fn stem_tokens_group_their_own_pixels() {
        // A pixel change inside one token's patch must only move that token's
        // input rows.
        let m = ReferenceEncoder::new(tiny_stem_spec(), 0).unwrap();
        let mut batch = random_batch(1, 8, 3);
        let before = m.patchify(&batch);
        batch.data[(5 * 8 + 6) * 3] += 1.0; // pixel (x 6, y 5): token (1, 1)
        let after = m.patchify(&batch);
        let per_token = before.len() / 4;
        for t in 0..4 {
            let same = before[t * per_token..(t + 1) * per_token] == after[t * per_token..(t + 1) * per_token];
            assert_eq!(same, t != 3, "token {t}");
        }
    }

    fn check_gradients(spec: EncoderSpec, side: usize) {
        let mut model = ReferenceEncoder::new(spec, 7).unwrap();
        let batch = random_batch(3, side, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = DropPlan {
            factors: vec![vec![1.0, 0.0, 1.4, 1.4], vec![1.0; 4], vec![0.0, 1.0, 1.4, 0.0]],
        };
        let w = Matrix::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (_, cache) = model.forward(&batch, &plan).unwrap();
        let grads = model.backward(&cache, &w);
        let h = 1e-5;
        for pi in 0..model.params.params.len() {
            for j in 0..model.params.params[pi].data.len() {
                let orig = model.params.params[pi].data[j];
                model.params.params[pi].data[j] = orig + h;
                let up = loss_of(&model, &batch, &plan, &w);
                model.params.params[pi].data[j] = orig - h;
                let down = loss_of(&model, &batch, &plan, &w);
                model.params.params[pi].data[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[pi][j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "{}[{j}]: analytic {an} vs fd {fd}", model.params.params[pi].name);
            }
        }
    }

    #[test]
    fn desk_spec_is_under_a_million_parameters() {
        let m = ReferenceEncoder::new(EncoderSpec::desk(8), 0).unwrap();
        assert!(m.param_count() <= 1_000_000, "{}", m.param_count());
    }
}
