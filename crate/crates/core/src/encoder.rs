//! Image encoders.
//!
//! [`PyramidEncoder`] resizes the input to several scales, extracts a feature
//! map per scale with a shared stride-2 conv stack, fuses the maps with
//! repeated top-down/bottom-up passes (fast-normalised fusion at every node),
//! layer-normalises each fused level over channels, gates each level with a
//! spatial attention map, then pools, flattens and projects everything into
//! a `[N_mem, d_model]` memory sequence.
//!
//! [`BaselineEncoder`] is the single-scale comparison point: one extraction
//! stack and the same channel normalisation, no fusion, no attention.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, SpatialMap, Var};
use crate::config::{EncoderConfig, EncoderKind, Pool};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{xavier_init, xavier_with_fans};

const KERNEL: usize = 3;
const FEATURE_NORM_EPS: f64 = 1e-5;
const MAX_PROBE_SIZE: usize = 4096;

/// Bilinear interpolation map using half-pixel centres.
pub fn bilinear_map(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> SpatialMap {
    let axis = |n_in: usize, n_out: usize| -> Vec<[(usize, f64); 2]> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                let frac = src - lo as f64;
                [(lo, 1.0 - frac), (hi, frac)]
            })
            .collect()
    };
    let (ys, xs) = (axis(in_h, out_h), axis(in_w, out_w));
    let mut taps = Vec::with_capacity(out_h * out_w);
    for y in &ys {
        for x in &xs {
            let mut t = Vec::with_capacity(4);
            for &(iy, wy) in y {
                for &(ix, wx) in x {
                    let w = wy * wx;
                    if w != 0.0 {
                        t.push((iy * in_w + ix, w));
                    }
                }
            }
            taps.push(t);
        }
    }
    SpatialMap {
        in_h,
        in_w,
        out_h,
        out_w,
        taps,
    }
}

/// Adaptive average pooling: output cell `o` averages input rows
/// `floor(o·in/out) .. ceil((o+1)·in/out)` (same for columns).
pub fn avg_pool_map(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> SpatialMap {
    let bins = |n_in: usize, n_out: usize| -> Vec<(usize, usize)> {
        (0..n_out)
            .map(|o| ((o * n_in) / n_out, ((o + 1) * n_in).div_ceil(n_out)))
            .collect()
    };
    let (ys, xs) = (bins(in_h, out_h), bins(in_w, out_w));
    let mut taps = Vec::with_capacity(out_h * out_w);
    for &(y0, y1) in &ys {
        for &(x0, x1) in &xs {
            let w = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let mut t = Vec::with_capacity((y1 - y0) * (x1 - x0));
            for iy in y0..y1 {
                for ix in x0..x1 {
                    t.push((iy * in_w + ix, w));
                }
            }
            taps.push(t);
        }
    }
    SpatialMap {
        in_h,
        in_w,
        out_h,
        out_w,
        taps,
    }
}

fn resized_extent(n: usize, factor: f64) -> usize {
    ((n as f64 * factor).ceil() as usize).max(1)
}

fn conv_extent(n: usize, stride: usize) -> usize {
    let pad = KERNEL / 2;
    (n + 2 * pad - KERNEL) / stride + 1
}

fn spatial(g: &Graph, x: Var) -> (usize, usize, usize) {
    match *g.shape(x) {
        [c, h, w] => (c, h, w),
        _ => unreachable!("feature maps are rank 3"),
    }
}

/// Bilinear resize of a `[C,H,W]` map by `factor ∈ (0, 1]`, giving
/// `ceil(H·factor) × ceil(W·factor)`.
pub fn resize(g: &mut Graph, image: Var, factor: f64) -> Result<Var> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Config(format!("resize factor {factor} outside (0, 1]")));
    }
    let (_, h, w) = match *g.shape(image) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim("resize", s, &[1, 0, 0])),
    };
    let (oh, ow) = (resized_extent(h, factor), resized_extent(w, factor));
    if (oh, ow) == (h, w) {
        return Ok(image);
    }
    g.resample(image, Rc::new(bilinear_map(h, w, oh, ow)))
}

fn resample_to(g: &mut Graph, x: Var, oh: usize, ow: usize, down: bool) -> Result<Var> {
    let (_, h, w) = spatial(g, x);
    if (h, w) == (oh, ow) {
        return Ok(x);
    }
    let map = if down {
        avg_pool_map(h, w, oh, ow)
    } else {
        bilinear_map(h, w, oh, ow)
    };
    g.resample(x, Rc::new(map))
}

/// One convolution + Swish block. `weight` is the unfolded kernel
/// `[C_in·k·k, C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, h, w) = spatial(g, x);
        let pad = self.kernel / 2;
        let oh = (h + 2 * pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * pad - self.kernel) / self.stride + 1;
        let patches = g.im2col(x, self.kernel, self.stride, pad)?;
        let y = g.matmul(patches, self.weight)?;
        let y = g.add_bias(y, self.bias)?;
        let y = g.swish(y);
        let y = g.transpose(y)?;
        let c_out = g.shape(y)[0];
        g.reshape(y, &[c_out, oh, ow])
    }
}

/// Runs the extraction stack on one resized image.
pub fn extract_features(g: &mut Graph, image: Var, layers: &[ConvLayer]) -> Result<Var> {
    layers.iter().try_fold(image, |x, layer| layer.forward(g, x))
}

/// A fusion node as evaluated during a forward pass.
#[derive(Clone, Debug)]
pub struct FusionNode {
    pub name: String,
    /// Normalised, non-negative input weights.
    pub coeffs: Var,
    /// Weighted sum of the (resampled) inputs, before the conv block.
    pub pre_conv: Var,
    pub output: Var,
}

/// Ordered feature maps, finest first, plus the flattened memory once built.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub fused: Option<Var>,
    /// Set when fusion was skipped because only one level exists.
    pub passthrough: bool,
}

/// Fast-normalised fusion of same-shaped inputs:
/// `Σ_i relu(w_i) / Σ_j relu(w_j) · input_i`, with `eps` as a floor on the
/// denominator (see [`Graph::normalize_sum`]).
/// Returns `(coeffs, fused)`.
pub fn fast_normalized_fuse(
    g: &mut Graph,
    raw_weights: Var,
    inputs: &[Var],
    eps: f64,
) -> Result<(Var, Var)> {
    let pos = g.relu(raw_weights);
    let coeffs = g.normalize_sum(pos, eps);
    let fused = g.weighted_sum(coeffs, inputs)?;
    Ok((coeffs, fused))
}

fn node_conv(g: &mut Graph, prefix: &str) -> ConvLayer {
    ConvLayer {
        weight: g.param_named(&format!("{prefix}.w")),
        bias: g.param_named(&format!("{prefix}.b")),
        kernel: KERNEL,
        stride: 1,
    }
}

fn fusion_node(
    g: &mut Graph,
    name: String,
    inputs: &[Var],
    eps: f64,
    nodes: &mut Vec<FusionNode>,
) -> Result<Var> {
    let raw = g.param_named(&format!("{name}.fuse"));
    let (coeffs, pre_conv) = fast_normalized_fuse(g, raw, inputs, eps)?;
    let conv = node_conv(g, &name);
    let output = conv.forward(g, pre_conv)?;
    nodes.push(FusionNode {
        name,
        coeffs,
        pre_conv,
        output,
    });
    Ok(output)
}

/// Names of the fusion nodes of one pass with their input counts, in
/// evaluation order.
fn fusion_layout(levels: usize) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for i in (0..levels - 1).rev() {
        out.push((format!("td{i}"), 2));
    }
    for i in 1..levels {
        out.push((format!("bu{i}"), if i < levels - 1 { 3 } else { 2 }));
    }
    out
}

/// `depth` rounds of top-down then bottom-up fusion over `levels`.
/// Parameters are read from `{prefix}.{round}.{node}.*`.
pub fn bifpn_fuse(
    g: &mut Graph,
    levels: &[Var],
    depth: usize,
    eps: f64,
    prefix: &str,
) -> Result<(FeaturePyramid, Vec<FusionNode>)> {
    let mut nodes = Vec::new();
    if levels.len() < 2 {
        return Ok((
            FeaturePyramid {
                levels: levels.to_vec(),
                fused: None,
                passthrough: true,
            },
            nodes,
        ));
    }
    let n = levels.len();
    let sizes: Vec<(usize, usize)> = levels
        .iter()
        .map(|&v| {
            let (_, h, w) = spatial(g, v);
            (h, w)
        })
        .collect();
    let mut current = levels.to_vec();
    for round in 0..depth {
        let base = format!("{prefix}.{round}");
        let mut td = current.clone();
        for i in (0..n - 1).rev() {
            let up = resample_to(g, td[i + 1], sizes[i].0, sizes[i].1, false)?;
            td[i] = fusion_node(g, format!("{base}.td{i}"), &[current[i], up], eps, &mut nodes)?;
        }
        let mut out = td.clone();
        for i in 1..n {
            let down = resample_to(g, out[i - 1], sizes[i].0, sizes[i].1, true)?;
            let inputs: Vec<Var> = if i < n - 1 {
                vec![current[i], td[i], down]
            } else {
                vec![current[i], down]
            };
            out[i] = fusion_node(g, format!("{base}.bu{i}"), &inputs, eps, &mut nodes)?;
        }
        current = out;
    }
    Ok((
        FeaturePyramid {
            levels: current,
            fused: None,
            passthrough: false,
        },
        nodes,
    ))
}

/// Residual spatial gating of one `[C,H,W]` level. Scores are a softmax over
/// positions of `projection · features`; the gate is `N · score`, so a
/// uniform score map leaves the features unchanged.
pub fn image_attention_level(g: &mut Graph, level: Var, projection: Var) -> Result<Var> {
    let (c, h, w) = spatial(g, level);
    let positions = h * w;
    let flat = g.reshape(level, &[c, positions])?;
    let logits = g.matmul(projection, flat)?;
    let scores = g.softmax(logits, 1)?;
    let gate = g.scale(scores, positions as f64);
    let gate = g.reshape(gate, &[positions])?;
    let gated = g.mul_last(flat, gate)?;
    g.reshape(gated, &[c, h, w])
}

/// Applies [`image_attention_level`] to every level with projections
/// `{prefix}.{level}.w`.
pub fn image_attention(g: &mut Graph, pyramid: &FeaturePyramid, prefix: &str) -> Result<FeaturePyramid> {
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    for (l, &lv) in pyramid.levels.iter().enumerate() {
        let proj = g.param_named(&format!("{prefix}.{l}.w"));
        levels.push(image_attention_level(g, lv, proj)?);
    }
    Ok(FeaturePyramid {
        levels,
        fused: pyramid.fused,
        passthrough: pyramid.passthrough,
    })
}

/// Layer-normalises every position of a `[C,H,W]` map over its channels.
pub fn normalize_level(g: &mut Graph, level: Var, gain: Var, bias: Var) -> Result<Var> {
    let (c, h, w) = spatial(g, level);
    let flat = g.reshape(level, &[c, h * w])?;
    let rows = g.transpose(flat)?;
    let normed = g.layer_norm(rows, gain, bias, FEATURE_NORM_EPS)?;
    let back = g.transpose(normed)?;
    g.reshape(back, &[c, h, w])
}

/// [`normalize_level`] on every level, with parameters `{prefix}.{l}.g/b`.
pub fn normalize_levels(g: &mut Graph, pyramid: &FeaturePyramid, prefix: &str) -> Result<FeaturePyramid> {
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    for (l, &lv) in pyramid.levels.iter().enumerate() {
        let gain = g.param_named(&format!("{prefix}.{l}.g"));
        let bias = g.param_named(&format!("{prefix}.{l}.b"));
        levels.push(normalize_level(g, lv, gain, bias)?);
    }
    Ok(FeaturePyramid {
        levels,
        fused: pyramid.fused,
        passthrough: pyramid.passthrough,
    })
}

/// Result of encoding one image.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub memory: Var,
    pub pyramid: FeaturePyramid,
    pub fusion: Vec<FusionNode>,
}

fn register_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) {
    let field = KERNEL * KERNEL;
    store.insert(
        format!("{prefix}.w"),
        xavier_with_fans(&[c_in * field, c_out], c_in * field, c_out * field, rng),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
}

/// Shared machinery of both encoders: extraction stack, pooling, projection.
#[derive(Clone, Debug)]
struct Stem {
    cfg: EncoderConfig,
    d_model: usize,
    prefix: String,
}

impl Stem {
    fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, n_mem: Option<usize>, rng: &mut R) {
        let c = self.cfg.channels;
        for b in 0..self.cfg.extract_blocks {
            let c_in = if b == 0 { 1 } else { c };
            register_conv(store, &format!("{}.extract.{b}", self.prefix), c_in, c, rng);
        }
        store.insert(format!("{}.proj.w", self.prefix), xavier_init(&[c, self.d_model], rng));
        store.insert(format!("{}.proj.b", self.prefix), Tensor::zeros(&[self.d_model]));
        if let Some(n) = n_mem {
            store.insert(format!("{}.slot", self.prefix), Tensor::zeros(&[n, self.d_model]));
        }
    }

    fn layers(&self, g: &mut Graph) -> Vec<ConvLayer> {
        (0..self.cfg.extract_blocks)
            .map(|b| {
                let p = format!("{}.extract.{b}", self.prefix);
                ConvLayer {
                    weight: g.param_named(&format!("{p}.w")),
                    bias: g.param_named(&format!("{p}.b")),
                    kernel: KERNEL,
                    stride: 2,
                }
            })
            .collect()
    }

    fn extracted_extent(&self, n: usize, factor: f64) -> usize {
        (0..self.cfg.extract_blocks).fold(resized_extent(n, factor), |n, _| conv_extent(n, 2))
    }

    fn level_ok(&self, n: usize, factor: f64) -> bool {
        match self.cfg.pool {
            Pool::Grid(grid) => self.extracted_extent(n, factor) >= grid,
            Pool::None => true,
        }
    }

    fn min_size(&self, scales: &[f64]) -> usize {
        (1..=MAX_PROBE_SIZE)
            .find(|&n| scales.iter().all(|&s| self.level_ok(n, s)))
            .unwrap_or(MAX_PROBE_SIZE)
    }

    fn check_image(&self, g: &Graph, image: Var, scales: &[f64]) -> Result<(usize, usize)> {
        let (h, w) = match *g.shape(image) {
            [1, h, w] => (h, w),
            ref s => {
                return Err(Error::Config(format!(
                    "encoder expects a single-channel [1, H, W] image, got {s:?}"
                )))
            }
        };
        let min = self.min_size(scales);
        if h < min || w < min {
            return Err(Error::Config(format!(
                "image {h}x{w} is too small for this encoder; minimum size is {min}x{min}"
            )));
        }
        Ok((h, w))
    }

    fn positions_per_level(&self, h: usize, w: usize, factor: f64) -> usize {
        match self.cfg.pool {
            Pool::Grid(grid) => grid * grid,
            Pool::None => self.extracted_extent(h, factor) * self.extracted_extent(w, factor),
        }
    }

    /// Pools, flattens, concatenates and projects levels into memory.
    fn to_memory(&self, g: &mut Graph, levels: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(levels.len());
        for &lv in levels {
            let lv = match self.cfg.pool {
                Pool::Grid(grid) => resample_to(g, lv, grid, grid, true)?,
                Pool::None => lv,
            };
            let (c, h, w) = spatial(g, lv);
            let flat = g.reshape(lv, &[c, h * w])?;
            rows.push(g.transpose(flat)?);
        }
        let seq = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        let w = g.param_named(&format!("{}.proj.w", self.prefix));
        let b = g.param_named(&format!("{}.proj.b", self.prefix));
        let m = g.matmul(seq, w)?;
        let mut m = g.add_bias(m, b)?;
        if matches!(self.cfg.pool, Pool::Grid(_)) {
            let slot = g.param_named(&format!("{}.slot", self.prefix));
            m = g.add(m, slot)?;
        }
        Ok(m)
    }
}

/// Multi-scale encoder with bidirectional pyramid fusion and image attention.
#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    stem: Stem,
}

impl PyramidEncoder {
    pub fn new(cfg: EncoderConfig, d_model: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(PyramidEncoder {
            stem: Stem {
                cfg,
                d_model,
                prefix: "enc".into(),
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.stem.cfg
    }

    /// Smallest square image this configuration accepts.
    pub fn min_image_size(&self) -> usize {
        self.stem.min_size(&self.stem.cfg.scales)
    }

    pub fn memory_len(&self, h: usize, w: usize) -> usize {
        self.stem
            .cfg
            .scales
            .iter()
            .map(|&s| self.stem.positions_per_level(h, w, s))
            .sum()
    }

    /// Registers every encoder parameter. `image_size` fixes the memory
    /// length when pooling is disabled.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, image_size: usize, rng: &mut R) {
        let cfg = &self.stem.cfg;
        let n_mem = matches!(cfg.pool, Pool::Grid(_)).then(|| self.memory_len(image_size, image_size));
        self.stem.register(store, None, rng);
        let levels = cfg.scales.len();
        if levels > 1 {
            for round in 0..cfg.bifpn_depth {
                for (node, inputs) in fusion_layout(levels) {
                    let p = format!("enc.bifpn.{round}.{node}");
                    store.insert(format!("{p}.fuse"), Tensor::ones(&[inputs]));
                    register_conv(store, &p, cfg.channels, cfg.channels, rng);
                }
            }
        }
        for l in 0..levels {
            store.insert(format!("enc.fnorm.{l}.g"), Tensor::ones(&[cfg.channels]));
            store.insert(format!("enc.fnorm.{l}.b"), Tensor::zeros(&[cfg.channels]));
        }
        for l in 0..levels {
            store.insert(format!("enc.attn.{l}.w"), xavier_init(&[1, cfg.channels], rng));
        }
        if let Some(n) = n_mem {
            store.insert("enc.slot", Tensor::zeros(&[n, self.stem.d_model]));
        }
    }

    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<EncoderOutput> {
        let cfg = &self.stem.cfg;
        self.stem.check_image(g, image, &cfg.scales)?;
        let layers = self.stem.layers(g);
        let mut maps = Vec::with_capacity(cfg.scales.len());
        for &s in &cfg.scales {
            let resized = resize(g, image, s)?;
            maps.push(extract_features(g, resized, &layers)?);
        }
        let (fused, fusion) = bifpn_fuse(g, &maps, cfg.bifpn_depth, cfg.fusion_eps, "enc.bifpn")?;
        let fused = normalize_levels(g, &fused, "enc.fnorm")?;
        let mut pyramid = image_attention(g, &fused, "enc.attn")?;
        let memory = self.stem.to_memory(g, &pyramid.levels)?;
        pyramid.fused = Some(memory);
        Ok(EncoderOutput {
            memory,
            pyramid,
            fusion,
        })
    }
}

/// Single-scale encoder: extraction stack, pooling and projection only.
#[derive(Clone, Debug)]
pub struct BaselineEncoder {
    stem: Stem,
}

impl BaselineEncoder {
    pub fn new(cfg: EncoderConfig, d_model: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(BaselineEncoder {
            stem: Stem {
                cfg,
                d_model,
                prefix: "base".into(),
            },
        })
    }

    pub fn min_image_size(&self) -> usize {
        self.stem.min_size(&[1.0])
    }

    pub fn memory_len(&self, h: usize, w: usize) -> usize {
        self.stem.positions_per_level(h, w, 1.0)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, image_size: usize, rng: &mut R) {
        let n_mem = matches!(self.stem.cfg.pool, Pool::Grid(_))
            .then(|| self.memory_len(image_size, image_size));
        self.stem.register(store, n_mem, rng);
        let c = self.stem.cfg.channels;
        store.insert("base.fnorm.0.g", Tensor::ones(&[c]));
        store.insert("base.fnorm.0.b", Tensor::zeros(&[c]));
    }

    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<EncoderOutput> {
        self.stem.check_image(g, image, &[1.0])?;
        let layers = self.stem.layers(g);
        let map = extract_features(g, image, &layers)?;
        let gain = g.param_named("base.fnorm.0.g");
        let bias = g.param_named("base.fnorm.0.b");
        let map = normalize_level(g, map, gain, bias)?;
        let memory = self.stem.to_memory(g, &[map])?;
        Ok(EncoderOutput {
            memory,
            pyramid: FeaturePyramid {
                levels: vec![map],
                fused: Some(memory),
                passthrough: true,
            },
            fusion: Vec::new(),
        })
    }
}

/// Either encoder, selected by configuration.
#[derive(Clone, Debug)]
pub enum Encoder {
    Pyramid(PyramidEncoder),
    Baseline(BaselineEncoder),
}

impl Encoder {
    pub fn new(kind: EncoderKind, cfg: EncoderConfig, d_model: usize) -> Result<Self> {
        Ok(match kind {
            EncoderKind::Pyramid => Encoder::Pyramid(PyramidEncoder::new(cfg, d_model)?),
            EncoderKind::Baseline => Encoder::Baseline(BaselineEncoder::new(cfg, d_model)?),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Pyramid(_) => EncoderKind::Pyramid,
            Encoder::Baseline(_) => EncoderKind::Baseline,
        }
    }

    pub fn memory_len(&self, h: usize, w: usize) -> usize {
        match self {
            Encoder::Pyramid(e) => e.memory_len(h, w),
            Encoder::Baseline(e) => e.memory_len(h, w),
        }
    }

    pub fn min_image_size(&self) -> usize {
        match self {
            Encoder::Pyramid(e) => e.min_image_size(),
            Encoder::Baseline(e) => e.min_image_size(),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, image_size: usize, rng: &mut R) {
        match self {
            Encoder::Pyramid(e) => e.init_params(store, image_size, rng),
            Encoder::Baseline(e) => e.init_params(store, image_size, rng),
        }
    }

    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<EncoderOutput> {
        match self {
            Encoder::Pyramid(e) => e.encode(g, image),
            Encoder::Baseline(e) => e.encode(g, image),
        }
    }
}
