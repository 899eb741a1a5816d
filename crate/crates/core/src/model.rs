//! Pixel-wise segmentation network with a subgroup-routed mixture-of-experts layer.
//!
//! Per pixel:
//!
//! ```text
//! h     = tanh(W_enc · patch3x3 + b_enc)                       (d features)
//! s     = W_gate · [h; onehot(g)]                              (M gate scores)
//! T     = top-K experts by s, ties to the lower index
//! z     = h + Σ_{m∈T} softmax_T(s)_m · (A_m h + c_m)           (residual adaptation)
//! p     = sigmoid(clip(w_dec · z + b_dec, ±15))
//! ```
//!
//! With `use_dmoe = false` the adaptation is skipped (`z = h`). The parameter
//! vector always carries the expert and gate blocks so one vector can drive both
//! modes. Gradients are exact: top-K membership is held fixed at the evaluated
//! point and the logit clip passes gradient only strictly inside its range.

use std::cell::RefCell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{LossVector, Sample, SubgroupId};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;

/// 3x3 neighbourhood, zero-padded at the border.
pub const PATCH: usize = 9;
pub const LOGIT_CLIP: f64 = 15.0;
pub const PROB_CLIP: f64 = 1e-7;
/// Smoothing constant of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub use_dmoe: bool,
    pub num_groups: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            num_experts: 4,
            top_k: 2,
            use_dmoe: true,
            num_groups: 4,
            height: 16,
            width: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("model: {msg}")));
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return bad(format!(
                "top_k {} must satisfy 1 <= K <= num_experts {}",
                self.top_k, self.num_experts
            ));
        }
        if self.num_groups == 0 || self.height == 0 || self.width == 0 {
            return bad("num_groups, height and width must be positive".into());
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        Offsets::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct Offsets {
    enc_w: usize,
    enc_b: usize,
    expert_w: Vec<usize>,
    expert_b: Vec<usize>,
    gate_w: usize,
    dec_w: usize,
    dec_b: usize,
    total: usize,
}

impl Offsets {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.feature_dim;
        let mut at = 0;
        let mut take = |len: usize| {
            let o = at;
            at += len;
            o
        };
        let enc_w = take(d * PATCH);
        let enc_b = take(d);
        let mut expert_w = Vec::new();
        let mut expert_b = Vec::new();
        for _ in 0..cfg.num_experts {
            expert_w.push(take(d * d));
            expert_b.push(take(d));
        }
        let gate_w = take(cfg.num_experts * (d + cfg.num_groups));
        let dec_w = take(d);
        let dec_b = take(1);
        Self {
            enc_w,
            enc_b,
            expert_w,
            expert_b,
            gate_w,
            dec_w,
            dec_b,
            total: at,
        }
    }

    fn layout(&self, cfg: &ModelConfig) -> Vec<Block> {
        let d = cfg.feature_dim;
        let block = |name: String, offset: usize, shape: Vec<usize>| Block {
            name,
            offset,
            shape,
        };
        let mut out = vec![
            block("encoder.weight".into(), self.enc_w, vec![d, PATCH]),
            block("encoder.bias".into(), self.enc_b, vec![d]),
        ];
        for m in 0..cfg.num_experts {
            out.push(block(format!("expert{m}.weight"), self.expert_w[m], vec![d, d]));
            out.push(block(format!("expert{m}.bias"), self.expert_b[m], vec![d]));
        }
        out.push(block(
            "gate.weight".into(),
            self.gate_w,
            vec![cfg.num_experts, d + cfg.num_groups],
        ));
        out.push(block("decoder.weight".into(), self.dec_w, vec![d]));
        out.push(block("decoder.bias".into(), self.dec_b, vec![1]));
        out
    }
}

/// Flat parameter vector plus its block layout. Serializes as
/// `{layout: [{name, offset, shape}], flat: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub layout: Vec<Block>,
    pub flat: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let offsets = Offsets::new(cfg);
        Self {
            layout: offsets.layout(cfg),
            flat: vec![0.0; offsets.total],
        }
    }

    /// Seeded initialization: encoder, gate and decoder weights uniform in
    /// `[-s, s]` with `s = 1/sqrt(fan_in)`, biases zero, experts zero. Zero experts
    /// make the adaptation layer start as the identity map.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut params = Self::zeros(cfg);
        let mut rng = rng::substream(seed, u64::MAX);
        let d = cfg.feature_dim;
        let fan_in = [
            ("encoder.weight", PATCH),
            ("gate.weight", d + cfg.num_groups),
            ("decoder.weight", d),
        ];
        for (name, fan) in fan_in {
            let s = 1.0 / (fan as f64).sqrt();
            for v in params.block_mut(name).expect("known block") {
                *v = rng::uniform_in(&mut rng, -s, s);
            }
        }
        params
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&Block> {
        self.layout.iter().find(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        let r = self.find(name)?.range();
        self.flat.get(r)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.find(name)?.range();
        self.flat.get_mut(r)
    }

    /// Layout matches `cfg` exactly and every entry is finite.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let offsets = Offsets::new(cfg);
        let expected = offsets.layout(cfg);
        if self.layout != expected {
            return Err(Error::LayoutMismatch(format!(
                "expected {} blocks totalling {} values for this configuration",
                expected.len(),
                offsets.total
            )));
        }
        if self.flat.len() != offsets.total {
            return Err(Error::LayoutMismatch(format!(
                "flat vector has {} values, layout needs {}",
                self.flat.len(),
                offsets.total
            )));
        }
        if let Some(i) = self.flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Per-pixel feature vectors, row-major pixels, `dim` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl PredictionMap {
    /// Foreground where the probability reaches 0.5.
    pub fn binarize(&self) -> Vec<bool> {
        self.probs.iter().map(|&p| p >= 0.5).collect()
    }
}

/// Borrowed views into the flat parameter vector.
struct Weights<'a> {
    d: usize,
    m: usize,
    k: usize,
    groups: usize,
    enc_w: &'a [f64],
    enc_b: &'a [f64],
    expert_w: Vec<&'a [f64]>,
    expert_b: Vec<&'a [f64]>,
    gate_w: &'a [f64],
    dec_w: &'a [f64],
    dec_b: f64,
}

impl<'a> Weights<'a> {
    fn new(params: &'a ModelParams, cfg: &ModelConfig) -> Result<(Self, Offsets)> {
        params.check(cfg)?;
        let o = Offsets::new(cfg);
        let d = cfg.feature_dim;
        let f = &params.flat;
        let w = Self {
            d,
            m: cfg.num_experts,
            k: cfg.top_k,
            groups: cfg.num_groups,
            enc_w: &f[o.enc_w..o.enc_w + d * PATCH],
            enc_b: &f[o.enc_b..o.enc_b + d],
            expert_w: o.expert_w.iter().map(|&a| &f[a..a + d * d]).collect(),
            expert_b: o.expert_b.iter().map(|&a| &f[a..a + d]).collect(),
            gate_w: &f[o.gate_w..o.gate_w + cfg.num_experts * (d + cfg.num_groups)],
            dec_w: &f[o.dec_w..o.dec_w + d],
            dec_b: f[o.dec_b],
        };
        Ok((w, o))
    }

    fn gate_row(&self, m: usize) -> &[f64] {
        let stride = self.d + self.groups;
        &self.gate_w[m * stride..(m + 1) * stride]
    }
}

fn patch(image: &[f64], height: usize, width: usize, p: usize) -> [f64; PATCH] {
    let (i, j) = ((p / width) as isize, (p % width) as isize);
    let mut out = [0.0; PATCH];
    let mut t = 0;
    for di in -1..=1 {
        for dj in -1..=1 {
            let (y, x) = (i + di, j + dj);
            if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                out[t] = image[y as usize * width + x as usize];
            }
            t += 1;
        }
    }
    out
}

/// Dot product with four independent partial sums, so short products are not
/// bound by one serial chain of additions.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    match (<&[f64; 8]>::try_from(a), <&[f64; 8]>::try_from(b)) {
        (Ok(a), Ok(b)) => dot_fixed(a, b),
        _ => dot_any(a, b),
    }
}

#[inline(always)]
fn dot_fixed<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    let mut acc = [0.0; 4];
    for i in 0..N {
        acc[i % 4] += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn dot_any(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        acc[i % 4] += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `y += a x`
#[inline(always)]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if let (Ok(y), Ok(x)) = (<&mut [f64; 8]>::try_from(&mut *y), <&[f64; 8]>::try_from(x)) {
        for i in 0..8 {
            y[i] += a * x[i];
        }
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `tanh` through one `exp`; absolute error within a few ulp.
#[inline(always)]
fn tanh(a: f64) -> f64 {
    let e = (-2.0 * a.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(a)
}

#[inline(always)]
fn encode_pixel(w: &Weights, x: &[f64; PATCH], h: &mut [f64]) {
    for (f, hf) in h.iter_mut().enumerate() {
        let row = &w.enc_w[f * PATCH..(f + 1) * PATCH];
        let row: &[f64; PATCH] = row.try_into().expect("encoder row");
        let a = w.enc_b[f] + dot_fixed(row, x);
        *hf = tanh(a);
    }
}

/// Gate scores for all experts from `[h; onehot(group)]`.
#[inline(always)]
fn gate_scores(w: &Weights, h: &[f64], group: SubgroupId, scores: &mut [f64]) {
    let d = h.len();
    for (m, s) in scores.iter_mut().enumerate() {
        let row = w.gate_row(m);
        *s = dot(&row[..d], h) + row[d + group.0];
    }
}

/// Indices of the `k` largest scores in descending order, ties to the lower index.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut out = vec![0; k.min(scores.len())];
    top_k_into(scores, &mut out);
    out
}

/// Fills `out` with the `out.len()` best indices by repeated arg-max; strict
/// comparison keeps the lower index on ties.
fn top_k_into(scores: &[f64], out: &mut [usize]) {
    for t in 0..out.len() {
        let mut best = usize::MAX;
        for m in 0..scores.len() {
            if out[..t].contains(&m) {
                continue;
            }
            if best == usize::MAX || scores[m].total_cmp(&scores[best]).is_gt() {
                best = m;
            }
        }
        out[t] = best;
    }
}

/// Softmax of the selected scores, max-shifted, written to `gates`.
fn routing_weights_into(scores: &[f64], selected: &[usize], gates: &mut [f64]) {
    let max = selected
        .iter()
        .map(|&m| scores[m])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (g, &m) in gates.iter_mut().zip(selected) {
        *g = (scores[m] - max).exp();
        total += *g;
    }
    for g in gates.iter_mut() {
        *g /= total;
    }
}

/// `A_m h + c_m`.
#[inline(always)]
fn expert_apply(w: &Weights, m: usize, h: &[f64], out: &mut [f64]) {
    let (a, d) = (w.expert_w[m], h.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = w.expert_b[m][r] + dot(&a[r * d..(r + 1) * d], h);
    }
}

/// Routing state of one pixel, borrowed from per-sample buffers.
struct RoutedMut<'b> {
    scores: &'b mut [f64],
    selected: &'b mut [usize],
    gates: &'b mut [f64],
    /// Expert outputs of the selected experts, `d` values each.
    outputs: &'b mut [f64],
}

/// Residual mixture-of-experts adaptation of one pixel feature; writes `z`.
#[inline(always)]
fn adapt_pixel(w: &Weights, h: &[f64], group: SubgroupId, z: &mut [f64], r: RoutedMut) {
    let d = h.len();
    gate_scores(w, h, group, r.scores);
    top_k_into(r.scores, r.selected);
    routing_weights_into(r.scores, r.selected, r.gates);
    z.copy_from_slice(h);
    for (t, &m) in r.selected.iter().enumerate() {
        let e = &mut r.outputs[t * d..(t + 1) * d];
        expert_apply(w, m, h, e);
        for (zf, ef) in z.iter_mut().zip(e.iter()) {
            *zf += r.gates[t] * ef;
        }
    }
}

/// Reusable routing buffers for one pixel at a time.
struct RouteScratch {
    scores: Vec<f64>,
    selected: Vec<usize>,
    gates: Vec<f64>,
    outputs: Vec<f64>,
}

impl RouteScratch {
    fn new(w: &Weights) -> Self {
        Self {
            scores: vec![0.0; w.m],
            selected: vec![0; w.k],
            gates: vec![0.0; w.k],
            outputs: vec![0.0; w.k * w.d],
        }
    }

    fn view(&mut self) -> RoutedMut<'_> {
        RoutedMut {
            scores: &mut self.scores,
            selected: &mut self.selected,
            gates: &mut self.gates,
            outputs: &mut self.outputs,
        }
    }
}

#[inline(always)]
fn decode_pixel(w: &Weights, z: &[f64]) -> (f64, f64) {
    let raw = w.dec_b + dot(&w.dec_w[..z.len()], z);
    let clipped = raw.clamp(-LOGIT_CLIP, LOGIT_CLIP);
    (raw, 1.0 / (1.0 + (-clipped).exp()))
}

fn check_image(sample: &Sample, cfg: &ModelConfig) -> Result<()> {
    let pixels = cfg.height * cfg.width;
    if sample.image.len() != pixels || sample.mask.len() != pixels {
        return Err(Error::ShapeMismatch(format!(
            "sample {}: image/mask lengths {}/{} for a {}x{} model",
            sample.sample_id,
            sample.image.len(),
            sample.mask.len(),
            cfg.height,
            cfg.width
        )));
    }
    if sample.group.0 >= cfg.num_groups {
        return Err(Error::GroupOutOfRange {
            sample_id: sample.sample_id,
            group: sample.group.0,
            num_groups: cfg.num_groups,
        });
    }
    Ok(())
}

/// Encoder features of an image (`tanh` of the 3x3 neighbourhood map).
pub fn encode(image: &[f64], params: &ModelParams, cfg: &ModelConfig) -> Result<FeatureMap> {
    let (w, _) = Weights::new(params, cfg)?;
    let pixels = cfg.height * cfg.width;
    if image.len() != pixels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} values, model expects {pixels}",
            image.len()
        )));
    }
    let mut data = vec![0.0; pixels * w.d];
    for p in 0..pixels {
        let x = patch(image, cfg.height, cfg.width, p);
        encode_pixel(&w, &x, &mut data[p * w.d..(p + 1) * w.d]);
    }
    Ok(FeatureMap {
        height: cfg.height,
        width: cfg.width,
        dim: w.d,
        data,
    })
}

/// Subgroup-conditioned residual expert mixture applied at every pixel.
pub fn dmoe_adapt(
    features: &FeatureMap,
    group: SubgroupId,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<FeatureMap> {
    if !cfg.use_dmoe {
        return Err(Error::InvalidArgument(
            "dmoe_adapt called with use_dmoe = false".into(),
        ));
    }
    let (w, _) = Weights::new(params, cfg)?;
    if features.dim != w.d || features.height != cfg.height || features.width != cfg.width {
        return Err(Error::ShapeMismatch(format!(
            "feature map {}x{}x{} for a {}x{}x{} model",
            features.height, features.width, features.dim, cfg.height, cfg.width, w.d
        )));
    }
    if group.0 >= cfg.num_groups {
        return Err(Error::InvalidArgument(format!(
            "group {group} out of range for {} groups",
            cfg.num_groups
        )));
    }
    if features.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input feature map".into()));
    }
    let mut data = vec![0.0; features.data.len()];
    let mut scratch = RouteScratch::new(&w);
    for p in 0..features.height * features.width {
        adapt_pixel(&w, features.pixel(p), group, &mut data[p * w.d..(p + 1) * w.d], scratch.view());
    }
    Ok(FeatureMap {
        data,
        ..features.clone()
    })
}

/// Decoder logits followed by the clipped sigmoid.
pub fn decode(features: &FeatureMap, params: &ModelParams, cfg: &ModelConfig) -> Result<PredictionMap> {
    let (w, _) = Weights::new(params, cfg)?;
    let probs = (0..features.height * features.width)
        .map(|p| decode_pixel(&w, features.pixel(p)).1)
        .collect();
    Ok(PredictionMap {
        height: features.height,
        width: features.width,
        probs,
    })
}

pub fn forward(sample: &Sample, params: &ModelParams, cfg: &ModelConfig) -> Result<PredictionMap> {
    check_image(sample, cfg)?;
    let h = encode(&sample.image, params, cfg)?;
    let z = if cfg.use_dmoe {
        dmoe_adapt(&h, sample.group, params, cfg)?
    } else {
        h
    };
    decode(&z, params, cfg)
}

/// Loss value and its derivative with respect to each probability.
fn loss_terms(probs: &[f64], mask: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = probs.len() as f64;
    let mut bce = 0.0;
    let (mut sum_p, mut sum_y, mut sum_py) = (0.0, 0.0, 0.0);
    for (&p, &y) in probs.iter().zip(mask) {
        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        sum_p += p;
        sum_y += y;
        sum_py += p * y;
    }
    bce /= n;
    let num = 2.0 * sum_py + DICE_SMOOTH;
    let den = sum_p + sum_y + DICE_SMOOTH;
    let soft_dice = 1.0 - num / den;
    // d(softDice)/dp_j = -(2 y_j den - num) / den^2
    let d_dice: Vec<f64> = mask
        .iter()
        .map(|&y| -(2.0 * y * den - num) / (den * den))
        .collect();
    (bce, soft_dice, d_dice)
}

/// `0.5 * BCE + 0.5 * softDice`, BCE averaged over pixels with probabilities
/// clipped to `[1e-7, 1 - 1e-7]`, soft Dice smoothed by 1.
pub fn per_sample_loss(pred: &PredictionMap, mask: &[f64]) -> Result<f64> {
    if pred.probs.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, mask {}",
            pred.probs.len(),
            mask.len()
        )));
    }
    let (bce, dice, _) = loss_terms(&pred.probs, mask);
    Ok(0.5 * bce + 0.5 * dice)
}

/// Per-sample parameter gradients of one batch, in batch order.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    grads: Vec<Vec<f64>>,
    dim: usize,
}

impl SampleGradients {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.grads[i]
    }

    /// `Σ_i c_i ∇ℓ_i`, accumulated in batch order.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a batch of {}",
                weights.len(),
                self.grads.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (c, g) in weights.iter().zip(&self.grads) {
            if *c == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(g) {
                *o += c * v;
            }
        }
        Ok(out)
    }
}

/// Per-sample forward trace, kept per thread and overwritten by every sample.
#[derive(Default)]
struct Trace {
    xs: Vec<[f64; PATCH]>,
    hs: Vec<f64>,
    zs: Vec<f64>,
    selected: Vec<usize>,
    gates: Vec<f64>,
    outputs: Vec<f64>,
    scores: Vec<f64>,
    raw: Vec<f64>,
    probs: Vec<f64>,
}

impl Trace {
    fn reset(&mut self, pixels: usize, w: &Weights, dmoe: bool) {
        let routed = if dmoe { pixels * w.k } else { 0 };
        self.xs.resize(pixels, [0.0; PATCH]);
        self.hs.resize(pixels * w.d, 0.0);
        self.zs.resize(pixels * w.d, 0.0);
        self.selected.resize(routed, 0);
        self.gates.resize(routed, 0.0);
        self.outputs.resize(routed * w.d, 0.0);
        self.scores.resize(w.m, 0.0);
        self.raw.resize(pixels, 0.0);
        self.probs.resize(pixels, 0.0);
    }
}

thread_local! {
    static TRACE: RefCell<Trace> = RefCell::new(Trace::default());
}

/// Loss of one sample and, optionally, its exact gradient.
fn sample_loss_grad(
    sample: &Sample,
    w: &Weights,
    o: &Offsets,
    cfg: &ModelConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_image(sample, cfg)?;
    TRACE.with(|t| {
        let trace = &mut t.borrow_mut();
        match w.d {
            8 => traced_loss_grad::<8>(sample, w, o, cfg, want_grad, trace),
            _ => traced_loss_grad::<0>(sample, w, o, cfg, want_grad, trace),
        }
    })
}

/// Forward and backward pass; `D` is the feature width when known at compile
/// time (0 reads it from the weights).
fn traced_loss_grad<const D: usize>(
    sample: &Sample,
    w: &Weights,
    o: &Offsets,
    cfg: &ModelConfig,
    want_grad: bool,
    trace: &mut Trace,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (d, k) = (if D == 0 { w.d } else { D }, w.k);
    let pixels = cfg.height * cfg.width;
    trace.reset(pixels, w, cfg.use_dmoe);
    let Trace {
        xs,
        hs,
        zs,
        selected,
        gates,
        outputs,
        scores,
        raw,
        probs,
    } = trace;
    for p in 0..pixels {
        xs[p] = patch(&sample.image, cfg.height, cfg.width, p);
        let h = &mut hs[p * d..(p + 1) * d];
        encode_pixel(w, &xs[p], h);
        let z = &mut zs[p * d..(p + 1) * d];
        if cfg.use_dmoe {
            adapt_pixel(
                w,
                h,
                sample.group,
                z,
                RoutedMut {
                    scores,
                    selected: &mut selected[p * k..(p + 1) * k],
                    gates: &mut gates[p * k..(p + 1) * k],
                    outputs: &mut outputs[p * k * d..(p + 1) * k * d],
                },
            );
        } else {
            z.copy_from_slice(h);
        }
        (raw[p], probs[p]) = decode_pixel(w, z);
    }
    let (bce, dice, d_dice) = loss_terms(probs, &sample.mask);
    let loss = 0.5 * bce + 0.5 * dice;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss of sample {}", sample.sample_id)));
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let n = pixels as f64;
    let mut grad = vec![0.0; o.total];
    let mut gz = vec![0.0; d];
    let mut gh = vec![0.0; d];
    let mut g_gate = vec![0.0; k];
    let stride = d + w.groups;
    for p in 0..pixels {
        if raw[p].abs() > LOGIT_CLIP {
            continue;
        }
        let prob = probs[p];
        let y = sample.mask[p];
        let g_logit = 0.5 * (prob - y) / n + 0.5 * d_dice[p] * prob * (1.0 - prob);
        if g_logit == 0.0 {
            continue;
        }
        let h = &hs[p * d..(p + 1) * d];
        let z = &zs[p * d..(p + 1) * d];

        // decoder
        for f in 0..d {
            grad[o.dec_w + f] += g_logit * z[f];
            gz[f] = g_logit * w.dec_w[f];
        }
        grad[o.dec_b] += g_logit;

        // residual path
        gh.copy_from_slice(&gz);
        if cfg.use_dmoe {
            let sel = &selected[p * k..(p + 1) * k];
            let pis = &gates[p * k..(p + 1) * k];
            for (t, &m) in sel.iter().enumerate() {
                let e = &outputs[(p * k + t) * d..(p * k + t + 1) * d];
                g_gate[t] = dot(&gz, e);
                let pi = pis[t];
                // weight block is immediately followed by its bias
                let (gw, rest) = grad[o.expert_w[m]..].split_at_mut(d * d);
                let gb = &mut rest[..d];
                let rows = gw.chunks_exact_mut(d).zip(w.expert_w[m].chunks_exact(d));
                for ((gw_row, a_row), (&gzr, gbr)) in rows.zip(gz.iter().zip(gb.iter_mut())) {
                    let ge = pi * gzr;
                    *gbr += ge;
                    axpy(gw_row, ge, h);
                    axpy(&mut gh, ge, a_row);
                }
            }
            // softmax over the selected experts
            let mean: f64 = pis.iter().zip(&g_gate).map(|(a, b)| a * b).sum();
            for (t, &m) in sel.iter().enumerate() {
                let gs = pis[t] * (g_gate[t] - mean);
                if gs == 0.0 {
                    continue;
                }
                let base = o.gate_w + m * stride;
                axpy(&mut grad[base..base + d], gs, h);
                axpy(&mut gh, gs, &w.gate_row(m)[..d]);
                grad[base + d + sample.group.0] += gs;
            }
        }

        // encoder
        let (gw, gb) = grad[o.enc_w..o.enc_b + d].split_at_mut(d * PATCH);
        for (f, (gw_row, gbf)) in gw.chunks_exact_mut(PATCH).zip(gb.iter_mut()).enumerate() {
            let ga = gh[f] * (1.0 - h[f] * h[f]);
            *gbf += ga;
            axpy(gw_row, ga, &xs[p]);
        }
    }
    Ok((loss, Some(grad)))
}

pub fn loss_and_grad(
    batch: &[Sample],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(LossVector, SampleGradients)> {
    loss_and_grad_with(batch, params, cfg, Execution::default())
}

/// Per-sample losses and exact per-sample gradients. Samples are evaluated
/// independently (in parallel when `exec` allows) and collected in batch order.
pub fn loss_and_grad_with(
    batch: &[Sample],
    params: &ModelParams,
    cfg: &ModelConfig,
    exec: Execution,
) -> Result<(LossVector, SampleGradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (w, o) = Weights::new(params, cfg)?;
    let results = par::try_map_indexed(exec, batch.len(), |i| {
        sample_loss_grad(&batch[i], &w, &o, cfg, true)
    })?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for (loss, grad) in results {
        losses.push(loss);
        grads.push(grad.expect("gradient requested"));
    }
    Ok((
        LossVector::new(losses)?,
        SampleGradients {
            grads,
            dim: o.total,
        },
    ))
}

/// Per-sample losses without gradients.
pub fn losses_with(
    batch: &[Sample],
    params: &ModelParams,
    cfg: &ModelConfig,
    exec: Execution,
) -> Result<LossVector> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (w, o) = Weights::new(params, cfg)?;
    let losses = par::try_map_indexed(exec, batch.len(), |i| {
        sample_loss_grad(&batch[i], &w, &o, cfg, false).map(|(l, _)| l)
    })?;
    LossVector::new(losses)
}

/// Smallest gap, over all pixels of the batch, between the K-th and (K+1)-th gate
/// score and the distance of any logit to the clip boundary. Finite-difference
/// checks need both to exceed the perturbation size.
pub fn routing_margins(batch: &[Sample], params: &ModelParams, cfg: &ModelConfig) -> Result<(f64, f64)> {
    let (w, _) = Weights::new(params, cfg)?;
    let mut gate_gap = f64::INFINITY;
    let mut clip_gap = f64::INFINITY;
    let mut scratch = RouteScratch::new(&w);
    for s in batch {
        check_image(s, cfg)?;
        for p in 0..cfg.height * cfg.width {
            let x = patch(&s.image, cfg.height, cfg.width, p);
            let mut h = vec![0.0; w.d];
            encode_pixel(&w, &x, &mut h);
            let mut z = vec![0.0; w.d];
            if cfg.use_dmoe {
                let mut scores = vec![0.0; w.m];
                gate_scores(&w, &h, s.group, &mut scores);
                if w.k < w.m {
                    let mut sorted = scores.clone();
                    sorted.sort_by(|a, b| b.total_cmp(a));
                    gate_gap = gate_gap.min(sorted[w.k - 1] - sorted[w.k]);
                }
                adapt_pixel(&w, &h, s.group, &mut z, scratch.view());
            } else {
                z.copy_from_slice(&h);
            }
            let (raw, _) = decode_pixel(&w, &z);
            clip_gap = clip_gap.min(LOGIT_CLIP - raw.abs());
        }
    }
    Ok((gate_gap, clip_gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, SynthConfig};
    use rand::Rng;

    fn small_cohort(seed: u64) -> Vec<Sample> {
        let cfg = SynthConfig {
            samples_per_group: vec![2, 2, 2, 2],
            seed,
            ..SynthConfig::default()
        };
        generate_cohort(&cfg).unwrap().samples
    }

    /// Every block random, so routing and experts are all active.
    fn random_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
        let mut p = ModelParams::zeros(cfg);
        let mut r = rng::substream(seed, 5);
        for v in &mut p.flat {
            *v = scale * (2.0 * r.gen::<f64>() - 1.0);
        }
        p
    }

    #[test]
    fn layout_is_contiguous_and_small() {
        let cfg = ModelConfig::default();
        let p = ModelParams::zeros(&cfg);
        let mut at = 0;
        for b in &p.layout {
            assert_eq!(b.offset, at);
            at += b.len();
        }
        assert_eq!(at, p.len());
        assert!(p.len() <= 2000);
        assert!(p.check(&cfg).is_ok());
    }

    #[test]
    fn zero_experts_are_identity() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 3);
        let s = &small_cohort(1)[0];
        let h = encode(&s.image, &params, &cfg).unwrap();
        let z = dmoe_adapt(&h, s.group, &params, &cfg).unwrap();
        assert_eq!(h, z);
    }

    #[test]
    fn uniform_gates_average_all_experts() {
        let cfg = ModelConfig {
            top_k: 4,
            ..ModelConfig::default()
        };
        let mut params = random_params(&cfg, 9, 0.4);
        params.block_mut("gate.weight").unwrap().fill(0.0);
        let s = &small_cohort(2)[3];
        let h = encode(&s.image, &params, &cfg).unwrap();
        let z = dmoe_adapt(&h, s.group, &params, &cfg).unwrap();
        let (w, _) = Weights::new(&params, &cfg).unwrap();
        for p in 0..cfg.height * cfg.width {
            let hp = h.pixel(p);
            let mut expect = hp.to_vec();
            let mut e = vec![0.0; cfg.feature_dim];
            for m in 0..4 {
                expert_apply(&w, m, hp, &mut e);
                for f in 0..cfg.feature_dim {
                    expect[f] += 0.25 * e[f];
                }
            }
            for f in 0..cfg.feature_dim {
                assert!((z.pixel(p)[f] - expect[f]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dominant_gate_selects_one_expert() {
        let cfg = ModelConfig::default();
        let mut params = random_params(&cfg, 4, 0.4);
        let d = cfg.feature_dim;
        let stride = d + cfg.num_groups;
        {
            let gate = params.block_mut("gate.weight").unwrap();
            gate.fill(0.0);
            // expert 2 dominates for every group, expert 0 is the runner-up
            for g in 0..cfg.num_groups {
                gate[2 * stride + d + g] = 60.0;
            }
        }
        let s = &small_cohort(3)[0];
        let h = encode(&s.image, &params, &cfg).unwrap();
        let z = dmoe_adapt(&h, s.group, &params, &cfg).unwrap();
        let (w, _) = Weights::new(&params, &cfg).unwrap();
        let mut e = vec![0.0; d];
        for p in 0..cfg.height * cfg.width {
            expert_apply(&w, 2, h.pixel(p), &mut e);
            for f in 0..d {
                assert!((z.pixel(p)[f] - (h.pixel(p)[f] + e[f])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(select_top_k(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(select_top_k(&[0.0, 0.0, 0.0, 0.0], 2), vec![0, 1]);
        assert_eq!(select_top_k(&[0.5, 0.1, 0.9], 1), vec![2]);
    }

    #[test]
    fn forward_shape_and_open_interval() {
        let cfg = ModelConfig::default();
        let params = random_params(&cfg, 1, 3.0);
        for s in small_cohort(4) {
            let pred = forward(&s, &params, &cfg).unwrap();
            assert_eq!((pred.height, pred.width), (16, 16));
            assert!(pred.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn forward_rejects_layout_mismatch() {
        let cfg = ModelConfig::default();
        let other = ModelConfig {
            feature_dim: 4,
            ..cfg.clone()
        };
        let params = ModelParams::init(&other, 0);
        let s = &small_cohort(0)[0];
        assert!(matches!(forward(s, &params, &cfg), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn loss_half_prediction_empty_mask() {
        let pred = PredictionMap {
            height: 16,
            width: 16,
            probs: vec![0.5; 256],
        };
        let loss = per_sample_loss(&pred, &[0.0; 256]).unwrap();
        // 0.5 ln 2 + 0.5 (1 - 1/129)
        let expect = 0.5 * std::f64::consts::LN_2 + 0.5 * (1.0 - 1.0 / 129.0);
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.8427).abs() < 1e-4);
    }

    #[test]
    fn loss_perfect_prediction_is_near_zero() {
        let mask: Vec<f64> = (0..256).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let pred = PredictionMap {
            height: 16,
            width: 16,
            probs: mask.clone(),
        };
        assert!(per_sample_loss(&pred, &mask).unwrap() < 1e-5);
    }

    #[test]
    fn loss_grid_doubling_keeps_bce() {
        let probs4 = vec![0.2, 0.7, 0.9, 0.4];
        let mask4 = vec![0.0, 1.0, 1.0, 0.0];
        let (bce4, dice4, _) = loss_terms(&probs4, &mask4);
        let probs8: Vec<f64> = probs4.iter().chain(&probs4).copied().collect();
        let mask8: Vec<f64> = mask4.iter().chain(&mask4).copied().collect();
        let (bce8, dice8, _) = loss_terms(&probs8, &mask8);
        assert!((bce4 - bce8).abs() < 1e-15);
        // soft Dice would be identical without the smoothing constant
        let sp: f64 = probs4.iter().sum();
        let sy: f64 = mask4.iter().sum();
        let spy: f64 = probs4.iter().zip(&mask4).map(|(a, b)| a * b).sum();
        assert!((dice4 - (1.0 - (2.0 * spy + 1.0) / (sp + sy + 1.0))).abs() < 1e-15);
        assert!((dice8 - (1.0 - (4.0 * spy + 1.0) / (2.0 * sp + 2.0 * sy + 1.0))).abs() < 1e-15);
        assert!(dice4 != dice8);
    }

    fn fd_check(cfg: &ModelConfig, params: &ModelParams, batch: &[Sample], seed: u64) {
        let (_, grads) = loss_and_grad(batch, params, cfg).unwrap();
        let n = batch.len();
        let c = vec![1.0 / n as f64; n];
        let g = grads.weighted_sum(&c).unwrap();
        let mean_loss = |p: &ModelParams| losses_with(batch, p, cfg, Execution::Sequential).unwrap().mean();
        let mut r = rng::substream(seed, 77);
        let step = 1e-5;
        for _ in 0..20 {
            let k = r.gen_range(0..params.len());
            let mut plus = params.clone();
            plus.flat[k] += step;
            let mut minus = params.clone();
            minus.flat[k] -= step;
            let fd = (mean_loss(&plus) - mean_loss(&minus)) / (2.0 * step);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(rel <= 1e-4, "coordinate {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let batch = small_cohort(5);
        for (use_dmoe, seed) in [(true, 1), (true, 2), (false, 3)] {
            let cfg = ModelConfig {
                use_dmoe,
                ..ModelConfig::default()
            };
            let params = random_params(&cfg, seed, 0.5);
            let (gap, clip) = routing_margins(&batch, &params, &cfg).unwrap();
            if use_dmoe && gap < 1e-4 {
                continue;
            }
            assert!(clip > 1e-3);
            fd_check(&cfg, &params, &batch, seed);
        }
    }

    #[test]
    fn uniform_weights_give_mean_gradient() {
        let cfg = ModelConfig::default();
        let params = random_params(&cfg, 8, 0.5);
        let batch = small_cohort(6);
        let (_, grads) = loss_and_grad(&batch, &params, &cfg).unwrap();
        let n = batch.len();
        let mean = grads.weighted_sum(&vec![1.0 / n as f64; n]).unwrap();
        for k in 0..params.len() {
            let direct: f64 = (0..n).map(|i| grads.sample(i)[k]).sum::<f64>() / n as f64;
            assert!((mean[k] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn unselected_expert_has_zero_gradient() {
        let cfg = ModelConfig::default();
        let mut params = random_params(&cfg, 10, 0.5);
        let d = cfg.feature_dim;
        let stride = d + cfg.num_groups;
        for g in 0..cfg.num_groups {
            params.block_mut("gate.weight").unwrap()[3 * stride + d + g] = -100.0;
        }
        let batch = small_cohort(7);
        let (_, grads) = loss_and_grad(&batch, &params, &cfg).unwrap();
        let total = grads.weighted_sum(&vec![1.0; batch.len()]).unwrap();
        for name in ["expert3.weight", "expert3.bias"] {
            let r = params.find(name).unwrap().range();
            assert!(total[r].iter().all(|&v| v == 0.0), "{name}");
        }
        let r = params.find("expert0.weight").unwrap().range();
        assert!(total[r].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn parallel_and_sequential_gradients_identical() {
        let cfg = ModelConfig::default();
        let params = random_params(&cfg, 11, 0.5);
        let batch = small_cohort(8);
        let (la, ga) = loss_and_grad_with(&batch, &params, &cfg, Execution::Sequential).unwrap();
        let (lb, gb) = loss_and_grad_with(&batch, &params, &cfg, Execution::Parallel).unwrap();
        assert_eq!(la, lb);
        for i in 0..batch.len() {
            assert_eq!(ga.sample(i), gb.sample(i));
        }
    }

    #[test]
    fn params_json_shape() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 1);
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert!(v["layout"][0].get("name").is_some());
        assert!(v["layout"][0].get("offset").is_some());
        assert!(v["layout"][0].get("shape").is_some());
        assert_eq!(v["flat"].as_array().unwrap().len(), p.len());
        assert_eq!(ModelParams::from_json(&p.to_json().unwrap()).unwrap(), p);
    }
}
