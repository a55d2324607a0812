//! Temporal graph over per-snippet scene vectors, anchor masks and decoding.
//!
//! The `N` scene vectors of a chunk are laid out as a `D_scene × N` signal
//! and passed through three same-length 1D convolutions, each followed by a
//! sigmoid. Two per-snippet heads read the last feature map: `C + 1`
//! activity logits (the last index is background) and one class-agnostic
//! "inside an activity" logit. Positions at or past `valid_len` are zeroed
//! after every layer, so padding never leaks into real snippets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::scene_graph::xavier;
use crate::{Error, Result, Tensor};

/// Inclusive snippet interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Interval { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Intersection over union of two inclusive intervals, counted in snippets.
pub fn temporal_iou(a: Interval, b: Interval) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    if lo > hi {
        return 0.0;
    }
    let inter = hi - lo + 1;
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// A scored, class-labelled detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub activity_class: usize,
    pub start_snippet: usize,
    pub end_snippet: usize,
    pub score: f64,
}

impl Segment {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start_snippet, self.end_snippet)
    }
}

/// `N × D_scene` matrix of scene vectors, zero past `valid_len`.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    pub features: Var,
    pub valid_len: usize,
    pub len: usize,
}

/// Lays out `scene_reprs` (each `1 × D` or `[D]`) along a graph of fixed
/// length `n`, zero-padding the tail.
pub fn build_temporal_graph(tape: &mut Tape, scene_reprs: &[Var], n: usize, width: usize) -> Result<TemporalGraph> {
    if scene_reprs.len() > n {
        return Err(Error::Contract(format!(
            "{} snippets exceed the temporal graph length {n}; split the video with chunk_video first",
            scene_reprs.len()
        )));
    }
    let features = tape.stack_rows(scene_reprs, n, width)?;
    Ok(TemporalGraph {
        features,
        valid_len: scene_reprs.len(),
        len: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `C_out × C_in × K`.
    pub kernel: Tensor,
    /// `[C_out]`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalParams {
    pub convs: Vec<ConvLayer>,
    /// `(C+1) × C_last`.
    pub cls_weight: Tensor,
    /// `[C+1]`.
    pub cls_bias: Tensor,
    /// `1 × C_last`.
    pub boundary_weight: Tensor,
    /// `[1]`.
    pub boundary_bias: Tensor,
}

impl TemporalParams {
    /// Three convolutions with output widths `[d, d/2, d/4]` (at least 1)
    /// and kernel size `kernel`; biases start at zero.
    pub fn init<R: Rng>(rng: &mut R, d_scene: usize, num_classes: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        if d_scene == 0 || num_classes == 0 {
            return Err(Error::Config("temporal dimensions must be positive".into()));
        }
        let widths = [d_scene, (d_scene / 2).max(1), (d_scene / 4).max(1)];
        let mut convs = Vec::with_capacity(3);
        let mut c_in = d_scene;
        for &c_out in &widths {
            convs.push(ConvLayer {
                kernel: xavier(rng, &[c_out, c_in, kernel], c_in * kernel, c_out * kernel),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        let last = widths[2];
        Ok(TemporalParams {
            convs,
            cls_weight: xavier(rng, &[num_classes + 1, last], last, num_classes + 1),
            cls_bias: Tensor::zeros(&[num_classes + 1]),
            boundary_weight: xavier(rng, &[1, last], last, 1),
            boundary_bias: Tensor::zeros(&[1]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.convs[0].kernel.shape()[1]
    }

    /// Output classes including background.
    pub fn num_outputs(&self) -> usize {
        self.cls_weight.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.convs.is_empty() {
            return bad("temporal network has no convolutions".into());
        }
        let mut c_in = self.input_dim();
        for (i, c) in self.convs.iter().enumerate() {
            match c.kernel.shape() {
                &[o, ci, k] if ci == c_in && k % 2 == 1 && c.bias.shape() == [o] => c_in = o,
                s => return bad(format!("conv {i} kernel {s:?} does not compose with width {c_in}")),
            }
        }
        let k = self.num_outputs();
        if self.cls_weight.shape() != [k, c_in] || self.cls_bias.shape() != [k] {
            return bad(format!("class head {:?} does not accept width {c_in}", self.cls_weight.shape()));
        }
        if self.boundary_weight.shape() != [1, c_in] || self.boundary_bias.shape() != [1] {
            return bad(format!(
                "boundary head {:?} does not accept width {c_in}",
                self.boundary_weight.shape()
            ));
        }
        if !self.tensors().iter().all(|t| t.all_finite()) {
            return Err(Error::NonFinite("temporal parameters".into()));
        }
        Ok(())
    }

    /// Per conv `kernel`, `bias`; then class head, boundary head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for c in &self.convs {
            out.push(&c.kernel);
            out.push(&c.bias);
        }
        out.extend([&self.cls_weight, &self.cls_bias, &self.boundary_weight, &self.boundary_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        out.push(&mut self.cls_weight);
        out.push(&mut self.cls_bias);
        out.push(&mut self.boundary_weight);
        out.push(&mut self.boundary_bias);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundTemporal {
        BoundTemporal {
            convs: self
                .convs
                .iter()
                .map(|c| (tape.leaf(c.kernel.clone()), tape.leaf(c.bias.clone())))
                .collect(),
            cls_weight: tape.leaf(self.cls_weight.clone()),
            cls_bias: tape.leaf(self.cls_bias.clone()),
            boundary_weight: tape.leaf(self.boundary_weight.clone()),
            boundary_bias: tape.leaf(self.boundary_bias.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundTemporal {
    pub convs: Vec<(Var, Var)>,
    pub cls_weight: Var,
    pub cls_bias: Var,
    pub boundary_weight: Var,
    pub boundary_bias: Var,
}

impl BoundTemporal {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(k, b) in &self.convs {
            out.push(k);
            out.push(b);
        }
        out.extend([self.cls_weight, self.cls_bias, self.boundary_weight, self.boundary_bias]);
        out
    }
}

#[derive(Debug, Clone)]
pub struct TemporalOutput {
    /// `N × (C+1)`, unmasked.
    pub class_logits: Var,
    /// `N × (C+1)`, zero past `valid_len`.
    pub class_probs: Var,
    /// `[N]`, unmasked.
    pub boundary_logits: Var,
    /// `[N]`, zero past `valid_len`.
    pub boundary_probs: Var,
}

fn column_mask(channels: usize, len: usize, valid: usize) -> Tensor {
    let mut data = vec![0.0; channels * len];
    for row in data.chunks_mut(len.max(1)) {
        for v in &mut row[..valid] {
            *v = 1.0;
        }
    }
    Tensor::new(vec![channels, len], data).expect("shape")
}

pub fn temporal_forward(tape: &mut Tape, graph: &TemporalGraph, params: &BoundTemporal) -> Result<TemporalOutput> {
    let n = graph.len;
    let valid = graph.valid_len;
    let mut h = tape.transpose(graph.features)?;
    for &(kernel, bias) in &params.convs {
        let ksize = tape.value(kernel).shape()[2];
        let y = tape.conv1d(h, kernel, 1, ksize / 2)?;
        let y = tape.add_channel_bias(y, bias)?;
        let y = tape.sigmoid(y);
        let channels = tape.value(y).shape()[0];
        let mask = tape.constant(column_mask(channels, n, valid));
        h = tape.mul(y, mask)?;
    }

    let logits_cn = tape.matmul(params.cls_weight, h)?;
    let logits_cn = tape.add_channel_bias(logits_cn, params.cls_bias)?;
    let k = tape.value(logits_cn).shape()[0];
    let probs_cn = tape.sigmoid(logits_cn);
    let mask = tape.constant(column_mask(k, n, valid));
    let probs_cn = tape.mul(probs_cn, mask)?;
    let class_logits = tape.transpose(logits_cn)?;
    let class_probs = tape.transpose(probs_cn)?;

    let b = tape.matmul(params.boundary_weight, h)?;
    let b = tape.add_channel_bias(b, params.boundary_bias)?;
    let boundary_logits = tape.reshape(b, &[n])?;
    let bp = tape.sigmoid(boundary_logits);
    let mask = tape.constant(Tensor::new(vec![n], column_mask(1, n, valid).into_data())?);
    let boundary_probs = tape.mul(bp, mask)?;

    Ok(TemporalOutput {
        class_logits,
        class_probs,
        boundary_logits,
        boundary_probs,
    })
}

/// Pre-defined contiguous anchor windows over a graph of length `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub len: usize,
    pub anchors: Vec<Interval>,
}

impl AnchorSet {
    pub fn count(&self) -> usize {
        self.anchors.len()
    }

    /// Binary mask of anchor `i` over the graph.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        let a = self.anchors[i];
        (0..self.len).map(|p| p >= a.start && p <= a.end).collect()
    }
}

/// Powers of two from 8 up to `n` (or just `n` when `n < 8`).
pub fn default_anchor_scales(n: usize) -> Vec<usize> {
    let mut scales = Vec::new();
    let mut s = 8;
    while s <= n {
        scales.push(s);
        s *= 2;
    }
    if scales.is_empty() && n > 0 {
        scales.push(n);
    }
    scales
}

/// Windows `[k·stride, k·stride + s − 1]` with `stride = max(1, s/2)` per
/// scale, scale-major. The last window of a scale is clipped to the graph
/// when the stride does not land exactly on the end. When more than `count`
/// windows exist, `count` of them are kept by uniform index striding.
pub fn generate_anchors(n: usize, scales: &[usize], count: usize) -> Result<AnchorSet> {
    if scales.is_empty() {
        return Err(Error::Config("anchor scales are empty".into()));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("anchor scales {scales:?} not strictly ascending")));
    }
    if scales[0] == 0 || scales[scales.len() - 1] > n {
        return Err(Error::Config(format!("anchor scales {scales:?} must lie in 1..={n}")));
    }
    if count < scales.len() {
        return Err(Error::Config(format!(
            "anchor count {count} smaller than the number of scales {}",
            scales.len()
        )));
    }
    let mut all = Vec::new();
    for &s in scales {
        let stride = (s / 2).max(1);
        let mut start = 0;
        while start < n {
            let end = (start + s - 1).min(n - 1);
            all.push(Interval::new(start, end));
            if end == n - 1 {
                break;
            }
            start += stride;
        }
    }
    let anchors = if all.len() > count {
        let total = all.len();
        (0..count).map(|i| all[i * total / count]).collect()
    } else {
        all
    };
    Ok(AnchorSet { len: n, anchors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMatch {
    /// Per ground-truth segment, `(anchor index, IoU)` of its best anchor.
    pub best_for_gt: Vec<(usize, f64)>,
    /// Per anchor, its highest IoU against any ground truth.
    pub max_iou: Vec<f64>,
    pub labels: Vec<AnchorLabel>,
    /// Per snippet, 1.0 inside any ground-truth segment.
    pub boundary_target: Vec<f64>,
}

impl AnchorMatch {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }
}

pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.3;

/// Labels anchors against ground truth: each segment's max-IoU anchor
/// (lowest index on ties) and every anchor with IoU ≥ 0.7 are positive,
/// anchors whose best IoU is below 0.3 negative, the rest ignored.
pub fn match_anchors(anchors: &AnchorSet, gts: &[Interval]) -> Result<AnchorMatch> {
    if anchors.anchors.is_empty() {
        return Err(Error::Contract("match_anchors needs at least one anchor".into()));
    }
    let count = anchors.count();
    let mut max_iou = vec![0.0f64; count];
    let mut best_for_gt = Vec::with_capacity(gts.len());
    for &g in gts {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &a) in anchors.anchors.iter().enumerate() {
            let iou = temporal_iou(a, g);
            if iou > best.1 {
                best = (i, iou);
            }
            if iou > max_iou[i] {
                max_iou[i] = iou;
            }
        }
        best_for_gt.push(best);
    }
    let mut labels: Vec<AnchorLabel> = max_iou
        .iter()
        .map(|&m| {
            if m >= POSITIVE_IOU {
                AnchorLabel::Positive
            } else if m < NEGATIVE_IOU {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            }
        })
        .collect();
    for &(i, _) in &best_for_gt {
        labels[i] = AnchorLabel::Positive;
    }
    let mut boundary_target = vec![0.0; anchors.len];
    for g in gts {
        for v in &mut boundary_target[g.start..=g.end.min(anchors.len.saturating_sub(1))] {
            *v = 1.0;
        }
    }
    Ok(AnchorMatch {
        best_for_gt,
        max_iou,
        labels,
        boundary_target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Same-class candidates overlapping a kept one by more than this IoU
    /// are suppressed.
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            nms_iou: 0.4,
            top_k: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!("nms_iou {} outside (0, 1]", self.nms_iou)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Actionness at or above which a snippet counts as inside an activity when
/// reading runs off the actionness vector.
pub const RUN_THRESHOLD: f64 = 0.5;

/// Per-snippet actionness: the mean of the boundary probability and one
/// minus the background probability, zero past `valid_len`.
pub fn actionness(class_probs: &Tensor, boundary_probs: &Tensor, valid_len: usize) -> Vec<f64> {
    let k = class_probs.shape()[1];
    let b = boundary_probs.data();
    (0..b.len())
        .map(|i| {
            if i < valid_len {
                0.5 * (b[i] + 1.0 - class_probs.at(i, k - 1))
            } else {
                0.0
            }
        })
        .collect()
}

/// Actionness score of one proposal window.
///
/// The mean probability inside the window, times the minimum inside, times
/// one minus the mean probability over the flanking context (half the window
/// length on each side, clipped to the valid range).
pub fn anchor_score(act: &[f64], window: Interval, valid_len: usize) -> f64 {
    let inner = &act[window.start..=window.end];
    let inside = inner.iter().sum::<f64>() / window.len() as f64;
    let floor = inner.iter().copied().fold(f64::INFINITY, f64::min);
    let flank = (window.len() / 2).max(1);
    let left = window.start.saturating_sub(flank)..window.start;
    let right = (window.end + 1)..(window.end + 1 + flank).min(valid_len);
    let n_ctx = left.len() + right.len();
    let contrast = if n_ctx == 0 {
        1.0
    } else {
        let ctx: f64 = act[left].iter().sum::<f64>() + act[right].iter().sum::<f64>();
        1.0 - ctx / n_ctx as f64
    };
    inside * floor * contrast
}

/// Maximal runs of snippets with actionness `>= RUN_THRESHOLD`
/// within the first `valid_len` positions.
pub fn actionness_runs(act: &[f64], valid_len: usize) -> Vec<Interval> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &p) in act[..valid_len].iter().enumerate() {
        match (p >= RUN_THRESHOLD, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(Interval::new(s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(Interval::new(s, valid_len - 1));
    }
    runs
}

/// Proposal windows for one chunk: every anchor starting inside the valid
/// range (clipped to it), followed by the actionness runs.
pub fn proposals(act: &[f64], anchors: &AnchorSet, valid_len: usize) -> Vec<Interval> {
    let mut out: Vec<Interval> = anchors
        .anchors
        .iter()
        .filter(|a| a.start < valid_len)
        .map(|a| Interval::new(a.start, a.end.min(valid_len - 1)))
        .collect();
    out.extend(actionness_runs(act, valid_len));
    out
}

/// A scored candidate before suppression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Index into [`proposals`].
    pub proposal: usize,
    pub segment: Segment,
}

/// Scores every (proposal, activity class) pair whose window has a positive
/// actionness score, ordered by descending score, then proposal index, then
/// class.
pub fn decode_candidates(
    class_probs: &Tensor,
    boundary_probs: &Tensor,
    anchors: &AnchorSet,
    valid_len: usize,
) -> Result<Vec<Candidate>> {
    let (n, k) = class_probs
        .dims2()
        .ok_or_else(|| Error::shape("decode", class_probs.shape(), boundary_probs.shape()))?;
    if boundary_probs.len() != n || anchors.len != n || valid_len > n || k < 2 {
        return Err(Error::shape("decode", class_probs.shape(), boundary_probs.shape()));
    }
    let num_classes = k - 1;
    let mut out = Vec::new();
    if valid_len == 0 {
        return Ok(out);
    }
    let b = actionness(class_probs, boundary_probs, valid_len);
    for (pi, w) in proposals(&b, anchors, valid_len).into_iter().enumerate() {
        let base = anchor_score(&b, w, valid_len);
        if !(base > 0.0) {
            continue;
        }
        for c in 0..num_classes {
            let mean_c: f64 = (w.start..=w.end).map(|p| class_probs.at(p, c)).sum::<f64>() / w.len() as f64;
            out.push(Candidate {
                proposal: pi,
                segment: Segment {
                    activity_class: c,
                    start_snippet: w.start,
                    end_snippet: w.end,
                    score: (base * mean_c).clamp(0.0, 1.0),
                },
            });
        }
    }
    sort_candidates(&mut out);
    Ok(out)
}

pub fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|x, y| {
        y.segment
            .score
            .total_cmp(&x.segment.score)
            .then(x.proposal.cmp(&y.proposal))
            .then(x.segment.activity_class.cmp(&y.segment.activity_class))
    });
}

/// Greedy class-wise non-maximum suppression over candidates already in
/// rank order; keeps at most `top_k`.
pub fn nms(candidates: &[Candidate], nms_iou: f64, top_k: usize) -> Vec<Segment> {
    let mut kept: Vec<Segment> = Vec::new();
    for c in candidates {
        if kept.len() == top_k {
            break;
        }
        let suppressed = kept.iter().any(|k| {
            k.activity_class == c.segment.activity_class && temporal_iou(k.interval(), c.segment.interval()) > nms_iou
        });
        if !suppressed {
            kept.push(c.segment);
        }
    }
    kept
}

/// Turns per-snippet probabilities into scored segments.
pub fn decode(
    class_probs: &Tensor,
    boundary_probs: &Tensor,
    anchors: &AnchorSet,
    valid_len: usize,
    config: &DecodeConfig,
) -> Result<Vec<Segment>> {
    config.validate()?;
    if valid_len == 0 {
        return Ok(Vec::new());
    }
    let candidates = decode_candidates(class_probs, boundary_probs, anchors, valid_len)?;
    Ok(nms(&candidates, config.nms_iou, config.top_k))
}
