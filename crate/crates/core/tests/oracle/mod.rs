//! Independent reference implementations and the randomised comparisons
//! built on them. Each `check_*` returns the largest deviation seen, or a
//! description of the first mismatch.

#![allow(dead_code)]

use std::collections::BTreeSet;

use compad_core::autodiff::{conv1d_forward, Tape};
use compad_core::data::{AgentTube, GroundTruthSegment, Snippet};
use compad_core::evaluation::{average_precision, Detection, GtInstance};
use compad_core::scene_graph::{sgat_forward, sgat_layer, AggMode, SceneGraph, SgatStackParams, Topology};
use compad_core::temporal::{
    decode, generate_anchors, match_anchors, temporal_forward, temporal_iou, AnchorLabel, AnchorSet, DecodeConfig,
    Interval, Segment, TemporalGraph, TemporalParams,
};
use compad_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<f64, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub fn check_matmul(seeds: u64) -> Check {
    for seed in 0..seeds {
        let mut r = rng(seed);
        let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = normal_vec(&mut r, m * k);
        let b = normal_vec(&mut r, k * n);
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::matrix(m, k, a.clone()).unwrap());
        let vb = tape.constant(Tensor::matrix(k, n, b.clone()).unwrap());
        let c = tape.matmul(va, vb).unwrap();
        if tape.value(c).data() != matmul_oracle(&a, &b, m, k, n).as_slice() {
            return Err(format!("seed {seed}: matmul {m}x{k}x{n} differs"));
        }
    }
    Ok(0.0)
}

/// Cross-correlation with zero padding, written with signed positions.
pub fn conv1d_oracle(
    x: &[f64],
    c_in: usize,
    len: usize,
    k: &[f64],
    c_out: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let len_out = (len + 2 * pad - ksize) / stride + 1;
    let mut y = vec![0.0; c_out * len_out];
    for o in 0..c_out {
        for l in 0..len_out {
            let mut total = 0.0;
            for c in 0..c_in {
                let mut acc = 0.0;
                for t in 0..ksize {
                    let p = (l * stride + t) as isize - pad as isize;
                    if p >= 0 && (p as usize) < len {
                        acc += k[(o * c_in + c) * ksize + t] * x[c * len + p as usize];
                    }
                }
                total += acc;
            }
            y[o * len_out + l] = total;
        }
    }
    y
}

pub fn check_conv1d(seeds: u64) -> Check {
    for seed in 0..seeds {
        let mut r = rng(seed);
        let c_in = r.random_range(1..4);
        let c_out = r.random_range(1..4);
        let ksize = r.random_range(1..6);
        let len = r.random_range(ksize..ksize + 8);
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=ksize / 2);
        let x = normal_vec(&mut r, c_in * len);
        let k = normal_vec(&mut r, c_out * c_in * ksize);
        let (y, _) = conv1d_forward(&x, &[c_in, len], &k, &[c_out, c_in, ksize], stride, pad).unwrap();
        if y != conv1d_oracle(&x, c_in, len, &k, c_out, ksize, stride, pad) {
            return Err(format!("seed {seed}: conv1d differs"));
        }
    }
    Ok(0.0)
}

pub fn random_snippet(r: &mut ChaCha8Rng, agents: usize, d: usize, agent_classes: u32) -> Snippet {
    Snippet {
        index: 0,
        scene_feature: normal_vec(r, d),
        agents: (0..agents)
            .map(|i| AgentTube {
                tube_id: i as u32,
                agent_class: r.random_range(0..agent_classes),
                feature: normal_vec(r, d),
                tube_length: 1,
            })
            .collect(),
    }
}

pub fn random_topology(r: &mut ChaCha8Rng) -> Topology {
    [Topology::Fully, Topology::Star, Topology::StarPlus][r.random_range(0..3)]
}

/// Whether node `j` feeds node `i` (self-loops included).
fn connected(classes: &[u32], topology: Topology, i: usize, j: usize) -> bool {
    if i == j || i == 0 || j == 0 {
        return true;
    }
    match topology {
        Topology::Fully => true,
        Topology::Star => false,
        Topology::StarPlus => classes[i - 1] == classes[j - 1],
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Dense attention layer: the full score matrix with `-inf` off the mask,
/// row softmax, per-head weighted sums. Returns the features (`m × width`)
/// and the per-head attention matrices.
pub fn dense_layer(
    x: &[Vec<f64>],
    classes: &[u32],
    topology: Topology,
    w1: &Tensor,
    attn: &Tensor,
    slope: f64,
    concat: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let m = x.len();
    let (d_in, d_out) = (w1.shape()[0], w1.shape()[1]);
    let heads = attn.shape()[1];
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|row| (0..d_out).map(|o| (0..d_in).map(|i| row[i] * w1.at(i, o)).sum()).collect())
        .collect();
    let mut outs = Vec::new();
    let mut alphas = Vec::new();
    for h in 0..heads {
        let mut alpha = vec![vec![0.0; m]; m];
        for i in 0..m {
            let e: Vec<f64> = (0..m)
                .map(|j| {
                    if !connected(classes, topology, i, j) {
                        return f64::NEG_INFINITY;
                    }
                    let s: f64 = (0..d_out).map(|o| attn.at(o, h) * z[i][o]).sum::<f64>()
                        + (0..d_out).map(|o| attn.at(d_out + o, h) * z[j][o]).sum::<f64>();
                    leaky(s, slope)
                })
                .collect();
            let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = ex.iter().sum();
            for j in 0..m {
                alpha[i][j] = ex[j] / sum;
            }
        }
        let out: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..d_out).map(|o| (0..m).map(|j| alpha[i][j] * z[j][o]).sum()).collect())
            .collect();
        outs.push(out);
        alphas.push(alpha);
    }
    let features = if concat {
        (0..m).map(|i| outs.iter().flat_map(|o| o[i].clone()).collect()).collect()
    } else {
        (0..m)
            .map(|i| (0..d_out).map(|o| outs.iter().map(|h| h[i][o]).sum::<f64>() / heads as f64).collect())
            .collect()
    };
    (features, alphas)
}

/// Dense forward through a whole attention stack and pooling.
pub fn dense_sgat(snippet: &Snippet, topology: Topology, p: &SgatStackParams, slope: f64) -> Vec<f64> {
    let classes: Vec<u32> = snippet.agents.iter().map(|a| a.agent_class).collect();
    let mut x: Vec<Vec<f64>> = std::iter::once(snippet.scene_feature.clone())
        .chain(snippet.agents.iter().map(|a| a.feature.clone()))
        .collect();
    for (i, l) in p.layers.iter().enumerate() {
        let concat = p.concat_last_layer && i + 1 == p.layers.len();
        x = dense_layer(&x, &classes, topology, &l.w1, &l.attn, slope, concat).0;
    }
    let width = x[0].len();
    let pooled: Vec<f64> = match p.agg_mode {
        AggMode::Aggregated => (0..width).map(|o| x.iter().map(|r| r[o]).sum::<f64>() / x.len() as f64).collect(),
        AggMode::Scene => x[0].clone(),
    };
    let d_scene = p.w2.shape()[1];
    (0..d_scene).map(|o| (0..width).map(|i| pooled[i] * p.w2.at(i, o)).sum()).collect()
}

pub fn check_sgat_layer(seeds: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(seed);
        let n = r.random_range(0..=6);
        let d_in = r.random_range(1..5);
        let d_out = r.random_range(1..5);
        let heads = r.random_range(1..4);
        let topology = random_topology(&mut r);
        let concat = r.random_bool(0.5);
        let slope = 0.2;
        let snippet = random_snippet(&mut r, n, d_in, 3);
        let graph = SceneGraph::from_snippet(&snippet, topology).unwrap();
        let w1 = Tensor::matrix(d_in, d_out, normal_vec(&mut r, d_in * d_out)).unwrap();
        let attn = Tensor::matrix(2 * d_out, heads, normal_vec(&mut r, 2 * d_out * heads)).unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(graph.node_features.clone());
        let vw = tape.constant(w1.clone());
        let va = tape.constant(attn.clone());
        let out = sgat_layer(&mut tape, x, &graph.attention_mask(), vw, va, slope, concat).unwrap();

        let rows: Vec<Vec<f64>> = (0..=n).map(|i| graph.node_features.row(i).to_vec()).collect();
        let classes: Vec<u32> = snippet.agents.iter().map(|a| a.agent_class).collect();
        let (feat, alphas) = dense_layer(&rows, &classes, topology, &w1, &attn, slope, concat);
        let flat: Vec<f64> = feat.concat();
        worst = worst.max(max_diff(tape.value(out.features).data(), &flat));
        for (h, a) in alphas.iter().enumerate() {
            worst = worst.max(max_diff(tape.value(out.attention[h]).data(), &a.concat()));
        }

        let layers = r.random_range(1..3);
        let head_list: Vec<usize> = (0..layers).map(|_| r.random_range(1..4)).collect();
        let agg = if r.random_bool(0.5) { AggMode::Aggregated } else { AggMode::Scene };
        let stack = SgatStackParams::init(&mut r, d_in, d_out, 3, &head_list, agg, concat).unwrap();
        let got = stack.forward(&graph, slope).unwrap();
        worst = worst.max(max_diff(got.data(), &dense_sgat(&snippet, topology, &stack, slope)));
        if worst > 1e-12 {
            return Err(format!("seed {seed}: attention differs from dense oracle by {worst:e}"));
        }
    }
    Ok(worst)
}

/// Row sums of every attention matrix over random graphs with 0..=10
/// agents under all three topologies.
pub fn check_attention_rows(graphs: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..graphs {
        let mut r = rng(10_000 + seed);
        let n = r.random_range(0..=10);
        let topology = [Topology::Fully, Topology::Star, Topology::StarPlus][(seed % 3) as usize];
        let d = r.random_range(1..6);
        let snippet = random_snippet(&mut r, n, d, 3);
        let graph = SceneGraph::from_snippet(&snippet, topology).unwrap();
        let heads: Vec<usize> = (0..r.random_range(1..3)).map(|_| r.random_range(1..5)).collect();
        let stack = SgatStackParams::init(&mut r, d, 4, 4, &heads, AggMode::Aggregated, false).unwrap();
        let mut tape = Tape::new();
        let bound = stack.bind(&mut tape);
        let out = sgat_forward(&mut tape, &graph, &bound, 0.2).unwrap();
        let mask = graph.attention_mask();
        let m = n + 1;
        for layer in &out.attention {
            for &a in layer {
                let a = tape.value(a);
                for i in 0..m {
                    let row = a.row(i);
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    if row.iter().zip(&mask[i * m..(i + 1) * m]).any(|(&v, &k)| !k && v != 0.0) {
                        return Err(format!("graph {seed}: attention leaks outside the mask"));
                    }
                }
            }
        }
        if worst > 1e-12 {
            return Err(format!("graph {seed}: attention row sum off by {worst:e}"));
        }
    }
    Ok(worst)
}

/// Aggregated-mode scene vectors under a random reordering of the agents.
pub fn check_permutation_invariance(graphs: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..graphs {
        let mut r = rng(20_000 + seed);
        let n = r.random_range(0..=10);
        let topology = [Topology::Fully, Topology::Star, Topology::StarPlus][(seed % 3) as usize];
        let d = r.random_range(1..6);
        let snippet = random_snippet(&mut r, n, d, 3);
        let heads: Vec<usize> = (0..r.random_range(1..3)).map(|_| r.random_range(1..5)).collect();
        let concat = r.random_bool(0.3);
        let stack = SgatStackParams::init(&mut r, d, 4, 4, &heads, AggMode::Aggregated, concat).unwrap();
        let mut permuted = snippet.clone();
        for i in (1..permuted.agents.len()).rev() {
            let j = r.random_range(0..=i);
            permuted.agents.swap(i, j);
        }
        let a = stack.forward(&SceneGraph::from_snippet(&snippet, topology).unwrap(), 0.2).unwrap();
        let b = stack.forward(&SceneGraph::from_snippet(&permuted, topology).unwrap(), 0.2).unwrap();
        worst = worst.max(max_diff(a.data(), b.data()));
        if worst > 1e-12 {
            return Err(format!("graph {seed}: permutation changed the output by {worst:e}"));
        }
    }
    Ok(worst)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Layer-by-layer temporal forward on plain vectors. `x` is `n × d`
/// (row-major). Returns `(class_probs n×(C+1), boundary_probs n)`.
pub fn temporal_oracle(x: &[f64], n: usize, valid: usize, p: &TemporalParams) -> (Vec<f64>, Vec<f64>) {
    let d = p.convs[0].kernel.shape()[1];
    let mut h: Vec<f64> = (0..d * n).map(|i| x[(i % n) * d + i / n]).collect();
    let mut c = d;
    for layer in &p.convs {
        let (c_out, _, k) = (layer.kernel.shape()[0], layer.kernel.shape()[1], layer.kernel.shape()[2]);
        let y = conv1d_oracle(&h, c, n, layer.kernel.data(), c_out, k, 1, k / 2);
        h = (0..c_out * n)
            .map(|i| {
                if i % n < valid {
                    sigmoid(y[i] + layer.bias.data()[i / n])
                } else {
                    0.0
                }
            })
            .collect();
        c = c_out;
    }
    let k = p.cls_weight.shape()[0];
    let mut cp = vec![0.0; n * k];
    let mut bp = vec![0.0; n];
    for t in 0..valid {
        for j in 0..k {
            let z: f64 = (0..c).map(|i| p.cls_weight.at(j, i) * h[i * n + t]).sum::<f64>() + p.cls_bias.data()[j];
            cp[t * k + j] = sigmoid(z);
        }
        let z: f64 = (0..c).map(|i| p.boundary_weight.at(0, i) * h[i * n + t]).sum::<f64>() + p.boundary_bias.data()[0];
        bp[t] = sigmoid(z);
    }
    (cp, bp)
}

pub fn check_temporal_forward(seeds: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(30_000 + seed);
        let n = r.random_range(1..=10);
        let valid = r.random_range(0..=n);
        let d = r.random_range(1..9);
        let classes = r.random_range(1..4);
        let kernel = [1, 3, 5][r.random_range(0..3)];
        let mut p = TemporalParams::init(&mut r, d, classes, kernel).unwrap();
        for b in [&mut p.cls_bias, &mut p.boundary_bias] {
            for v in b.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        let mut x = normal_vec(&mut r, n * d);
        for v in &mut x[valid * d..] {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let features = tape.constant(Tensor::matrix(n, d, x.clone()).unwrap());
        let bound = p.bind(&mut tape);
        let out = temporal_forward(&mut tape, &TemporalGraph { features, valid_len: valid, len: n }, &bound).unwrap();
        let (cp, bp) = temporal_oracle(&x, n, valid, &p);
        worst = worst.max(max_diff(tape.value(out.class_probs).data(), &cp));
        worst = worst.max(max_diff(tape.value(out.boundary_probs).data(), &bp));
        if worst > 1e-12 {
            return Err(format!("seed {seed}: temporal forward differs by {worst:e}"));
        }
    }
    Ok(worst)
}

/// IoU by counting snippets in explicit sets.
pub fn iou_oracle(a: Interval, b: Interval) -> f64 {
    let sa: BTreeSet<usize> = (a.start..=a.end).collect();
    let sb: BTreeSet<usize> = (b.start..=b.end).collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

/// Every pair of intervals inside `0..len`.
pub fn check_temporal_iou(len: usize) -> Check {
    let all: Vec<Interval> = (0..len).flat_map(|s| (s..len).map(move |e| Interval::new(s, e))).collect();
    for &a in &all {
        for &b in &all {
            let (got, want) = (temporal_iou(a, b), iou_oracle(a, b));
            if got != want {
                return Err(format!("{a:?} vs {b:?}: {got} != {want}"));
            }
        }
    }
    Ok(0.0)
}

pub fn random_interval(r: &mut ChaCha8Rng, n: usize) -> Interval {
    let s = r.random_range(0..n);
    Interval::new(s, r.random_range(s..n))
}

pub fn check_match_anchors(seeds: u64) -> Check {
    for seed in 0..seeds {
        let mut r = rng(40_000 + seed);
        let n = r.random_range(1..=12);
        let count = r.random_range(1..=10);
        let anchors = AnchorSet {
            len: n,
            anchors: (0..count).map(|_| random_interval(&mut r, n)).collect(),
        };
        let gts: Vec<Interval> = (0..r.random_range(0..4)).map(|_| random_interval(&mut r, n)).collect();
        let got = match_anchors(&anchors, &gts).unwrap();

        let table: Vec<Vec<f64>> = gts
            .iter()
            .map(|&g| anchors.anchors.iter().map(|&a| iou_oracle(a, g)).collect())
            .collect();
        let mut labels = Vec::new();
        for i in 0..count {
            let best = table.iter().map(|row| row[i]).fold(0.0, f64::max);
            let is_best_for_some = table.iter().any(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter().position(|&v| v == m) == Some(i)
            });
            labels.push(if best >= 0.7 || is_best_for_some {
                AnchorLabel::Positive
            } else if best < 0.3 {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            });
        }
        let mut target = vec![0.0; n];
        for g in &gts {
            for t in g.start..=g.end {
                target[t] = 1.0;
            }
        }
        if got.labels != labels || got.boundary_target != target {
            return Err(format!("seed {seed}: labels {:?} != {labels:?}", got.labels));
        }
        for (gi, row) in table.iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if got.best_for_gt[gi] != (row.iter().position(|&v| v == m).unwrap(), m) {
                return Err(format!("seed {seed}: best anchor for gt {gi} differs"));
            }
        }
    }
    Ok(0.0)
}

/// Windows per scale listed by their start positions: multiples of the
/// stride until one reaches the end, that one clipped.
pub fn anchor_oracle(n: usize, scales: &[usize]) -> Vec<Interval> {
    let mut out = Vec::new();
    for &s in scales {
        let stride = std::cmp::max(1, s / 2);
        let last_start = (0..n).step_by(stride).find(|&a| a + s >= n).unwrap();
        for a in (0..=last_start).step_by(stride) {
            out.push(Interval::new(a, std::cmp::min(a + s - 1, n - 1)));
        }
    }
    out
}

pub fn check_anchor_enumeration() -> Check {
    for n in 1..=64 {
        for count in [1usize, 3, 8, 1000] {
            let scales: Vec<usize> = [1, 2, 3, 5, 8, 13].iter().copied().filter(|&s| s <= n).collect();
            if count < scales.len() {
                continue;
            }
            let all = anchor_oracle(n, &scales);
            let want: Vec<Interval> = if all.len() > count {
                (0..count).map(|i| all[i * all.len() / count]).collect()
            } else {
                all
            };
            let got = generate_anchors(n, &scales, count).unwrap();
            if got.anchors != want {
                return Err(format!("n {n}, count {count}: anchors differ"));
            }
        }
    }
    Ok(0.0)
}

/// Reference decoder: actionness, proposals, scoring and an NMS solved by
/// enumerating keep-subsets per class.
pub fn decode_oracle(cp: &Tensor, bp: &Tensor, anchors: &AnchorSet, valid: usize, cfg: &DecodeConfig) -> Vec<Segment> {
    if valid == 0 {
        return Vec::new();
    }
    let k = cp.shape()[1];
    let act: Vec<f64> = (0..valid).map(|t| 0.5 * (bp.data()[t] + 1.0 - cp.at(t, k - 1))).collect();
    let mut props: Vec<Interval> = anchors
        .anchors
        .iter()
        .filter(|a| a.start < valid)
        .map(|a| Interval::new(a.start, a.end.min(valid - 1)))
        .collect();
    for s in 0..valid {
        for e in s..valid {
            let inside = (s..=e).all(|t| act[t] >= 0.5);
            let closed_left = s == 0 || act[s - 1] < 0.5;
            let closed_right = e + 1 == valid || act[e + 1] < 0.5;
            if inside && closed_left && closed_right {
                props.push(Interval::new(s, e));
            }
        }
    }
    let mut cands: Vec<(usize, Segment)> = Vec::new();
    for (pi, w) in props.iter().enumerate() {
        let len = w.len();
        let vals = &act[w.start..=w.end];
        let mean = vals.iter().sum::<f64>() / len as f64;
        let floor = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let f = std::cmp::max(1, len / 2);
        let left: Vec<f64> = (w.start.saturating_sub(f)..w.start).map(|t| act[t]).collect();
        let right: Vec<f64> = (w.end + 1..std::cmp::min(valid, w.end + 1 + f)).map(|t| act[t]).collect();
        let contrast = if left.is_empty() && right.is_empty() {
            1.0
        } else {
            1.0 - (left.iter().sum::<f64>() + right.iter().sum::<f64>()) / (left.len() + right.len()) as f64
        };
        let base = mean * floor * contrast;
        if base <= 0.0 {
            continue;
        }
        for c in 0..k - 1 {
            let mc = (w.start..=w.end).map(|t| cp.at(t, c)).sum::<f64>() / len as f64;
            cands.push((
                pi,
                Segment {
                    activity_class: c,
                    start_snippet: w.start,
                    end_snippet: w.end,
                    score: (base * mc).clamp(0.0, 1.0),
                },
            ));
        }
    }
    cands.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.activity_class.cmp(&b.1.activity_class))
    });
    let ranked: Vec<Segment> = cands.into_iter().map(|c| c.1).collect();

    let mut keep = vec![false; ranked.len()];
    for c in 0..k - 1 {
        let idx: Vec<usize> = (0..ranked.len()).filter(|&i| ranked[i].activity_class == c).collect();
        let overl = |a: usize, b: usize| temporal_iou(ranked[a].interval(), ranked[b].interval()) > cfg.nms_iou;
        let mut valid_sets = Vec::new();
        for mask in 0u64..(1u64 << idx.len()) {
            let inside = |p: usize| mask >> p & 1 == 1;
            let ok = (0..idx.len()).all(|p| {
                let blocked = (0..p).any(|q| inside(q) && overl(idx[q], idx[p]));
                inside(p) != blocked
            });
            if ok {
                valid_sets.push(mask);
            }
        }
        assert_eq!(valid_sets.len(), 1, "the NMS rule has exactly one fixed point");
        for (p, &i) in idx.iter().enumerate() {
            keep[i] = valid_sets[0] >> p & 1 == 1;
        }
    }
    ranked
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| s)
        .take(cfg.top_k)
        .collect()
}

fn level(r: &mut ChaCha8Rng, coarse: bool) -> f64 {
    if coarse {
        [0.0, 0.25, 0.5, 0.75, 1.0][r.random_range(0..5)]
    } else {
        r.random_range(0.0..1.0)
    }
}

pub fn check_decode(seeds: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(50_000 + seed);
        let n = r.random_range(2..=10);
        let valid = r.random_range(1..=n);
        let coarse = seed % 2 == 0;
        let classes = 2;
        let anchors = AnchorSet {
            len: n,
            anchors: (0..5).map(|_| random_interval(&mut r, n)).collect(),
        };
        let mut cp = vec![0.0; n * (classes + 1)];
        let mut bp = vec![0.0; n];
        for t in 0..valid {
            for c in 0..=classes {
                cp[t * (classes + 1) + c] = level(&mut r, coarse);
            }
            bp[t] = level(&mut r, coarse);
        }
        let cp = Tensor::matrix(n, classes + 1, cp).unwrap();
        let bp = Tensor::vector(bp);
        let cfg = DecodeConfig {
            nms_iou: [0.3, 0.4, 0.5, 0.7, 1.0][r.random_range(0..5)],
            top_k: r.random_range(1..=12),
        };
        let got = decode(&cp, &bp, &anchors, valid, &cfg).unwrap();
        let want = decode_oracle(&cp, &bp, &anchors, valid, &cfg);
        let same_shape = got.len() == want.len()
            && got.iter().zip(&want).all(|(a, b)| {
                a.activity_class == b.activity_class && a.start_snippet == b.start_snippet && a.end_snippet == b.end_snippet
            });
        if !same_shape {
            return Err(format!("seed {seed}: kept {got:?}, oracle {want:?}"));
        }
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a.score - b.score).abs());
        }
        if worst > 1e-12 {
            return Err(format!("seed {seed}: scores differ by {worst:e}"));
        }
    }
    Ok(worst)
}

/// Greedy matching replayed one detection at a time, then AP as the mean
/// over ground truth of the best precision at or beyond each hit.
pub fn ap_oracle(dets: &[Detection], gts: &[GtInstance], class: usize, tau: f64) -> Option<f64> {
    let n_gt = gts.iter().filter(|g| g.segment.activity_class == class).count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.segment.activity_class == class).collect();
    ranked.sort_by(|a, b| {
        b.segment
            .score
            .partial_cmp(&a.segment.score)
            .unwrap()
            .then(a.segment.start_snippet.cmp(&b.segment.start_snippet))
            .then(a.video_id.cmp(&b.video_id))
    });
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let mut hits = Vec::new();
    for d in &ranked {
        let options: Vec<(usize, f64)> = gts
            .iter()
            .enumerate()
            .filter(|(gi, g)| !used.contains(gi) && g.segment.activity_class == class && g.video_id == d.video_id)
            .map(|(gi, g)| {
                let gi_iv = Interval::new(g.segment.start_snippet, g.segment.end_snippet);
                (gi, iou_oracle(d.segment.interval(), gi_iv))
            })
            .collect();
        let best = options
            .iter()
            .fold(None::<(usize, f64)>, |acc, &(gi, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((gi, v)),
            });
        match best {
            Some((gi, v)) if v >= tau => {
                used.insert(gi);
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let total: f64 = (0..hits.len())
        .filter(|&k| hits[k])
        .map(|k| precision[k..].iter().cloned().fold(0.0, f64::max))
        .sum();
    Some(total / n_gt as f64)
}

pub fn check_average_precision(seeds: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(60_000 + seed);
        let n = 12;
        let videos = ["a", "b"];
        let dets: Vec<Detection> = (0..r.random_range(0..=10))
            .map(|_| {
                let iv = random_interval(&mut r, n);
                Detection {
                    video_id: videos[r.random_range(0..2)].into(),
                    segment: Segment {
                        activity_class: r.random_range(0..2),
                        start_snippet: iv.start,
                        end_snippet: iv.end,
                        score: (r.random_range(0..6) as f64) / 5.0,
                    },
                }
            })
            .collect();
        let gts: Vec<GtInstance> = (0..r.random_range(0..=4))
            .map(|_| {
                let iv = random_interval(&mut r, n);
                GtInstance {
                    video_id: videos[r.random_range(0..2)].into(),
                    segment: GroundTruthSegment::new(r.random_range(0..2), iv.start, iv.end),
                }
            })
            .collect();
        for class in 0..2 {
            for tau in [0.1, 0.3, 0.5, 0.7, 0.95] {
                let got = average_precision(&dets, &gts, class, tau);
                let want = ap_oracle(&dets, &gts, class, tau);
                match (got, want) {
                    (None, None) => {}
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    _ => return Err(format!("seed {seed}: AP presence differs for class {class}")),
                }
            }
        }
        if worst > 1e-12 {
            return Err(format!("seed {seed}: AP differs by {worst:e}"));
        }
    }
    Ok(worst)
}

/// `activity_loss` with unit positive weights against the textbook
/// `-[y ln σ(x) + (1-y) ln(1-σ(x))]`, averaged over valid cells.
pub fn check_activity_plain_bce(seeds: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(70_000 + seed);
        let (n, k) = (r.random_range(1..9), r.random_range(2..5));
        let valid = r.random_range(1..=n);
        let x: Vec<f64> = (0..n * k).map(|_| r.random_range(-6.0..6.0)).collect();
        let y: Vec<f64> = (0..n * k).map(|_| f64::from(r.random_bool(0.3) as u8)).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(n, k, x.clone()).unwrap());
        let loss = compad_core::training::activity_loss(&mut tape, l, &y, &vec![1.0; k], None, valid).unwrap();
        let mut total = 0.0;
        for i in 0..valid * k {
            let p = sigmoid(x[i]);
            total += -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
        }
        worst = worst.max((tape.value(loss).data()[0] - total / (valid * k) as f64).abs());
        if worst > 1e-12 {
            return Err(format!("seed {seed}: activity loss differs from plain BCE by {worst:e}"));
        }
    }
    Ok(worst)
}

/// Toy model and one prepared chunk (8 snippets, 8-dimensional features,
/// 2 classes, one attention layer with 2 heads, 4 anchors).
pub fn toy_chunk(seed: u64) -> (compad_core::model::Model, compad_core::training::PreparedChunk, Vec<f64>) {
    use compad_core::model::{Model, ModelConfig};
    use compad_core::synth::{synth_generate, SynthConfig};
    use compad_core::training::{positive_weights, prepare_chunks};
    let synth = SynthConfig {
        num_videos: 1,
        min_snippets: 8,
        max_snippets: 8,
        feature_dim: 8,
        num_classes: 2,
        num_agent_classes: 2,
        min_agents: 1,
        max_agents: 3,
        min_segments: 1,
        max_segments: 2,
        min_segment_len: 2,
        max_segment_len: 3,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&synth, seed).unwrap();
    let mut mc = ModelConfig::new(8, 2);
    mc.heads = vec![2];
    mc.hidden_dim = 8;
    mc.scene_dim = 8;
    mc.temporal_len = 8;
    mc.anchor_scales = Some(vec![2, 4, 8]);
    mc.anchor_count = 4;
    let model = Model::init(mc, seed).unwrap();
    let chunk = prepare_chunks(&model, &ds).unwrap().remove(0);
    let pw = positive_weights(std::slice::from_ref(&chunk.targets), 2);
    (model, chunk, pw)
}

/// Gradient of `λ·L_act + L_br` against `λ·∇L_act + ∇L_br` from separate
/// backward passes.
pub fn check_total_linearity(seeds: u64) -> Check {
    use compad_core::training::chunk_losses;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (model, chunk, pw) = toy_chunk(seed);
        let lambda = [0.5, 4.0, 128.0][seed as usize % 3];
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let (l_act, l_br, total) = chunk_losses(&mut tape, &model, &bound, &chunk, &pw, lambda).unwrap();
        let (g_t, g_a, g_b) = (
            tape.backward(total).unwrap(),
            tape.backward(l_act).unwrap(),
            tape.backward(l_br).unwrap(),
        );
        for v in bound.vars() {
            let (t, a, b) = (g_t.get_or_zeros(&tape, v), g_a.get_or_zeros(&tape, v), g_b.get_or_zeros(&tape, v));
            for i in 0..t.len() {
                worst = worst.max((t.data()[i] - (lambda * a.data()[i] + b.data()[i])).abs());
            }
        }
        if worst > 1e-10 {
            return Err(format!("seed {seed}: total-loss gradient off by {worst:e}"));
        }
    }
    Ok(worst)
}
