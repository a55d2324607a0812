//! Per-snippet scene graphs and the multi-head graph-attention stack.
//!
//! Node 0 is the scene; nodes `1..=n` are the snippet's agent tubes. Each
//! attention layer applies one shared linear map `W1`, scores every
//! neighbour `j` of node `i` (the node itself included) with
//! `LeakyReLU(aᵀ[z_i ‖ z_j])`, normalises the scores with a masked softmax
//! and averages the resulting weighted sums over heads. The stack's node
//! outputs are pooled (mean over nodes, or the scene node alone) and mapped
//! through `W2` to a fixed-width scene vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Snippet;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Every pair of nodes.
    Fully,
    /// Scene node to each agent.
    Star,
    /// Star plus agent pairs sharing an agent class.
    StarPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggMode {
    /// Mean over all node outputs.
    Aggregated,
    /// Scene node output only.
    Scene,
}

/// Directed edges `(src, dst)` for a snippet with `agent_classes.len()`
/// agents, both directions for every connected pair, sorted
/// lexicographically.
pub fn build_edges(agent_classes: &[u32], topology: Topology) -> Vec<(usize, usize)> {
    let n = agent_classes.len();
    let mut edges = Vec::new();
    for a in 0..=n {
        for b in 0..=n {
            if a == b {
                continue;
            }
            let connected = if a == 0 || b == 0 {
                true
            } else {
                match topology {
                    Topology::Fully => true,
                    Topology::Star => false,
                    Topology::StarPlus => agent_classes[a - 1] == agent_classes[b - 1],
                }
            };
            if connected {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Node features plus directed edges for one snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    /// `(n+1) × D_in`, row 0 is the scene.
    pub node_features: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub topology: Topology,
}

impl SceneGraph {
    pub fn from_snippet(snippet: &Snippet, topology: Topology) -> Result<Self> {
        let d = snippet.scene_feature.len();
        let mut data = Vec::with_capacity((snippet.agents.len() + 1) * d);
        data.extend_from_slice(&snippet.scene_feature);
        for a in &snippet.agents {
            if a.feature.len() != d {
                return Err(Error::shape("SceneGraph::from_snippet", &[d], &[a.feature.len()]));
            }
            data.extend_from_slice(&a.feature);
        }
        Ok(SceneGraph {
            node_features: Tensor::matrix(snippet.agents.len() + 1, d, data)?,
            edges: build_edges(&snippet.agent_classes(), topology),
            topology,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_nodes();
        if m == 0 {
            return Err(Error::Contract("scene graph needs the scene node".into()));
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for &(s, d) in &self.edges {
            if s == d || s >= m || d >= m || !seen.insert((s, d)) {
                return Err(Error::Contract(format!("invalid edge ({s}, {d}) for {m} nodes")));
            }
        }
        Ok(())
    }

    /// Row-major `m × m` mask: entry `(i, j)` is set when node `i` attends to
    /// node `j`, i.e. `i == j` or there is an edge `j → i`.
    pub fn attention_mask(&self) -> Vec<bool> {
        let m = self.num_nodes();
        let mut mask = vec![false; m * m];
        for i in 0..m {
            mask[i * m + i] = true;
        }
        for &(s, d) in &self.edges {
            mask[d * m + s] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgatLayerParams {
    /// `D_in × D_out`.
    pub w1: Tensor,
    /// `2·D_out × H`; column `h` is head `h`'s scoring vector, source half
    /// first.
    pub attn: Tensor,
}

impl SgatLayerParams {
    pub fn heads(&self) -> usize {
        self.attn.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w1.shape()[0], self.w1.shape()[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgatStackParams {
    pub layers: Vec<SgatLayerParams>,
    /// `D_last × D_scene`.
    pub w2: Tensor,
    pub agg_mode: AggMode,
    /// Concatenate (rather than average) the heads of the last layer.
    pub concat_last_layer: bool,
}

/// Uniform Xavier initialisation.
pub(crate) fn xavier<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl SgatStackParams {
    /// Builds a stack with `heads.len()` layers. The first maps `d_in` to
    /// `hidden`, the others `hidden` to `hidden`.
    pub fn init<R: Rng>(
        rng: &mut R,
        d_in: usize,
        hidden: usize,
        d_scene: usize,
        heads: &[usize],
        agg_mode: AggMode,
        concat_last_layer: bool,
    ) -> Result<Self> {
        if heads.is_empty() || heads.contains(&0) {
            return Err(Error::Config(format!("invalid head counts {heads:?}")));
        }
        if d_in == 0 || hidden == 0 || d_scene == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(heads.len());
        let mut width = d_in;
        for &h in heads {
            let w1 = xavier(rng, &[width, hidden], width, hidden);
            let attn = xavier(rng, &[2 * hidden, h], 2 * hidden, 1);
            layers.push(SgatLayerParams { w1, attn });
            width = hidden;
        }
        let last = Self::output_width(hidden, *heads.last().unwrap(), concat_last_layer);
        let w2 = xavier(rng, &[last, d_scene], last, d_scene);
        Ok(SgatStackParams {
            layers,
            w2,
            agg_mode,
            concat_last_layer,
        })
    }

    fn output_width(hidden: usize, last_heads: usize, concat: bool) -> usize {
        if concat {
            hidden * last_heads
        } else {
            hidden
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dims().0
    }

    pub fn scene_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Config("attention stack has no layers".into()))?;
        let mut width = first.dims().0;
        for (i, l) in self.layers.iter().enumerate() {
            let (din, dout) = l.w1.dims2().ok_or_else(|| Error::shape("sgat w1", l.w1.shape(), &[]))?;
            let (ar, h) = l.attn.dims2().ok_or_else(|| Error::shape("sgat attn", l.attn.shape(), &[]))?;
            if din != width || ar != 2 * dout || h == 0 {
                return Err(Error::Config(format!(
                    "attention layer {i} does not compose: w1 {:?}, attn {:?}, input width {width}",
                    l.w1.shape(),
                    l.attn.shape()
                )));
            }
            if !(l.w1.all_finite() && l.attn.all_finite()) {
                return Err(Error::NonFinite(format!("attention layer {i} parameters")));
            }
            width = if i + 1 == self.layers.len() {
                Self::output_width(dout, h, self.concat_last_layer)
            } else {
                dout
            };
        }
        if self.w2.dims2().map(|d| d.0) != Some(width) {
            return Err(Error::Config(format!(
                "w2 {:?} does not accept width {width}",
                self.w2.shape()
            )));
        }
        Ok(())
    }

    /// Tensors in a fixed order: per layer `w1`, `attn`; then `w2`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for l in &self.layers {
            out.push(&l.w1);
            out.push(&l.attn);
        }
        out.push(&self.w2);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w1);
            out.push(&mut l.attn);
        }
        out.push(&mut self.w2);
        out
    }

    /// Records the parameters as tape leaves (same order as
    /// [`SgatStackParams::tensors`]).
    pub fn bind(&self, tape: &mut Tape) -> BoundSgat {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.w1.clone()), tape.leaf(l.attn.clone())))
            .collect();
        BoundSgat {
            layers,
            w2: tape.leaf(self.w2.clone()),
            agg_mode: self.agg_mode,
            concat_last_layer: self.concat_last_layer,
        }
    }

    /// Plain forward pass returning the scene vector.
    pub fn forward(&self, graph: &SceneGraph, slope: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = sgat_forward(&mut tape, graph, &bound, slope)?;
        Ok(tape.value(out.scene).clone())
    }
}

/// [`SgatStackParams`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundSgat {
    pub layers: Vec<(Var, Var)>,
    pub w2: Var,
    pub agg_mode: AggMode,
    pub concat_last_layer: bool,
}

impl BoundSgat {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for &(w1, a) in &self.layers {
            out.push(w1);
            out.push(a);
        }
        out.push(self.w2);
        out
    }
}

/// Output of one attention layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `m × D_out` (or `m × H·D_out` when concatenating).
    pub features: Var,
    /// Per head, the `m × m` attention coefficients (row `i` = node `i`).
    pub attention: Vec<Var>,
}

/// One multi-head attention layer over `x[m × D_in]`.
///
/// `mask` is the `m × m` attention mask from [`SceneGraph::attention_mask`].
pub fn sgat_layer(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    w1: Var,
    attn: Var,
    slope: f64,
    concat_heads: bool,
) -> Result<LayerOutput> {
    let z = tape.matmul(x, w1)?;
    let (m, d_out) = tape.value(z).dims2().expect("matrix");
    let (ar, heads) = tape
        .value(attn)
        .dims2()
        .ok_or_else(|| Error::shape("sgat_layer", tape.value(attn).shape(), &[]))?;
    if ar != 2 * d_out || heads == 0 {
        return Err(Error::shape("sgat_layer", tape.value(attn).shape(), &[2 * d_out]));
    }
    if mask.len() != m * m {
        return Err(Error::shape("sgat_layer", &[mask.len()], &[m, m]));
    }
    let a_src = tape.slice_rows(attn, 0, d_out)?;
    let a_dst = tape.slice_rows(attn, d_out, 2 * d_out)?;
    let s_src = tape.matmul(z, a_src)?;
    let s_dst = tape.matmul(z, a_dst)?;

    let mut attention = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let e = tape.pair_scores(s_src, s_dst, h)?;
        let e = tape.leaky_relu(e, slope)?;
        let alpha = tape.masked_softmax(e, mask)?;
        outs.push(tape.matmul(alpha, z)?);
        attention.push(alpha);
    }
    let features = if concat_heads {
        tape.concat_cols(&outs)?
    } else {
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = tape.add(acc, o)?;
        }
        if heads == 1 {
            acc
        } else {
            tape.scale(acc, 1.0 / heads as f64)
        }
    };
    Ok(LayerOutput { features, attention })
}

/// Result of [`sgat_forward`].
#[derive(Debug, Clone)]
pub struct SgatOutput {
    /// `1 × D_scene`.
    pub scene: Var,
    /// Attention coefficients per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

/// Runs the attention stack and pools the nodes into one scene vector.
pub fn sgat_forward(tape: &mut Tape, graph: &SceneGraph, params: &BoundSgat, slope: f64) -> Result<SgatOutput> {
    graph.validate()?;
    let mask = graph.attention_mask();
    let mut x = tape.constant(graph.node_features.clone());
    let mut attention = Vec::with_capacity(params.layers.len());
    let last = params.layers.len().saturating_sub(1);
    for (i, &(w1, a)) in params.layers.iter().enumerate() {
        let out = sgat_layer(tape, x, &mask, w1, a, slope, params.concat_last_layer && i == last)?;
        x = out.features;
        attention.push(out.attention);
    }
    let pooled = match params.agg_mode {
        AggMode::Aggregated => tape.mean_rows(x)?,
        AggMode::Scene => tape.slice_rows(x, 0, 1)?,
    };
    let scene = tape.matmul(pooled, params.w2)?;
    Ok(SgatOutput { scene, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn star_edges() {
        assert_eq!(build_edges(&[0, 0], Topology::Star), [(0, 1), (0, 2), (1, 0), (2, 0)]);
    }

    #[test]
    fn fully_edges() {
        assert_eq!(build_edges(&[3, 4], Topology::Fully).len(), 6);
        assert!(build_edges(&[], Topology::Fully).is_empty());
    }

    #[test]
    fn star_plus_edges() {
        let mut expected = build_edges(&[5, 5, 7], Topology::Star);
        expected.extend([(1, 2), (2, 1)]);
        expected.sort();
        assert_eq!(build_edges(&[5, 5, 7], Topology::StarPlus), expected);
    }

    #[test]
    fn single_node_outputs_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SgatStackParams::init(&mut rng, 3, 2, 2, &[3], AggMode::Scene, false).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w1 = tape.constant(p.layers[0].w1.clone());
        let a = tape.constant(p.layers[0].attn.clone());
        let out = sgat_layer(&mut tape, xv, &[true], w1, a, 0.2, false).unwrap();
        let zv = tape.matmul(xv, w1).unwrap();
        assert!(tape.value(out.features).max_abs_diff(tape.value(zv)) < 1e-15);
        for alpha in out.attention {
            assert_eq!(tape.value(alpha).data(), &[1.0]);
        }
    }

    #[test]
    fn invalid_layer_composition_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = SgatStackParams::init(&mut rng, 4, 3, 2, &[2, 2], AggMode::Aggregated, false).unwrap();
        p.validate().unwrap();
        p.w2 = Tensor::zeros(&[4, 2]);
        assert!(p.validate().is_err());
        let p = SgatStackParams::init(&mut rng, 4, 3, 2, &[2, 5], AggMode::Aggregated, true).unwrap();
        assert_eq!(p.w2.shape(), &[15, 2]);
        p.validate().unwrap();
    }
}
