//! The full detector: attention stack, temporal network and anchors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, DEFAULT_LEAKY_SLOPE};
use crate::data::{chunk_video, VideoSample};
use crate::scene_graph::{sgat_forward, AggMode, BoundSgat, SceneGraph, SgatLayerParams, SgatStackParams, Topology};
use crate::temporal::{
    build_temporal_graph, decode, default_anchor_scales, generate_anchors, AnchorSet, BoundTemporal, ConvLayer,
    DecodeConfig, Segment, TemporalOutput, TemporalParams,
};
use crate::{Error, Result, Tensor};

/// Number of anchor masks per temporal graph unless configured otherwise.
pub const DEFAULT_ANCHOR_COUNT: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Activity classes, excluding background.
    pub num_classes: usize,
    pub topology: Topology,
    pub agg_mode: AggMode,
    /// Heads per attention layer; the layer count is `heads.len()`.
    pub heads: Vec<usize>,
    pub hidden_dim: usize,
    pub scene_dim: usize,
    pub concat_last_layer: bool,
    pub leaky_slope: f64,
    /// Fixed temporal graph length `N`.
    pub temporal_len: usize,
    pub kernel_size: usize,
    pub anchor_count: usize,
    /// Defaults to powers of two from 8 up to `temporal_len`.
    pub anchor_scales: Option<Vec<usize>>,
}

impl ModelConfig {
    /// Four attention layers with `{4, 4, C, C}` heads, 128 anchors,
    /// slope 0.2.
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            feature_dim,
            num_classes,
            topology: Topology::Fully,
            agg_mode: AggMode::Aggregated,
            heads: default_heads(num_classes),
            hidden_dim: 64,
            scene_dim: 64,
            concat_last_layer: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            temporal_len: 512,
            kernel_size: 3,
            anchor_count: DEFAULT_ANCHOR_COUNT,
            anchor_scales: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.scene_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("need at least one activity class".into());
        }
        if self.heads.is_empty() || self.heads.contains(&0) {
            return bad(format!("invalid head counts {:?}", self.heads));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside (0, 1)", self.leaky_slope));
        }
        if self.temporal_len == 0 {
            return bad("temporal length must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.anchor_count == 0 {
            return bad("anchor count must be positive".into());
        }
        Ok(())
    }

    pub fn resolved_anchor_scales(&self) -> Vec<usize> {
        self.anchor_scales
            .clone()
            .unwrap_or_else(|| default_anchor_scales(self.temporal_len))
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        generate_anchors(self.temporal_len, &self.resolved_anchor_scales(), self.anchor_count)
    }
}

pub fn default_heads(num_classes: usize) -> Vec<usize> {
    alloc::vec![4, 4, num_classes, num_classes]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub sgat: SgatStackParams,
    pub temporal: TemporalParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sgat = SgatStackParams::init(
            &mut rng,
            config.feature_dim,
            config.hidden_dim,
            config.scene_dim,
            &config.heads,
            config.agg_mode,
            config.concat_last_layer,
        )?;
        let temporal = TemporalParams::init(&mut rng, config.scene_dim, config.num_classes, config.kernel_size)?;
        Ok(ModelParams { sgat, temporal })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.sgat.tensors();
        out.extend(self.temporal.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.sgat.tensors_mut();
        out.extend(self.temporal.tensors_mut());
        out
    }

    /// Parameter names, in [`ModelParams::tensors`] order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.sgat.layers.len() {
            out.push(format!("sgat.layers.{i}.w1"));
            out.push(format!("sgat.layers.{i}.attn"));
        }
        out.push("sgat.w2".into());
        for i in 0..self.temporal.convs.len() {
            out.push(format!("temporal.convs.{i}.kernel"));
            out.push(format!("temporal.convs.{i}.bias"));
        }
        for n in ["cls.weight", "cls.bias", "boundary.weight", "boundary.bias"] {
            out.push(format!("temporal.{n}"));
        }
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    /// Rebuilds parameters from named blocks as written by
    /// [`ModelParams::named`]. Layer counts and widths come from the shapes.
    pub fn from_named(blocks: Vec<(String, Tensor)>, agg_mode: AggMode) -> Result<Self> {
        let mut map: alloc::collections::BTreeMap<String, Tensor> = blocks.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Data(format!("missing parameter block {name:?}")))
        };
        let mut layers = Vec::new();
        while let Ok(w1) = take(&format!("sgat.layers.{}.w1", layers.len())) {
            let attn = take(&format!("sgat.layers.{}.attn", layers.len()))?;
            layers.push(SgatLayerParams { w1, attn });
        }
        let w2 = take("sgat.w2")?;
        let mut convs = Vec::new();
        while let Ok(kernel) = take(&format!("temporal.convs.{}.kernel", convs.len())) {
            let bias = take(&format!("temporal.convs.{}.bias", convs.len()))?;
            convs.push(ConvLayer { kernel, bias });
        }
        let temporal = TemporalParams {
            convs,
            cls_weight: take("temporal.cls.weight")?,
            cls_bias: take("temporal.cls.bias")?,
            boundary_weight: take("temporal.boundary.weight")?,
            boundary_bias: take("temporal.boundary.bias")?,
        };
        if let Some(name) = map.keys().next() {
            return Err(Error::Data(format!("unexpected parameter block {name:?}")));
        }
        if layers.is_empty() {
            return Err(Error::Data("no attention layers in parameter set".into()));
        }
        let last = layers.last().unwrap();
        let concat_last_layer = w2.shape().first() != Some(&last.dims().1) && last.heads() > 1;
        let params = ModelParams {
            sgat: SgatStackParams {
                layers,
                w2,
                agg_mode,
                concat_last_layer,
            },
            temporal,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.sgat.validate()?;
        self.temporal.validate()?;
        if self.sgat.scene_dim() != self.temporal.input_dim() {
            return Err(Error::Config(format!(
                "scene width {} does not match temporal input {}",
                self.sgat.scene_dim(),
                self.temporal.input_dim()
            )));
        }
        Ok(())
    }

    /// Overwrites the shape-derived fields of `config` to match.
    pub fn sync_config(&self, config: &mut ModelConfig) {
        config.feature_dim = self.sgat.input_dim();
        config.heads = self.sgat.layers.iter().map(SgatLayerParams::heads).collect();
        config.hidden_dim = self.sgat.layers[0].dims().1;
        config.scene_dim = self.sgat.scene_dim();
        config.concat_last_layer = self.sgat.concat_last_layer;
        config.num_classes = self.temporal.num_outputs() - 1;
        config.kernel_size = self.temporal.convs[0].kernel.shape()[2];
    }

    /// Pairs existing tape variables, given in [`ModelParams::tensors`]
    /// order, with this parameter layout.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let n_sgat = 2 * self.sgat.layers.len() + 1;
        let n_temp = 2 * self.temporal.convs.len() + 4;
        if vars.len() != n_sgat + n_temp {
            return Err(Error::Contract(format!(
                "expected {} parameter variables, got {}",
                n_sgat + n_temp,
                vars.len()
            )));
        }
        let (sv, tv) = vars.split_at(n_sgat);
        let pairs = |v: &[Var]| v.chunks_exact(2).map(|p| (p[0], p[1])).collect::<Vec<_>>();
        let nc = 2 * self.temporal.convs.len();
        Ok(BoundModel {
            sgat: BoundSgat {
                layers: pairs(&sv[..n_sgat - 1]),
                w2: sv[n_sgat - 1],
                agg_mode: self.sgat.agg_mode,
                concat_last_layer: self.sgat.concat_last_layer,
            },
            temporal: BoundTemporal {
                convs: pairs(&tv[..nc]),
                cls_weight: tv[nc],
                cls_bias: tv[nc + 1],
                boundary_weight: tv[nc + 2],
                boundary_bias: tv[nc + 3],
            },
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            sgat: self.sgat.bind(tape),
            temporal: self.temporal.bind(tape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub sgat: BoundSgat,
    pub temporal: BoundTemporal,
}

impl BoundModel {
    /// Leaf variables in [`ModelParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.sgat.vars();
        v.extend(self.temporal.vars());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub anchors: AnchorSet,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(mut config: ModelConfig, mut params: ModelParams) -> Result<Self> {
        params.validate()?;
        params.sgat.agg_mode = config.agg_mode;
        params.sync_config(&mut config);
        config.validate()?;
        let anchors = config.anchors()?;
        Ok(Model {
            config,
            params,
            anchors,
        })
    }

    /// Scene graphs for every snippet of `video`.
    pub fn scene_graphs(&self, video: &VideoSample) -> Result<Vec<SceneGraph>> {
        video
            .snippets
            .iter()
            .map(|s| SceneGraph::from_snippet(s, self.config.topology))
            .collect()
    }

    /// Forward pass over at most `temporal_len` snippet graphs.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, graphs: &[SceneGraph]) -> Result<TemporalOutput> {
        let mut scenes = Vec::with_capacity(graphs.len());
        for g in graphs {
            if g.node_features.shape()[1] != self.config.feature_dim {
                return Err(Error::shape(
                    "Model::forward",
                    g.node_features.shape(),
                    &[self.config.feature_dim],
                ));
            }
            scenes.push(sgat_forward(tape, g, &bound.sgat, self.config.leaky_slope)?.scene);
        }
        let graph = build_temporal_graph(tape, &scenes, self.config.temporal_len, self.config.scene_dim)?;
        crate::temporal::temporal_forward(tape, &graph, &bound.temporal)
    }

    /// Probabilities for one chunk: `(class_probs N×(C+1), boundary_probs [N])`.
    pub fn probabilities(&self, graphs: &[SceneGraph]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, graphs)?;
        Ok((tape.value(out.class_probs).clone(), tape.value(out.boundary_probs).clone()))
    }

    /// Detections for a whole video in video snippet coordinates, sorted by
    /// descending score.
    pub fn predict(&self, video: &VideoSample, decode_config: &DecodeConfig) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        for chunk in chunk_video(video, self.config.temporal_len)? {
            if chunk.valid_len() == 0 {
                continue;
            }
            let graphs = self.scene_graphs(&chunk.sample)?;
            let (cp, bp) = self.probabilities(&graphs)?;
            for mut s in decode(&cp, &bp, &self.anchors, chunk.valid_len(), decode_config)? {
                s.start_snippet += chunk.offset;
                s.end_snippet += chunk.offset;
                out.push(s);
            }
        }
        out.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.start_snippet.cmp(&b.start_snippet))
                .then(a.end_snippet.cmp(&b.end_snippet))
                .then(a.activity_class.cmp(&b.activity_class))
        });
        Ok(out)
    }
}
