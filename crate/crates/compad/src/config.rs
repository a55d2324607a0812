//! Command-line flag groups, config-file merging and the resolved run
//! configuration echoed to `run_config.json`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use compad_core::evaluation::EvalProtocol;
use compad_core::model::{default_heads, ModelConfig};
use compad_core::scene_graph::{AggMode, Topology};
use compad_core::synth::SynthConfig;
use compad_core::temporal::DecodeConfig;
use compad_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "COMPAD_SEED";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyArg {
    Fully,
    Star,
    StarPlus,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::Fully => Topology::Fully,
            TopologyArg::Star => Topology::Star,
            TopologyArg::StarPlus => Topology::StarPlus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggArg {
    Aggregated,
    Scene,
}

impl From<AggArg> for AggMode {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Aggregated => AggMode::Aggregated,
            AggArg::Scene => AggMode::Scene,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolArg {
    Road,
    Thumos14,
    Activitynet13,
    Activitynet13Official,
    Custom,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CommonFlags {
    /// JSON file with default values for any flag (flags take precedence).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed; falls back to $COMPAD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-video work.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SynthFlags {
    #[arg(long)]
    pub videos: Option<usize>,
    /// Extra videos written to a separate held-out dataset.
    #[arg(long = "heldout-videos")]
    pub heldout_videos: Option<usize>,
    #[arg(long)]
    pub min_snippets: Option<usize>,
    #[arg(long)]
    pub max_snippets: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub agent_classes: Option<usize>,
    #[arg(long)]
    pub min_segment_len: Option<usize>,
    #[arg(long)]
    pub max_segment_len: Option<usize>,
    #[arg(long, value_parser = finite)]
    pub separation: Option<f64>,
    /// Let segments tile every video.
    #[arg(long)]
    #[serde(default)]
    pub no_background: bool,
    /// Frames per snippet.
    #[arg(long)]
    pub snippet_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Temporal graph length N.
    #[arg(long)]
    pub temporal_len: Option<usize>,
    #[arg(long, value_enum)]
    pub topology: Option<TopologyArg>,
    #[arg(long, value_enum)]
    pub agg: Option<AggArg>,
    /// Heads per attention layer, e.g. `4,4,3,3`.
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<usize>>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub scene_dim: Option<usize>,
    /// Concatenate the heads of the last attention layer.
    #[arg(long)]
    #[serde(default)]
    pub concat_last_layer: bool,
    #[arg(long, value_parser = finite)]
    pub leaky_slope: Option<f64>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    /// Number of anchor masks.
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub anchor_scales: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainFlags {
    #[arg(long, value_parser = finite)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight on the activity loss; defaults to the anchor count.
    #[arg(long, value_parser = finite)]
    pub lambda: Option<f64>,
    /// Per-class positive weights, `C+1` values.
    #[arg(long, value_parser = finite, value_delimiter = ',')]
    pub pos_weight: Option<Vec<f64>>,
    /// Frames per snippet (recorded with the run).
    #[arg(long)]
    pub snippet_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct DecodeFlags {
    #[arg(long, value_parser = finite)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ProtocolFlags {
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Thresholds for `--protocol custom`, e.g. `0.2,0.4`.
    #[arg(long, value_parser = finite, value_delimiter = ',')]
    pub iou_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TimeFlags {
    /// Also report boundaries in seconds.
    #[arg(long)]
    #[serde(default)]
    pub seconds: bool,
    #[arg(long, value_parser = finite)]
    pub fps: Option<f64>,
    /// Frames per snippet.
    #[arg(long, value_parser = finite)]
    pub snippet_len: Option<usize>,
}

/// Parses a flag value that must be a finite number.
pub fn finite(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} is not a finite number")),
        Err(e) => Err(e.to_string()),
    }
}

/// Overlays the flags that were given onto the matching keys of a JSON
/// config file. Absent options and unset switches do not override.
pub fn merge<T>(flags: &T, file: Option<&Value>) -> anyhow::Result<T>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let Value::Object(keys) = serde_json::to_value(T::default())? else {
        unreachable!("flag groups serialise to objects")
    };
    let file = match file {
        None => serde_json::Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => anyhow::bail!("config file must hold a JSON object"),
    };
    let Value::Object(given) = serde_json::to_value(flags)? else {
        unreachable!("flag groups serialise to objects")
    };
    let mut out = serde_json::Map::new();
    for k in keys.keys() {
        let flag = given.get(k).filter(|v| !v.is_null() && **v != Value::Bool(false));
        if let Some(v) = flag.or_else(|| file.get(k)) {
            out.insert(k.clone(), v.clone());
        }
    }
    Ok(serde_json::from_value(Value::Object(out))?)
}

pub fn read_config_file(path: Option<&Path>) -> anyhow::Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(Some(v))
}

pub fn resolve_seed(flag: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

pub fn synth_config(f: &SynthFlags) -> SynthConfig {
    let d = SynthConfig::default();
    SynthConfig {
        num_videos: f.videos.unwrap_or(d.num_videos) + f.heldout_videos.unwrap_or(0),
        min_snippets: f.min_snippets.unwrap_or(d.min_snippets),
        max_snippets: f.max_snippets.unwrap_or(d.max_snippets),
        feature_dim: f.feature_dim.unwrap_or(d.feature_dim),
        num_classes: f.classes.unwrap_or(d.num_classes),
        num_agent_classes: f.agent_classes.unwrap_or(d.num_agent_classes),
        min_segment_len: f.min_segment_len.unwrap_or(d.min_segment_len),
        max_segment_len: f.max_segment_len.unwrap_or(d.max_segment_len),
        class_separation: f.separation.unwrap_or(d.class_separation),
        background: !f.no_background,
        snippet_len: f.snippet_len.unwrap_or(d.snippet_len),
        ..d
    }
}

/// Model configuration from flags over `base` (or the defaults for the
/// given data shape).
pub fn model_config(f: &ModelFlags, base: Option<ModelConfig>, feature_dim: usize, num_classes: usize) -> ModelConfig {
    let mut m = base.unwrap_or_else(|| ModelConfig::new(feature_dim, num_classes));
    m.feature_dim = feature_dim;
    if m.num_classes != num_classes {
        m.heads = default_heads(num_classes);
        m.num_classes = num_classes;
    }
    if let Some(v) = f.temporal_len {
        m.temporal_len = v;
    }
    if let Some(v) = f.topology {
        m.topology = v.into();
    }
    if let Some(v) = f.agg {
        m.agg_mode = v.into();
    }
    if let Some(v) = &f.heads {
        m.heads = v.clone();
    }
    if let Some(v) = f.hidden_dim {
        m.hidden_dim = v;
    }
    if let Some(v) = f.scene_dim {
        m.scene_dim = v;
    }
    if f.concat_last_layer {
        m.concat_last_layer = true;
    }
    if let Some(v) = f.leaky_slope {
        m.leaky_slope = v;
    }
    if let Some(v) = f.kernel_size {
        m.kernel_size = v;
    }
    if let Some(v) = f.anchors {
        m.anchor_count = v;
    }
    if let Some(v) = &f.anchor_scales {
        m.anchor_scales = Some(v.clone());
    }
    m
}

pub fn decode_config(f: &DecodeFlags, base: Option<DecodeConfig>) -> DecodeConfig {
    let mut d = base.unwrap_or_default();
    if let Some(v) = f.nms_iou {
        d.nms_iou = v;
    }
    if let Some(v) = f.top_k {
        d.top_k = v;
    }
    d
}

pub fn train_config(f: &TrainFlags, model: ModelConfig, decode: DecodeConfig, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::new(model);
    if let Some(v) = f.lr {
        t.learning_rate = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    t.lambda = f.lambda;
    t.pos_weight = f.pos_weight.clone();
    if let Some(v) = f.snippet_len {
        t.snippet_len = v;
    }
    t.seed = seed;
    t.decode = decode;
    t
}

pub fn protocol(f: &ProtocolFlags, default: ProtocolArg) -> compad_core::Result<EvalProtocol> {
    let p = match f.protocol.unwrap_or(default) {
        ProtocolArg::Road => EvalProtocol::road(),
        ProtocolArg::Thumos14 => EvalProtocol::thumos14(),
        ProtocolArg::Activitynet13 => EvalProtocol::activitynet13(),
        ProtocolArg::Activitynet13Official => EvalProtocol::activitynet13_official(),
        ProtocolArg::Custom => {
            let t = f.iou_thresholds.clone().unwrap_or_default();
            return EvalProtocol::custom(&t);
        }
    };
    Ok(p)
}

/// The fully resolved configuration of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_videos: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Anchors actually generated (may be fewer than requested).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor_count_effective: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<EvalProtocol>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_base: Option<crate::output::TimeBase>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck_eps: Option<f64>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, threads: usize) -> Self {
        RunConfig {
            command: command.into(),
            seed,
            threads,
            dataset: None,
            heldout: None,
            checkpoint: None,
            out: None,
            synth: None,
            heldout_videos: None,
            train: None,
            anchor_count_effective: None,
            protocol: None,
            time_base: None,
            gradcheck_eps: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serialises");
        s.push('\n');
        s
    }
}
