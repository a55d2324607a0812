//! The `compad` command line.
//!
//! Exit codes: 0 on success, 1 on runtime or data failures, 2 on usage and
//! validation errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use compad_core::data::Dataset;
use compad_core::evaluation::{gt_instances, mean_ap, Detection, EvalResult};
use compad_core::model::{Model, ModelConfig};
use compad_core::synth::{synth_generate, SynthConfig};
use compad_core::temporal::DecodeConfig;
use compad_core::training::{
    model_grad_check, positive_weights, prepare_chunks, train, EpochMetrics, TrainConfig, TrainObserver,
};
use compad_core::Error as CoreError;
use serde_json::Value;

use crate::config::{self, *};
use crate::exec::{par_map, Threaded};
use crate::output::{self, TimeBase};
use crate::{cadf, checkpoint};

pub const CHECKPOINT_FILE: &str = "checkpoint.cadw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "compad",
    version,
    about = "Complex activity detection with scene-graph attention and temporal anchors",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset in CADF format.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset under an evaluation protocol.
    Eval(EvalArgs),
    /// Write detected segments as JSON lines.
    Infer(InferArgs),
    /// Compare analytic and numeric gradients on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub synth: SynthFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Training dataset (manifest or its directory).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Held-out dataset scored after every epoch.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[command(flatten)]
    pub time: TimeFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5, value_parser = config::finite)]
    pub eps: f64,
}

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<CoreError>() {
            Some(CoreError::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    v.as_ref().ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn existing(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("--{flag} {}: no such file or directory", path.display())))
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            f.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

struct Common {
    file: Option<Value>,
    out: Option<PathBuf>,
    seed: u64,
    threads: usize,
}

fn common(c: &CommonFlags) -> Result<Common, Failure> {
    let file = config::read_config_file(c.config.as_deref()).map_err(Failure::Usage)?;
    let c: CommonFlags = merge(c, file.as_ref()).map_err(Failure::Usage)?;
    let seed = resolve_seed(c.seed).map_err(Failure::Usage)?;
    let threads = c.threads.unwrap_or(1);
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    Ok(Common {
        file,
        out: c.out,
        seed,
        threads,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    fs::write(path, bytes).with_context(|| path.display().to_string())?;
    Ok(())
}

fn write_run_config(out: &Path, rc: &RunConfig) -> CmdResult {
    write(&out.join(RUN_CONFIG_FILE), rc.to_json())
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    cadf::load_dataset(path)
        .with_context(|| format!("loading dataset {}", path.display()))
        .map_err(Failure::Runtime)
}

/// The training run configuration stored next to a checkpoint, if any.
fn sibling_train_config(ckpt: &Path) -> Option<TrainConfig> {
    let path = ckpt.parent()?.join(RUN_CONFIG_FILE);
    let text = fs::read_to_string(path).ok()?;
    let rc: RunConfig = serde_json::from_str(&text).ok()?;
    rc.train
}

pub fn cmd_synth(a: SynthArgs) -> CmdResult {
    let c = common(&a.common)?;
    let out = required(&c.out, "out")?;
    let f: SynthFlags = merge(&a.synth, c.file.as_ref()).map_err(Failure::Usage)?;
    let cfg = synth_config(&f);
    cfg.validate()?;
    let ds = synth_generate(&cfg, c.seed)?;
    let held = f.heldout_videos.unwrap_or(0);
    if held > 0 {
        let cut = ds.videos.len() - held;
        let mut train_ds = ds.clone();
        let mut held_ds = ds;
        train_ds.videos.truncate(cut);
        held_ds.videos.drain(..cut);
        save(&train_ds, &out.join("train"))?;
        save(&held_ds, &out.join("heldout"))?;
        println!(
            "wrote {} training videos to {} and {held} held-out videos to {}",
            cut,
            out.join("train").display(),
            out.join("heldout").display()
        );
    } else {
        save(&ds, out)?;
        println!("wrote {} videos to {}", ds.videos.len(), out.display());
    }
    let mut rc = RunConfig::new("synth", c.seed, c.threads);
    rc.out = Some(out.clone());
    rc.synth = Some(cfg);
    rc.heldout_videos = Some(held);
    write_run_config(out, &rc)
}

fn save(ds: &Dataset, dir: &Path) -> CmdResult {
    cadf::save_dataset(ds, dir)
        .with_context(|| format!("writing dataset to {}", dir.display()))
        .map_err(Failure::Runtime)
}

struct CsvObserver {
    out: PathBuf,
    rows: Vec<EpochMetrics>,
}

impl TrainObserver for CsvObserver {
    fn on_epoch(&mut self, m: &EpochMetrics, model: &Model) -> compad_core::Result<()> {
        let io = |e: &dyn std::fmt::Display| CoreError::Data(e.to_string());
        checkpoint::save(&model.params, &self.out.join(CHECKPOINT_FILE)).map_err(|e| io(&e))?;
        self.rows.push(*m);
        fs::write(self.out.join(METRICS_FILE), output::metrics_csv(&self.rows)).map_err(|e| io(&e))?;
        let map = m.map_avg.map(|v| format!(" map_avg {v:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {:>3}  loss {:.6}  act {:.6}  br {:.6}{map}",
            m.epoch, m.loss_total, m.loss_act, m.loss_br
        );
        Ok(())
    }
}

pub fn cmd_train(a: TrainArgs) -> CmdResult {
    let c = common(&a.common)?;
    let out = required(&c.out, "out")?.clone();
    let dataset_path = required(&a.dataset, "dataset")?.clone();
    let mf: ModelFlags = merge(&a.model, c.file.as_ref()).map_err(Failure::Usage)?;
    let tf: TrainFlags = merge(&a.train, c.file.as_ref()).map_err(Failure::Usage)?;
    let df: DecodeFlags = merge(&a.decode, c.file.as_ref()).map_err(Failure::Usage)?;
    let pf: ProtocolFlags = merge(&a.protocol, c.file.as_ref()).map_err(Failure::Usage)?;
    let protocol = config::protocol(&pf, ProtocolArg::Thumos14)?;

    let ds = load(&dataset_path)?;
    let heldout = a.heldout.as_deref().map(load).transpose()?;
    let model = model_config(&mf, None, ds.feature_dim, ds.num_activity_classes);
    let tc = train_config(&tf, model, decode_config(&df, None), c.seed);
    tc.validate()?;

    let mut rc = RunConfig::new("train", c.seed, c.threads);
    rc.dataset = Some(dataset_path);
    rc.heldout = a.heldout.clone();
    rc.out = Some(out.clone());
    rc.anchor_count_effective = Some(tc.model.anchors()?.count());
    rc.train = Some(tc.clone());
    rc.protocol = Some(protocol.clone());
    write_run_config(&out, &rc)?;

    let mut obs = CsvObserver {
        out: out.clone(),
        rows: Vec::new(),
    };
    let exec = Threaded { threads: c.threads };
    let held = heldout.as_ref().map(|h| (h, &protocol));
    match train(&ds, &tc, held, &exec, &mut obs) {
        Ok(outcome) => {
            println!(
                "trained {} epochs; checkpoint {}",
                outcome.history.len(),
                out.join(CHECKPOINT_FILE).display()
            );
            Ok(())
        }
        Err(e @ CoreError::Diverged { .. }) => Err(Failure::Runtime(anyhow!(
            "{e}; last good checkpoint kept at {}",
            out.join(CHECKPOINT_FILE).display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Loads a checkpoint and reconciles it with the dataset it will run on.
fn load_model(ckpt: &Path, mf: &ModelFlags, ds: &Dataset) -> Result<(Model, Option<TrainConfig>), Failure> {
    let base = sibling_train_config(ckpt);
    let mc = model_config(
        mf,
        base.as_ref().map(|t| t.model.clone()),
        ds.feature_dim,
        ds.num_activity_classes,
    );
    let params = checkpoint::load(ckpt, mc.agg_mode)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))
        .map_err(Failure::Runtime)?;
    let model = Model::from_params(mc, params).map_err(|e| Failure::Runtime(e.into()))?;
    if model.config.num_classes != ds.num_activity_classes {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint predicts {} activity classes but the dataset has {}",
            model.config.num_classes,
            ds.num_activity_classes
        )));
    }
    if model.config.feature_dim != ds.feature_dim {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint expects {}-dimensional features but the dataset has {}",
            model.config.feature_dim,
            ds.feature_dim
        )));
    }
    Ok((model, base))
}

/// Detections for every video of `ds`, in video order.
pub fn detect(model: &Model, ds: &Dataset, decode: &DecodeConfig, threads: usize) -> compad_core::Result<Vec<Detection>> {
    let per_video = par_map(threads, ds.videos.len(), |i| model.predict(&ds.videos[i], decode));
    let mut dets = Vec::new();
    for (v, segs) in ds.videos.iter().zip(per_video) {
        dets.extend(segs?.into_iter().map(|segment| Detection {
            video_id: v.video_id.clone(),
            segment,
        }));
    }
    Ok(dets)
}

pub fn cmd_eval(a: EvalArgs) -> CmdResult {
    let c = common(&a.common)?;
    let out = required(&c.out, "out")?.clone();
    let ckpt = required(&a.checkpoint, "checkpoint")?.clone();
    existing(&ckpt, "checkpoint")?;
    let dataset_path = required(&a.dataset, "dataset")?.clone();
    let mf: ModelFlags = merge(&a.model, c.file.as_ref()).map_err(Failure::Usage)?;
    let df: DecodeFlags = merge(&a.decode, c.file.as_ref()).map_err(Failure::Usage)?;
    let pf: ProtocolFlags = merge(&a.protocol, c.file.as_ref()).map_err(Failure::Usage)?;
    let protocol = config::protocol(&pf, ProtocolArg::Thumos14)?;

    let ds = load(&dataset_path)?;
    let (model, base) = load_model(&ckpt, &mf, &ds)?;
    let decode = decode_config(&df, base.as_ref().map(|t| t.decode));
    decode.validate()?;

    let mut rc = RunConfig::new("eval", c.seed, c.threads);
    rc.dataset = Some(dataset_path);
    rc.checkpoint = Some(ckpt);
    rc.out = Some(out.clone());
    rc.anchor_count_effective = Some(model.anchors.count());
    let mut tc = base.unwrap_or_else(|| TrainConfig::new(model.config.clone()));
    tc.model = model.config.clone();
    tc.decode = decode;
    rc.train = Some(tc);
    rc.protocol = Some(protocol.clone());
    write_run_config(&out, &rc)?;

    let dets = detect(&model, &ds, &decode, c.threads)?;
    let result = evaluate(&dets, &ds, &protocol)?;
    let json = output::eval_json(&result, &ds.activity_class_names);
    let mut text = serde_json::to_string_pretty(&json).expect("json");
    text.push('\n');
    write(&out.join(EVAL_JSON_FILE), text)?;
    write(&out.join(EVAL_CSV_FILE), output::eval_csv(&result))?;
    print!("{}", output::eval_table(&result));
    Ok(())
}

fn evaluate(
    dets: &[Detection],
    ds: &Dataset,
    protocol: &compad_core::evaluation::EvalProtocol,
) -> Result<EvalResult, Failure> {
    mean_ap(dets, &gt_instances(ds), ds.num_activity_classes, protocol).map_err(|e| Failure::Runtime(e.into()))
}

pub fn cmd_infer(a: InferArgs) -> CmdResult {
    let c = common(&a.common)?;
    let out = required(&c.out, "out")?.clone();
    let ckpt = required(&a.checkpoint, "checkpoint")?.clone();
    existing(&ckpt, "checkpoint")?;
    let dataset_path = required(&a.dataset, "dataset")?.clone();
    let mf: ModelFlags = merge(&a.model, c.file.as_ref()).map_err(Failure::Usage)?;
    let df: DecodeFlags = merge(&a.decode, c.file.as_ref()).map_err(Failure::Usage)?;
    let tf: TimeFlags = merge(&a.time, c.file.as_ref()).map_err(Failure::Usage)?;

    let ds = load(&dataset_path)?;
    let (model, base) = load_model(&ckpt, &mf, &ds)?;
    let decode = decode_config(&df, base.as_ref().map(|t| t.decode));
    decode.validate()?;
    let time = if tf.seconds {
        let fps = *required(&tf.fps, "fps")?;
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(usage(format!("--fps {fps} must be positive")));
        }
        let snippet_len = tf
            .snippet_len
            .or(base.as_ref().map(|t| t.snippet_len))
            .unwrap_or(SynthConfig::default().snippet_len);
        if snippet_len == 0 {
            return Err(usage("--snippet-len must be positive"));
        }
        Some(TimeBase { fps, snippet_len })
    } else {
        None
    };

    let mut rc = RunConfig::new("infer", c.seed, c.threads);
    rc.dataset = Some(dataset_path);
    rc.checkpoint = Some(ckpt);
    rc.out = Some(out.clone());
    rc.anchor_count_effective = Some(model.anchors.count());
    let mut tc = base.unwrap_or_else(|| TrainConfig::new(model.config.clone()));
    tc.model = model.config.clone();
    tc.decode = decode;
    rc.train = Some(tc);
    rc.time_base = time;
    write_run_config(&out, &rc)?;

    let dets = detect(&model, &ds, &decode, c.threads)?;
    write(
        &out.join(SEGMENTS_FILE),
        output::segments_jsonl(&dets, &ds.activity_class_names, time),
    )?;
    println!("wrote {} segments to {}", dets.len(), out.join(SEGMENTS_FILE).display());
    Ok(())
}

/// Model and data shape used by `gradcheck`: 8 snippets of 8-dimensional
/// features, 2 classes, one attention layer with 2 heads, 4 anchors.
pub fn gradcheck_setup() -> (SynthConfig, ModelConfig) {
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
    let mut model = ModelConfig::new(8, 2);
    model.heads = vec![2];
    model.hidden_dim = 8;
    model.scene_dim = 8;
    model.temporal_len = 8;
    model.anchor_scales = Some(vec![2, 4, 8]);
    model.anchor_count = 4;
    (synth, model)
}

/// Maximum relative gradient error of the full training loss on the toy
/// setup.
pub fn run_gradcheck(seed: u64, eps: f64) -> compad_core::Result<f64> {
    let (synth, mc) = gradcheck_setup();
    let ds = synth_generate(&synth, seed)?;
    let model = Model::init(mc.clone(), seed)?;
    let chunks = prepare_chunks(&model, &ds)?;
    let targets: Vec<_> = chunks.iter().map(|c| c.targets.clone()).collect();
    let pw = positive_weights(&targets, mc.num_classes);
    model_grad_check(&model, &chunks[0], &pw, mc.anchor_count as f64, eps)
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let c = common(&a.common)?;
    let start = std::time::Instant::now();
    let err = run_gradcheck(c.seed, a.eps)?;
    if let Some(out) = &c.out {
        let mut rc = RunConfig::new("gradcheck", c.seed, c.threads);
        rc.out = Some(out.clone());
        rc.train = Some(TrainConfig::new(gradcheck_setup().1));
        rc.gradcheck_eps = Some(a.eps);
        write_run_config(out, &rc)?;
    }
    let ok = err < GRADCHECK_TOLERANCE;
    println!(
        "gradcheck: max relative error {err:.3e} (tolerance {GRADCHECK_TOLERANCE:e}, eps {:e}) in {:.2?}: {}",
        a.eps,
        start.elapsed(),
        if ok { "PASS" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("gradient check failed")))
    }
}
