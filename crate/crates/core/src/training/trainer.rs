use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{activity_loss, boundary_loss, total_loss};
use super::targets::{activity_targets, boundary_targets, positive_weights, ChunkTargets};
use crate::autodiff::{grad_check, Tape, Var};
use crate::data::{chunk_video, Dataset};
use crate::evaluation::{gt_instances, mean_ap, Detection, EvalProtocol, EvalResult};
use crate::model::{BoundModel, Model, ModelConfig};
use crate::scene_graph::SceneGraph;
use crate::temporal::DecodeConfig;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Chunks per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Weight on the activity loss; defaults to the anchor count.
    pub lambda: Option<f64>,
    /// Per-class positive weights (length `C+1`); derived from the training
    /// split when absent.
    pub pos_weight: Option<Vec<f64>>,
    /// Frames per snippet; used only to convert snippet units to seconds.
    pub snippet_len: usize,
    pub decode: DecodeConfig,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            lambda: None,
            pos_weight: None,
            snippet_len: 16,
            decode: DecodeConfig::default(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(self.model.anchor_count as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decode.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.batch_size == 0 || self.snippet_len == 0 {
            return Err(Error::Config("batch size and snippet length must be positive".into()));
        }
        let l = self.lambda();
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("loss weight {l} must be positive")));
        }
        if let Some(p) = &self.pos_weight {
            if p.len() != self.model.num_classes + 1 {
                return Err(Error::Config(format!(
                    "{} positive weights for {} outputs",
                    p.len(),
                    self.model.num_classes + 1
                )));
            }
            if p.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                return Err(Error::Config(format!("positive weights {p:?} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss_act: f64,
    pub loss_br: f64,
    pub loss_total: f64,
    pub map_avg: Option<f64>,
}

/// Losses and parameter gradients of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStats {
    pub loss_act: f64,
    pub loss_br: f64,
    pub loss_total: f64,
    /// In [`crate::model::ModelParams::tensors`] order.
    pub grads: Vec<Tensor>,
}

/// Runs independent per-chunk jobs; results come back in job order.
pub trait BatchExecutor {
    fn run(&self, jobs: usize, job: &(dyn Fn(usize) -> Result<ChunkStats> + Sync)) -> Vec<Result<ChunkStats>>;
}

pub struct Sequential;

impl BatchExecutor for Sequential {
    fn run(&self, jobs: usize, job: &(dyn Fn(usize) -> Result<ChunkStats> + Sync)) -> Vec<Result<ChunkStats>> {
        (0..jobs).map(job).collect()
    }
}

pub trait TrainObserver {
    /// Called after every epoch with the updated model.
    fn on_epoch(&mut self, metrics: &EpochMetrics, model: &Model) -> Result<()>;
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {
    fn on_epoch(&mut self, _: &EpochMetrics, _: &Model) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub lambda: f64,
    pub pos_weight: Vec<f64>,
}

/// A training chunk with its graphs and targets built once.
#[derive(Debug, Clone)]
pub struct PreparedChunk {
    pub graphs: Vec<SceneGraph>,
    pub targets: ChunkTargets,
}

pub fn prepare_chunks(model: &Model, dataset: &Dataset) -> Result<Vec<PreparedChunk>> {
    let n = model.config.temporal_len;
    let mut out = Vec::new();
    for v in &dataset.videos {
        for chunk in chunk_video(v, n)? {
            if chunk.valid_len() == 0 {
                continue;
            }
            let graphs = model.scene_graphs(&chunk.sample)?;
            let activity = activity_targets(&chunk.sample, n, model.config.num_classes)?;
            let boundary = boundary_targets(&model.anchors, &chunk.sample)?.boundary_target;
            out.push(PreparedChunk {
                graphs,
                targets: ChunkTargets {
                    valid_len: chunk.valid_len(),
                    activity,
                    boundary,
                },
            });
        }
    }
    Ok(out)
}

/// Records `(L_act, L_br, L)` for one chunk.
pub fn chunk_losses(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundModel,
    chunk: &PreparedChunk,
    pos_weight: &[f64],
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    let out = model.forward(tape, bound, &chunk.graphs)?;
    let t = &chunk.targets;
    let l_act = activity_loss(tape, out.class_logits, &t.activity, pos_weight, None, t.valid_len)?;
    let l_br = boundary_loss(tape, out.boundary_probs, &t.boundary, None, t.valid_len)?;
    let total = total_loss(tape, l_act, l_br, lambda)?;
    Ok((l_act, l_br, total))
}

/// Forward, loss and backward for one chunk.
pub fn chunk_step(model: &Model, chunk: &PreparedChunk, pos_weight: &[f64], lambda: f64) -> Result<ChunkStats> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (l_act, l_br, total) = chunk_losses(&mut tape, model, &bound, chunk, pos_weight, lambda)?;
    let grads = tape.backward(total)?;
    Ok(ChunkStats {
        loss_act: tape.value(l_act).data()[0],
        loss_br: tape.value(l_br).data()[0],
        loss_total: tape.value(total).data()[0],
        grads: bound.vars().into_iter().map(|v| grads.get_or_zeros(&tape, v)).collect(),
    })
}

/// Largest relative error between the analytic gradient of the total chunk
/// loss and central differences, over every model parameter.
pub fn model_grad_check(
    model: &Model,
    chunk: &PreparedChunk,
    pos_weight: &[f64],
    lambda: f64,
    eps: f64,
) -> Result<f64> {
    let params: Vec<Tensor> = model.params.tensors().into_iter().cloned().collect();
    grad_check(
        |tape, vars| {
            let bound = model.params.bind_vars(vars)?;
            Ok(chunk_losses(tape, model, &bound, chunk, pos_weight, lambda)?.2)
        },
        &params,
        eps,
    )
}

/// Detections of `model` on every video, scored against its ground truth.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    protocol: &EvalProtocol,
    decode: &DecodeConfig,
) -> Result<EvalResult> {
    let mut dets = Vec::new();
    for v in &dataset.videos {
        for segment in model.predict(v, decode)? {
            dets.push(Detection {
                video_id: v.video_id.clone(),
                segment,
            });
        }
    }
    mean_ap(&dets, &gt_instances(dataset), model.config.num_classes, protocol)
}

fn diverged(epoch: usize, reason: String) -> Error {
    Error::Diverged { epoch, reason }
}

/// Trains a freshly initialised model on `dataset`.
///
/// Chunks are visited in a seeded shuffled order; gradients of a batch are
/// computed by `executor`, summed in chunk order and averaged before one
/// Adam step. Per-epoch metrics are mean chunk losses.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    heldout: Option<(&Dataset, &EvalProtocol)>,
    executor: &dyn BatchExecutor,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    if dataset.feature_dim != config.model.feature_dim {
        return Err(Error::Config(format!(
            "dataset feature width {} does not match model input {}",
            dataset.feature_dim, config.model.feature_dim
        )));
    }
    if dataset.num_activity_classes != config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} activity classes, model expects {}",
            dataset.num_activity_classes, config.model.num_classes
        )));
    }
    let mut model = Model::init(config.model.clone(), config.seed)?;
    let chunks = prepare_chunks(&model, dataset)?;
    if chunks.is_empty() {
        return Err(Error::Data("training set has no snippets".into()));
    }
    let lambda = config.lambda();
    let pos_weight = match &config.pos_weight {
        Some(p) => p.clone(),
        None => {
            let t: Vec<ChunkTargets> = chunks.iter().map(|c| c.targets.clone()).collect();
            positive_weights(&t, config.model.num_classes)
        }
    };
    let names = model.params.names();
    let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sa, mut sb, mut st) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let job = |j: usize| chunk_step(&model, &chunks[batch[j]], &pos_weight, lambda);
            let results = executor.run(batch.len(), &job);
            let mut acc: Option<Vec<Tensor>> = None;
            for r in results {
                let s = r?;
                if !s.loss_total.is_finite() {
                    return Err(diverged(epoch, format!("loss became {}", s.loss_total)));
                }
                sa += s.loss_act;
                sb += s.loss_br;
                st += s.loss_total;
                match &mut acc {
                    None => acc = Some(s.grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&s.grads) {
                            for (xv, gv) in x.data_mut().iter_mut().zip(g.data()) {
                                *xv += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.unwrap_or_default();
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let mut params = model.params.tensors_mut();
            adam.step(&mut params, &grads, &names).map_err(|e| match e {
                Error::NonFinite(m) => diverged(epoch, m),
                e => e,
            })?;
        }
        let k = chunks.len() as f64;
        let map_avg = match heldout {
            Some((ds, protocol)) if ds.videos.iter().any(|v| !v.ground_truth.is_empty()) => {
                Some(evaluate_model(&model, ds, protocol, &config.decode)?.average_map)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            loss_act: sa / k,
            loss_br: sb / k,
            loss_total: st / k,
            map_avg,
        };
        observer.on_epoch(&m, &model)?;
        history.push(m);
    }
    Ok(TrainOutcome {
        model,
        history,
        lambda,
        pos_weight,
    })
}
