//! Detection mAP at temporal IoU thresholds.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroundTruthSegment};
use crate::temporal::{temporal_iou, Segment};
use crate::{Error, Result};

/// A named set of IoU thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub name: String,
    pub iou_thresholds: Vec<f64>,
    /// Ground truth may overlap within a video.
    #[serde(default)]
    pub multi_label: bool,
}

impl EvalProtocol {
    pub fn road() -> Self {
        EvalProtocol {
            multi_label: true,
            ..Self::named("road", &[0.1, 0.2, 0.3, 0.4, 0.5])
        }
    }

    pub fn thumos14() -> Self {
        Self::named("thumos14", &[0.3, 0.4, 0.5, 0.6, 0.7])
    }

    pub fn activitynet13() -> Self {
        Self::named("activitynet13", &[0.5, 0.75, 0.95])
    }

    /// Ten thresholds `0.5, 0.55, …, 0.95`.
    pub fn activitynet13_official() -> Self {
        let t: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
        Self::named("activitynet13-official", &t)
    }

    pub fn custom(thresholds: &[f64]) -> Result<Self> {
        let p = Self::named("custom", thresholds);
        p.validate()?;
        Ok(p)
    }

    /// Looks up a preset by its command-line name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "road" => Ok(Self::road()),
            "thumos14" => Ok(Self::thumos14()),
            "activitynet13" => Ok(Self::activitynet13()),
            "activitynet13-official" => Ok(Self::activitynet13_official()),
            _ => Err(Error::Config(format!(
                "unknown protocol {name:?}; expected road, thumos14, activitynet13, activitynet13-official or custom"
            ))),
        }
    }

    fn named(name: &str, t: &[f64]) -> Self {
        EvalProtocol {
            name: name.into(),
            iou_thresholds: t.to_vec(),
            multi_label: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("protocol has no IoU thresholds".into()));
        }
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
            }
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "IoU thresholds {:?} not strictly increasing",
                self.iou_thresholds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub video_id: String,
    pub segment: GroundTruthSegment,
}

/// Every ground-truth segment of `dataset`, in video order.
pub fn gt_instances(dataset: &Dataset) -> Vec<GtInstance> {
    dataset
        .videos
        .iter()
        .flat_map(|v| {
            v.ground_truth.iter().map(|g| GtInstance {
                video_id: v.video_id.clone(),
                segment: *g,
            })
        })
        .collect()
}

/// Ranking order: descending score, then earlier start, then video id.
pub fn rank_detections(dets: &mut [&Detection]) {
    dets.sort_by(|a, b| {
        b.segment
            .score
            .total_cmp(&a.segment.score)
            .then(a.segment.start_snippet.cmp(&b.segment.start_snippet))
            .then(a.video_id.cmp(&b.video_id))
    });
}

/// Greedy matching of class-`class` detections, in rank order, to the
/// unmatched ground truth of the same class and video with the highest IoU.
///
/// Returns the ranked detections with the index into `gts` each one matched.
pub fn match_detections<'a>(
    detections: &'a [Detection],
    gts: &[GtInstance],
    class: usize,
    tau: f64,
) -> Vec<(&'a Detection, Option<usize>)> {
    let mut ranked: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.segment.activity_class == class)
        .collect();
    rank_detections(&mut ranked);
    let mut taken = vec![false; gts.len()];
    ranked
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.segment.activity_class != class || g.video_id != d.video_id {
                    continue;
                }
                let gi_iv = crate::temporal::Interval::new(g.segment.start_snippet, g.segment.end_snippet);
                let iou = temporal_iou(d.segment.interval(), gi_iv);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let hit = best.filter(|&(_, iou)| iou >= tau).map(|(gi, _)| gi);
            if let Some(gi) = hit {
                taken[gi] = true;
            }
            (d, hit)
        })
        .collect()
}

/// All-points interpolated AP from ranked hit flags against `n_gt`
/// positives.
pub fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// AP of one class at one threshold, or `None` when the class has no ground
/// truth.
pub fn average_precision(detections: &[Detection], gts: &[GtInstance], class: usize, tau: f64) -> Option<f64> {
    let n_gt = gts.iter().filter(|g| g.segment.activity_class == class).count();
    if n_gt == 0 {
        return None;
    }
    let hits: Vec<bool> = match_detections(detections, gts, class, tau)
        .iter()
        .map(|(_, m)| m.is_some())
        .collect();
    Some(ap_from_hits(&hits, n_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: String,
    pub iou_thresholds: Vec<f64>,
    /// `per_class_ap[c][t]`; `None` for classes without ground truth.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    /// mAP per threshold.
    pub map: Vec<f64>,
    pub average_map: f64,
}

/// mAP per threshold over classes with at least one ground-truth instance.
pub fn mean_ap(
    detections: &[Detection],
    gts: &[GtInstance],
    num_classes: usize,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    protocol.validate()?;
    if gts.is_empty() {
        return Err(Error::Data("cannot evaluate: no ground-truth segments".into()));
    }
    if let Some(g) = gts.iter().find(|g| g.segment.activity_class >= num_classes) {
        return Err(Error::Data(format!(
            "ground truth class {} out of range in video {:?}",
            g.segment.activity_class, g.video_id
        )));
    }
    let per_class_ap: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| {
            protocol
                .iou_thresholds
                .iter()
                .map(|&t| average_precision(detections, gts, c, t))
                .collect()
        })
        .collect();
    let map: Vec<f64> = (0..protocol.iou_thresholds.len())
        .map(|t| {
            let aps: Vec<f64> = per_class_ap.iter().filter_map(|c| c[t]).collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalResult {
        protocol: protocol.name.clone(),
        iou_thresholds: protocol.iou_thresholds.clone(),
        per_class_ap,
        map,
        average_map,
    })
}
