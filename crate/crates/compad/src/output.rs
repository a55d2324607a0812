//! Metrics CSV, segment JSON lines and evaluation result files.

use std::fmt::Write as _;

use compad_core::evaluation::{Detection, EvalResult};
use compad_core::training::EpochMetrics;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub const METRICS_HEADER: &str = "epoch,loss_act,loss_br,loss_total,map_avg";

pub fn metrics_row(m: &EpochMetrics) -> String {
    let map = m.map_avg.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{},{},{}", m.epoch, m.loss_act, m.loss_br, m.loss_total, map)
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&metrics_row(m));
        s.push('\n');
    }
    s
}

/// Converts snippet indices to seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBase {
    pub fps: f64,
    pub snippet_len: usize,
}

impl TimeBase {
    pub fn start_seconds(&self, snippet: usize) -> f64 {
        (snippet * self.snippet_len) as f64 / self.fps
    }

    /// End of the last frame of `snippet`.
    pub fn end_seconds(&self, snippet: usize) -> f64 {
        ((snippet + 1) * self.snippet_len) as f64 / self.fps
    }
}

#[derive(Debug, Serialize)]
struct SegmentRecord<'a> {
    video_id: &'a str,
    class: usize,
    class_name: &'a str,
    start_snippet: usize,
    end_snippet: usize,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    start_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    end_seconds: Option<f64>,
}

/// One JSON object per line, sorted by video id then descending score.
pub fn segments_jsonl(dets: &[Detection], class_names: &[String], time: Option<TimeBase>) -> String {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(b.segment.score.total_cmp(&a.segment.score))
            .then(a.segment.start_snippet.cmp(&b.segment.start_snippet))
            .then(a.segment.activity_class.cmp(&b.segment.activity_class))
    });
    let mut out = String::new();
    for d in sorted {
        let s = &d.segment;
        let rec = SegmentRecord {
            video_id: &d.video_id,
            class: s.activity_class,
            class_name: class_names.get(s.activity_class).map_or("", String::as_str),
            start_snippet: s.start_snippet,
            end_snippet: s.end_snippet,
            score: s.score,
            start_seconds: time.map(|t| t.start_seconds(s.start_snippet)),
            end_seconds: time.map(|t| t.end_seconds(s.end_snippet)),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    out
}

fn tau_key(t: f64) -> String {
    format!("{t}")
}

/// `{protocol, iou_thresholds, per_class: {class: {τ: ap}}, map: {τ: v}, avg_map}`.
pub fn eval_json(r: &EvalResult, class_names: &[String]) -> Value {
    let mut per_class = Map::new();
    for (c, aps) in r.per_class_ap.iter().enumerate() {
        if aps.iter().all(Option::is_none) {
            continue;
        }
        let row: Map<String, Value> = r
            .iou_thresholds
            .iter()
            .zip(aps)
            .map(|(&t, ap)| (tau_key(t), json!(ap)))
            .collect();
        let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        per_class.insert(name, Value::Object(row));
    }
    let map: Map<String, Value> = r
        .iou_thresholds
        .iter()
        .zip(&r.map)
        .map(|(&t, &v)| (tau_key(t), json!(v)))
        .collect();
    json!({
        "protocol": r.protocol,
        "iou_thresholds": r.iou_thresholds,
        "per_class": per_class,
        "map": map,
        "avg_map": r.average_map,
    })
}

/// Header plus one row: the mAP at each threshold, then the average.
pub fn eval_csv(r: &EvalResult) -> String {
    let mut s = String::from("protocol");
    for t in &r.iou_thresholds {
        write!(s, ",{t}").unwrap();
    }
    s.push_str(",avg\n");
    s.push_str(&r.protocol);
    for m in &r.map {
        write!(s, ",{m:.4}").unwrap();
    }
    writeln!(s, ",{:.4}", r.average_map).unwrap();
    s
}

/// Fixed-width table of mAP per threshold and the average.
pub fn eval_table(r: &EvalResult) -> String {
    let mut head = format!("{:<24}", "mAP@IoU");
    let mut row = format!("{:<24}", r.protocol);
    for (t, m) in r.iou_thresholds.iter().zip(&r.map) {
        write!(head, "{:>7}", format!("{t}")).unwrap();
        write!(row, "{m:>7.2}").unwrap();
    }
    write!(head, "{:>7}", "Avg").unwrap();
    write!(row, "{:>7.2}", r.average_map).unwrap();
    format!("{head}\n{row}\n")
}
