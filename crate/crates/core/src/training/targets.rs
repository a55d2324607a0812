use alloc::vec;
use alloc::vec::Vec;

use crate::data::VideoSample;
use crate::temporal::{match_anchors, AnchorMatch, AnchorSet, Interval};
use crate::{Error, Result};

/// Per-snippet activity targets, `n × (C+1)` row-major.
///
/// Snippet `i` gets `y[i][c] = 1` for every segment of class `c` covering
/// it, and the background column `C` when no segment does. Rows past the
/// chunk's real length stay zero.
pub fn activity_targets(sample: &VideoSample, n: usize, num_classes: usize) -> Result<Vec<f64>> {
    let k = num_classes + 1;
    let len = sample.len();
    if len > n {
        return Err(Error::Contract(alloc::format!(
            "chunk of {len} snippets exceeds temporal length {n}"
        )));
    }
    let mut y = vec![0.0; n * k];
    let mut covered = vec![false; len];
    for g in &sample.ground_truth {
        if g.activity_class >= num_classes || g.end_snippet >= len || g.start_snippet > g.end_snippet {
            return Err(Error::Data(alloc::format!("invalid ground truth {g:?}")));
        }
        for i in g.start_snippet..=g.end_snippet {
            y[i * k + g.activity_class] = 1.0;
            covered[i] = true;
        }
    }
    for (i, c) in covered.iter().enumerate() {
        if !c {
            y[i * k + num_classes] = 1.0;
        }
    }
    Ok(y)
}

/// Anchor labels and the per-snippet boundary target for one chunk.
pub fn boundary_targets(anchors: &AnchorSet, sample: &VideoSample) -> Result<AnchorMatch> {
    let gts: Vec<Interval> = sample
        .ground_truth
        .iter()
        .map(|g| Interval::new(g.start_snippet, g.end_snippet))
        .collect();
    match_anchors(anchors, &gts)
}

/// Precomputed per-chunk training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTargets {
    pub valid_len: usize,
    pub activity: Vec<f64>,
    pub boundary: Vec<f64>,
}

/// `p_c = #neg / #pos` over the valid rows of all targets, clamped to
/// `[1, 100]`; classes without positives get 1.
pub fn positive_weights(targets: &[ChunkTargets], num_classes: usize) -> Vec<f64> {
    let k = num_classes + 1;
    let mut pos = vec![0usize; k];
    let mut total = 0usize;
    for t in targets {
        total += t.valid_len;
        for row in t.activity.chunks(k).take(t.valid_len) {
            for (c, &y) in row.iter().enumerate() {
                if y > 0.5 {
                    pos[c] += 1;
                }
            }
        }
    }
    pos.iter()
        .map(|&p| {
            if p == 0 {
                1.0
            } else {
                ((total - p) as f64 / p as f64).clamp(1.0, 100.0)
            }
        })
        .collect()
}
