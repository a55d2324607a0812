//! Snippets, agent tubes, ground truth and video chunking.
//!
//! Features arrive pre-extracted: one pooled vector per snippet and one per
//! agent tube, all of width `feature_dim`. Ground truth is kept in snippet
//! units with inclusive ends.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTube {
    pub tube_id: u32,
    pub agent_class: u32,
    pub feature: Vec<f64>,
    /// Frames covered by the tube, `1..=snippet_len`.
    pub tube_length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub index: usize,
    pub scene_feature: Vec<f64>,
    pub agents: Vec<AgentTube>,
}

impl Snippet {
    pub fn agent_classes(&self) -> Vec<u32> {
        self.agents.iter().map(|a| a.agent_class).collect()
    }
}

/// Inclusive snippet interval labelled with an activity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub activity_class: usize,
    pub start_snippet: usize,
    pub end_snippet: usize,
}

impl GroundTruthSegment {
    pub fn new(activity_class: usize, start_snippet: usize, end_snippet: usize) -> Self {
        GroundTruthSegment {
            activity_class,
            start_snippet,
            end_snippet,
        }
    }

    pub fn len(&self) -> usize {
        self.end_snippet + 1 - self.start_snippet
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub video_id: String,
    pub snippets: Vec<Snippet>,
    pub ground_truth: Vec<GroundTruthSegment>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    /// Per-snippet "inside any activity" mask.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.snippets.len()];
        for g in &self.ground_truth {
            for m in &mut mask[g.start_snippet..=g.end_snippet.min(self.snippets.len().saturating_sub(1))] {
                *m = true;
            }
        }
        mask
    }
}

/// An in-memory collection of videos sharing one feature width and label
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_dim: usize,
    pub num_activity_classes: usize,
    pub num_agent_classes: usize,
    pub activity_class_names: Vec<String>,
    pub agent_class_names: Vec<String>,
    /// Whether ground-truth segments of one video may overlap.
    #[serde(default)]
    pub multi_label: bool,
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn empty(feature_dim: usize, activity_class_names: Vec<String>, agent_class_names: Vec<String>) -> Self {
        Dataset {
            feature_dim,
            num_activity_classes: activity_class_names.len(),
            num_agent_classes: agent_class_names.len(),
            activity_class_names,
            agent_class_names,
            multi_label: false,
            videos: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if self.activity_class_names.len() != self.num_activity_classes {
            return Err(Error::Data(format!(
                "{} activity class names for {} classes",
                self.activity_class_names.len(),
                self.num_activity_classes
            )));
        }
        if self.agent_class_names.len() != self.num_agent_classes {
            return Err(Error::Data(format!(
                "{} agent class names for {} agent classes",
                self.agent_class_names.len(),
                self.num_agent_classes
            )));
        }
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            if !ids.insert(v.video_id.as_str()) {
                return Err(Error::Data(format!("duplicate video id {:?}", v.video_id)));
            }
            for (i, s) in v.snippets.iter().enumerate() {
                if s.index != i {
                    return Err(Error::Data(format!(
                        "video {:?}: snippet {i} carries index {}",
                        v.video_id, s.index
                    )));
                }
                if s.scene_feature.len() != d {
                    return Err(Error::Data(format!(
                        "video {:?} snippet {i}: scene feature has {} values, expected {d}",
                        v.video_id,
                        s.scene_feature.len()
                    )));
                }
                let mut tube_ids = BTreeSet::new();
                for a in &s.agents {
                    if a.feature.len() != d {
                        return Err(Error::Data(format!(
                            "video {:?} snippet {i}: tube {} has {} values, expected {d}",
                            v.video_id,
                            a.tube_id,
                            a.feature.len()
                        )));
                    }
                    if a.agent_class as usize >= self.num_agent_classes {
                        return Err(Error::Data(format!(
                            "video {:?} snippet {i}: agent class {} out of range",
                            v.video_id, a.agent_class
                        )));
                    }
                    if a.tube_length == 0 {
                        return Err(Error::Data(format!(
                            "video {:?} snippet {i}: tube {} has zero length",
                            v.video_id, a.tube_id
                        )));
                    }
                    if !tube_ids.insert(a.tube_id) {
                        return Err(Error::Data(format!(
                            "video {:?} snippet {i}: duplicate tube id {}",
                            v.video_id, a.tube_id
                        )));
                    }
                }
            }
            for g in &v.ground_truth {
                if g.activity_class >= self.num_activity_classes
                    || g.start_snippet > g.end_snippet
                    || g.end_snippet >= v.snippets.len()
                {
                    return Err(Error::Data(format!(
                        "video {:?}: invalid ground truth {:?}",
                        v.video_id, g
                    )));
                }
            }
            if !self.multi_label {
                let mut gts: Vec<_> = v.ground_truth.clone();
                gts.sort_by_key(|g| g.start_snippet);
                for w in gts.windows(2) {
                    if w[1].start_snippet <= w[0].end_snippet {
                        return Err(Error::Data(format!(
                            "video {:?}: overlapping ground truth in a single-label dataset",
                            v.video_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One piece of a video cut by [`chunk_video`].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoChunk {
    /// Snippet offset of the chunk inside the source video.
    pub offset: usize,
    /// Real snippets, re-indexed from 0. `sample.len()` is the validity count.
    pub sample: VideoSample,
}

impl VideoChunk {
    pub fn valid_len(&self) -> usize {
        self.sample.len()
    }
}

/// Cuts a video into consecutive, non-overlapping chunks of `n` snippets.
///
/// The last chunk keeps its true (possibly shorter) length. Ground truth is
/// clipped to each chunk and re-indexed.
pub fn chunk_video(video: &VideoSample, n: usize) -> Result<Vec<VideoChunk>> {
    if n == 0 {
        return Err(Error::Config("chunk length must be at least 1".into()));
    }
    let total = video.snippets.len();
    if total == 0 {
        return Ok(vec![VideoChunk {
            offset: 0,
            sample: video.clone(),
        }]);
    }
    let mut chunks = Vec::with_capacity(total.div_ceil(n));
    let mut offset = 0;
    while offset < total {
        let end = (offset + n).min(total);
        let snippets = video.snippets[offset..end]
            .iter()
            .enumerate()
            .map(|(i, s)| Snippet {
                index: i,
                ..s.clone()
            })
            .collect();
        let ground_truth = video
            .ground_truth
            .iter()
            .filter(|g| g.start_snippet < end && g.end_snippet >= offset)
            .map(|g| GroundTruthSegment {
                activity_class: g.activity_class,
                start_snippet: g.start_snippet.max(offset) - offset,
                end_snippet: g.end_snippet.min(end - 1) - offset,
            })
            .collect();
        chunks.push(VideoChunk {
            offset,
            sample: VideoSample {
                video_id: video.video_id.clone(),
                snippets,
                ground_truth,
            },
        });
        offset = end;
    }
    Ok(chunks)
}
