//! Seeded synthetic datasets standing in for detector/tracker/3D-CNN output.
//!
//! Every video holds one to a few latent activity segments. Scene features
//! inside a segment of class `c` are drawn from `N(sep·u_c, I)` where the
//! `u_c` are orthonormal directions; background snippets come from `N(0, I)`.
//! Agent tubes carry their own per-agent-class mean, shifted towards `u_c`
//! inside class-`c` segments, and activities prefer one agent class, so the
//! agent nodes carry signal the attention stack can use.
//!
//! All features are rounded to `f32` so that a save/load cycle through the
//! 32-bit on-disk format is lossless.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{AgentTube, Dataset, GroundTruthSegment, Snippet, VideoSample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub min_snippets: usize,
    pub max_snippets: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_agent_classes: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    /// Norm of each class mean.
    pub class_separation: f64,
    /// With `false`, segments tile the whole video.
    pub background: bool,
    /// Probability that an agent inside a class-`c` segment is of the
    /// class-affiliated agent type.
    pub agent_affinity: f64,
    /// Frames per snippet; bounds tube lengths.
    pub snippet_len: usize,
    /// Video ids are `{prefix}{index:04}`.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 20,
            min_snippets: 96,
            max_snippets: 128,
            feature_dim: 64,
            num_classes: 3,
            num_agent_classes: 6,
            min_agents: 0,
            max_agents: 4,
            min_segments: 1,
            max_segments: 3,
            min_segment_len: 10,
            max_segment_len: 40,
            class_separation: 3.0,
            background: true,
            agent_affinity: 0.6,
            snippet_len: 16,
            id_prefix: String::from("video"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_videos == 0 {
            return fail("synthetic dataset needs at least one video".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 activity classes, got {}", self.num_classes));
        }
        if self.feature_dim < 4 {
            return fail(format!("feature_dim must be at least 4, got {}", self.feature_dim));
        }
        if self.num_agent_classes == 0 {
            return fail("need at least one agent class".into());
        }
        if self.min_snippets == 0 || self.min_snippets > self.max_snippets {
            return fail(format!(
                "bad snippet range {}..={}",
                self.min_snippets, self.max_snippets
            ));
        }
        if self.min_agents > self.max_agents {
            return fail(format!("bad agent range {}..={}", self.min_agents, self.max_agents));
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return fail(format!(
                "bad segment count range {}..={}",
                self.min_segments, self.max_segments
            ));
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return fail(format!(
                "bad segment length range {}..={}",
                self.min_segment_len, self.max_segment_len
            ));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return fail(format!("class separation {} invalid", self.class_separation));
        }
        if !(0.0..=1.0).contains(&self.agent_affinity) {
            return fail(format!("agent affinity {} outside [0, 1]", self.agent_affinity));
        }
        if self.snippet_len == 0 {
            return fail("snippet_len must be positive".into());
        }
        let need = if self.background {
            self.min_segments * self.min_segment_len + (self.min_segments - 1)
        } else {
            self.min_segments
        };
        if need > self.min_snippets {
            return fail(format!(
                "{} segments cannot fit in a {}-snippet video",
                self.min_segments, self.min_snippets
            ));
        }
        Ok(())
    }

    pub fn activity_class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("activity_{c}")).collect()
    }

    pub fn agent_class_names(&self) -> Vec<String> {
        (0..self.num_agent_classes).map(|c| format!("agent_{c}")).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Unit directions, mutually orthogonal while `count <= d`.
fn directions(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = gaussian(rng, d);
        if i < d {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= dot * y;
                }
            }
        }
        normalize(&mut v);
        out.push(v);
    }
    out
}

#[inline]
fn q32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generates a dataset deterministically from `seed`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.feature_dim;
    let class_dirs = directions(&mut rng, config.num_classes, d);
    let agent_means = directions(&mut rng, config.num_agent_classes, d);

    let mut videos = Vec::with_capacity(config.num_videos);
    for vi in 0..config.num_videos {
        let len = rng.random_range(config.min_snippets..=config.max_snippets);
        let segments = if config.background {
            place_segments(&mut rng, config, len)
        } else {
            tile_segments(&mut rng, config, len)
        };
        let mut label = vec![None; len];
        for g in &segments {
            for l in &mut label[g.start_snippet..=g.end_snippet] {
                *l = Some(g.activity_class);
            }
        }
        let snippets = (0..len)
            .map(|i| {
                let class = label[i];
                let mut scene = gaussian(&mut rng, d);
                if let Some(c) = class {
                    for (x, u) in scene.iter_mut().zip(&class_dirs[c]) {
                        *x += config.class_separation * u;
                    }
                }
                let n_agents = rng.random_range(config.min_agents..=config.max_agents);
                let agents = (0..n_agents)
                    .map(|j| {
                        let agent_class = match class {
                            Some(c) if rng.random::<f64>() < config.agent_affinity => c % config.num_agent_classes,
                            _ => rng.random_range(0..config.num_agent_classes),
                        };
                        let mut feature = gaussian(&mut rng, d);
                        for (x, m) in feature.iter_mut().zip(&agent_means[agent_class]) {
                            *x += m;
                        }
                        if let Some(c) = class {
                            for (x, u) in feature.iter_mut().zip(&class_dirs[c]) {
                                *x += 0.5 * config.class_separation * u;
                            }
                        }
                        AgentTube {
                            tube_id: j as u32,
                            agent_class: agent_class as u32,
                            feature: feature.into_iter().map(q32).collect(),
                            tube_length: rng.random_range(1..=config.snippet_len) as u32,
                        }
                    })
                    .collect();
                Snippet {
                    index: i,
                    scene_feature: scene.into_iter().map(q32).collect(),
                    agents,
                }
            })
            .collect();
        videos.push(VideoSample {
            video_id: format!("{}{vi:04}", config.id_prefix),
            snippets,
            ground_truth: segments,
        });
    }

    Ok(Dataset {
        feature_dim: d,
        num_activity_classes: config.num_classes,
        num_agent_classes: config.num_agent_classes,
        activity_class_names: config.activity_class_names(),
        agent_class_names: config.agent_class_names(),
        multi_label: false,
        videos,
    })
}

/// Non-overlapping segments separated by at least one background snippet.
fn place_segments(rng: &mut ChaCha8Rng, config: &SynthConfig, len: usize) -> Vec<GroundTruthSegment> {
    let mut k = rng.random_range(config.min_segments..=config.max_segments);
    let mut lengths: Vec<usize> = (0..k)
        .map(|_| rng.random_range(config.min_segment_len..=config.max_segment_len))
        .collect();
    // shrink until the segments plus their separators fit
    loop {
        let need: usize = lengths.iter().sum::<usize>() + k - 1;
        if need <= len {
            break;
        }
        if k > config.min_segments {
            k -= 1;
            lengths.pop();
        } else {
            let widest = (0..k).max_by_key(|&i| (lengths[i], usize::MAX - i)).unwrap();
            lengths[widest] -= 1;
        }
    }
    let free = len - (lengths.iter().sum::<usize>() + k - 1);
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (i, (&l, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        pos += cut - prev_cut;
        prev_cut = cut;
        let class = rng.random_range(0..config.num_classes);
        out.push(GroundTruthSegment::new(class, pos, pos + l - 1));
        pos += l;
        if i + 1 < k {
            pos += 1;
        }
    }
    out
}

/// Segments covering every snippet; neighbours always differ in class.
fn tile_segments(rng: &mut ChaCha8Rng, config: &SynthConfig, len: usize) -> Vec<GroundTruthSegment> {
    let k = rng.random_range(config.min_segments..=config.max_segments).min(len);
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.random_range(1..len)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(len);
    let mut out = Vec::with_capacity(bounds.len() - 1);
    let mut prev: Option<usize> = None;
    for w in bounds.windows(2) {
        let class = loop {
            let c = rng.random_range(0..config.num_classes);
            if Some(c) != prev {
                break c;
            }
        };
        prev = Some(class);
        out.push(GroundTruthSegment::new(class, w[0], w[1] - 1));
    }
    out
}
