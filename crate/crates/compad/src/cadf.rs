//! CADF dataset files: `manifest.json` plus a sibling `features.bin`.
//!
//! `features.bin` starts with the 4-byte magic `CADF` and a little-endian
//! `u32` version. Each video then stores, per snippet, `D` scene floats
//! followed by one block per agent: `u32 agent_class`, `u32 tube_length`,
//! `D` floats. Floats are little-endian IEEE-754 single precision. Tube ids
//! are not stored; they are assigned by position on load.

use std::fs;
use std::path::{Path, PathBuf};

use compad_core::data::{AgentTube, Dataset, GroundTruthSegment, Snippet, VideoSample};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"CADF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8;
pub const FEATURES_FILE: &str = "features.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CadfError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: bad magic {found:?} at byte 0, expected \"CADF\"")]
    Magic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported version {found} at byte {offset}, expected {VERSION}")]
    Version { path: PathBuf, found: u32, offset: usize },
    #[error("video {video:?}: payload runs past end of file (needs bytes {start}..{end}, file has {len})")]
    Truncated {
        video: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("video {video:?}: declared offset {declared} but previous video ends at byte {expected}")]
    Offset {
        video: String,
        declared: usize,
        expected: usize,
    },
    #[error("{count} trailing bytes after last video at byte {offset}")]
    Trailing { offset: usize, count: usize },
    #[error("video {video:?}: {msg}")]
    Inconsistent { video: String, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(#[from] compad_core::Error),
}

type Result<T> = std::result::Result<T, CadfError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub version: u32,
    pub feature_dim: usize,
    pub num_activity_classes: usize,
    pub num_agent_classes: usize,
    pub activity_class_names: Vec<String>,
    pub agent_class_names: Vec<String>,
    #[serde(default)]
    pub multi_label: bool,
    pub videos: Vec<VideoEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub num_snippets: usize,
    /// `[class, start, end]` triples in snippet units.
    pub gt: Vec<[usize; 3]>,
    pub agents_per_snippet: Vec<usize>,
    /// Byte offset of the video's payload inside `features.bin`.
    pub offset: usize,
}

/// Payload bytes for one snippet with `agents` tubes.
pub fn snippet_bytes(d: usize, agents: usize) -> usize {
    4 * (d + agents * (2 + d))
}

fn video_bytes(d: usize, agents_per_snippet: &[usize]) -> usize {
    agents_per_snippet.iter().map(|&a| snippet_bytes(d, a)).sum()
}

/// Resolves a dataset path: either the manifest itself or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CadfError + '_ {
    move |source| CadfError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialises `dataset` to a manifest and payload in memory.
pub fn encode(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    dataset.validate()?;
    let d = dataset.feature_dim;
    let mut bin = Vec::with_capacity(HEADER_LEN);
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&VERSION.to_le_bytes());
    let mut videos = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let offset = bin.len();
        for s in &v.snippets {
            put_floats(&mut bin, &s.scene_feature);
            for a in &s.agents {
                bin.extend_from_slice(&a.agent_class.to_le_bytes());
                bin.extend_from_slice(&a.tube_length.to_le_bytes());
                put_floats(&mut bin, &a.feature);
            }
        }
        let agents_per_snippet: Vec<usize> = v.snippets.iter().map(|s| s.agents.len()).collect();
        debug_assert_eq!(bin.len() - offset, video_bytes(d, &agents_per_snippet));
        videos.push(VideoEntry {
            id: v.video_id.clone(),
            num_snippets: v.snippets.len(),
            gt: v
                .ground_truth
                .iter()
                .map(|g| [g.activity_class, g.start_snippet, g.end_snippet])
                .collect(),
            agents_per_snippet,
            offset,
        });
    }
    let manifest = Manifest {
        magic: "CADF".into(),
        version: VERSION,
        feature_dim: d,
        num_activity_classes: dataset.num_activity_classes,
        num_agent_classes: dataset.num_agent_classes,
        activity_class_names: dataset.activity_class_names.clone(),
        agent_class_names: dataset.agent_class_names.clone(),
        multi_label: dataset.multi_label,
        videos,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    json.push(b'\n');
    Ok((json, bin))
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Writes `manifest.json` and `features.bin` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let (json, bin) = encode(dataset)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, json).map_err(io_err(&m))?;
    let f = dir.join(FEATURES_FILE);
    fs::write(&f, bin).map_err(io_err(&f))?;
    Ok(())
}

/// Loads a dataset from a manifest path or the directory holding it.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let m = manifest_path(path);
    let json = fs::read(&m).map_err(io_err(&m))?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|source| CadfError::Manifest {
        path: m.clone(),
        source,
    })?;
    let f = m.parent().unwrap_or(Path::new(".")).join(FEATURES_FILE);
    let bin = fs::read(&f).map_err(io_err(&f))?;
    decode(&manifest, &bin, &f)
}

/// Rebuilds a dataset from a parsed manifest and its payload bytes.
pub fn decode(manifest: &Manifest, bin: &[u8], bin_path: &Path) -> Result<Dataset> {
    if manifest.magic != "CADF" {
        return Err(CadfError::Magic {
            path: bin_path.with_file_name(MANIFEST_FILE),
            found: manifest.magic.as_bytes().to_vec(),
        });
    }
    if manifest.version != VERSION {
        return Err(CadfError::Version {
            path: bin_path.with_file_name(MANIFEST_FILE),
            found: manifest.version,
            offset: 0,
        });
    }
    if bin.len() < 4 || &bin[..4] != MAGIC {
        return Err(CadfError::Magic {
            path: bin_path.to_path_buf(),
            found: bin[..bin.len().min(4)].to_vec(),
        });
    }
    if bin.len() < HEADER_LEN {
        return Err(CadfError::Truncated {
            video: String::new(),
            start: 4,
            end: HEADER_LEN,
            len: bin.len(),
        });
    }
    let version = u32::from_le_bytes(bin[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CadfError::Version {
            path: bin_path.to_path_buf(),
            found: version,
            offset: 4,
        });
    }
    let d = manifest.feature_dim;
    let mut cursor = HEADER_LEN;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for e in &manifest.videos {
        if e.agents_per_snippet.len() != e.num_snippets {
            return Err(CadfError::Inconsistent {
                video: e.id.clone(),
                msg: format!(
                    "{} agent counts for {} snippets",
                    e.agents_per_snippet.len(),
                    e.num_snippets
                ),
            });
        }
        if e.offset != cursor {
            return Err(CadfError::Offset {
                video: e.id.clone(),
                declared: e.offset,
                expected: cursor,
            });
        }
        let size = video_bytes(d, &e.agents_per_snippet);
        if cursor + size > bin.len() {
            return Err(CadfError::Truncated {
                video: e.id.clone(),
                start: cursor,
                end: cursor + size,
                len: bin.len(),
            });
        }
        let mut r = Reader { bin, pos: cursor };
        let snippets = e
            .agents_per_snippet
            .iter()
            .enumerate()
            .map(|(index, &n_agents)| {
                let scene_feature = r.floats(d);
                let agents = (0..n_agents)
                    .map(|j| {
                        let agent_class = r.u32();
                        let tube_length = r.u32();
                        AgentTube {
                            tube_id: j as u32,
                            agent_class,
                            feature: r.floats(d),
                            tube_length,
                        }
                    })
                    .collect();
                Snippet {
                    index,
                    scene_feature,
                    agents,
                }
            })
            .collect();
        cursor = r.pos;
        videos.push(VideoSample {
            video_id: e.id.clone(),
            snippets,
            ground_truth: e.gt.iter().map(|&[c, s, t]| GroundTruthSegment::new(c, s, t)).collect(),
        });
    }
    if cursor != bin.len() {
        return Err(CadfError::Trailing {
            offset: cursor,
            count: bin.len() - cursor,
        });
    }
    let dataset = Dataset {
        feature_dim: d,
        num_activity_classes: manifest.num_activity_classes,
        num_agent_classes: manifest.num_agent_classes,
        activity_class_names: manifest.activity_class_names.clone(),
        agent_class_names: manifest.agent_class_names.clone(),
        multi_label: manifest.multi_label,
        videos,
    };
    dataset.validate()?;
    Ok(dataset)
}

struct Reader<'a> {
    bin: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bin[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn floats(&mut self, n: usize) -> Vec<f64> {
        let out = self.bin[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        self.pos += 4 * n;
        out
    }
}
