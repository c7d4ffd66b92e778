//! On-disk layout for tensors, checkpoints, datasets and JSON documents.
//!
//! Every directory written here carries a `checksums.json` mapping each
//! tensor file to its SHA-256 digest; readers verify before decoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, Se3Motion};
use crate::harness::{Checkpoint, Dataset};
use crate::losses::SegMask;
use crate::optim::AdamState;
use crate::scenegen::{Frame, FrameLighting, Scene, SceneConfig, Sequence};
use crate::segmenter::{Architecture, SegmenterParams};
use crate::tensor::{Scalar, Tensor};

pub const CHECKSUMS_FILE: &str = "checksums.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decode an STCT file with no checksum verification.
pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = read_bytes(path)?;
    Tensor::from_stct_bytes(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

/// Tensor files written into one directory, with their digests.
#[derive(Debug)]
struct TensorDir {
    root: PathBuf,
    sums: BTreeMap<String, String>,
}

impl TensorDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(TensorDir {
            root: root.to_path_buf(),
            sums: BTreeMap::new(),
        })
    }

    fn open(root: &Path) -> Result<Self> {
        Ok(TensorDir {
            root: root.to_path_buf(),
            sums: read_json(&root.join(CHECKSUMS_FILE))?,
        })
    }

    fn put<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) -> Result<()> {
        let bytes = t.to_stct_bytes();
        self.sums.insert(name.to_string(), sha256_hex(&bytes));
        write_bytes(&self.root.join(name), &bytes)
    }

    fn get<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let path = self.root.join(name);
        let want = self.sums.get(name).ok_or_else(|| Error::Format {
            path: self.root.join(CHECKSUMS_FILE),
            reason: format!("no checksum entry for {name}"),
        })?;
        let bytes = read_bytes(&path)?;
        if &sha256_hex(&bytes) != want {
            return Err(Error::Checksum(path));
        }
        Tensor::from_stct_bytes(&bytes).map_err(|reason| Error::Format { path, reason })
    }

    fn finish(self) -> Result<()> {
        write_json(&self.root.join(CHECKSUMS_FILE), &self.sums)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointState {
    phase: u8,
    step: u64,
    adam_step: u64,
    tensors: usize,
    config_hash: String,
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let mut td = TensorDir::create(dir)?;
    write_json(&dir.join("arch.json"), &ck.params.arch)?;
    for (i, t) in ck.params.tensors.iter().enumerate() {
        td.put(&format!("param_{i:03}.stct"), t)?;
        td.put(&format!("adam_m_{i:03}.stct"), &ck.adam.m[i])?;
        td.put(&format!("adam_v_{i:03}.stct"), &ck.adam.v[i])?;
    }
    write_json(
        &dir.join("state.json"),
        &CheckpointState {
            phase: ck.phase,
            step: ck.step,
            adam_step: ck.adam.step,
            tensors: ck.params.tensors.len(),
            config_hash: ck.config_hash.clone(),
        },
    )?;
    td.finish()
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let td = TensorDir::open(dir)?;
    let arch: Architecture = read_json(&dir.join("arch.json"))?;
    let state: CheckpointState = read_json(&dir.join("state.json"))?;
    let mut tensors = Vec::with_capacity(state.tensors);
    let mut m = Vec::with_capacity(state.tensors);
    let mut v = Vec::with_capacity(state.tensors);
    for i in 0..state.tensors {
        tensors.push(td.get(&format!("param_{i:03}.stct"))?);
        m.push(td.get(&format!("adam_m_{i:03}.stct"))?);
        v.push(td.get(&format!("adam_v_{i:03}.stct"))?);
    }
    let params = SegmenterParams::new(arch, tensors).map_err(|e| Error::Format {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(Checkpoint {
        params,
        adam: AdamState {
            m,
            v,
            step: state.adam_step,
        },
        phase: state.phase,
        step: state.step,
        config_hash: state.config_hash,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameMeta {
    index: usize,
    pose: Se3Motion,
    lighting: FrameLighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SequenceMeta {
    seed: u64,
    scene: Scene,
    frames: Vec<FrameMeta>,
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub eval_fraction: f64,
    pub config: SceneConfig,
    pub intrinsics: Intrinsics,
    pub palette: Vec<[f64; 3]>,
    pub train_sequences: Vec<usize>,
    pub eval_sequences: Vec<usize>,
    sequences: Vec<SequenceMeta>,
}

fn seq_dir(i: usize) -> String {
    format!("seq_{i:03}")
}

pub fn save_dataset(dir: &Path, data: &Dataset, eval_fraction: f64) -> Result<()> {
    let mut td = TensorDir::create(dir)?;
    let mut sequences = Vec::with_capacity(data.sequences.len());
    for (si, seq) in data.sequences.iter().enumerate() {
        for f in &seq.frames {
            let base = format!("{}/{{}}_{:04}.stct", seq_dir(si), f.index);
            let ids: Vec<f32> = f.seg.ids().iter().map(|&c| c as f32).collect();
            td.put(&base.replace("{}", "rgb"), &f.rgb)?;
            td.put(&base.replace("{}", "depth"), &f.depth.to_tensor())?;
            td.put(&base.replace("{}", "seg"), &Tensor::new(&[f.seg.height(), f.seg.width()], ids)?)?;
        }
        sequences.push(SequenceMeta {
            seed: seq.seed,
            scene: seq.scene.clone(),
            frames: seq
                .frames
                .iter()
                .map(|f| FrameMeta {
                    index: f.index,
                    pose: f.pose,
                    lighting: f.lighting,
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        seed: data.seed,
        eval_fraction,
        config: data.config.clone(),
        intrinsics: data.config.intrinsics(),
        palette: crate::scenegen::class_palette(data.config.classes),
        train_sequences: data.train.clone(),
        eval_sequences: data.eval.clone(),
        sequences,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    td.finish()
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join("manifest.json"))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let td = TensorDir::open(dir)?;
    let k = manifest.intrinsics;
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for (si, meta) in manifest.sequences.iter().enumerate() {
        let mut frames = Vec::with_capacity(meta.frames.len());
        for fm in &meta.frames {
            let base = format!("{}/{{}}_{:04}.stct", seq_dir(si), fm.index);
            let rgb: Tensor<f32> = td.get(&base.replace("{}", "rgb"))?;
            let depth = td.get::<f32>(&base.replace("{}", "depth"))?;
            let seg = td.get::<f32>(&base.replace("{}", "seg"))?;
            let seg_path = dir.join(base.replace("{}", "seg"));
            if seg.rank() != 2 {
                return Err(malformed(&seg_path, "segmentation must be rank 2"));
            }
            let ids = seg
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as u32)
                    } else {
                        Err(malformed(&seg_path, format!("class id {v} is not a non-negative integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            frames.push(Frame {
                rgb,
                depth: DepthMap::from_tensor(&depth)?,
                seg: SegMask::new(seg.dims()[0], seg.dims()[1], ids)?,
                pose: fm.pose,
                intrinsics: k,
                index: fm.index,
                lighting: fm.lighting,
            });
        }
        sequences.push(Sequence {
            frames,
            scene: meta.scene.clone(),
            seed: meta.seed,
        });
    }
    let mut data = Dataset::from_sequences(manifest.config, manifest.seed, sequences, manifest.eval_fraction)?;
    let n = data.sequences.len();
    if manifest.train_sequences.iter().chain(&manifest.eval_sequences).any(|&i| i >= n) {
        return Err(malformed(&dir.join("manifest.json"), "split references a missing sequence"));
    }
    data.train = manifest.train_sequences;
    data.eval = manifest.eval_sequences;
    Ok(data)
}
