//! On-disk datasets: PNG frames and masks plus one JSON manifest per split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::{ambiguity_suite, Clip, SyntheticSceneSpec};
use crate::error::{BgError, Result};
use crate::frame::{Frame, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_clips: usize,
    pub test_clips: usize,
    pub scene: SyntheticSceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            train_clips: 8,
            test_clips: 4,
            scene: SyntheticSceneSpec::default(),
        }
    }
}

/// One clip's files, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub id: String,
    pub split: Split,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
    pub bg_samples: Vec<String>,
    /// CRC32 (hex) of every listed file.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub clips: Vec<ClipManifest>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> BgError + '_ {
    move |e| BgError::io(path, e)
}

fn checksum(path: &Path) -> Result<String> {
    Ok(format!("{:08x}", crc32fast::hash(&fs::read(path).map_err(io(path))?)))
}

/// Writes `clip` under `root/<id>/` and returns its manifest entry.
pub fn write_clip(clip: &Clip, split: Split, root: &Path) -> Result<ClipManifest> {
    let dir = root.join(&clip.id);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut checksums = BTreeMap::new();
    let mut record = |rel: String, write: &dyn Fn(&Path) -> Result<()>| -> Result<String> {
        let path = root.join(&rel);
        write(&path)?;
        checksums.insert(rel.clone(), checksum(&path)?);
        Ok(rel)
    };
    let frames = clip
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| record(format!("{}/frame_{i:04}.png", clip.id), &|p| f.save_png(p)))
        .collect::<Result<Vec<_>>>()?;
    let masks = clip
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| record(format!("{}/mask_{i:04}.png", clip.id), &|p| m.save_png(p)))
        .collect::<Result<Vec<_>>>()?;
    let bg_samples = clip
        .bg_samples
        .iter()
        .enumerate()
        .map(|(i, f)| record(format!("{}/bg_{i:04}.png", clip.id), &|p| f.save_png(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipManifest {
        id: clip.id.clone(),
        split,
        frames,
        masks,
        bg_samples,
        checksums,
    })
}

pub fn manifest_path(out_dir: &Path, split: Split) -> PathBuf {
    out_dir.join(format!("{}.json", split.name()))
}

/// Renders the suite and writes `train.json` and `test.json` into `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<SplitManifest>> {
    let (train, test) = ambiguity_suite(&spec.scene, spec.train_clips, spec.test_clips, spec.seed)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut out = Vec::new();
    for (split, clips) in [(Split::Train, train), (Split::Test, test)] {
        let manifest = SplitManifest {
            split,
            clips: clips
                .iter()
                .map(|c| write_clip(c, split, out_dir))
                .collect::<Result<Vec<_>>>()?,
        };
        write_json(&manifest_path(out_dir, split), &manifest)?;
        out.push(manifest);
    }
    Ok(out)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(io(path))
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| BgError::Data(format!("{}: {e}", path.display())))
}

/// Loads every clip of a manifest, verifying checksums and dimensions.
pub fn load_split(path: &Path) -> Result<Vec<Clip>> {
    let manifest = read_manifest(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    manifest.clips.iter().map(|c| load_clip(c, root)).collect()
}

pub fn load_clip(entry: &ClipManifest, root: &Path) -> Result<Clip> {
    let resolve = |rel: &String| -> Result<PathBuf> {
        let p = root.join(rel);
        if let Some(expected) = entry.checksums.get(rel) {
            let actual = checksum(&p)?;
            if &actual != expected {
                return Err(BgError::Data(format!(
                    "{}: checksum {actual}, manifest says {expected}",
                    p.display()
                )));
            }
        }
        Ok(p)
    };
    let clip = Clip {
        id: entry.id.clone(),
        frames: entry
            .frames
            .iter()
            .map(|r| Frame::load_png(&resolve(r)?))
            .collect::<Result<_>>()?,
        masks: entry
            .masks
            .iter()
            .map(|r| Mask::load_png(&resolve(r)?))
            .collect::<Result<_>>()?,
        bg_samples: entry
            .bg_samples
            .iter()
            .map(|r| Frame::load_png(&resolve(r)?))
            .collect::<Result<_>>()?,
    };
    clip.validate()?;
    Ok(clip)
}
