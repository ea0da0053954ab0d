//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use bgcut::attenuation::{AttenuationModel, SegNet};
use bgcut::checkpoint::Archive;
use bgcut::data::{generate_dataset, load_split, manifest::write_json, Clip};
use bgcut::frame::{frames_to_tensor, Frame, Mask};
use bgcut::pipeline::bench::pattern_frame;
use bgcut::pipeline::eval::band_curve_csv;
use bgcut::pipeline::{bench, composite, evaluate, segment_video, CompositeSpec, Counters, Models};
use bgcut::prune::prune_segnet;
use bgcut::refinement::RefinementNet;
use bgcut::train::{stage1_samples, train_stage1, train_stage2, IterLog, RunMetadata};
use bgcut::{BgError, Result};
use serde::{Deserialize, Serialize};

use crate::config::Config;

const KIND: &str = "bundle/kind";
const METADATA: &str = "bundle/metadata";
const SEGNET: &str = "segnet";
const ATTENUATION: &str = "attenuation";
const REFINEMENT: &str = "refinement";

/// What a checkpoint bundle holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    /// A single-path segmentation network (stage 1 or pruned).
    Stage1,
    /// An attenuation model with an optional refinement net.
    Models,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> BgError + '_ {
    move |e| BgError::io(path, e)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(io(d)),
        _ => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn commit() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn kind(archive: &Archive) -> Result<BundleKind> {
    Ok(archive.json(KIND)?)
}

pub fn load_segnet(path: &Path) -> Result<SegNet<f32>> {
    let archive = Archive::load(path)?;
    match kind(&archive)? {
        BundleKind::Stage1 => SegNet::load_from(&archive, SEGNET),
        BundleKind::Models => Err(BgError::Config(format!(
            "{} holds stage-2 models, expected a stage-1 network",
            path.display()
        ))),
    }
}

pub fn load_models(path: &Path) -> Result<Models<f32>> {
    let archive = Archive::load(path)?;
    match kind(&archive)? {
        BundleKind::Models => Ok(Models {
            attenuation: AttenuationModel::load_from(&archive, ATTENUATION)?,
            refinement: if archive.names().any(|n| n.starts_with(REFINEMENT)) {
                Some(RefinementNet::load_from(&archive, REFINEMENT)?)
            } else {
                None
            },
        }),
        BundleKind::Stage1 => Err(BgError::Config(format!(
            "{} holds a stage-1 network; run `train stage2` first",
            path.display()
        ))),
    }
}

fn save_bundle(path: &Path, archive: &mut Archive, kind: BundleKind, meta: Option<&RunMetadata>) -> Result<()> {
    archive.put_json(KIND, &kind);
    if let Some(m) = meta {
        archive.put_json(METADATA, m);
    }
    create_parent(path)?;
    archive.save(path)?;
    Ok(())
}

fn write_log(path: &Path, log: &[IterLog]) -> Result<()> {
    let mut s = String::from("iteration,lr,loss,ce,l2\n");
    for l in log {
        s.push_str(&format!("{},{:e},{:.6},{:.6},{:.6}\n", l.iteration, l.lr, l.loss, l.ce, l.l2));
    }
    fs::write(path, s).map_err(io(path))
}

fn progress(stage: &str) -> impl FnMut(&IterLog) + '_ {
    move |l| {
        if l.iteration % 50 == 0 {
            eprintln!("{stage} iter {} lr {:.2e} loss {:.4}", l.iteration, l.lr, l.loss);
        }
    }
}

pub fn dataset_gen(cfg: &Config, out: &Path) -> Result<()> {
    let manifests = generate_dataset(&cfg.dataset, out)?;
    for m in &manifests {
        println!("{}: {} clips", m.split.name(), m.clips.len());
    }
    Ok(())
}

pub fn train_stage_one(cfg: &Config) -> Result<()> {
    let clips = load_split(&cfg.resolve(&cfg.io.train_manifest))?;
    let data = stage1_samples(&clips, false);
    let mut seg = SegNet::<f32>::build(cfg.model.segnet.clone(), cfg.train.seed)?;
    let log = train_stage1(&mut seg, &data, &cfg.train, progress("stage1"))?;
    let meta = RunMetadata::new("stage1", &cfg.train, &commit());
    let out = cfg.resolve(&cfg.io.output);
    let mut archive = Archive::new();
    seg.save_into(&mut archive, SEGNET);
    save_bundle(&out, &mut archive, BundleKind::Stage1, Some(&meta))?;
    write_log(&with_suffix(&out, ".log.csv"), &log)?;
    write_json(&with_suffix(&out, ".meta.json"), &meta)?;
    println!("stage1: {} iterations, final loss {:.4}, wrote {}", log.len(), log.last().map_or(f64::NAN, |l| l.loss), out.display());
    Ok(())
}

pub fn train_stage_two(cfg: &Config) -> Result<()> {
    if cfg.model.refinement.n != cfg.train.n {
        return Err(BgError::Config(format!(
            "model.refinement.n = {} but train.n = {}",
            cfg.model.refinement.n, cfg.train.n
        )));
    }
    let clips = load_split(&cfg.resolve(&cfg.io.train_manifest))?;
    let seg = load_segnet(&cfg.resolve(&cfg.io.stage1_checkpoint))?;
    let mut att = AttenuationModel::from_stage1(&seg, cfg.model.attenuation.clone(), cfg.train.seed)?;
    let mut refine = RefinementNet::<f32>::build(cfg.model.refinement.clone(), cfg.train.seed)?;
    let log = train_stage2(&mut att, &mut refine, &clips, &cfg.train, progress("stage2"))?;
    let meta = RunMetadata::new("stage2", &cfg.train, &commit());
    let out = cfg.resolve(&cfg.io.output);
    let mut archive = Archive::new();
    att.save_into(&mut archive, ATTENUATION);
    refine.save_into(&mut archive, REFINEMENT);
    save_bundle(&out, &mut archive, BundleKind::Models, Some(&meta))?;
    write_log(&with_suffix(&out, ".log.csv"), &log)?;
    write_json(&with_suffix(&out, ".meta.json"), &meta)?;
    println!("stage2: {} iterations, final loss {:.4}, wrote {}", log.len(), log.last().map_or(f64::NAN, |l| l.loss), out.display());
    Ok(())
}

pub fn prune(cfg: &Config) -> Result<()> {
    let clips = load_split(&cfg.resolve(&cfg.io.train_manifest))?;
    let data = stage1_samples(&clips, false);
    let mut seg = load_segnet(&cfg.resolve(&cfg.io.stage1_checkpoint))?;
    let [h, w] = cfg.prune.latency_size;
    let probe = if h > 0 && w > 0 {
        Some(frames_to_tensor::<f32>(&[&pattern_frame(h, w, 0)])?)
    } else {
        None
    };
    let schedule = cfg.prune.schedule();
    schedule.validate()?;
    let report = prune_segnet(&mut seg, &data, &cfg.train, &schedule, probe.as_ref())?;
    let out = cfg.resolve(&cfg.io.output);
    let mut archive = Archive::new();
    seg.save_into(&mut archive, SEGNET);
    save_bundle(&out, &mut archive, BundleKind::Stage1, None)?;
    write_json(&with_suffix(&out, ".prune.json"), &report)?;
    println!(
        "prune: filters {} -> {}, params {} -> {}, latency ratio {}, wrote {}",
        report.filters_initial,
        report.filters_final,
        report.params_initial,
        report.params_final,
        report.latency_ratio().map_or("n/a".into(), |r| format!("{r:.3}")),
        out.display()
    );
    Ok(())
}

/// PNG files of a directory in name order. When some names start with
/// `prefix`, only those are kept, so a dataset clip directory yields its
/// frames without the masks and background samples stored beside them.
fn pngs(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    let named = |p: &PathBuf| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(prefix));
    if out.iter().any(named) {
        out.retain(named);
    }
    out.sort();
    Ok(out)
}

fn mask_name(i: usize) -> String {
    format!("mask_{i:04}.png")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InferRecord {
    pub id: String,
    pub frames: usize,
    pub counters: Counters,
}

pub fn infer(manifest: &Path, checkpoint: &Path, bg: Option<&Path>, out: &Path) -> Result<()> {
    let mut models = load_models(checkpoint)?;
    let n = models.refinement.as_ref().map_or(0, |r| r.config().n);
    let shared_bg = bg
        .map(|d| pngs(d, "bg_")?.iter().map(|p| Frame::load_png(p)).collect::<Result<Vec<_>>>())
        .transpose()?;
    let mut records = Vec::new();
    for mut clip in load_split(manifest)? {
        if let Some(b) = &shared_bg {
            clip.bg_samples = b.clone();
        }
        let seg = segment_video(&clip, &mut models, n)?;
        let dir = out.join(&clip.id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        for (i, o) in seg.outputs.iter().enumerate() {
            o.mask.save_png(&dir.join(mask_name(i)))?;
        }
        println!("{}: {} frames, {:?}", clip.id, clip.frames.len(), seg.counters);
        records.push(InferRecord {
            id: clip.id,
            frames: clip.frames.len(),
            counters: seg.counters,
        });
    }
    write_json(&out.join("infer.json"), &records)
}

pub fn eval(pred_dir: &Path, manifest: &Path, widths: &[usize], out: Option<&Path>) -> Result<()> {
    let clips: Vec<Clip> = load_split(manifest)?;
    let mut triples = Vec::with_capacity(clips.len());
    for c in clips {
        if c.masks.is_empty() {
            return Err(BgError::Data(format!("clip {} has no ground-truth masks", c.id)));
        }
        let pred = (0..c.frames.len())
            .map(|i| Mask::load_png(&pred_dir.join(&c.id).join(mask_name(i))))
            .collect::<Result<Vec<_>>>()?;
        triples.push((c.id, pred, c.masks));
    }
    let mut report = evaluate(&triples, widths)?;
    let record_path = pred_dir.join("infer.json");
    if record_path.exists() {
        let text = fs::read_to_string(&record_path).map_err(io(&record_path))?;
        let records: Vec<InferRecord> =
            serde_json::from_str(&text).map_err(|e| BgError::Data(format!("{}: {e}", record_path.display())))?;
        for r in records {
            report.counters.attenuation_forwards += r.counters.attenuation_forwards;
            report.counters.bg_backbone_passes += r.counters.bg_backbone_passes;
            report.counters.refinement_passes += r.counters.refinement_passes;
        }
    }
    let out = out.unwrap_or(pred_dir);
    fs::create_dir_all(out).map_err(io(out))?;
    write_json(&out.join("eval.json"), &report)?;
    let csv = out.join("band_curve.csv");
    fs::write(&csv, band_curve_csv(&report.band_curve)).map_err(io(&csv))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || BgError::Config(format!("size {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (h, w) = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

pub fn run_bench(cfg: &Config, checkpoint: &Path, size: (usize, usize), parallel: bool) -> Result<()> {
    let mut models = load_models(checkpoint)?;
    let report = bgcut::tensor::parallel::with_parallel(parallel, || {
        bench(&mut models, size, cfg.bench.iterations, cfg.bench.warmup)
    })?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

pub fn composite_clip(cfg: &Config, clip: &Path, masks: &Path, background: &Path, out: &Path) -> Result<()> {
    let frames = pngs(clip, "frame_")?;
    let mask_paths = pngs(masks, "mask_")?;
    if frames.len() != mask_paths.len() {
        return Err(BgError::Data(format!(
            "{} frames in {} but {} masks in {}",
            frames.len(),
            clip.display(),
            mask_paths.len(),
            masks.display()
        )));
    }
    let spec = CompositeSpec {
        background: Frame::load_png(background)?,
        feather: cfg.composite.feather,
    };
    fs::create_dir_all(out).map_err(io(out))?;
    for (i, (f, m)) in frames.iter().zip(&mask_paths).enumerate() {
        let blended = composite(&Frame::load_png(f)?, &Mask::load_png(m)?, &spec)?;
        blended.save_png(&out.join(format!("composite_{i:04}.png")))?;
    }
    println!("composited {} frames into {}", frames.len(), out.display());
    Ok(())
}
