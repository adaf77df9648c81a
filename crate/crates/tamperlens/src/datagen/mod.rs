//! Synthetic tamper corpora.
//!
//! Six dataset kinds cover {camera-mismatch splice, visible in-place edit,
//! near-imperceptible in-place edit} × {short video clip, single image}.
//! Every manipulated item is generated alongside its authentic source,
//! differs from it only inside the recorded mask, and is reproducible
//! bit-for-bit from the corpus seed: each item owns the RNG stream
//! `(corpus seed, item index)`, so the parallel generator produces the
//! same corpus as a serial one.

pub mod camera;
pub mod encode;
pub mod ops;
pub mod shapes;
pub mod synth;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ForgeryMask;
use camera::{apply_camera_signature, camera_classes, CameraClass};
use encode::{encode_video, load_frame_rgb, load_mask_png, save_mask_png, EncodeSettings};
use ops::{
    apply_inplace, apply_splice, sample_inplace_recipe, ManipulationRecipe, VisibilityProfile,
};
use shapes::sample_mask;
use synth::synth_pristine_frame;

/// Per-frame brightness flicker range linking frames of one clip.
const FLICKER_RANGE: (f64, f64) = (0.98, 1.02);
/// Per-frame sensor grain standard deviation.
const FRAME_GRAIN_STD: f64 = 0.004;

/// The six corpus flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Video clips with content from a mismatched camera pipeline pasted in.
    Splice,
    /// Video clips with strong, perceptually visible in-place edits.
    Visible,
    /// Video clips with weak, near-imperceptible in-place edits.
    Invisible,
    /// Single-image counterpart of [`DatasetKind::Splice`].
    ImageSplice,
    /// Single-image counterpart of [`DatasetKind::Visible`].
    ImageVisible,
    /// Single-image counterpart of [`DatasetKind::Invisible`].
    ImageInvisible,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 6] = [
        DatasetKind::Splice,
        DatasetKind::Visible,
        DatasetKind::Invisible,
        DatasetKind::ImageSplice,
        DatasetKind::ImageVisible,
        DatasetKind::ImageInvisible,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Splice => "splice",
            DatasetKind::Visible => "visible",
            DatasetKind::Invisible => "invisible",
            DatasetKind::ImageSplice => "image-splice",
            DatasetKind::ImageVisible => "image-visible",
            DatasetKind::ImageInvisible => "image-invisible",
        }
    }

    /// Video kinds carry `frames_per_clip` frames; image kinds carry one.
    pub fn is_video(&self) -> bool {
        matches!(
            self,
            DatasetKind::Splice | DatasetKind::Visible | DatasetKind::Invisible
        )
    }

    /// Manipulation strength profile; `None` for splice kinds.
    pub fn profile(&self) -> Option<VisibilityProfile> {
        match self {
            DatasetKind::Visible | DatasetKind::ImageVisible => Some(VisibilityProfile::Visible),
            DatasetKind::Invisible | DatasetKind::ImageInvisible => {
                Some(VisibilityProfile::Invisible)
            }
            DatasetKind::Splice | DatasetKind::ImageSplice => None,
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset kind `{s}`")))
    }
}

/// Train/validation/test partition of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}`")))
    }
}

/// Size and content parameters for one generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub kinds: Vec<DatasetKind>,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Frames per item for video kinds; image kinds always use one.
    pub frames_per_clip: usize,
    /// Item pairs per kind in the train split (each pair = authentic + fake).
    pub train_items: usize,
    pub val_items: usize,
    pub test_items: usize,
    /// Materialization for video kinds; image kinds are always lossless.
    pub encode: EncodeSettings,
    /// Distinct simulated camera pipelines available to splice items.
    pub camera_classes: usize,
    pub seed: u64,
}

impl CorpusConfig {
    /// Small laptop-scale corpus used throughout the tests. Dimensions match
    /// the desk model preset so generated frames feed training directly;
    /// per kind this yields 16 short videos (or image pairs) of 4 frames:
    /// 8 authentic/manipulated item pairs split 4/2/2 across train/val/test.
    pub fn desk() -> Self {
        CorpusConfig {
            kinds: DatasetKind::ALL.to_vec(),
            frame_height: 256,
            frame_width: 384,
            frames_per_clip: 4,
            train_items: 4,
            val_items: 2,
            test_items: 2,
            encode: EncodeSettings::Lossless,
            camera_classes: 4,
            seed: 7,
        }
    }

    /// Full-scale corpus: per kind, 1600/260/140 item pairs (3200/520/280
    /// videos counting both halves of each pair) of 30 frames at 1080×1920,
    /// with video kinds round-tripped through H.264.
    pub fn full() -> Self {
        CorpusConfig {
            kinds: DatasetKind::ALL.to_vec(),
            frame_height: 1080,
            frame_width: 1920,
            frames_per_clip: 30,
            train_items: 1600,
            val_items: 260,
            test_items: 140,
            encode: EncodeSettings::h264_default(),
            camera_classes: 10,
            seed: 7,
        }
    }

    pub fn items_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_items,
            Split::Val => self.val_items,
            Split::Test => self.test_items,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::invalid("corpus must include at least one kind"));
        }
        let unique: BTreeSet<_> = self.kinds.iter().collect();
        if unique.len() != self.kinds.len() {
            return Err(Error::invalid("corpus kinds must be distinct"));
        }
        if self.frame_height < shapes::MIN_MASK_DIM || self.frame_width < shapes::MIN_MASK_DIM {
            return Err(Error::invalid(format!(
                "frames must be at least {0}×{0}, got {1}×{2}",
                shapes::MIN_MASK_DIM,
                self.frame_height,
                self.frame_width
            )));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::invalid("frames_per_clip must be positive"));
        }
        if self.train_items + self.val_items + self.test_items == 0 {
            return Err(Error::invalid("corpus must contain at least one item"));
        }
        if self.camera_classes < 2 {
            return Err(Error::invalid("splicing needs at least two camera classes"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild one manipulated item from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecipe {
    pub mask: shapes::MaskRecipe,
    pub manipulation: ManipulationRecipe,
    /// `(destination, source)` camera class indices for splice items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<(usize, usize)>,
}

/// One manifest line: a single authentic or manipulated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Shared scene id linking an authentic/manipulated pair.
    pub source_id: String,
    pub split: Split,
    pub kind: DatasetKind,
    pub authentic: bool,
    /// Absent for authentic items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<ItemRecipe>,
    /// Relative to the manifest directory; all-zero for authentic items.
    pub mask_path: String,
    pub frame_paths: Vec<String>,
    pub encode_settings: String,
    /// RNG stream index of the item within the corpus seed.
    pub seed: u64,
}

/// All records of one generated corpus, in deterministic item order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
}

impl CorpusManifest {
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for record in &self.records {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::Generation(format!("serializing manifest record: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::config(format!("{}: line {}: {e}", path.display(), idx + 1))
            })?;
            records.push(record);
        }
        Ok(CorpusManifest { records })
    }

    /// Records of one split restricted to the given kinds.
    pub fn records_for(&self, split: Split, kinds: &[DatasetKind]) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && kinds.contains(&r.kind))
            .collect()
    }
}

struct ItemTask {
    index: u64,
    kind: DatasetKind,
    split: Split,
    item: usize,
}

/// Generates a full corpus under `out_dir` and writes `manifest.jsonl` plus
/// a `corpus_config.json` snapshot there. Items are processed on a small
/// worker pool; outputs are independent of worker count.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let cameras = camera_classes(cfg.camera_classes)?;

    let mut tasks = Vec::new();
    let mut index = 0u64;
    for &kind in &cfg.kinds {
        for split in Split::ALL {
            for item in 0..cfg.items_for(split) {
                tasks.push(ItemTask {
                    index,
                    kind,
                    split,
                    item,
                });
                index += 1;
            }
        }
    }
    for &kind in &cfg.kinds {
        for split in Split::ALL {
            let dir = out_dir.join(kind.name()).join(split.name());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }

    let next = AtomicUsize::new(0);
    let produced: Mutex<Vec<(u64, Vec<ManifestRecord>)>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .clamp(1, 8)
        .min(tasks.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                match generate_item(cfg, &cameras, out_dir, &tasks[i]) {
                    Ok(records) => produced.lock().unwrap().push((tasks[i].index, records)),
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("no poisoned lock") {
        return Err(e);
    }

    let mut produced = produced.into_inner().expect("no poisoned lock");
    produced.sort_by_key(|(index, _)| *index);
    let manifest = CorpusManifest {
        records: produced.into_iter().flat_map(|(_, r)| r).collect(),
    };
    manifest.save_jsonl(out_dir.join("manifest.jsonl"))?;
    let snapshot = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Generation(format!("serializing corpus config: {e}")))?;
    let cfg_path = out_dir.join("corpus_config.json");
    std::fs::write(&cfg_path, snapshot + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

fn generate_item(
    cfg: &CorpusConfig,
    cameras: &[CameraClass],
    out_dir: &Path,
    task: &ItemTask,
) -> Result<Vec<ManifestRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(task.index);
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let num_frames = if task.kind.is_video() {
        cfg.frames_per_clip
    } else {
        1
    };

    // A shared scene with per-frame flicker and grain ties a clip together.
    let base = synth_pristine_frame(h, w, &mut rng);
    let grain = Normal::new(0.0, FRAME_GRAIN_STD).expect("fixed std");
    let mut scene = Vec::with_capacity(num_frames);
    for _ in 0..num_frames {
        let flicker: f64 = rng.gen_range(FLICKER_RANGE.0..=FLICKER_RANGE.1);
        let mut frame = base.clone();
        frame.mapv_inplace(|v| (v * flicker + grain.sample(&mut rng)).clamp(0.0, 1.0));
        scene.push(frame);
    }

    let (mask, mut mask_recipe) = sample_mask(h, w, &mut rng)?;
    mask_recipe.rng_seed = task.index;

    let (real_frames, fake_frames, recipe) = match task.kind.profile() {
        Some(profile) => {
            let manipulation = sample_inplace_recipe(profile, &mut rng)?;
            let fakes = scene
                .iter()
                .map(|f| apply_inplace(f, &mask, &manipulation, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let recipe = ItemRecipe {
                mask: mask_recipe,
                manipulation,
                cameras: None,
            };
            (scene, fakes, recipe)
        }
        None => {
            let dest = rng.gen_range(0..cameras.len());
            let mut source = rng.gen_range(0..cameras.len() - 1);
            if source >= dest {
                source += 1;
            }
            let source_scene = synth_pristine_frame(h, w, &mut rng);
            let source_sig = apply_camera_signature(&source_scene, &cameras[source], &mut rng);
            let reals: Vec<_> = scene
                .iter()
                .map(|f| apply_camera_signature(f, &cameras[dest], &mut rng))
                .collect();
            let fakes = reals
                .iter()
                .map(|f| apply_splice(f, &source_sig, &mask))
                .collect::<Result<Vec<_>>>()?;
            let recipe = ItemRecipe {
                mask: mask_recipe,
                manipulation: ManipulationRecipe::splice(),
                cameras: Some((dest, source)),
            };
            (reals, fakes, recipe)
        }
    };

    // Confinement invariant, checked before anything touches disk.
    for (real, fake) in real_frames.iter().zip(&fake_frames) {
        for r in 0..h {
            for c in 0..w {
                if mask.values()[[r, c]] == 0.0 {
                    for ch in 0..3 {
                        if real[[r, c, ch]] != fake[[r, c, ch]] {
                            return Err(Error::Generation(format!(
                                "item {}: pixel ({r},{c}) changed outside the mask",
                                task.index
                            )));
                        }
                    }
                }
            }
        }
    }

    let item_dir = out_dir.join(task.kind.name()).join(task.split.name());
    let stem = format!("{:03}", task.item);
    let settings = if task.kind.is_video() {
        cfg.encode
    } else {
        EncodeSettings::Lossless
    };
    let real = encode_video(&real_frames, settings, &item_dir, &format!("{stem}-real"))?;
    let fake = encode_video(&fake_frames, settings, &item_dir, &format!("{stem}-fake"))?;
    let mask_path = item_dir.join(format!("{stem}-mask.png"));
    save_mask_png(&mask_path, &mask)?;
    let zero_path = item_dir.join(format!("{stem}-zero.png"));
    save_mask_png(&zero_path, &ForgeryMask::zeros(h, w))?;

    let rel = |p: &PathBuf| {
        p.strip_prefix(out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let source_id = format!("{}-{}-{stem}", task.kind.name(), task.split.name());
    Ok(vec![
        ManifestRecord {
            id: format!("{source_id}-real"),
            source_id: source_id.clone(),
            split: task.split,
            kind: task.kind,
            authentic: true,
            recipe: None,
            mask_path: rel(&zero_path),
            frame_paths: real.frame_paths.iter().map(rel).collect(),
            encode_settings: settings.settings_string(),
            seed: task.index,
        },
        ManifestRecord {
            id: format!("{source_id}-fake"),
            source_id,
            split: task.split,
            kind: task.kind,
            authentic: false,
            recipe: Some(recipe),
            mask_path: rel(&mask_path),
            frame_paths: fake.frame_paths.iter().map(rel).collect(),
            encode_settings: settings.settings_string(),
            seed: task.index,
        },
    ])
}

/// One frame ready for training: pixels, pixel mask, and the frame label.
#[derive(Debug, Clone)]
pub struct FrameExample {
    pub id: String,
    pub frame: Array3<f64>,
    pub mask: ForgeryMask,
    pub tampered: bool,
}

/// Loads every frame of the given records, flattening clips.
pub fn load_examples(
    root: impl AsRef<Path>,
    records: &[&ManifestRecord],
) -> Result<Vec<FrameExample>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for record in records {
        let mask = load_mask_png(root.join(&record.mask_path))?;
        for (fi, fp) in record.frame_paths.iter().enumerate() {
            out.push(FrameExample {
                id: format!("{}#{fi}", record.id),
                frame: load_frame_rgb(root.join(fp))?,
                mask: mask.clone(),
                tampered: !record.authentic,
            });
        }
    }
    Ok(out)
}
