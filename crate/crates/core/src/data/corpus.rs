//! On-disk camera-model corpus: `<root>/<model_id>/<nnnn>.png` plus a
//! `corpus.json` manifest with model specs, seeds and train/val/test splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::camera::{default_model_specs, simulate_camera_model, CameraModelSpec};
use super::image::{load_image, save_image, Image};
use super::patches::{LabeledImage, PATCH};
use super::synth::procedural_image;

pub const MANIFEST: &str = "corpus.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub models: usize,
    pub images_per_model: usize,
    pub size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Optional directory of PNG scenes used instead of procedural content.
    pub clean_dir: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            models: 4,
            images_per_model: 200,
            size: 256,
            seed: 0,
            val_fraction: 0.002,
            test_fraction: 0.001,
            clean_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusImage {
    pub path: String,
    pub model: usize,
    pub content_seed: u64,
    pub capture_seed: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub images_per_model: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub models: Vec<CameraModelSpec>,
    pub images: Vec<CorpusImage>,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Number of held-out images for a fraction, never below one.
pub fn holdout_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).max(1)
}

fn load_scenes(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no PNG scenes in {}", dir.display())));
    }
    paths.iter().map(|p| load_image(p)).collect()
}

fn crop_scene(scene: &Image, size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    if scene.channels() != 3 || scene.width() < size || scene.height() < size {
        return Err(Error::Input(format!(
            "scene {}x{}x{} cannot supply a {size}x{size} RGB crop",
            scene.width(),
            scene.height(),
            scene.channels()
        )));
    }
    let x0 = rng.gen_range(0..=scene.width() - size);
    let y0 = rng.gen_range(0..=scene.height() - size);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in y0..y0 + size {
        let start = (y * scene.width() + x0) * 3;
        data.extend_from_slice(&scene.data()[start..start + size * 3]);
    }
    Image::new(size, size, 3, data)
}

/// Generates a corpus under `out`. A non-empty `out` is refused unless
/// `force` is set.
pub fn write_corpus(out: &Path, config: &SynthConfig, force: bool) -> Result<CorpusManifest> {
    if config.models < 2 {
        return Err(Error::Parameter(format!(
            "need ≥ 2 camera models, got {}",
            config.models
        )));
    }
    if config.size < PATCH {
        return Err(Error::Parameter(format!(
            "image size {} is smaller than a {PATCH}-pixel patch",
            config.size
        )));
    }
    let holdout = holdout_count(config.images_per_model, config.val_fraction)
        + holdout_count(config.images_per_model, config.test_fraction);
    if config.images_per_model <= holdout {
        return Err(Error::Parameter(format!(
            "{} images per model leave nothing for training",
            config.images_per_model
        )));
    }
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Input(format!(
                "{} exists and is not empty (use --force)",
                out.display()
            )));
        }
    }
    let models = default_model_specs(config.models, config.seed);
    for m in &models {
        fs::create_dir_all(out.join(&m.id)).map_err(|e| Error::io(out.join(&m.id), e))?;
    }
    let scenes = config.clean_dir.as_deref().map(load_scenes).transpose()?;

    let mut seeder = ChaCha8Rng::seed_from_u64(config.seed);
    let mut images = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        for i in 0..config.images_per_model {
            images.push(CorpusImage {
                path: format!("{}/{i:04}.png", m.id),
                model: mi,
                content_seed: seeder.gen(),
                capture_seed: seeder.gen(),
            });
        }
    }
    images.par_iter().try_for_each(|entry| -> Result<()> {
        let clean = match &scenes {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(entry.content_seed);
                let scene = &s[(entry.content_seed % s.len() as u64) as usize];
                crop_scene(scene, config.size, &mut rng)?
            }
            None => procedural_image(config.size, config.size, entry.content_seed)?,
        };
        let captured = simulate_camera_model(&clean, &models[entry.model], entry.capture_seed)?;
        save_image(&captured, &out.join(&entry.path))
    })?;

    let mut splits = Splits::default();
    for mi in 0..models.len() {
        let mut paths: Vec<String> = images
            .iter()
            .filter(|e| e.model == mi)
            .map(|e| e.path.clone())
            .collect();
        paths.shuffle(&mut seeder);
        let nv = holdout_count(paths.len(), config.val_fraction);
        let nt = holdout_count(paths.len(), config.test_fraction);
        let mut rest = paths.split_off(nv);
        let test = rest.split_off(rest.len() - nt);
        splits.val.extend(paths);
        splits.test.extend(test);
        splits.train.extend(rest);
    }
    for list in [&mut splits.train, &mut splits.val, &mut splits.test] {
        list.sort();
    }

    let manifest = CorpusManifest {
        format_version: MANIFEST_VERSION,
        seed: config.seed,
        width: config.size,
        height: config.size,
        images_per_model: config.images_per_model,
        val_fraction: config.val_fraction,
        test_fraction: config.test_fraction,
        models,
        images,
        splits,
    };
    let path = out.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("serialisable");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A corpus directory opened through its manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest version {}", manifest.format_version),
            ));
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn classes(&self) -> usize {
        self.manifest.models.len()
    }

    pub fn split_paths(&self, split: Split) -> &[String] {
        let s = &self.manifest.splits;
        match split {
            Split::Train => &s.train,
            Split::Val => &s.val,
            Split::Test => &s.test,
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledImage>> {
        let label_of = |p: &str| {
            self.manifest
                .images
                .iter()
                .find(|e| e.path == p)
                .map(|e| e.model)
                .ok_or_else(|| Error::Input(format!("{p} is not listed in the manifest")))
        };
        self.split_paths(split)
            .par_iter()
            .map(|p| {
                let img = load_image(&self.root.join(p))?;
                LabeledImage::new(&img, label_of(p)?).map_err(|e| Error::Input(format!("{p}: {e}")))
            })
            .collect()
    }
}
