use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rayon::prelude::*;
use serde_json::json;
use spliceradar::data::{load_image, write_corpus, write_splice_set, Corpus, SynthConfig};
use spliceradar::localizer::{
    extract_features, localize_features, tile_image, EmConfig, Features, LocalizeConfig,
    Morphology, PatchGrid,
};
use spliceradar::metrics::{evaluate_dataset, format_table, Evaluation, ThresholdMode};
use spliceradar::network::{load_checkpoint, ModelParams};
use spliceradar::trainer::{self, RunOptions, TrainConfig};
use spliceradar::{selfcheck, Error, Result};

use crate::{
    EvaluateArgs, LocalizeArgs, SegmentArgs, SpliceArgs, SweepArgs, SynthArgs, TrainArgs,
    VerifyArgs,
};

/// Prints the resolved settings of a run, one `key = value` per line.
fn echo(command: &str, workers: usize, items: &[(&str, String)]) {
    log::info!("{command}: resolved configuration");
    log::info!("  workers = {workers}");
    for (k, v) in items {
        log::info!("  {k} = {v}");
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn synth(a: &SynthArgs, workers: usize) -> Result<ExitCode> {
    let config = SynthConfig {
        models: a.models,
        images_per_model: a.images_per_model,
        size: a.size,
        seed: a.seed,
        val_fraction: a.val_fraction,
        test_fraction: a.test_fraction,
        clean_dir: a.clean_dir.clone(),
    };
    echo(
        "synth",
        workers,
        &[
            ("out", show(&a.out)),
            ("models", a.models.to_string()),
            ("images_per_model", a.images_per_model.to_string()),
            ("size", a.size.to_string()),
            ("seed", a.seed.to_string()),
            ("val_fraction", a.val_fraction.to_string()),
            ("test_fraction", a.test_fraction.to_string()),
            ("clean_dir", a.clean_dir.as_deref().map_or("-".into(), show)),
            ("force", a.force.to_string()),
        ],
    );
    let m = write_corpus(&a.out, &config, a.force)?;
    log::info!(
        "wrote {} images ({} train, {} val, {} test)",
        m.images.len(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn splice(a: &SpliceArgs, workers: usize) -> Result<ExitCode> {
    echo(
        "splice",
        workers,
        &[
            ("corpus", show(&a.corpus)),
            ("out", show(&a.out)),
            ("count", a.count.to_string()),
            ("size", a.size.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let corpus = Corpus::open(&a.corpus)?;
    let records = write_splice_set(&a.out, &corpus.manifest.models, a.count, a.size, a.seed)?;
    log::info!("wrote {} splices to {}", records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: &TrainArgs, workers: usize) -> Result<ExitCode> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got '{s}'")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;
    let mut items = vec![
        ("data", show(&a.data)),
        ("out", show(&a.out)),
        ("resume", a.resume.to_string()),
    ];
    let text = config.to_string();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            items.push((k, v.to_string()));
        }
    }
    echo("train", workers, &items);
    let corpus = Corpus::open(&a.data)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &format!("{text}\n"))?;
    let report = trainer::train(&config, &corpus, &a.out, &RunOptions { resume: a.resume })?;
    log::info!(
        "done: best validation accuracy {:.4} at epoch {}",
        report.best_val_acc,
        report.best_epoch
    );
    Ok(ExitCode::SUCCESS)
}

fn localize_config(s: &SegmentArgs, step: usize) -> Result<LocalizeConfig> {
    let morphology = match s.morphology.as_str() {
        "opening" => Morphology::Opening,
        "closing" => Morphology::Closing,
        "none" => Morphology::None,
        other => return Err(Error::Parameter(format!("unknown morphology '{other}'"))),
    };
    Ok(LocalizeConfig {
        step,
        em: EmConfig {
            restarts: s.restarts,
            seed: s.seed,
            tol: s.tol,
            max_iter: s.max_iter,
        },
        standardize: !s.no_standardize,
        morphology,
        ..LocalizeConfig::default()
    })
}

fn segment_items(s: &SegmentArgs) -> Vec<(&'static str, String)> {
    vec![
        ("restarts", s.restarts.to_string()),
        ("seed", s.seed.to_string()),
        ("morphology", s.morphology.clone()),
        ("standardize", (!s.no_standardize).to_string()),
        ("tol", format!("{:?}", s.tol)),
        ("max_iter", s.max_iter.to_string()),
    ]
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    Ok(load_checkpoint(path)?.params)
}

pub fn localize(a: &LocalizeArgs, workers: usize) -> Result<ExitCode> {
    let mut items = vec![
        ("model", show(&a.model)),
        ("image", show(&a.image)),
        ("step", a.step.to_string()),
        ("out", show(&a.out)),
        ("raw", a.raw.as_deref().map_or("-".into(), show)),
    ];
    items.extend(segment_items(&a.segment));
    echo("localize", workers, &items);
    let config = localize_config(&a.segment, a.step)?;
    let params = load_model(&a.model)?;
    let image = load_image(&a.image)?;
    let (grid, patches) = tile_image(&image, config.step)?;
    log_grid(&grid);
    let features = extract_features(&patches, &params, config.batch)?;
    let loc = localize_features(&features, &grid, image.width(), image.height(), &config)?;
    log::info!(
        "mixture weights {:.4}/{:.4}, log-likelihood {:.4}",
        loc.model.weights[0],
        loc.model.weights[1],
        loc.model.log_likelihood
    );
    loc.map.save_png(&a.out)?;
    if let Some(raw) = &a.raw {
        loc.map.save_raw(raw)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn log_grid(grid: &PatchGrid) {
    log::info!(
        "patch grid {}x{} ({} patches), x positions {:?}, y positions {:?}",
        grid.rows(),
        grid.cols(),
        grid.len(),
        grid.xs,
        grid.ys
    );
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Input(format!("no images in {}", dir.display())));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or(String::new(), |s| s.to_string_lossy().into_owned())
}

/// Localises every image at each step, reusing features whenever a step
/// produces exactly the same tiling of an image as an earlier one. Maps go to
/// `map_dir(step)/<stem>.srmap`.
fn localize_images(
    params: &ModelParams<f32>,
    images: &[PathBuf],
    steps: &[usize],
    segment: &SegmentArgs,
    map_dir: &(dyn Fn(usize) -> PathBuf + Sync),
) -> Result<()> {
    for &s in steps {
        create_dir(&map_dir(s))?;
    }
    images.par_iter().try_for_each(|path| -> Result<()> {
        let image = load_image(path)?;
        let mut cache: HashMap<(Vec<usize>, Vec<usize>), Features> = HashMap::new();
        for &s in steps {
            let config = localize_config(segment, s)?;
            let grid = PatchGrid::new(image.width(), image.height(), s)?;
            let key = (grid.xs.clone(), grid.ys.clone());
            if !cache.contains_key(&key) {
                let (_, patches) = tile_image(&image, s)?;
                cache.insert(
                    key.clone(),
                    extract_features(&patches, params, config.batch)?,
                );
            }
            let loc =
                localize_features(&cache[&key], &grid, image.width(), image.height(), &config)?;
            loc.map
                .save_raw(&map_dir(s).join(format!("{}.srmap", stem(path))))?;
        }
        log::info!("localised {}", path.display());
        Ok(())
    })
}

fn threshold_mode(s: &str) -> Result<ThresholdMode> {
    s.parse()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    write_text(path, &format!("{text}\n"))
}

fn report_evaluation(step: Option<usize>, e: &Evaluation) {
    for s in &e.skipped {
        log::warn!("skipped {}: {}", s.image, s.reason);
    }
    for u in &e.unmatched {
        log::warn!("unmatched file {u}");
    }
    log::info!(
        "step {}: {} scored, {} skipped",
        step.map_or("-".into(), |s| s.to_string()),
        e.summary.scored,
        e.summary.skipped
    );
}

pub fn evaluate(a: &EvaluateArgs, workers: usize) -> Result<ExitCode> {
    let mode = threshold_mode(&a.threshold_mode)?;
    let mut items = vec![
        ("model", a.model.as_deref().map_or("-".into(), show)),
        ("images", a.images.as_deref().map_or("-".into(), show)),
        ("masks", show(&a.masks)),
        ("maps", a.maps.as_deref().map_or("-".into(), show)),
        ("step", a.step.to_string()),
        ("out", show(&a.out)),
        ("threshold_mode", a.threshold_mode.clone()),
    ];
    items.extend(segment_items(&a.segment));
    echo("evaluate", workers, &items);
    create_dir(&a.out)?;
    let (maps_dir, step) = match &a.maps {
        Some(dir) => (dir.clone(), None),
        None => {
            let model = a.model.as_ref().expect("required by clap");
            let images = a.images.as_ref().expect("required by clap");
            let params = load_model(model)?;
            let list = list_images(images)?;
            let dir = a.out.join("maps");
            localize_images(&params, &list, &[a.step], &a.segment, &|_| dir.clone())?;
            (a.out.join("maps"), Some(a.step))
        }
    };
    let e = evaluate_dataset(&maps_dir, &a.masks, mode)?;
    report_evaluation(step, &e);
    let table = format_table(&[(step, &e.summary)]);
    write_json(
        &a.out.join("results.json"),
        &json!({ "step": step, "evaluation": e }),
    )?;
    write_text(&a.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(a: &SweepArgs, workers: usize) -> Result<ExitCode> {
    let mode = threshold_mode(&a.threshold_mode)?;
    let mut steps = a.steps.clone();
    steps.sort_unstable();
    steps.dedup();
    let mut items = vec![
        ("model", show(&a.model)),
        ("images", show(&a.images)),
        ("masks", show(&a.masks)),
        ("steps", format!("{steps:?}")),
        ("out", show(&a.out)),
        ("threshold_mode", a.threshold_mode.clone()),
    ];
    items.extend(segment_items(&a.segment));
    echo("sweep", workers, &items);
    let params = load_model(&a.model)?;
    let list = list_images(&a.images)?;
    let out = a.out.clone();
    let dir = move |s: usize| out.join(format!("step_{s:02}")).join("maps");
    localize_images(&params, &list, &steps, &a.segment, &dir)?;
    let mut rows = Vec::new();
    for &s in &steps {
        let e = evaluate_dataset(&dir(s), &a.masks, mode)?;
        report_evaluation(Some(s), &e);
        rows.push((s, e));
    }
    let table = format_table(
        &rows
            .iter()
            .map(|(s, e)| (Some(*s), &e.summary))
            .collect::<Vec<_>>(),
    );
    let json_rows: Vec<_> = rows
        .iter()
        .map(|(s, e)| json!({ "step": s, "evaluation": e }))
        .collect();
    write_json(&a.out.join("sweep.json"), &json!({ "rows": json_rows }))?;
    write_text(&a.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn verify(a: &VerifyArgs, workers: usize) -> Result<ExitCode> {
    echo(
        "verify",
        workers,
        &[(
            "inject_bug",
            a.inject_bug.clone().unwrap_or_else(|| "-".into()),
        )],
    );
    let outcomes = selfcheck::run_all(a.inject_bug.as_deref())?;
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{} {}/{}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.suite,
            o.name,
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!("{} checks, {failed} failed", outcomes.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
