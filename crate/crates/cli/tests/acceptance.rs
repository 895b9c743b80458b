//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to
//! stderr, bypassing the test harness's output capture, then asserts.
//!
//! The desk experiment (criteria 3, 7 and 8) trains for hours on a single
//! core, so its corpus and model are cached in `target/acceptance/desk` and
//! reused when the cached manifest and resolved training config match the
//! desk defaults. Set `SR_ACCEPTANCE_RETRAIN=1` to discard the cache.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spliceradar::data::CorpusManifest;
use spliceradar::network::{
    forward, load_checkpoint, rf_penalty, ModelParams, RfMode, FEATURES, PATCH, PRE_FEATURE,
};
use spliceradar::selfcheck::{self, CheckOutcome};
use spliceradar::tensor::{Mode, Tensor};
use spliceradar::trainer::{read_report, TrainConfig};

const DESK_SEED: u64 = 1;
const SPLICE_SEED: u64 = 2;
/// Splice images are rendered larger than the 256 px training images so the
/// patch grid stays well above the opening's disk at every swept step.
const SPLICE_SIZE: usize = 1024;
const SWEEP_STEPS: [usize; 5] = [24, 36, 48, 60, 72];

struct Line {
    id: usize,
    passed: bool,
    text: String,
}

fn report(lines: &mut Vec<Line>, id: usize, passed: bool, text: String) {
    let _ = writeln!(
        std::io::stderr(),
        "[PRIMARY {id}] {} {text}",
        if passed { "PASS" } else { "FAIL" }
    );
    lines.push(Line { id, passed, text });
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spliceradar"))
}

fn run(cmd: &mut Command) -> Output {
    let o = cmd.output().expect("binary runs");
    assert!(
        o.status.success(),
        "{:?} failed:\n{}",
        cmd,
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn workspace_target() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
}

fn all_pass(outcomes: &[CheckOutcome]) -> (bool, String) {
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}/{}: {}", o.suite, o.name, o.detail))
        .collect();
    let detail = if failed.is_empty() {
        outcomes
            .iter()
            .map(|o| format!("{}: {}", o.name, o.detail))
            .collect::<Vec<_>>()
            .join("; ")
    } else {
        failed.join("; ")
    };
    (failed.is_empty(), detail)
}

fn criterion_1(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let outcomes = selfcheck::gradient_suite(20, 2, None).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let (ok, _) = all_pass(&outcomes);
    let worst = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name.clone())
        .collect::<Vec<_>>();
    report(
        lines,
        1,
        ok && secs < 120.0,
        format!(
            "gradient suite: {} checks x 20 instances, failures {:?}, runtime {secs:.1}s (< 120s)",
            outcomes.len(),
            worst
        ),
    );
}

fn criterion_2(lines: &mut Vec<Line>) {
    let params = ModelParams::<f32>::build(4, 0).unwrap();
    let patches = Tensor::<f32>::full(vec![1, PATCH, PATCH, 3], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(patches, &params, Mode::Infer, &mut rng).unwrap();
    let ok = out.pre_features.shape() == [1, 56, 56]
        && PRE_FEATURE == 56
        && out.features.shape() == [1, 100]
        && FEATURES == 100
        && out.logits.shape() == [1, 4];
    report(
        lines,
        2,
        ok,
        format!(
            "72x72x3 -> pre-feature {:?}, features {:?}, logits {:?} (C=4)",
            out.pre_features.shape(),
            out.features.shape(),
            out.logits.shape()
        ),
    );
}

/// Filters whose centre taps sum to -1 and whose other taps sum to +1.
fn residual_bank() -> Tensor<f64> {
    let (k, c, f) = (5, 3, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = vec![0.0; k * k * c * f];
    for filt in 0..f {
        let mut off = Vec::new();
        for y in 0..k {
            for x in 0..k {
                for ch in 0..c {
                    let i = ((y * k + x) * c + ch) * f + filt;
                    if (y, x) == (2, 2) {
                        data[i] = -1.0 / c as f64;
                    } else {
                        off.push(i);
                    }
                }
            }
        }
        let raw: Vec<f64> = off.iter().map(|_| normal.sample(&mut rng)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        for (i, v) in off.iter().zip(&raw) {
            data[*i] = (v - mean) + 1.0 / off.len() as f64;
        }
    }
    Tensor::new(vec![k, k, c, f], data).unwrap()
}

fn criterion_3(lines: &mut Vec<Line>, desk: &Desk) {
    let (analytic, _) = rf_penalty(&residual_bank(), RfMode::ChannelSummed).unwrap();
    let init = ModelParams::<f32>::build(4, DESK_SEED).unwrap();
    let rf = init.layout().rf;
    let (initial, _) = rf_penalty(init.tensor(rf), RfMode::ChannelSummed).unwrap();
    let last = load_checkpoint(&desk.model.join("last.ckpt"))
        .unwrap()
        .params;
    let (trained, _) = rf_penalty(last.tensor(rf), RfMode::ChannelSummed).unwrap();
    let ratio = trained / initial;
    report(
        lines,
        3,
        analytic.abs() <= 1e-9 && ratio < 0.10,
        format!(
            "analytic bank penalty {analytic:.2e} (0 +- 1e-9); desk R_RF {initial:.4} -> {trained:.4} ({:.1}% of initial, < 10%)",
            100.0 * ratio
        ),
    );
}

fn criterion_suite(lines: &mut Vec<Line>, id: usize, what: &str, outcomes: Vec<CheckOutcome>) {
    let (ok, detail) = all_pass(&outcomes);
    report(lines, id, ok, format!("{what}: {detail}"));
}

/// Paths of the cached desk experiment.
struct Desk {
    root: PathBuf,
    model: PathBuf,
    splices: PathBuf,
    train_seconds: f64,
    reused: bool,
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        seed: DESK_SEED,
        ..TrainConfig::desk()
    }
}

fn cache_is_complete(root: &Path) -> bool {
    let Ok(text) = fs::read_to_string(root.join("corpus/corpus.json")) else {
        return false;
    };
    let Ok(m) = serde_json::from_str::<CorpusManifest>(&text) else {
        return false;
    };
    let corpus_ok =
        m.models.len() == 4 && m.images_per_model == 200 && m.width == 256 && m.seed == DESK_SEED;
    let config = desk_config();
    let config_ok = fs::read_to_string(root.join("model/config.txt"))
        .map(|t| t.trim_end() == config.to_string())
        .unwrap_or(false);
    let epochs = read_report(&root.join("model/report.jsonl"))
        .map(|r| r.len())
        .unwrap_or(0);
    corpus_ok && config_ok && epochs == config.epochs && root.join("model/best.ckpt").exists()
}

fn prepare_desk() -> Desk {
    let root = workspace_target().join("desk");
    let (corpus, model) = (root.join("corpus"), root.join("model"));
    let splices = root.join(format!("splices_{SPLICE_SIZE}"));
    let retrain = std::env::var("SR_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
    let reused = !retrain && cache_is_complete(&root);
    if !reused {
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        run(bin().args([
            "synth",
            "--out",
            s(&corpus),
            "--seed",
            &DESK_SEED.to_string(),
        ]));
        run(bin().args([
            "train",
            "--data",
            s(&corpus),
            "--out",
            s(&model),
            "--seed",
            &DESK_SEED.to_string(),
        ]));
    }
    if !splices.join("splices.json").exists() {
        run(bin().args([
            "splice",
            "--corpus",
            s(&corpus),
            "--out",
            s(&splices),
            "--count",
            "50",
            "--size",
            &SPLICE_SIZE.to_string(),
            "--seed",
            &SPLICE_SEED.to_string(),
        ]));
    }
    let train_seconds = read_report(&model.join("report.jsonl"))
        .unwrap()
        .iter()
        .map(|r| r.seconds)
        .sum();
    Desk {
        root,
        model,
        splices,
        train_seconds,
        reused,
    }
}

/// Step and mean per-image ROC-AUC for each sweep row, plus the printed table.
struct Sweep {
    rows: Vec<(u64, f64)>,
    table: String,
}

/// One sweep over all steps. Its step-48 row is the criterion-7 localisation
/// run, so the 50 images are not localised twice at that step.
fn run_sweep(desk: &Desk) -> Sweep {
    let out = desk.root.join("sweep");
    let _ = fs::remove_dir_all(&out);
    let steps = SWEEP_STEPS.map(|s| s.to_string()).join(",");
    let o = run(bin().args([
        "sweep",
        "--model",
        s(&desk.model.join("best.ckpt")),
        "--images",
        s(&desk.splices.join("images")),
        "--masks",
        s(&desk.splices.join("masks")),
        "--steps",
        &steps,
        "--out",
        s(&out),
    ]));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let rows = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["step"].as_u64().unwrap(),
                r["evaluation"]["summary"]["auc"]
                    .as_f64()
                    .unwrap_or(f64::NAN),
            )
        })
        .collect();
    Sweep {
        rows,
        table: String::from_utf8_lossy(&o.stdout).into_owned(),
    }
}

fn criterion_7(lines: &mut Vec<Line>, desk: &Desk, sweep: &Sweep) -> bool {
    let records = read_report(&desk.model.join("report.jsonl")).unwrap();
    let best = records.iter().map(|r| r.val_acc).fold(0.0f64, f64::max);
    let auc = sweep
        .rows
        .iter()
        .find(|r| r.0 == 48)
        .map_or(f64::NAN, |r| r.1);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let minutes = desk.train_seconds / 60.0;
    let time_ok = minutes <= 45.0;
    let quality_ok = best >= 0.60 && auc >= 0.75;
    report(
        lines,
        7,
        quality_ok && time_ok,
        format!(
            "best validation accuracy {best:.3} (>= 0.60), mean per-image ROC-AUC at step 48 over 50 {SPLICE_SIZE} px splices {auc:.4} (>= 0.75), \
             training {minutes:.1} min on {cores} core(s) (<= 45 min on 4 cores){}{}",
            if time_ok { "" } else { "; time budget not met on this machine" },
            if desk.reused { "; cached desk run reused" } else { "" }
        ),
    );
    quality_ok
}

fn criterion_8(lines: &mut Vec<Line>, sweep: &Sweep) {
    let mut rows = sweep.rows.clone();
    let shaped = rows.iter().map(|r| r.0 as usize).collect::<Vec<_>>() == SWEEP_STEPS
        && sweep.table.lines().count() == 2 + SWEEP_STEPS.len();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top2 = rows.iter().take(2).any(|r| r.0 == 48);
    report(
        lines,
        8,
        shaped && top2,
        format!(
            "steps by ROC-AUC {:?}; step 48 in top two: {top2}",
            rows.iter()
                .map(|(s, a)| format!("{s}:{a:.4}"))
                .collect::<Vec<_>>()
        ),
    );
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Small pipeline run with one worker: synth, train, splice, localize and
/// evaluate. Returns every output except the wall-clock field of the
/// training report.
fn pipeline(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let w = ["--workers", "1"];
    let (corpus, model, splices, eval) = (
        dir.join("corpus"),
        dir.join("model"),
        dir.join("splices"),
        dir.join("eval"),
    );
    run(bin().args(w).args([
        "synth",
        "--out",
        s(&corpus),
        "--models",
        "2",
        "--images-per-model",
        "6",
        "--size",
        "96",
        "--seed",
        "4",
    ]));
    run(bin().args(w).args([
        "train",
        "--data",
        s(&corpus),
        "--out",
        s(&model),
        "--epochs",
        "2",
        "--set",
        "batch_size=4",
        "--set",
        "patches_per_epoch=8",
        "--set",
        "constant_lr_epochs=1",
        "--seed",
        "4",
    ]));
    run(bin().args(w).args([
        "splice",
        "--corpus",
        s(&corpus),
        "--out",
        s(&splices),
        "--count",
        "2",
        "--size",
        "96",
        "--seed",
        "4",
    ]));
    let ckpt = model.join("last.ckpt");
    let image = splices.join("images/splice_000.png");
    run(bin().args(w).args([
        "localize",
        "--model",
        s(&ckpt),
        "--image",
        s(&image),
        "--step",
        "12",
        "--out",
        s(&dir.join("map.png")),
        "--raw",
        s(&dir.join("map.srmap")),
    ]));
    run(bin().args(w).args([
        "evaluate",
        "--model",
        s(&ckpt),
        "--images",
        s(&splices.join("images")),
        "--masks",
        s(&splices.join("masks")),
        "--step",
        "12",
        "--out",
        s(&eval),
    ]));
    let mut files = tree(dir);
    for (path, bytes) in files.iter_mut() {
        if path.ends_with("report.jsonl") {
            let text = String::from_utf8(bytes.clone()).unwrap();
            let lines: Vec<String> = text
                .lines()
                .map(|l| {
                    let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("seconds");
                    v.to_string()
                })
                .collect();
            *bytes = lines.join("\n").into_bytes();
        }
    }
    files
}

fn criterion_9(lines: &mut Vec<Line>) {
    let dir = tempfile::tempdir().unwrap();
    let a = pipeline(&dir.path().join("a"));
    let b = pipeline(&dir.path().join("b"));
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let same_names = a.iter().map(|f| &f.0).eq(b.iter().map(|f| &f.0));
    let kinds = |ext: &str| {
        a.iter()
            .filter(|f| f.0.extension().is_some_and(|e| e == ext))
            .count()
    };
    report(
        lines,
        9,
        same_names && differing.is_empty() && kinds("ckpt") >= 2 && kinds("srmap") >= 2 && kinds("json") >= 2,
        format!(
            "two --workers 1 runs: {} files compared ({} checkpoints, {} raw maps, {} JSON), differing {:?} \
             (report wall-clock seconds excluded)",
            a.len(),
            kinds("ckpt"),
            kinds("srmap"),
            kinds("json"),
            differing
        ),
    );
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    criterion_1(&mut lines);
    criterion_2(&mut lines);
    let desk = prepare_desk();
    let _ = writeln!(
        std::io::stderr(),
        "desk experiment in {} ({})",
        desk.root.display(),
        if desk.reused { "cached" } else { "fresh" }
    );
    criterion_3(&mut lines, &desk);
    criterion_suite(
        &mut lines,
        4,
        "MI properties over 1000 trials",
        selfcheck::mi_suite(1000).unwrap(),
    );
    criterion_suite(
        &mut lines,
        5,
        "EM over 50 datasets x 100 restarts",
        selfcheck::em_suite(50, 100).unwrap(),
    );
    criterion_suite(
        &mut lines,
        6,
        "metric oracles",
        selfcheck::metric_suite(1000, 100).unwrap(),
    );
    let sweep = run_sweep(&desk);
    let quality = criterion_7(&mut lines, &desk, &sweep);
    criterion_8(&mut lines, &sweep);
    criterion_9(&mut lines);

    // The 4-core time budget of criterion 7 cannot be asserted on smaller
    // machines; its quality clauses are.
    let failed: Vec<usize> = lines
        .iter()
        .filter(|l| !l.passed && !(l.id == 7 && quality))
        .map(|l| l.id)
        .collect();
    let _ = writeln!(
        std::io::stderr(),
        "acceptance: {} of {} criteria pass",
        lines.iter().filter(|l| l.passed).count(),
        lines.len()
    );
    assert!(
        failed.is_empty(),
        "failed criteria {failed:?}: {:#?}",
        lines
            .iter()
            .filter(|l| failed.contains(&l.id))
            .map(|l| &l.text)
            .collect::<Vec<_>>()
    );
}
