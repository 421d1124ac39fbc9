use std::fs;
use std::path::{Path, PathBuf};

use brnet::autodiff::Checkpoint;
use brnet::data::{
    read_annotations, read_manifest, read_point_cloud, write_annotations, write_manifest, write_point_cloud,
    AnnotationRecord, ClassVocab, ManifestEntry, Scene, SyntheticSceneSpec,
};
use brnet::evalkit::evaluate;
use brnet::model::{
    ablation_table, evaluate_detector, load_dataset, run_ablation, synthetic_split, train as train_detector,
    Arm, DataSource, Detector, EvalConfig, MetricsRecord, RunConfig, TrainOptions,
};
use brnet::{Error, Result};

use crate::{AblateArgs, EvalArgs, GenDataArgs, InferArgs, TrainArgs, VizArgs};

const PROGRESS_EVERY: u64 = 50;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_spec(spec: &str) -> Result<SyntheticSceneSpec> {
    let path = Path::new(spec);
    if !path.exists() {
        return SyntheticSceneSpec::preset(spec);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSceneSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = load_spec(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene_dir = a.out.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let vocab = spec.vocab();
    let (train, test) = synthetic_split(&spec, a.count, a.test_count)?;
    let mut entries = Vec::with_capacity(train.len() + test.len());
    for (split, scenes) in [("train", &train), ("test", &test)] {
        for (i, scene) in scenes.iter().enumerate() {
            let cloud = PathBuf::from("scenes").join(format!("{split}_{i:05}.bpc"));
            let annotation = PathBuf::from("scenes").join(format!("{split}_{i:05}.json"));
            write_point_cloud(&a.out.join(&cloud), &scene.points)?;
            let records = scene
                .boxes
                .iter()
                .map(|b| AnnotationRecord::from_box(b, &vocab))
                .collect::<Result<Vec<_>>>()?;
            write_annotations(&a.out.join(&annotation), &records)?;
            entries.push(ManifestEntry {
                cloud,
                annotation,
                split: split.to_string(),
            });
        }
    }
    write_manifest(&a.out.join("manifest.json"), &entries)?;
    write_text(
        &a.out.join("classes.json"),
        &serde_json::to_string_pretty(&vocab.0).expect("names serialize"),
    )?;
    write_text(
        &a.out.join("spec.json"),
        &serde_json::to_string_pretty(&spec).expect("spec serializes"),
    )?;
    println!(
        "wrote {} train and {} test scenes to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

/// Loads a run config, resolving a relative manifest path against the config's directory.
fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let DataSource::Manifest { path: m, .. } = &mut cfg.data {
        if m.is_relative() {
            *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
        }
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = a.strategy {
        cfg.model.strategy = s;
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let data = load_dataset(&cfg.data)?;
    let total = cfg.train.total_steps(data.train.len());
    let progress = |r: &MetricsRecord| {
        if r.step % PROGRESS_EVERY == 0 || r.step + 1 == total {
            eprintln!(
                "step {:>6}/{total} epoch {:>3} lr {:.2e} loss {:.4}",
                r.step + 1,
                r.epoch,
                r.lr,
                r.loss.total
            );
        }
    };
    let opts = TrainOptions {
        metrics_path: Some(out.join("metrics.jsonl")),
        checkpoint_dir: Some(out.join("checkpoints")),
        vocab: Some(data.vocab.clone()),
        on_step: Some(&progress),
    };
    let detector = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train_detector(detector, &data.train, &cfg.train, &opts)?;
    println!(
        "trained {} steps, final loss {:.4}; checkpoint {}",
        outcome.history.len(),
        outcome.final_loss().unwrap_or(f64::NAN),
        out.join("checkpoints").join("final.brn").display()
    );
    if !data.test.is_empty() {
        let report = evaluate_detector(&outcome.detector, &data.test, &cfg.eval, &data.vocab)?;
        write_text(&out.join("report.json"), &report.to_json())?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn load_detector(path: &Path) -> Result<(Detector, ClassVocab)> {
    Detector::from_checkpoint(&Checkpoint::load(path)?, None)
}

fn check_vocab(expected: &ClassVocab, found: &ClassVocab, source: &Path) -> Result<()> {
    if expected != found {
        return Err(Error::Input(format!(
            "class vocabulary mismatch: checkpoint has {:?}, {} has {:?}",
            expected.0,
            source.display(),
            found.0
        )));
    }
    Ok(())
}

fn manifest_scenes(path: &Path, split: &str, vocab: &ClassVocab) -> Result<Vec<Scene>> {
    let classes = path.parent().unwrap_or(Path::new(".")).join("classes.json");
    if classes.exists() {
        let text = fs::read_to_string(&classes).map_err(|e| Error::io(&classes, e))?;
        let names: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::json(&classes, e))?;
        check_vocab(vocab, &ClassVocab(names), &classes)?;
    }
    read_manifest(path)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let boxes = read_annotations(&e.annotation)?
                .iter()
                .map(|r| r.to_box(vocab))
                .collect::<Result<Vec<_>>>()?;
            Ok(Scene {
                points: read_point_cloud(&e.cloud)?,
                boxes,
                visible_faces: Vec::new(),
                candidate_faces: Vec::new(),
            })
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (detector, vocab) = load_detector(&a.checkpoint)?;
    let mut eval_cfg = EvalConfig {
        iou_thresholds: a.iou.clone(),
        ..EvalConfig::default()
    };
    let scenes = match (&a.manifest, &a.config) {
        (Some(m), _) => manifest_scenes(m, &a.split, &vocab)?,
        (None, Some(c)) => {
            let cfg = load_config(c)?;
            check_vocab(&vocab, &cfg.data.vocab(), c)?;
            eval_cfg.nms_iou = cfg.eval.nms_iou;
            eval_cfg.score_threshold = cfg.eval.score_threshold;
            let data = load_dataset(&cfg.data)?;
            match a.split.as_str() {
                "train" => data.train,
                "test" => data.test,
                other => return Err(Error::Argument(format!("unknown split `{other}` (train, test)"))),
            }
        }
        (None, None) => return Err(Error::Argument("eval needs --manifest or --config".into())),
    };
    if let Some(t) = a.threshold {
        eval_cfg.score_threshold = t;
    }
    if eval_cfg.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Argument(format!("IoU thresholds {:?} outside [0, 1]", eval_cfg.iou_thresholds)));
    }
    let clouds: Vec<_> = scenes.iter().map(|s| s.points.clone()).collect();
    let gt: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let detections = detector.detect_many(&clouds, &eval_cfg)?;
    let report = evaluate(&detections, &gt, &vocab, &eval_cfg.iou_thresholds)?;
    if let Some(out) = &a.out {
        write_text(out, &report.to_json())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let (detector, vocab) = load_detector(&a.checkpoint)?;
    let cloud = read_point_cloud(&a.cloud)?;
    let boxes = if a.all {
        detector.propose(&cloud)?.into_iter().map(|p| p.bbox).collect()
    } else {
        let eval = EvalConfig {
            score_threshold: a.threshold.unwrap_or(EvalConfig::default().score_threshold),
            ..EvalConfig::default()
        };
        detector.detect(&cloud, &eval)?
    };
    let records = boxes
        .iter()
        .map(|b| AnnotationRecord::from_box(b, &vocab))
        .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(out) => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_annotations(out, &records)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&records).expect("records serialize"));
            Ok(())
        }
    }
}

/// Arms in variant order; strategies expand only the representative-point variants.
fn arms(a: &AblateArgs, default: brnet::model::SamplingStrategy) -> Vec<Arm> {
    let strategies = if a.strategy.is_empty() {
        vec![default]
    } else {
        a.strategy.clone()
    };
    let mut out = Vec::new();
    for &variant in &a.variant {
        if variant.uses_rep_points() {
            out.extend(strategies.iter().map(|&strategy| Arm { variant, strategy }));
        } else {
            out.push(Arm {
                variant,
                strategy: default,
            });
        }
    }
    out
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    let arms = arms(a, cfg.model.strategy);
    if arms.is_empty() {
        return Err(Error::Argument("no ablation arms selected".into()));
    }
    let data = load_dataset(&cfg.data)?;
    let results = run_ablation(&cfg, &data, &arms)?;
    let table = ablation_table(&results);
    write_text(
        &cfg.out_dir.join("ablation.json"),
        &serde_json::to_string_pretty(&results).expect("results serialize"),
    )?;
    write_text(&cfg.out_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn viz_export(a: &VizArgs) -> Result<()> {
    if !(a.edge_width > 0.0) {
        return Err(Error::Argument(format!("edge width {} must be positive", a.edge_width)));
    }
    let cloud = read_point_cloud(&a.cloud)?;
    let boxes = match &a.detections {
        Some(p) => read_annotations(p)?,
        None => Vec::new(),
    };
    let mesh = crate::viz::scene_mesh(&cloud, &boxes, a.edge_width);
    write_text(&a.out, &mesh.to_ply())
}
