use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, EvalConfig, HeadVariant, RunConfig, SamplingStrategy};
use super::detector::Detector;
use super::train::{train, TrainOptions};
use crate::data::{
    generate_dataset, read_annotations, read_manifest, read_point_cloud, ClassVocab, Scene,
    SyntheticSceneSpec,
};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport};

/// Train and test scenes for a run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub vocab: ClassVocab,
}

/// Test scenes come from a seed stream disjoint from the training scenes.
pub fn synthetic_split(
    spec: &SyntheticSceneSpec,
    train: usize,
    test: usize,
) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let test_spec = SyntheticSceneSpec {
        seed: spec.seed ^ 0x7E57_7E57_7E57_7E57,
        ..spec.clone()
    };
    Ok((
        generate_dataset(spec, train)?,
        generate_dataset(&test_spec, test)?,
    ))
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    let vocab = source.vocab();
    match source {
        DataSource::Synthetic(s) => {
            let (train, test) = synthetic_split(&s.spec, s.train_scenes, s.test_scenes)?;
            Ok(Dataset { train, test, vocab })
        }
        DataSource::Manifest { path, .. } => {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for entry in read_manifest(path)? {
                let points = read_point_cloud(&entry.cloud)?;
                let boxes = read_annotations(&entry.annotation)?
                    .iter()
                    .map(|r| r.to_box(&vocab))
                    .collect::<Result<Vec<_>>>()?;
                let scene = Scene {
                    points,
                    boxes,
                    visible_faces: Vec::new(),
                    candidate_faces: Vec::new(),
                };
                match entry.split.as_str() {
                    "train" => train.push(scene),
                    "test" => test.push(scene),
                    other => {
                        return Err(Error::Input(format!(
                            "{}: unknown split `{other}` (train, test)",
                            path.display()
                        )))
                    }
                }
            }
            Ok(Dataset { train, test, vocab })
        }
    }
}

pub fn evaluate_detector(
    detector: &Detector,
    scenes: &[Scene],
    eval: &EvalConfig,
    vocab: &ClassVocab,
) -> Result<EvalReport> {
    let clouds: Vec<_> = scenes.iter().map(|s| s.points.clone()).collect();
    let detections = detector.detect_many(&clouds, eval)?;
    let gt: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    evaluate(&detections, &gt, vocab, &eval.iou_thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: HeadVariant,
    pub strategy: SamplingStrategy,
    pub seed: u64,
    pub steps: u64,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Train from scratch with `cfg` (model seeded by `cfg.train.seed`) and evaluate on `test`.
pub fn run_experiment(cfg: &RunConfig, data: &Dataset) -> Result<(Detector, ExperimentResult)> {
    cfg.validate()?;
    let detector = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    let opts = TrainOptions {
        vocab: Some(data.vocab.clone()),
        ..Default::default()
    };
    let outcome = train(detector, &data.train, &cfg.train, &opts)?;
    let report = evaluate_detector(&outcome.detector, &data.test, &cfg.eval, &data.vocab)?;
    let result = ExperimentResult {
        variant: cfg.model.variant,
        strategy: cfg.model.strategy,
        seed: cfg.train.seed,
        steps: outcome.history.len() as u64,
        final_loss: outcome.final_loss().unwrap_or(f64::NAN),
        report,
    };
    Ok((outcome.detector, result))
}

/// One ablation arm: a head variant with a sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arm {
    pub variant: HeadVariant,
    pub strategy: SamplingStrategy,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.variant.uses_rep_points() {
            write!(f, "{}/{}", self.variant, self.strategy)
        } else {
            write!(f, "{}", self.variant)
        }
    }
}

/// Train every arm on the same data with the same seed; any failure names its arm.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &Dataset,
    arms: &[Arm],
) -> Result<Vec<ExperimentResult>> {
    arms.iter()
        .map(|arm| {
            let mut c = cfg.clone();
            c.model.variant = arm.variant;
            c.model.strategy = arm.strategy;
            run_experiment(&c, data)
                .map(|r| r.1)
                .map_err(|e| Error::Eval(format!("variant {arm} failed: {e}")))
        })
        .collect()
}

/// Rows `arm | mAP@t ...` with mAP in percent.
pub fn ablation_table(results: &[ExperimentResult]) -> String {
    let mut s = String::new();
    let names: Vec<String> = results
        .iter()
        .map(|r| {
            Arm {
                variant: r.variant,
                strategy: r.strategy,
            }
            .to_string()
        })
        .collect();
    let width = names.iter().map(String::len).max().unwrap_or(0).max(7);
    let _ = write!(s, "{:<width$}", "variant");
    if let Some(r) = results.first() {
        for t in &r.report.thresholds {
            let _ = write!(s, " {:>9}", format!("mAP@{t:.2}"));
        }
    }
    s.push('\n');
    for (name, r) in names.iter().zip(results) {
        let _ = write!(s, "{name:<width$}");
        for m in &r.report.map {
            let _ = write!(s, " {:>9.2}", 100.0 * m);
        }
        s.push('\n');
    }
    s
}
