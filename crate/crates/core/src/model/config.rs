use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::LossWeights;
use crate::data::{ClassVocab, SyntheticSceneSpec};
use crate::error::{Error, Result};

pub const CONFIG_SCHEMA: u32 = 1;

/// How representative points are placed around a cluster center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SamplingStrategy {
    /// `per_direction` points along each of the six face directions (K = 6n).
    Ray { per_direction: usize },
    /// `per_axis³` lattice points spanning the box, corners included.
    Grid { per_axis: usize },
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 5] = [
        SamplingStrategy::Ray { per_direction: 1 },
        SamplingStrategy::Ray { per_direction: 2 },
        SamplingStrategy::Ray { per_direction: 3 },
        SamplingStrategy::Grid { per_axis: 2 },
        SamplingStrategy::Grid { per_axis: 3 },
    ];

    pub fn num_points(&self) -> usize {
        match *self {
            SamplingStrategy::Ray { per_direction } => 6 * per_direction,
            SamplingStrategy::Grid { per_axis } => per_axis.pow(3),
        }
    }
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::Ray { per_direction: 2 }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::Ray { .. } => write!(f, "ray{}", self.num_points()),
            SamplingStrategy::Grid { .. } => write!(f, "grid{}", self.num_points()),
        }
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ray6" => Ok(SamplingStrategy::Ray { per_direction: 1 }),
            "ray12" => Ok(SamplingStrategy::Ray { per_direction: 2 }),
            "ray18" => Ok(SamplingStrategy::Ray { per_direction: 3 }),
            "grid8" => Ok(SamplingStrategy::Grid { per_axis: 2 }),
            "grid27" => Ok(SamplingStrategy::Grid { per_axis: 3 }),
            other => Err(Error::Config(format!(
                "unknown sampling strategy `{other}` (ray6, ray12, ray18, grid8, grid27)"
            ))),
        }
    }
}

impl TryFrom<String> for SamplingStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SamplingStrategy> for String {
    fn from(s: SamplingStrategy) -> String {
        s.to_string()
    }
}

/// Which proposal head sits on top of the shared backbone and voting stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    /// Representative points, seed revisiting, fusion and refinement.
    #[default]
    Full,
    /// Revisited features feed classification but boxes stay at the generated offsets.
    RpgOnly,
    /// One class-agnostic box regressor on the cluster feature.
    CaRegBaseline,
    /// As `CaRegBaseline`, with each vote fused with its source seed feature.
    SeedPtsBaseline,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::Full,
        HeadVariant::RpgOnly,
        HeadVariant::CaRegBaseline,
        HeadVariant::SeedPtsBaseline,
    ];

    pub fn uses_rep_points(self) -> bool {
        matches!(self, HeadVariant::Full | HeadVariant::RpgOnly)
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadVariant::Full => "full",
            HeadVariant::RpgOnly => "rpg-only",
            HeadVariant::CaRegBaseline => "ca-reg-baseline",
            HeadVariant::SeedPtsBaseline => "seed-pts-baseline",
        })
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown head variant `{s}` (full, rpg-only, ca-reg-baseline, seed-pts-baseline)"
                ))
            })
    }
}

/// Network shape. Everything here is stored in checkpoints and must match on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_points: usize,
    pub num_seeds: usize,
    pub seed_channels: usize,
    pub sa1_radius: f64,
    pub sa1_group: usize,
    pub sa1_channels: [usize; 2],
    pub sa2_centers: usize,
    pub sa2_radius: f64,
    pub sa2_group: usize,
    pub sa2_channels: [usize; 2],
    pub num_clusters: usize,
    pub cluster_radius: f64,
    pub cluster_group: usize,
    pub cluster_channels: usize,
    /// Hidden width of the proposal MLPs.
    pub head_channels: usize,
    pub heading_bins: usize,
    pub num_classes: usize,
    pub revisit_radius: f64,
    pub revisit_group: usize,
    pub revisit_channels: [usize; 3],
    /// Width of the projected revisit feature fused with the cluster feature.
    pub revisit_proj: usize,
    pub strategy: SamplingStrategy,
    pub variant: HeadVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_points: 4096,
            num_seeds: 256,
            seed_channels: 128,
            sa1_radius: 0.2,
            sa1_group: 32,
            sa1_channels: [32, 64],
            sa2_centers: 64,
            sa2_radius: 0.4,
            sa2_group: 16,
            sa2_channels: [64, 128],
            num_clusters: 64,
            cluster_radius: 0.3,
            cluster_group: 16,
            cluster_channels: 128,
            head_channels: 128,
            heading_bins: 12,
            num_classes: 3,
            revisit_radius: 0.2,
            revisit_group: 16,
            revisit_channels: [128, 64, 32],
            revisit_proj: 128,
            strategy: SamplingStrategy::default(),
            variant: HeadVariant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_points", self.num_points),
            ("num_seeds", self.num_seeds),
            ("seed_channels", self.seed_channels),
            ("sa1_group", self.sa1_group),
            ("sa2_centers", self.sa2_centers),
            ("sa2_group", self.sa2_group),
            ("num_clusters", self.num_clusters),
            ("cluster_group", self.cluster_group),
            ("num_classes", self.num_classes),
            ("revisit_group", self.revisit_group),
            ("cluster_channels", self.cluster_channels),
            ("head_channels", self.head_channels),
            ("revisit_proj", self.revisit_proj),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.sa1_channels.contains(&0)
            || self.sa2_channels.contains(&0)
            || self.revisit_channels.contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.heading_bins < 2 {
            return Err(Error::Config("heading_bins must be at least 2".into()));
        }
        let radii = [
            self.sa1_radius,
            self.sa2_radius,
            self.cluster_radius,
            self.revisit_radius,
        ];
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("radii must be positive".into()));
        }
        if self.num_seeds > self.num_points
            || self.sa2_centers > self.num_seeds
            || self.num_clusters > self.num_seeds
        {
            return Err(Error::Config(format!(
                "need num_points ≥ num_seeds ≥ sa2_centers, num_clusters (got {} / {} / {}, {})",
                self.num_points, self.num_seeds, self.sa2_centers, self.num_clusters
            )));
        }
        match self.strategy {
            SamplingStrategy::Ray { per_direction: 0 } => Err(Error::Config(
                "ray strategy needs at least one point per direction".into(),
            )),
            SamplingStrategy::Grid { per_axis } if per_axis < 2 => Err(Error::Config(
                "grid strategy needs at least two points per axis".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the schedule length below `epochs` worth of steps when set.
    pub max_steps: Option<u64>,
    pub base_lr: f64,
    pub seed: u64,
    pub augment: bool,
    pub loss_weights: LossWeights,
    /// Write a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 40,
            max_steps: None,
            base_lr: 0.003,
            seed: 0,
            augment: true,
            loss_weights: LossWeights::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::Config(
                "batch_size, epochs and max_steps must be positive".into(),
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("bad base_lr {}", self.base_lr)));
        }
        self.loss_weights.validate()
    }

    pub fn total_steps(&self, num_scenes: usize) -> u64 {
        let per_epoch = num_scenes.div_ceil(self.batch_size) as u64;
        let full = per_epoch * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Proposals must score strictly above this to be kept.
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.25, 0.5],
            score_threshold: 0.0,
            nms_iou: 0.25,
        }
    }
}

/// Scenes generated on the fly from a `SyntheticSceneSpec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub spec: SyntheticSceneSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DataSource {
    /// Manifest written by `gen-data`; entries tagged `train` / `test`.
    Manifest {
        path: PathBuf,
        classes: Vec<String>,
    },
    Synthetic(SyntheticData),
}

impl DataSource {
    pub fn vocab(&self) -> ClassVocab {
        match self {
            DataSource::Manifest { classes, .. } => ClassVocab(classes.clone()),
            DataSource::Synthetic(s) => s.spec.vocab(),
        }
    }
}

/// Everything a command needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub data: DataSource,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(data: DataSource, out_dir: impl Into<PathBuf>) -> Self {
        let mut model = ModelConfig::default();
        model.num_classes = data.vocab().len();
        Self {
            schema: CONFIG_SCHEMA,
            model,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        let vocab = self.data.vocab();
        if vocab.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the data declares {}",
                self.model.num_classes,
                vocab.len()
            )));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.spec.validate()?;
            if s.spec.num_points < self.model.num_points {
                return Err(Error::Config(format!(
                    "scenes have {} points, model needs {}",
                    s.spec.num_points, self.model.num_points
                )));
            }
        }
        let e = &self.eval;
        if e.iou_thresholds.is_empty()
            || e.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
            || !(0.0..=1.0).contains(&e.nms_iou)
        {
            return Err(Error::Config(format!("bad eval settings {e:?}")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> RunConfig {
        RunConfig::new(
            DataSource::Synthetic(SyntheticData {
                spec: SyntheticSceneSpec::oriented(),
                train_scenes: 4,
                test_scenes: 2,
            }),
            "out",
        )
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = synthetic();
        cfg.model.strategy = "grid27".parse().unwrap();
        cfg.model.variant = HeadVariant::SeedPtsBaseline;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_and_schema_are_rejected() {
        let cfg = synthetic();
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["model"]["hidden"] = 3.into();
        assert!(matches!(
            RunConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["schema"] = 7.into();
        assert!(matches!(
            RunConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn strategy_names() {
        for s in SamplingStrategy::ALL {
            assert_eq!(s.to_string().parse::<SamplingStrategy>().unwrap(), s);
        }
        assert_eq!(SamplingStrategy::default().num_points(), 12);
        assert!("ray7".parse::<SamplingStrategy>().is_err());
        for v in HeadVariant::ALL {
            assert_eq!(v.to_string().parse::<HeadVariant>().unwrap(), v);
        }
    }

    #[test]
    fn schedule_length() {
        let t = TrainConfig {
            batch_size: 8,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(t.total_steps(17), 9);
        let t = TrainConfig {
            max_steps: Some(5),
            ..t
        };
        assert_eq!(t.total_steps(17), 5);
    }
}
