//! Flat `key = value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Unknown keys,
//! duplicate keys and malformed values are errors that carry the line
//! number. [`RunConfig::resolved`] prints every key and parses back to the
//! same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::neck::{MergeMode, NeckVariant};
use crate::ops::PoolMode;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub n_images: usize,
    /// Directory with `annotations.json`; generated data is used when unset.
    pub dir: Option<PathBuf>,
    /// Which of the five split rotations `train` and `eval` use.
    pub replicate: usize,
    /// Generated images beyond the split pool that always go to training.
    pub extra_train: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            n_images: 250,
            dir: None,
            replicate: 0,
            extra_train: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `none` disables it.
    pub grad_clip: Option<f64>,
    /// Validation score is the best FROC TPR at or below this FPPI.
    pub val_max_fppi: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 4,
            seed: 5,
            grad_clip: Some(5.0),
            val_max_fppi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub replicates: usize,
    pub variants: Vec<NeckVariant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            replicates: 5,
            variants: NeckVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|p| parse_value(key, p.trim())).collect()
}

fn parse_range(key: &str, v: &str) -> std::result::Result<(f64, f64), String> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("{key} expects two comma-separated numbers")),
    }
}

fn pool_mode_name(m: PoolMode) -> &'static str {
    match m {
        PoolMode::Max => "max",
        PoolMode::Avg => "avg",
    }
}

impl RunConfig {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                source_name: source_name.to_string(),
                location: format!("line {}", i + 1),
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key {key}")));
            }
            cfg.set(key, value).map_err(err)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sets one key; the error message names the key.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "backbone.stem_channels" => m.backbone.stem_channels = parse_value(key, v)?,
            "backbone.stage_channels" => {
                let c: Vec<usize> = parse_list(key, v)?;
                m.backbone.stage_channels = c
                    .try_into()
                    .map_err(|_| format!("{key} expects four comma-separated integers"))?;
            }
            "backbone.blocks_per_stage" => m.backbone.blocks_per_stage = parse_value(key, v)?,
            "backbone.seed" => m.backbone.seed = parse_value(key, v)?,
            "neck.variant" => m.neck.variant = v.parse::<NeckVariant>().map_err(|e| e.to_string())?,
            "neck.out_channels" => m.neck.out_channels = parse_value(key, v)?,
            "neck.merge_mode" => m.neck.merge_mode = v.parse::<MergeMode>().map_err(|e| e.to_string())?,
            "neck.pool_mode" => {
                m.neck.pool_mode = match v {
                    "max" => PoolMode::Max,
                    "avg" => PoolMode::Avg,
                    _ => return Err(format!("{key} must be max or avg, got {v:?}")),
                }
            }
            "neck.relu" => m.neck.relu = parse_value(key, v)?,
            "neck.seed" => m.neck.seed = parse_value(key, v)?,
            "head.num_convs" => m.head.num_convs = parse_value(key, v)?,
            "head.center_radius" => m.head.center_radius = parse_value(key, v)?,
            "head.score_threshold" => m.head.score_threshold = parse_value(key, v)?,
            "head.nms_iou" => m.head.nms_iou = parse_value(key, v)?,
            "head.max_detections" => m.head.max_detections = parse_value(key, v)?,
            "head.seed" => m.head.seed = parse_value(key, v)?,
            "data.image_side" => d.scene.image_side = parse_value(key, v)?,
            "data.n_images" => d.n_images = parse_value(key, v)?,
            "data.masses_per_image_mean" => d.scene.masses_per_image_mean = parse_value(key, v)?,
            "data.small_fraction" => d.scene.small_fraction = parse_value(key, v)?,
            "data.small_area_range" => d.scene.small_area_range = parse_range(key, v)?,
            "data.large_area_range" => d.scene.large_area_range = parse_range(key, v)?,
            "data.noise_sigma" => d.scene.noise_sigma = parse_value(key, v)?,
            "data.seed" => d.scene.seed = parse_value(key, v)?,
            "data.dir" => d.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.replicate" => d.replicate = parse_value(key, v)?,
            "data.extra_train" => d.extra_train = parse_value(key, v)?,
            "train.lr" => t.lr = parse_value(key, v)?,
            "train.momentum" => t.momentum = parse_value(key, v)?,
            "train.epochs" => t.epochs = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.seed" => t.seed = parse_value(key, v)?,
            "train.grad_clip" => {
                t.grad_clip = match v {
                    "" | "none" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "train.val_max_fppi" => t.val_max_fppi = parse_value(key, v)?,
            "eval.iou_thresholds" => self.eval.iou_thresholds = parse_list(key, v)?,
            "eval.score_thresholds" => self.eval.score_thresholds = parse_list(key, v)?,
            "eval.fppi_iou" => self.eval.fppi_iou = parse_value(key, v)?,
            "eval.froc_iou" => self.eval.froc_iou = parse_value(key, v)?,
            "ablate.replicates" => self.ablate.replicates = parse_value(key, v)?,
            "ablate.variants" => {
                self.ablate.variants = v
                    .split(',')
                    .map(|p| p.trim().parse::<NeckVariant>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Replaces every seed (initialization, data, training).
    pub fn override_seed(&mut self, seed: u64) {
        self.model.backbone.seed = seed;
        self.model.neck.seed = seed;
        self.model.head.seed = seed;
        self.data.scene.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.model.head.validate()?;
        self.data.scene.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.model.neck.out_channels == 0 {
            return bad("neck.out_channels must be positive");
        }
        if self.data.n_images < 5 {
            return bad("data.n_images must be at least 5 for the five-part split");
        }
        if self.data.dir.is_some() && self.data.extra_train > 0 {
            return bad("data.extra_train applies to generated data only");
        }
        if self.data.replicate >= 5 {
            return bad("data.replicate must be in 0..5");
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
            return bad("train.lr must be positive and train.momentum in [0, 1)");
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive");
        }
        if t.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("train.grad_clip must be positive");
        }
        let e = &self.eval;
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if e.iou_thresholds.is_empty() || !e.iou_thresholds.iter().all(unit) {
            return bad("eval.iou_thresholds must be a non-empty list in [0, 1]");
        }
        if !e.score_thresholds.iter().all(unit) || e.score_thresholds.windows(2).any(|w| w[1] > w[0]) {
            return bad("eval.score_thresholds must lie in [0, 1] and be sorted descending");
        }
        if !unit(&e.fppi_iou) || !unit(&e.froc_iou) {
            return bad("eval.fppi_iou and eval.froc_iou must lie in [0, 1]");
        }
        if self.ablate.replicates == 0 || self.ablate.replicates > 5 || self.ablate.variants.is_empty() {
            return bad("ablate.replicates must be in 1..=5 with at least one variant");
        }
        Ok(())
    }

    /// Every key with its effective value, in a stable order.
    pub fn resolved(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let e = &self.eval;
        let (s0, s1) = d.scene.small_area_range;
        let (l0, l1) = d.scene.large_area_range;
        let pairs: Vec<(&str, String)> = vec![
            ("backbone.stem_channels", m.backbone.stem_channels.to_string()),
            ("backbone.stage_channels", list(&m.backbone.stage_channels)),
            ("backbone.blocks_per_stage", m.backbone.blocks_per_stage.to_string()),
            ("backbone.seed", m.backbone.seed.to_string()),
            ("neck.variant", m.neck.variant.to_string()),
            ("neck.out_channels", m.neck.out_channels.to_string()),
            ("neck.merge_mode", m.neck.merge_mode.to_string()),
            ("neck.pool_mode", pool_mode_name(m.neck.pool_mode).to_string()),
            ("neck.relu", m.neck.relu.to_string()),
            ("neck.seed", m.neck.seed.to_string()),
            ("head.num_convs", m.head.num_convs.to_string()),
            ("head.center_radius", m.head.center_radius.to_string()),
            ("head.score_threshold", m.head.score_threshold.to_string()),
            ("head.nms_iou", m.head.nms_iou.to_string()),
            ("head.max_detections", m.head.max_detections.to_string()),
            ("head.seed", m.head.seed.to_string()),
            ("data.image_side", d.scene.image_side.to_string()),
            ("data.n_images", d.n_images.to_string()),
            ("data.masses_per_image_mean", d.scene.masses_per_image_mean.to_string()),
            ("data.small_fraction", d.scene.small_fraction.to_string()),
            ("data.small_area_range", format!("{s0},{s1}")),
            ("data.large_area_range", format!("{l0},{l1}")),
            ("data.noise_sigma", d.scene.noise_sigma.to_string()),
            ("data.seed", d.scene.seed.to_string()),
            (
                "data.dir",
                d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("data.replicate", d.replicate.to_string()),
            ("data.extra_train", d.extra_train.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            (
                "train.grad_clip",
                t.grad_clip.map_or_else(|| "none".to_string(), |c| c.to_string()),
            ),
            ("train.val_max_fppi", t.val_max_fppi.to_string()),
            ("eval.iou_thresholds", list(&e.iou_thresholds)),
            ("eval.score_thresholds", list(&e.score_thresholds)),
            ("eval.fppi_iou", e.fppi_iou.to_string()),
            ("eval.froc_iou", e.froc_iou.to_string()),
            ("ablate.replicates", self.ablate.replicates.to_string()),
            ("ablate.variants", list(&self.ablate.variants)),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model.neck.variant = NeckVariant::Panet;
        cfg.train.grad_clip = Some(5.0);
        cfg.data.dir = Some(PathBuf::from("/tmp/data"));
        cfg.eval.score_thresholds = vec![0.9, 0.3];
        let back = RunConfig::parse(&cfg.resolved(), "resolved").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().resolved(), "r").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("# c\ntrain.lr = 0.1\nneck.bogus = 3\n", "cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("neck.bogus"), "{msg}");
        assert!(RunConfig::parse("train.lr = fast", "cfg").is_err());
        assert!(RunConfig::parse("train.lr = 0.1\ntrain.lr = 0.2", "cfg").is_err());
        assert!(RunConfig::parse("train.epochs", "cfg").is_err());
    }

    #[test]
    fn comments_and_seed_override() {
        let mut cfg = RunConfig::parse("neck.variant = fpn  # trailing\n\n", "cfg").unwrap();
        assert_eq!(cfg.model.neck.variant, NeckVariant::Fpn);
        cfg.override_seed(42);
        assert_eq!(cfg.model.backbone.seed, 42);
        assert_eq!(cfg.data.scene.seed, 42);
        assert_eq!(cfg.train.seed, 42);
    }
}
