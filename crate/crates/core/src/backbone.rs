//! Toy convolutional backbone producing the stride 4/8/16/32 pyramid.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::Conv2d;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
            seed: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "backbone.stage_channels must be non-decreasing, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }
}

/// The four backbone maps `fm^0..fm^3` (or any four-level pyramid) as tape
/// nodes, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

impl PyramidFeatures {
    pub fn new(levels: Vec<Var>) -> Self {
        Self {
            levels,
            strides: PYRAMID_STRIDES.to_vec(),
        }
    }

    /// Copies the level values off the tape.
    pub fn tensors<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.levels.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<Conv2d>,
    blocks: Vec<Conv2d>,
}

/// Stem of two stride-2 convs (stride 4), then a stride-4 stage of residual
/// blocks and three downsampling stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: [Conv2d; 2],
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let [c0, ..] = config.stage_channels;
        let stem = [
            Conv2d::down3(store, "backbone.stem.conv0", 1, config.stem_channels, seed)?,
            Conv2d::down3(store, "backbone.stem.conv1", config.stem_channels, c0, seed)?,
        ];
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let down = if i == 0 {
                None
            } else {
                let prev = config.stage_channels[i - 1];
                Some(Conv2d::down3(store, &format!("backbone.stage{i}.down"), prev, c, seed)?)
            };
            let blocks = (0..config.blocks_per_stage)
                .map(|b| Conv2d::same3(store, &format!("backbone.stage{i}.block{b}"), c, c, seed))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// Maps a `(B, 1, H, W)` image batch to `fm^0..fm^3`. `H` and `W` must be
    /// multiples of 32.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<PyramidFeatures> {
        let s = tape.shape(image);
        if s.channels() != 1 {
            return Err(shape_err("backbone_forward", format!("expected one input channel, got {s}")));
        }
        if s.height() % 32 != 0 || s.width() % 32 != 0 || s.height() == 0 || s.width() == 0 {
            return Err(shape_err(
                "backbone_forward",
                format!("input {}x{} is not a positive multiple of 32", s.height(), s.width()),
            ));
        }
        let mut x = image;
        for conv in &self.stem {
            let y = conv.forward(tape, store, x)?;
            x = tape.relu(y);
        }
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                let y = down.forward(tape, store, x)?;
                x = tape.relu(y);
            }
            for block in &stage.blocks {
                let y = block.forward(tape, store, x)?;
                let sum = tape.add(x, y)?;
                x = tape.relu(sum);
            }
            levels.push(x);
        }
        Ok(PyramidFeatures::new(levels))
    }

    pub fn param_count(&self) -> usize {
        self.stem.iter().map(Conv2d::param_count).sum::<usize>()
            + self
                .stages
                .iter()
                .flat_map(|s| s.down.iter().chain(&s.blocks))
                .map(Conv2d::param_count)
                .sum::<usize>()
    }
}

/// Bilinear resize of an image batch to `target_h × target_w` (stretching, no
/// letterboxing). Targets must be multiples of 32.
pub fn resize_input<T: Scalar>(image: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    if target_h == 0 || target_w == 0 || target_h % 32 != 0 || target_w % 32 != 0 {
        return Err(arg_err(
            "resize_input",
            format!("target {target_h}x{target_w} is not a positive multiple of 32"),
        ));
    }
    let s = image.shape();
    if (s.height(), s.width()) == (target_h, target_w) {
        return Ok(image.clone());
    }
    crate::ops::resize_bilinear(image, target_h, target_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn run(config: &BackboneConfig, side: usize) -> (Tape<f64>, ParamStore<f64>, PyramidFeatures) {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, config).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::from_fn(Shape::new(1, 1, side, side), |_, _, y, x| ((y * 7 + x * 3) % 11) as f64 / 11.0);
        let x = tape.constant(img);
        let p = bb.forward(&mut tape, &store, x).unwrap();
        (tape, store, p)
    }

    #[test]
    fn default_pyramid_shapes() {
        let (tape, _, p) = run(&BackboneConfig::default(), 64);
        let shapes: Vec<Shape> = p.levels.iter().map(|&v| tape.shape(v)).collect();
        assert_eq!(
            shapes,
            vec![
                Shape::new(1, 16, 16, 16),
                Shape::new(1, 32, 8, 8),
                Shape::new(1, 64, 4, 4),
                Shape::new(1, 128, 2, 2)
            ]
        );
    }

    #[test]
    fn stride_contract() {
        for side in [32, 64, 96, 128] {
            let (tape, _, p) = run(&BackboneConfig::default(), side);
            for (&v, &s) in p.levels.iter().zip(&PYRAMID_STRIDES) {
                assert_eq!(tape.shape(v).height(), side / s);
                assert_eq!(tape.shape(v).width(), side / s);
            }
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, &BackboneConfig::default()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 48, 64)));
        assert!(bb.forward(&mut tape, &store, x).is_err());
    }

    #[test]
    fn zeroed_weights_give_zero_pyramid() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, &BackboneConfig::default()).unwrap();
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 64, 64)));
        let p = bb.forward(&mut tape, &store, x).unwrap();
        for t in p.tensors(&tape) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_pyramid() {
        let (t1, _, p1) = run(&BackboneConfig::default(), 64);
        let (t2, _, p2) = run(&BackboneConfig::default(), 64);
        assert_eq!(p1.tensors(&t1), p2.tensors(&t2));
        let other = BackboneConfig {
            seed: 99,
            ..Default::default()
        };
        let (t3, _, p3) = run(&other, 64);
        assert_ne!(p1.tensors(&t1), p3.tensors(&t3));
    }

    #[test]
    fn gradient_reaches_stem_from_coarsest_level() {
        let (mut tape, mut store, p) = run(&BackboneConfig::default(), 64);
        let loss = tape.sum(p.levels[3]);
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape).unwrap();
        let stem = store.by_name("backbone.stem.conv0.weight").unwrap();
        assert!(stem.grad.squared_norm() > 0.0);
    }

    #[test]
    fn param_count_matches_store() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, &BackboneConfig::default()).unwrap();
        assert_eq!(bb.param_count(), store.numel());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, y, x| (y * x) as f64);
        assert_eq!(resize_input(&img, 64, 64).unwrap(), img);
        let c = Tensor::full(Shape::new(1, 1, 128, 96), 0.7);
        let r = resize_input(&c, 64, 64).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.7f64).abs() < 1e-15));
        assert!(resize_input(&c, 48, 64).is_err());
    }

    #[test]
    fn resize_matches_scalar_bilinear_oracle() {
        let img = Tensor::from_fn(Shape::new(1, 1, 128, 96), |_, _, y, x| ((y * 31 + x * 17) % 23) as f64);
        let r = resize_input(&img, 64, 64).unwrap();
        // Direct per-pixel evaluation of the half-pixel bilinear rule.
        let sample = |len_in: usize, len_out: usize, o: usize| {
            let s = ((o as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, s - i0 as f64)
        };
        for oy in 0..64 {
            for ox in 0..64 {
                let (y0, y1, fy) = sample(128, 64, oy);
                let (x0, x1, fx) = sample(96, 64, ox);
                let p = |y, x| img.get(0, 0, y, x);
                let want = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                assert!((r.get(0, 0, oy, ox) - want).abs() < 1e-12);
            }
        }
    }
}
