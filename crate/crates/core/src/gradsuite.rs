//! Finite-difference suite over every differentiable op, the fused losses,
//! all four necks and a full detector loss.

use std::fmt;

use rand_core::RngCore;

use crate::backbone::{BackboneConfig, PyramidFeatures};
use crate::boxes::BBox;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check_with, param_grad_check, random_tensor, CheckStats};
use crate::head::{focal_loss, iou_loss, HeadConfig, RegTarget};
use crate::model::{Detector, ModelConfig};
use crate::neck::{Neck, NeckConfig, NeckVariant};
use crate::ops::PoolMode;
use crate::param::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::{weighted_sum, OpKind, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    /// Random evaluation points per component.
    pub points: usize,
    pub seed: u64,
    /// Neck settings (merge mode, pooling, ReLU) to check; channel counts are
    /// replaced by small ones.
    pub neck: NeckConfig,
    /// Coordinates probed per parameter tensor / input level at each point.
    pub coords_per_tensor: usize,
    /// Adjoint corruption applied to every analytic tape.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            points: 10,
            seed: 17,
            neck: NeckConfig::default(),
            coords_per_tensor: 6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub component: String,
    pub points: usize,
    pub stats: CheckStats,
}

impl ComponentResult {
    /// A component passes when some coordinate was compared and every
    /// compared coordinate is within `tolerance`.
    pub fn passed(&self, tolerance: f64) -> bool {
        self.stats.compared > 0 && self.stats.worst < tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<ComponentResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed(self.tolerance))
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.stats.worst).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.results.iter().map(|r| r.stats.skipped).sum()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let verdict = if r.passed(self.tolerance) { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<24} {:>10.3e}  ({} points, {} coords, {} kink-skipped)  {verdict}",
                r.component, r.stats.worst, r.points, r.stats.compared, r.stats.skipped
            )?;
        }
        write!(
            f,
            "worst relative error {:.3e} (tolerance {:.0e}, {} kink-skipped): {}",
            self.worst(),
            self.tolerance,
            self.skipped(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

type ScalarFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// Moves values away from the ReLU kink so central differences stay on one
/// side of it.
fn off_kink(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn draw_coords(n: usize, k: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        (0..k).map(|_| (rng.next_f64() * n as f64) as usize % n).collect()
    }
}

struct OpCase {
    name: &'static str,
    shape: Shape,
    kinked: bool,
    build: fn(&mut SplitMix64) -> ScalarFn,
}

/// Fixed random weights for reducing an op output to a scalar.
fn project(rng: &mut SplitMix64, shape: Shape) -> Tensor<f64> {
    random_tensor(shape, rng)
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d.input",
            shape: Shape::new(2, 3, 5, 5),
            kinked: false,
            build: |rng| {
                let w: Tensor<f64> = random_tensor(Shape::new(4, 3, 3, 3), rng);
                let b: Tensor<f64> = random_tensor(Shape::new(1, 4, 1, 1), rng);
                let proj = project(rng, Shape::new(2, 4, 3, 3));
                Box::new(move |t, x| {
                    let wv = t.constant(w.clone());
                    let bv = t.constant(b.clone());
                    let y = t.conv2d(x, wv, Some(bv), 2, 1)?;
                    weighted_sum(t, y, proj.clone())
                })
            },
        },
        OpCase {
            name: "conv2d.weight",
            shape: Shape::new(4, 3, 3, 3),
            kinked: false,
            build: |rng| {
                let input: Tensor<f64> = random_tensor(Shape::new(2, 3, 5, 5), rng);
                let proj = project(rng, Shape::new(2, 4, 5, 5));
                Box::new(move |t, w| {
                    let xv = t.constant(input.clone());
                    let y = t.conv2d(xv, w, None, 1, 1)?;
                    weighted_sum(t, y, proj.clone())
                })
            },
        },
        OpCase {
            name: "conv2d.bias",
            shape: Shape::new(1, 4, 1, 1),
            kinked: false,
            build: |rng| {
                let input: Tensor<f64> = random_tensor(Shape::new(1, 2, 4, 4), rng);
                let w: Tensor<f64> = random_tensor(Shape::new(4, 2, 1, 1), rng);
                let proj = project(rng, Shape::new(1, 4, 4, 4));
                Box::new(move |t, b| {
                    let xv = t.constant(input.clone());
                    let wv = t.constant(w.clone());
                    let y = t.conv2d(xv, wv, Some(b), 1, 0)?;
                    weighted_sum(t, y, proj.clone())
                })
            },
        },
        OpCase {
            name: "pool2d.max",
            shape: Shape::new(1, 2, 8, 8),
            kinked: false,
            build: |rng| {
                let p2 = project(rng, Shape::new(1, 2, 4, 4));
                let p4 = project(rng, Shape::new(1, 2, 2, 2));
                Box::new(move |t, x| {
                    let a = t.pool2d(x, 2, PoolMode::Max)?;
                    let b = t.pool2d(x, 4, PoolMode::Max)?;
                    let sa = weighted_sum(t, a, p2.clone())?;
                    let sb = weighted_sum(t, b, p4.clone())?;
                    t.add(sa, sb)
                })
            },
        },
        OpCase {
            name: "pool2d.avg",
            shape: Shape::new(1, 2, 8, 8),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(1, 2, 1, 1));
                Box::new(move |t, x| {
                    let a = t.pool2d(x, 8, PoolMode::Avg)?;
                    weighted_sum(t, a, p.clone())
                })
            },
        },
        OpCase {
            name: "upsample_bilinear",
            shape: Shape::new(1, 2, 3, 4),
            kinked: false,
            build: |rng| {
                let p2 = project(rng, Shape::new(1, 2, 6, 8));
                let p8 = project(rng, Shape::new(1, 2, 24, 32));
                Box::new(move |t, x| {
                    let a = t.upsample_bilinear(x, 2)?;
                    let b = t.upsample_bilinear(x, 8)?;
                    let sa = weighted_sum(t, a, p2.clone())?;
                    let sb = weighted_sum(t, b, p8.clone())?;
                    t.add(sa, sb)
                })
            },
        },
        OpCase {
            name: "resize_bilinear",
            shape: Shape::new(1, 1, 5, 7),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(1, 1, 8, 4));
                Box::new(move |t, x| {
                    let a = t.resize_bilinear(x, 8, 4)?;
                    weighted_sum(t, a, p.clone())
                })
            },
        },
        OpCase {
            name: "add",
            shape: Shape::new(1, 4, 3, 3),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(1, 2, 3, 3));
                Box::new(move |t, x| {
                    let a = t.slice_channels(x, 0, 2)?;
                    let b = t.slice_channels(x, 2, 2)?;
                    let s = t.add(a, b)?;
                    weighted_sum(t, s, p.clone())
                })
            },
        },
        OpCase {
            name: "mul",
            shape: Shape::new(1, 4, 3, 3),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(1, 2, 3, 3));
                Box::new(move |t, x| {
                    let a = t.slice_channels(x, 0, 2)?;
                    let b = t.slice_channels(x, 2, 2)?;
                    let s = t.mul(a, b)?;
                    weighted_sum(t, s, p.clone())
                })
            },
        },
        OpCase {
            name: "concat_channels",
            shape: Shape::new(2, 2, 3, 3),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(2, 5, 3, 3));
                Box::new(move |t, x| {
                    let a = t.slice_channels(x, 1, 1)?;
                    let c = t.concat_channels(&[x, a, x])?;
                    weighted_sum(t, c, p.clone())
                })
            },
        },
        OpCase {
            name: "slice_channels",
            shape: Shape::new(2, 5, 2, 2),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(2, 3, 2, 2));
                Box::new(move |t, x| {
                    let a = t.slice_channels(x, 1, 3)?;
                    weighted_sum(t, a, p.clone())
                })
            },
        },
        OpCase {
            name: "relu",
            shape: Shape::new(1, 2, 4, 4),
            kinked: true,
            build: |rng| {
                let p = project(rng, Shape::new(1, 2, 4, 4));
                Box::new(move |t, x| {
                    let a = t.relu(x);
                    weighted_sum(t, a, p.clone())
                })
            },
        },
        OpCase {
            name: "sum",
            shape: Shape::new(2, 3, 2, 2),
            kinked: false,
            build: |_| {
                Box::new(|t, x| {
                    let sq = t.mul(x, x)?;
                    Ok(t.sum(sq))
                })
            },
        },
        OpCase {
            name: "exp",
            shape: Shape::new(1, 2, 3, 3),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(1, 2, 3, 3));
                Box::new(move |t, x| {
                    let a = t.exp(x);
                    weighted_sum(t, a, p.clone())
                })
            },
        },
        OpCase {
            name: "scale",
            shape: Shape::new(1, 2, 3, 3),
            kinked: false,
            build: |rng| {
                let p = project(rng, Shape::new(1, 2, 3, 3));
                Box::new(move |t, x| {
                    let a = t.scale(x, -1.75);
                    weighted_sum(t, a, p.clone())
                })
            },
        },
        OpCase {
            name: "focal_loss",
            shape: Shape::new(2, 1, 4, 4),
            kinked: false,
            build: |rng| {
                let labels: Vec<bool> = (0..32).map(|_| rng.next_f64() < 0.3).collect();
                Box::new(move |t, x| {
                    let z = t.scale(x, 3.0);
                    focal_loss(t, z, &labels, &[0.5, 0.25])
                })
            },
        },
        OpCase {
            name: "iou_loss",
            shape: Shape::new(2, 4, 3, 3),
            kinked: false,
            build: |rng| {
                let targets: Vec<RegTarget> = (0..5)
                    .map(|i| RegTarget {
                        batch: i % 2,
                        y: i % 3,
                        x: (i * 2) % 3,
                        ltrb: std::array::from_fn(|_| rng.uniform(0.3, 2.0)),
                    })
                    .collect();
                Box::new(move |t, x| {
                    // Positive distances, away from the min() kinks of the
                    // intersection almost surely.
                    let e = t.exp(x);
                    iou_loss(t, e, &targets, &[0.5, 0.25])
                })
            },
        },
    ]
}

/// Zero-initialized biases put dead ReLU inputs exactly on the kink; a
/// random point in parameter space avoids that.
fn jitter_biases(store: &mut ParamStore<f64>, rng: &mut SplitMix64) {
    for p in store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        for v in p.value.data_mut() {
            *v += rng.uniform(-0.1, 0.1);
        }
    }
}

fn neck_input_channels() -> [usize; 4] {
    [2, 3, 3, 4]
}

fn neck_features(rng: &mut SplitMix64) -> Vec<Tensor<f64>> {
    let ch = neck_input_channels();
    (0..4)
        .map(|i| {
            let side = 16 >> i;
            random_tensor(Shape::new(1, ch[i], side, side), rng)
        })
        .collect()
}

fn neck_loss(t: &mut Tape<f64>, store: &ParamStore<f64>, neck: &Neck, feats: &[Var], proj: &[Tensor<f64>]) -> Result<Var> {
    let out = neck.forward(t, store, &PyramidFeatures::new(feats.to_vec()))?;
    let mut acc: Option<Var> = None;
    for (&lvl, p) in out.levels.iter().zip(proj) {
        let s = weighted_sum(t, lvl, p.clone())?;
        acc = Some(match acc {
            Some(a) => t.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("four levels"))
}

fn check_neck(variant: NeckVariant, opts: &SuiteOptions, rng: &mut SplitMix64) -> Result<CheckStats> {
    let cfg = NeckConfig {
        variant,
        out_channels: 3,
        ..opts.neck.clone()
    };
    let mut stats = CheckStats::default();
    for point in 0..opts.points {
        let mut store = ParamStore::new();
        let seed_cfg = NeckConfig {
            seed: rng.next_u64(),
            ..cfg.clone()
        };
        let neck = Neck::new(&mut store, &seed_cfg, neck_input_channels())?;
        jitter_biases(&mut store, rng);
        let feats = neck_features(rng);
        let proj: Vec<Tensor<f64>> = (0..4)
            .map(|i| random_tensor(Shape::new(1, 3, 16 >> i, 16 >> i), rng))
            .collect();
        let fault = opts.fault;
        let configure = move |t: &mut Tape<f64>| {
            if let Some((kind, factor)) = fault {
                t.corrupt_adjoint(kind, factor);
            }
        };
        // Parameters, with the features held fixed.
        let err = param_grad_check(
            &store,
            |t, s| {
                let vs: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
                neck_loss(t, s, &neck, &vs, &proj)
            },
            EPSILON,
            opts.coords_per_tensor,
            opts.seed.wrapping_add(point as u64),
            configure,
        )?;
        stats = stats.merge(err);
        // Each input level, with the others held fixed.
        for level in 0..4 {
            let coords = draw_coords(feats[level].numel(), opts.coords_per_tensor, rng);
            let err = finite_diff_check_with(
                |t: &mut Tape<f64>, x: Var| {
                    let vs: Vec<Var> = (0..4)
                        .map(|i| if i == level { x } else { t.constant(feats[i].clone()) })
                        .collect();
                    neck_loss(t, &store, &neck, &vs, &proj)
                },
                &feats[level],
                EPSILON,
                Some(&coords),
                configure,
            )?;
            stats = stats.merge(err);
        }
    }
    Ok(stats)
}

fn check_detector(opts: &SuiteOptions, rng: &mut SplitMix64) -> Result<CheckStats> {
    let mut stats = CheckStats::default();
    for (point, &variant) in NeckVariant::ALL.iter().cycle().take(opts.points).enumerate() {
        let config = ModelConfig {
            backbone: BackboneConfig {
                stem_channels: 3,
                stage_channels: [3, 3, 4, 4],
                blocks_per_stage: 1,
                seed: rng.next_u64(),
            },
            neck: NeckConfig {
                variant,
                out_channels: 3,
                ..opts.neck.clone()
            },
            head: HeadConfig {
                num_convs: 1,
                ..Default::default()
            },
        };
        let mut model: Detector<f64> = Detector::new(&config)?;
        jitter_biases(&mut model.store, rng);
        let image: Tensor<f64> = random_tensor(Shape::new(1, 1, 32, 32), rng).map(|v| 0.5 + 0.5 * v);
        let x1 = rng.uniform(2.0, 12.0);
        let y1 = rng.uniform(2.0, 12.0);
        let gts = vec![vec![BBox::new(x1, y1, x1 + rng.uniform(6.0, 16.0), y1 + rng.uniform(6.0, 16.0))?]];
        let fault = opts.fault;
        let err = param_grad_check(
            &model.store,
            |t, s| {
                let m = Detector {
                    store: s.clone(),
                    ..model.clone()
                };
                m.loss(t, &image, &gts)
            },
            EPSILON,
            opts.coords_per_tensor.min(2),
            opts.seed.wrapping_add(1000 + point as u64),
            move |t: &mut Tape<f64>| {
                if let Some((kind, factor)) = fault {
                    t.corrupt_adjoint(kind, factor);
                }
            },
        )?;
        stats = stats.merge(err);
    }
    Ok(stats)
}

/// Runs every component at `opts.points` random points.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(opts.seed);
    let mut results = Vec::new();
    let fault = opts.fault;
    for case in op_cases() {
        let mut stats = CheckStats::default();
        for _ in 0..opts.points {
            let f = (case.build)(&mut rng);
            let mut point: Tensor<f64> = random_tensor(case.shape, &mut rng);
            if case.kinked {
                point = off_kink(point);
            }
            let err = finite_diff_check_with(f, &point, EPSILON, None, |t| {
                if let Some((kind, factor)) = fault {
                    t.corrupt_adjoint(kind, factor);
                }
            })?;
            stats = stats.merge(err);
        }
        results.push(ComponentResult {
            component: case.name.to_string(),
            points: opts.points,
            stats,
        });
    }
    for variant in NeckVariant::ALL {
        results.push(ComponentResult {
            component: format!("neck.{variant}"),
            points: opts.points,
            stats: check_neck(variant, opts, &mut rng)?,
        });
    }
    results.push(ComponentResult {
        component: "detector.loss".to_string(),
        points: opts.points,
        stats: check_detector(opts, &mut rng)?,
    });
    Ok(SuiteReport {
        results,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes_and_detects_faults() {
        let opts = SuiteOptions {
            points: 1,
            coords_per_tensor: 2,
            ..Default::default()
        };
        let report = run_suite(&opts).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.results.iter().filter(|r| r.component.starts_with("neck.")).count(), 4);

        let bad = run_suite(&SuiteOptions {
            fault: Some((OpKind::Conv2d, 1.01)),
            ..opts
        })
        .unwrap();
        assert!(!bad.passed());
    }
}
