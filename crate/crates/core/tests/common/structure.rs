//! Structural checks of the necks and hand-derived parameter counts.

use mhfpn::backbone::{BackboneConfig, PyramidFeatures};
use mhfpn::gradcheck::random_tensor;
use mhfpn::head::HeadConfig;
use mhfpn::model::ModelConfig;
use mhfpn::neck::{AggregatedMap, MergeMode, Neck, NeckConfig, NeckVariant};
use mhfpn::rng::SplitMix64;
use mhfpn::{ParamStore, Shape, Tape, Tensor, Var};

pub const INPUT_SIDES: [usize; 4] = [32, 64, 96, 128];
const IN_CHANNELS: [usize; 4] = [4, 6, 8, 10];
const OUT: usize = 6;

pub type Check = Result<(), String>;

fn mhfpn(merge_mode: MergeMode, seed: u64) -> (ParamStore<f64>, Neck) {
    let mut store = ParamStore::new();
    let cfg = NeckConfig {
        variant: NeckVariant::Mhfpn,
        out_channels: OUT,
        merge_mode,
        seed,
        ..Default::default()
    };
    let neck = Neck::new(&mut store, &cfg, IN_CHANNELS).expect("neck");
    (store, neck)
}

/// Backbone-shaped pyramid for a `side × side` image.
fn pyramid(tape: &mut Tape<f64>, side: usize, channels: [usize; 4], rng: &mut SplitMix64) -> PyramidFeatures {
    let levels = (0..4)
        .map(|i| {
            let s = side >> (i + 2);
            tape.constant(random_tensor(Shape::new(1, channels[i], s, s), rng))
        })
        .collect();
    PyramidFeatures::new(levels)
}

fn dims(tape: &Tape<f64>, v: Var) -> (usize, usize, usize) {
    let s = tape.shape(v);
    (s.channels(), s.height(), s.width())
}

/// `SFm_s` at `fm^0`'s size, `SFm_l` at `fm^2`'s, `Out_s^k = SFm_s / 2^k`
/// for k = 0..=2 and `Out_l^j = SFm_l / 2^j` for j = 0..=1, all with the
/// neck's channel count, for every input side and both merge modes.
pub fn shape_laws() -> Check {
    let mut rng = SplitMix64::new(11);
    for side in INPUT_SIDES {
        for mode in [MergeMode::Sum, MergeMode::ConcatConv] {
            let (store, neck) = mhfpn(mode, 1);
            let mut tape = Tape::new();
            let feats = pyramid(&mut tape, side, IN_CHANNELS, &mut rng);
            let run = |tape: &mut Tape<f64>| -> mhfpn::Result<_> {
                let p = neck.path_aggregate(tape, &store, &feats)?;
                let agg = neck.mhfpn_aggregate_heads(tape, &store, &p)?;
                let (small, large) = neck.mhfpn_head_outputs(tape, &store, &agg)?;
                let out = neck.forward(tape, &store, &feats)?;
                Ok((p, agg, small, large, out))
            };
            let (p, agg, small, large, out) = run(&mut tape).map_err(|e| format!("side {side} {mode}: {e}"))?;
            let fm0 = side / 4;
            let fm2 = side / 16;
            let ctx = |what: &str| format!("side {side} {mode}: {what}");
            for (i, &v) in p.levels.iter().enumerate() {
                let s = side >> (i + 2);
                if dims(&tape, v) != (OUT, s, s) {
                    return Err(ctx(&format!("P(fm^{i}) is {:?}", dims(&tape, v))));
                }
            }
            if dims(&tape, agg.small_head) != (OUT, fm0, fm0) {
                return Err(ctx(&format!("SFm_s is {:?}", dims(&tape, agg.small_head))));
            }
            if dims(&tape, agg.large_head) != (OUT, fm2, fm2) {
                return Err(ctx(&format!("SFm_l is {:?}", dims(&tape, agg.large_head))));
            }
            if small.len() != 3 || large.len() != 2 {
                return Err(ctx("wrong number of head outputs"));
            }
            for (k, &v) in small.iter().enumerate() {
                if dims(&tape, v) != (OUT, fm0 >> k, fm0 >> k) {
                    return Err(ctx(&format!("Out_s^{k} is {:?}", dims(&tape, v))));
                }
            }
            for (j, &v) in large.iter().enumerate() {
                if dims(&tape, v) != (OUT, fm2 >> j, fm2 >> j) {
                    return Err(ctx(&format!("Out_l^{j} is {:?}", dims(&tape, v))));
                }
            }
            if out.strides != [4, 8, 16, 32] || out.levels.len() != 4 {
                return Err(ctx("output strides"));
            }
            for (i, &v) in out.levels.iter().enumerate() {
                let s = side >> (i + 2);
                if dims(&tape, v) != (OUT, s, s) {
                    return Err(ctx(&format!("output level {i} is {:?}", dims(&tape, v))));
                }
            }
        }
    }
    Ok(())
}

/// Every variant yields four levels at strides 4..32 with `out_channels`
/// channels for every input side.
pub fn uniform_outputs() -> Check {
    let mut rng = SplitMix64::new(12);
    for variant in NeckVariant::ALL {
        let mut store = ParamStore::<f64>::new();
        let cfg = NeckConfig {
            variant,
            out_channels: OUT,
            ..Default::default()
        };
        let neck = Neck::new(&mut store, &cfg, IN_CHANNELS).map_err(|e| e.to_string())?;
        for side in INPUT_SIDES {
            let mut tape = Tape::new();
            let feats = pyramid(&mut tape, side, IN_CHANNELS, &mut rng);
            let out = neck.forward(&mut tape, &store, &feats).map_err(|e| format!("{variant} {side}: {e}"))?;
            let got: Vec<_> = out.levels.iter().map(|&v| dims(&tape, v)).collect();
            let want: Vec<_> = (0..4).map(|i| (OUT, side >> (i + 2), side >> (i + 2))).collect();
            if got != want || out.strides != [4, 8, 16, 32] {
                return Err(format!("{variant} at {side}: {got:?}"));
            }
        }
    }
    Ok(())
}

/// Sum merge of constant operand maps `a` and `b` is the constant `a + b`
/// to 1e-12, at every input side.
pub fn constant_additivity() -> Check {
    let mut rng = SplitMix64::new(13);
    let (store, neck) = mhfpn(MergeMode::Sum, 1);
    for side in INPUT_SIDES {
        for _ in 0..5 {
            let a: [f64; 4] = std::array::from_fn(|_| rng.uniform(-3.0, 3.0));
            let mut tape = Tape::new();
            let levels = (0..4)
                .map(|i| {
                    let s = side >> (i + 2);
                    tape.constant(Tensor::full(Shape::new(1, OUT, s, s), a[i]))
                })
                .collect();
            let agg = neck
                .mhfpn_aggregate_heads(&mut tape, &store, &PyramidFeatures::new(levels))
                .map_err(|e| e.to_string())?;
            for (v, want, name) in [(agg.small_head, a[0] + a[1], "SFm_s"), (agg.large_head, a[2] + a[3], "SFm_l")] {
                let worst = tape.value(v).data().iter().map(|x| (x - want).abs()).fold(0.0, f64::max);
                if worst > 1e-12 {
                    return Err(format!("side {side}: {name} deviates from {want} by {worst:e}"));
                }
            }
        }
    }
    Ok(())
}

fn emit(neck: &Neck, store: &ParamStore<f64>, small: &Tensor<f64>, large: &Tensor<f64>) -> mhfpn::Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let agg = AggregatedMap {
        small_head: tape.constant(small.clone()),
        large_head: tape.constant(large.clone()),
    };
    let out = neck.mhfpn_emit_outputs(&mut tape, store, &agg)?;
    Ok(out.levels.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Zeroing `SFm_l` changes exactly the stride-16 and stride-32 outputs;
/// zeroing `SFm_s` changes exactly the stride-4, 8 and 16 outputs.
pub fn head_liveness() -> Check {
    let mut rng = SplitMix64::new(14);
    for mode in [MergeMode::Sum, MergeMode::ConcatConv] {
        let (store, neck) = mhfpn(mode, 3);
        for side in INPUT_SIDES {
            let fm0 = side / 4;
            let fm2 = side / 16;
            let small: Tensor<f64> = random_tensor(Shape::new(1, OUT, fm0, fm0), &mut rng);
            let large: Tensor<f64> = random_tensor(Shape::new(1, OUT, fm2, fm2), &mut rng);
            let zs = Tensor::zeros(small.shape());
            let zl = Tensor::zeros(large.shape());
            let run = |s: &Tensor<f64>, l: &Tensor<f64>| emit(&neck, &store, s, l).map_err(|e| e.to_string());
            let base = run(&small, &large)?;
            for (name, out, live) in [
                ("SFm_l", run(&small, &zl)?, [false, false, true, true]),
                ("SFm_s", run(&zs, &large)?, [true, true, true, false]),
            ] {
                for (i, want) in live.into_iter().enumerate() {
                    let changed = base[i].max_abs_diff(&out[i]) > 0.0;
                    if changed != want {
                        return Err(format!(
                            "{mode} side {side}: zeroing {name} {} stride {}",
                            if changed { "changed" } else { "left unchanged" },
                            4 << i
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Weights and bias of a `k × k` convolution.
pub fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

pub fn backbone_params(b: &BackboneConfig) -> usize {
    let c = b.stage_channels;
    let mut n = conv(1, b.stem_channels, 3) + conv(b.stem_channels, c[0], 3);
    for i in 0..4 {
        if i > 0 {
            n += conv(c[i - 1], c[i], 3);
        }
        n += b.blocks_per_stage * conv(c[i], c[i], 3);
    }
    n
}

pub fn neck_params(cfg: &NeckConfig, in_channels: [usize; 4]) -> usize {
    let c = cfg.out_channels;
    let lateral: usize = in_channels.iter().map(|&cin| conv(cin, c, 1)).sum();
    let c3 = conv(c, c, 3);
    lateral
        + match cfg.variant {
            // Four smoothing convs.
            NeckVariant::Fpn => 4 * c3,
            // Smoothing, three stride-2 convs, three fusion convs, four outputs.
            NeckVariant::Panet => 14 * c3,
            // 4c → c merge, four outputs.
            NeckVariant::Hrfpn => conv(4 * c, c, 1) + 4 * c3,
            // Path aggregation (10), five head outputs, optional 2c → c merges.
            NeckVariant::Mhfpn => {
                15 * c3
                    + match cfg.merge_mode {
                        MergeMode::Sum => 0,
                        MergeMode::ConcatConv => 2 * conv(2 * c, c, 1),
                    }
            }
        }
}

pub fn head_params(h: &HeadConfig, c: usize) -> usize {
    h.num_convs * conv(c, c, 3) + conv(c, 1, 3) + conv(c, 4, 3)
}

pub fn model_params(m: &ModelConfig) -> usize {
    backbone_params(&m.backbone) + neck_params(&m.neck, m.backbone.stage_channels) + head_params(&m.head, m.neck.out_channels)
}

/// Three model fixtures with differing widths, depths and necks.
pub fn fixtures() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("default MHFPN", ModelConfig::default()),
        (
            "narrow FPN",
            ModelConfig {
                backbone: BackboneConfig {
                    stem_channels: 4,
                    stage_channels: [4, 8, 8, 16],
                    blocks_per_stage: 2,
                    seed: 1,
                },
                neck: NeckConfig {
                    variant: NeckVariant::Fpn,
                    out_channels: 8,
                    ..Default::default()
                },
                head: HeadConfig {
                    num_convs: 1,
                    ..Default::default()
                },
            },
        ),
        (
            "sum-merge MHFPN",
            ModelConfig {
                backbone: BackboneConfig {
                    stem_channels: 5,
                    stage_channels: [6, 7, 9, 11],
                    blocks_per_stage: 0,
                    seed: 2,
                },
                neck: NeckConfig {
                    variant: NeckVariant::Mhfpn,
                    merge_mode: MergeMode::Sum,
                    out_channels: 12,
                    ..Default::default()
                },
                head: HeadConfig {
                    num_convs: 3,
                    ..Default::default()
                },
            },
        ),
    ]
}
