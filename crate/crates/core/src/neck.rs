//! Pyramid-fusion necks: FPN, PANet path aggregation, single-head HRFPN and
//! the two-head MHFPN.
//!
//! Every variant consumes the four backbone maps and returns four levels at
//! strides 4/8/16/32 with `out_channels` channels, so any detection head can
//! sit on top unchanged.
//!
//! MHFPN data flow:
//!
//! ```text
//! fm^0..fm^3 ──lateral 1×1──► top-down (FPN) ──► bottom-up ──► P(fm^0..fm^3)
//!
//! SFm_s = merge(P(fm^0), up2(P(fm^1)))          stride 4
//! SFm_l = merge(P(fm^2), up2(P(fm^3)))          stride 16
//!
//! Out_s^k = conv3x3(pool_{2^k}(SFm_s)),  k = 0, 1, 2   → strides 4, 8, 16
//! Out_l^j = conv3x3(pool_{2^j}(SFm_l)),  j = 0, 1      → strides 16, 32
//!
//! output = [Out_s^0, Out_s^1, Out_s^2 + Out_l^0, Out_l^1]
//! ```
//!
//! `merge` is either a plain sum or channel concatenation followed by a 1×1
//! projection back to `out_channels` (the default).

use std::fmt;
use std::str::FromStr;

use crate::backbone::{PyramidFeatures, PYRAMID_STRIDES};
use crate::error::{shape_err, Error, Result};
use crate::nn::Conv2d;
use crate::ops::PoolMode;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeckVariant {
    Fpn,
    Panet,
    Hrfpn,
    Mhfpn,
}

impl NeckVariant {
    pub const ALL: [NeckVariant; 4] = [
        NeckVariant::Fpn,
        NeckVariant::Hrfpn,
        NeckVariant::Panet,
        NeckVariant::Mhfpn,
    ];
}

impl fmt::Display for NeckVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeckVariant::Fpn => "FPN",
            NeckVariant::Panet => "PANET",
            NeckVariant::Hrfpn => "HRFPN",
            NeckVariant::Mhfpn => "MHFPN",
        })
    }
}

impl FromStr for NeckVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fpn" => Ok(NeckVariant::Fpn),
            "panet" => Ok(NeckVariant::Panet),
            "hrfpn" => Ok(NeckVariant::Hrfpn),
            "mhfpn" => Ok(NeckVariant::Mhfpn),
            other => Err(Error::Config(format!(
                "unknown neck variant {other:?} (expected fpn, panet, hrfpn or mhfpn)"
            ))),
        }
    }
}

/// How the two operands of an aggregation head are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeMode {
    Sum,
    ConcatConv,
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Sum => "sum",
            MergeMode::ConcatConv => "concat_conv",
        })
    }
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(MergeMode::Sum),
            "concat_conv" => Ok(MergeMode::ConcatConv),
            other => Err(Error::Config(format!(
                "unknown merge mode {other:?} (expected sum or concat_conv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeckConfig {
    pub variant: NeckVariant,
    pub out_channels: usize,
    pub merge_mode: MergeMode,
    pub pool_mode: PoolMode,
    /// ReLU after every 3×3 neck convolution.
    pub relu: bool,
    pub seed: u64,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            variant: NeckVariant::Mhfpn,
            out_channels: 32,
            merge_mode: MergeMode::ConcatConv,
            pool_mode: PoolMode::Max,
            relu: false,
            seed: 2,
        }
    }
}

/// Aggregated maps of the two MHFPN heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatedMap {
    /// `SFm_s`, stride 4.
    pub small_head: Var,
    /// `SFm_l`, stride 16.
    pub large_head: Var,
}

/// Four output levels at strides 4/8/16/32.
#[derive(Debug, Clone, PartialEq)]
pub struct NeckOutput {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone)]
struct TopDown {
    smooth: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct PathAggregation {
    top_down: TopDown,
    down: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct MultiHead {
    merge_s: Option<Conv2d>,
    merge_l: Option<Conv2d>,
    out_s: Vec<Conv2d>,
    out_l: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct SingleHead {
    merge: Conv2d,
    out: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
enum Body {
    Fpn(TopDown),
    Panet { pa: PathAggregation, out: Vec<Conv2d> },
    Hrfpn(SingleHead),
    Mhfpn { pa: PathAggregation, heads: MultiHead },
}

/// A constructed neck: lateral projections plus the variant's fusion layers.
#[derive(Debug, Clone)]
pub struct Neck {
    pub config: NeckConfig,
    lateral: Vec<Conv2d>,
    body: Body,
}

fn convs3(store: &mut ParamStore<impl Scalar>, prefix: &str, n: usize, c: usize, seed: u64) -> Result<Vec<Conv2d>> {
    (0..n)
        .map(|i| Conv2d::same3(store, &format!("{prefix}{i}"), c, c, seed))
        .collect()
}

impl TopDown {
    fn new<T: Scalar>(store: &mut ParamStore<T>, c: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            smooth: convs3(store, "neck.fpn.out", 4, c, seed)?,
        })
    }
}

impl PathAggregation {
    fn new<T: Scalar>(store: &mut ParamStore<T>, c: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            top_down: TopDown::new(store, c, seed)?,
            down: (0..3)
                .map(|i| Conv2d::down3(store, &format!("neck.pa.down{i}"), c, c, seed))
                .collect::<Result<_>>()?,
            fuse: convs3(store, "neck.pa.fuse", 3, c, seed)?,
        })
    }
}

impl Neck {
    /// Builds the neck for backbone maps with `in_channels` channels.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &NeckConfig, in_channels: [usize; 4]) -> Result<Self> {
        let c = config.out_channels;
        if c == 0 {
            return Err(Error::Config("neck.out_channels must be positive".into()));
        }
        let seed = config.seed;
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(i, &cin)| Conv2d::point(store, &format!("neck.lateral{i}"), cin, c, seed))
            .collect::<Result<_>>()?;
        let body = match config.variant {
            NeckVariant::Fpn => Body::Fpn(TopDown::new(store, c, seed)?),
            NeckVariant::Panet => Body::Panet {
                pa: PathAggregation::new(store, c, seed)?,
                out: convs3(store, "neck.panet.out", 4, c, seed)?,
            },
            NeckVariant::Hrfpn => Body::Hrfpn(SingleHead {
                merge: Conv2d::point(store, "neck.hr.merge", 4 * c, c, seed)?,
                out: convs3(store, "neck.hr.out", 4, c, seed)?,
            }),
            NeckVariant::Mhfpn => {
                let pa = PathAggregation::new(store, c, seed)?;
                let (merge_s, merge_l) = match config.merge_mode {
                    MergeMode::Sum => (None, None),
                    MergeMode::ConcatConv => (
                        Some(Conv2d::point(store, "neck.head_s.merge", 2 * c, c, seed)?),
                        Some(Conv2d::point(store, "neck.head_l.merge", 2 * c, c, seed)?),
                    ),
                };
                let heads = MultiHead {
                    merge_s,
                    merge_l,
                    out_s: convs3(store, "neck.head_s.out", 3, c, seed)?,
                    out_l: convs3(store, "neck.head_l.out", 2, c, seed)?,
                };
                Body::Mhfpn { pa, heads }
            }
        };
        Ok(Self {
            config: config.clone(),
            lateral,
            body,
        })
    }

    fn conv3<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, conv: &Conv2d, x: Var) -> Result<Var> {
        let y = conv.forward(tape, store, x)?;
        Ok(if self.config.relu { tape.relu(y) } else { y })
    }

    fn check_levels(features: &PyramidFeatures) -> Result<()> {
        if features.levels.len() != 4 {
            return Err(shape_err(
                "neck",
                format!("expected 4 pyramid levels, got {}", features.levels.len()),
            ));
        }
        Ok(())
    }

    /// 1×1 projection of every backbone level to `out_channels`.
    pub fn lateral_project<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &PyramidFeatures,
    ) -> Result<PyramidFeatures> {
        Self::check_levels(features)?;
        let levels = self
            .lateral
            .iter()
            .zip(&features.levels)
            .map(|(conv, &x)| conv.forward(tape, store, x))
            .collect::<Result<_>>()?;
        Ok(PyramidFeatures {
            levels,
            strides: features.strides.clone(),
        })
    }

    fn top_down<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        td: &TopDown,
        lat: &PyramidFeatures,
    ) -> Result<Vec<Var>> {
        let mut inner = vec![lat.levels[3]; 4];
        for i in (0..3).rev() {
            let up = tape.upsample_bilinear(inner[i + 1], 2)?;
            inner[i] = tape.add(lat.levels[i], up)?;
        }
        inner
            .iter()
            .zip(&td.smooth)
            .map(|(&x, conv)| self.conv3(tape, store, conv, x))
            .collect()
    }

    fn path_aggregation<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pa: &PathAggregation,
        features: &PyramidFeatures,
    ) -> Result<PyramidFeatures> {
        let lat = self.lateral_project(tape, store, features)?;
        let td = self.top_down(tape, store, &pa.top_down, &lat)?;
        let mut out = Vec::with_capacity(4);
        out.push(td[0]);
        for i in 1..4 {
            let down = pa.down[i - 1].forward(tape, store, out[i - 1])?;
            let down = if self.config.relu { tape.relu(down) } else { down };
            let sum = tape.add(down, td[i])?;
            out.push(self.conv3(tape, store, &pa.fuse[i - 1], sum)?);
        }
        Ok(PyramidFeatures {
            levels: out,
            strides: features.strides.clone(),
        })
    }

    /// Standard FPN: top-down upsample-and-add over the lateral projections,
    /// then a 3×3 conv per level.
    pub fn fpn_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &PyramidFeatures,
    ) -> Result<NeckOutput> {
        let Body::Fpn(td) = &self.body else {
            return Err(self.wrong_variant("fpn_forward"));
        };
        let lat = self.lateral_project(tape, store, features)?;
        Ok(NeckOutput {
            levels: self.top_down(tape, store, td, &lat)?,
            strides: PYRAMID_STRIDES.to_vec(),
        })
    }

    /// `P(fm^0..fm^3)`: FPN top-down pass followed by a PANet bottom-up pass
    /// (stride-2 conv, add, 3×3 conv). Available for PANET and MHFPN.
    pub fn path_aggregate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &PyramidFeatures,
    ) -> Result<PyramidFeatures> {
        match &self.body {
            Body::Panet { pa, .. } | Body::Mhfpn { pa, .. } => self.path_aggregation(tape, store, pa, features),
            _ => Err(self.wrong_variant("path_aggregate")),
        }
    }

    fn merge<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        merge: Option<&Conv2d>,
        fine: Var,
        coarse: Var,
    ) -> Result<Var> {
        let up = tape.upsample_bilinear(coarse, 2)?;
        match merge {
            None => tape.add(fine, up),
            Some(conv) => {
                let cat = tape.concat_channels(&[fine, up])?;
                conv.forward(tape, store, cat)
            }
        }
    }

    /// The two aggregation heads: `SFm_s` from `P(fm^0), P(fm^1)` and `SFm_l`
    /// from `P(fm^2), P(fm^3)`, the coarser operand upsampled ×2.
    pub fn mhfpn_aggregate_heads<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p: &PyramidFeatures,
    ) -> Result<AggregatedMap> {
        let Body::Mhfpn { heads, .. } = &self.body else {
            return Err(self.wrong_variant("mhfpn_aggregate_heads"));
        };
        Self::check_levels(p)?;
        let small_head = self.merge(tape, store, heads.merge_s.as_ref(), p.levels[0], p.levels[1])?;
        let large_head = self.merge(tape, store, heads.merge_l.as_ref(), p.levels[2], p.levels[3])?;
        Ok(AggregatedMap {
            small_head,
            large_head,
        })
    }

    /// `(Out_s, Out_l)`: each head pooled by `2^k` and passed through a 3×3
    /// conv, three small-head maps (strides 4, 8, 16) and two large-head maps
    /// (16, 32).
    pub fn mhfpn_head_outputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        agg: &AggregatedMap,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let Body::Mhfpn { heads, .. } = &self.body else {
            return Err(self.wrong_variant("mhfpn_head_outputs"));
        };
        let mode = self.config.pool_mode;
        let mut small = Vec::with_capacity(3);
        for (k, conv) in heads.out_s.iter().enumerate() {
            let pooled = tape.pool2d(agg.small_head, 1 << k, mode)?;
            small.push(self.conv3(tape, store, conv, pooled)?);
        }
        let mut large = Vec::with_capacity(2);
        for (j, conv) in heads.out_l.iter().enumerate() {
            let pooled = tape.pool2d(agg.large_head, 1 << j, mode)?;
            large.push(self.conv3(tape, store, conv, pooled)?);
        }
        Ok((small, large))
    }

    /// [`Neck::mhfpn_head_outputs`] with the two stride-16 maps summed.
    pub fn mhfpn_emit_outputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        agg: &AggregatedMap,
    ) -> Result<NeckOutput> {
        let (small, large) = self.mhfpn_head_outputs(tape, store, agg)?;
        let fused = tape.add(small[2], large[0])?;
        Ok(NeckOutput {
            levels: vec![small[0], small[1], fused, large[1]],
            strides: PYRAMID_STRIDES.to_vec(),
        })
    }

    /// Single aggregation head: every projected level upsampled to stride 4,
    /// concatenated and projected, then pooled by `2^k` with a 3×3 conv per
    /// output level.
    pub fn hrfpn_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &PyramidFeatures,
    ) -> Result<NeckOutput> {
        let Body::Hrfpn(head) = &self.body else {
            return Err(self.wrong_variant("hrfpn_forward"));
        };
        let agg = self.hrfpn_aggregate(tape, store, features)?;
        let mut levels = Vec::with_capacity(4);
        for (k, conv) in head.out.iter().enumerate() {
            let pooled = tape.pool2d(agg, 1 << k, self.config.pool_mode)?;
            levels.push(self.conv3(tape, store, conv, pooled)?);
        }
        Ok(NeckOutput {
            levels,
            strides: PYRAMID_STRIDES.to_vec(),
        })
    }

    /// HRFPN's merged stride-4 map, before the output convolutions.
    pub fn hrfpn_aggregate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &PyramidFeatures,
    ) -> Result<Var> {
        let Body::Hrfpn(head) = &self.body else {
            return Err(self.wrong_variant("hrfpn_aggregate"));
        };
        let lat = self.lateral_project(tape, store, features)?;
        let ups = lat
            .levels
            .iter()
            .enumerate()
            .map(|(i, &v)| tape.upsample_bilinear(v, 1 << i))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat_channels(&ups)?;
        head.merge.forward(tape, store, cat)
    }

    /// Dispatches on the configured variant.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &PyramidFeatures,
    ) -> Result<NeckOutput> {
        Self::check_levels(features)?;
        match &self.body {
            Body::Fpn(_) => self.fpn_forward(tape, store, features),
            Body::Panet { pa, out } => {
                let p = self.path_aggregation(tape, store, pa, features)?;
                let levels = p
                    .levels
                    .iter()
                    .zip(out)
                    .map(|(&x, conv)| self.conv3(tape, store, conv, x))
                    .collect::<Result<_>>()?;
                Ok(NeckOutput {
                    levels,
                    strides: PYRAMID_STRIDES.to_vec(),
                })
            }
            Body::Hrfpn(_) => self.hrfpn_forward(tape, store, features),
            Body::Mhfpn { .. } => {
                let p = self.path_aggregate(tape, store, features)?;
                let agg = self.mhfpn_aggregate_heads(tape, store, &p)?;
                self.mhfpn_emit_outputs(tape, store, &agg)
            }
        }
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.lateral.iter().collect();
        match &self.body {
            Body::Fpn(td) => v.extend(&td.smooth),
            Body::Hrfpn(h) => {
                v.push(&h.merge);
                v.extend(&h.out);
            }
            Body::Panet { pa, out } => {
                v.extend(pa.top_down.smooth.iter().chain(&pa.down).chain(&pa.fuse));
                v.extend(out);
            }
            Body::Mhfpn { pa, heads } => {
                v.extend(pa.top_down.smooth.iter().chain(&pa.down).chain(&pa.fuse));
                v.extend(heads.merge_s.iter().chain(&heads.merge_l));
                v.extend(heads.out_s.iter().chain(&heads.out_l));
            }
        }
        v
    }

    /// Closed-form parameter count of the neck's convolutions.
    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    fn wrong_variant(&self, op: &str) -> Error {
        Error::Config(format!("{op} is not available for neck variant {}", self.config.variant))
    }
}
