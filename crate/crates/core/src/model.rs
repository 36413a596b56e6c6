//! Backbone + neck + head detector with its parameter store and checkpoint
//! I/O.
//!
//! Checkpoint layout (little endian): the 8-byte magic `PYRCKPT1`, a `u32`
//! parameter count, then per parameter a `u32` name length, the UTF-8 name,
//! four `u64` shape dimensions and the values as `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::{resize_input, Backbone, BackboneConfig};
use crate::boxes::{BBox, Detection};
use crate::error::{Error, Result};
use crate::head::{assign_targets, decode_detections, detection_loss, Head, HeadConfig, LevelOutput};
use crate::neck::{Neck, NeckConfig};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PYRCKPT1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub head: HeadConfig,
}

#[derive(Debug, Clone)]
pub struct Detector<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone)?;
        let neck = Neck::new(&mut store, &config.neck, config.backbone.stage_channels)?;
        let head = Head::new(&mut store, &config.head, config.neck.out_channels)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            neck,
            head,
        })
    }

    /// Head outputs for a `(B, 1, H, W)` batch with `H`, `W` multiples of 32.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<Vec<LevelOutput>> {
        let features = self.backbone.forward(tape, &self.store, images)?;
        let neck_out = self.neck.forward(tape, &self.store, &features)?;
        self.head.forward(tape, &self.store, &neck_out)
    }

    /// Detection loss of a batch; `gts[b]` are the boxes of image `b`.
    pub fn loss(&self, tape: &mut Tape<T>, images: &Tensor<T>, gts: &[Vec<BBox>]) -> Result<Var> {
        let s = images.shape();
        if gts.len() != s.batch() {
            return Err(Error::InvalidArgument {
                op: "loss",
                detail: format!("{} box lists for a batch of {}", gts.len(), s.batch()),
            });
        }
        let x = tape.constant(images.clone());
        let outputs = self.forward(tape, x)?;
        let strides: Vec<usize> = outputs.iter().map(|o| o.stride).collect();
        let targets: Vec<_> = gts
            .iter()
            .map(|g| assign_targets(g, &strides, s.height(), s.width(), &self.config.head))
            .collect();
        detection_loss(tape, &outputs, &targets)
    }

    /// Per-image detections for a batch whose sides are multiples of 32.
    pub fn detect(&self, images: &Tensor<T>) -> Result<Vec<Vec<Detection>>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let outputs = self.forward(&mut tape, x)?;
        let preds = Head::predictions(&tape, &outputs);
        let s = images.shape();
        decode_detections(&preds, s.height(), s.width(), &self.config.head)
    }

    /// Detections for one `(1, 1, H, W)` image of any size: the image is
    /// resized up to the next multiple of 32 and boxes are mapped back.
    pub fn detect_any(&self, image: &Tensor<T>) -> Result<Vec<Detection>> {
        let s = image.shape();
        let round = |v: usize| v.div_ceil(32).max(1) * 32;
        let (th, tw) = (round(s.height()), round(s.width()));
        let resized = resize_input(image, th, tw)?;
        let dets = self.detect(&resized)?.pop().unwrap_or_default();
        let (sx, sy) = (s.width() as f64 / tw as f64, s.height() as f64 / th as f64);
        Ok(dets
            .into_iter()
            .map(|d| Detection {
                bbox: d.bbox.scaled(sx, sy),
                score: d.score,
            })
            .collect())
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// FLOPs of one forward pass on a single `height × width` image.
    pub fn flops(&self, height: usize, width: usize) -> Result<u64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, height, width)));
        self.forward(&mut tape, x)?;
        Ok(tape.flops())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for p in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            for d in p.value.shape().0 {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.checkpoint_bytes())?;
        Ok(())
    }

    /// Replaces parameter values from checkpoint bytes. Every parameter of
    /// the model must be present with a matching shape, and no others.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let count = read_u32(&mut r, "parameter count")? as usize;
        // Values are staged so a failed load leaves the model untouched.
        let mut staged: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];
        for _ in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = read_u64(&mut r, &name)? as usize;
            }
            let id = self
                .store
                .id_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} in checkpoint is not in the model")))?;
            if staged[id.0].is_some() {
                return Err(Error::Checkpoint(format!("parameter {name:?} appears twice")));
            }
            let expected = self.store.get(id).value.shape();
            if expected.0 != dims {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?}: checkpoint shape {} but model expects {expected}",
                    Shape(dims)
                )));
            }
            let mut values = Vec::with_capacity(expected.numel());
            for _ in 0..expected.numel() {
                values.push(T::lit(f64::from_bits(read_u64(&mut r, &name)?)));
            }
            staged[id.0] = Some(Tensor::from_vec(expected, values)?);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        if let Some(i) = staged.iter().position(Option::is_none) {
            let name = &self.store.iter().nth(i).expect("index in range").name;
            return Err(Error::Checkpoint(format!("parameter {name:?} missing from checkpoint")));
        }
        for (p, v) in self.store.iter_mut().zip(staged) {
            p.value = v.expect("every slot filled");
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.load_checkpoint_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
