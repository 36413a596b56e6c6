//! Synthetic mammogram-like scenes, the five-part split protocol, and the
//! PGM + JSON annotation format.
//!
//! Each mass is a Gaussian intensity bump whose box spans two standard
//! deviations either side of its center. Sizes are bimodal: small and large
//! area ranges are drawn with probability `small_fraction` and its
//! complement. Pixels are quantized to `k / 255` so a PGM round trip is exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::metrics::{GroundTruth, SizeThresholds};
use crate::rng::SplitMix64;
use crate::tensor::{Shape, Tensor};

pub const MAX_MASSES_PER_IMAGE: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 20;
pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_side: usize,
    pub masses_per_image_mean: f64,
    pub small_fraction: f64,
    pub small_area_range: (f64, f64),
    pub large_area_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_side: 64,
            masses_per_image_mean: 1.1,
            small_fraction: 0.5,
            small_area_range: (9.0, 36.0),
            large_area_range: (400.0, 900.0),
            noise_sigma: 0.03,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_side == 0 || self.image_side % 32 != 0 {
            return bad(format!("data.image_side must be a positive multiple of 32, got {}", self.image_side));
        }
        if !(self.masses_per_image_mean >= 0.0 && self.masses_per_image_mean.is_finite()) {
            return bad("data.masses_per_image_mean must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return bad("data.small_fraction must lie in [0, 1]".into());
        }
        let (s0, s1) = self.small_area_range;
        let (l0, l1) = self.large_area_range;
        if !(s0 > 0.0 && s0 <= s1 && l0 > 0.0 && l0 <= l1) {
            return bad("data area ranges must be positive with min <= max".into());
        }
        if s1 >= l0 && l1 >= s0 {
            return bad("data small and large area ranges must be disjoint".into());
        }
        let side2 = (self.image_side * self.image_side) as f64;
        // Worst-case aspect keeps either side within the image.
        if s1.max(l1) * 4.0 / 3.0 > side2 {
            return bad("data area ranges do not fit inside the image".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("data.noise_sigma must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn size_thresholds(&self) -> SizeThresholds {
        SizeThresholds::for_image_side(self.image_side)
    }
}

/// A grayscale image in `[0, 1]` with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: usize,
    /// `(1, 1, H, W)`
    pub pixels: Tensor<f64>,
    pub gts: Vec<GroundTruth>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.pixels.shape().height()
    }

    pub fn width(&self) -> usize {
        self.pixels.shape().width()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.gts.iter().map(|g| g.bbox).collect()
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sample_count(rng: &mut SplitMix64, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let n: f64 = Poisson::new(mean).expect("positive finite mean").sample(rng);
    (n as usize).min(MAX_MASSES_PER_IMAGE)
}

fn generate_image(spec: &SceneSpec, image_id: usize) -> AnnotatedImage {
    let mut rng = SplitMix64::derive(spec.seed, image_id as u64);
    let side = spec.image_side as f64;
    let count = sample_count(&mut rng, spec.masses_per_image_mean);

    let mut masses: Vec<(BBox, f64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let (lo, hi) = if rng.random::<f64>() < spec.small_fraction {
            spec.small_area_range
        } else {
            spec.large_area_range
        };
        let area = rng.random_range(lo..=hi);
        let aspect = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
        let w = (area * aspect).sqrt();
        let h = area / w;
        let amplitude = rng.random_range(0.35..0.65);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x1 = rng.random_range(0.0..=side - w);
            let y1 = rng.random_range(0.0..=side - h);
            let Ok(b) = BBox::new(x1, y1, x1 + w, y1 + h) else {
                continue;
            };
            if masses.iter().all(|(m, _)| iou(m, &b) == 0.0) {
                masses.push((b, amplitude));
                break;
            }
        }
    }

    let base = rng.random_range(0.15..0.3);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let slope = rng.random_range(0.0..0.15) / side;
    let (gx, gy) = (angle.cos() * slope, angle.sin() * slope);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
    let n = spec.image_side;
    let pixels = Tensor::from_fn(Shape::new(1, 1, n, n), |_, _, y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = base + gx * (px - 0.5 * side) + gy * (py - 0.5 * side);
        for (b, amp) in &masses {
            let (cx, cy) = b.center();
            let (sx, sy) = (b.width() / 4.0, b.height() / 4.0);
            let d = ((px - cx) / sx).powi(2) + ((py - cy) / sy).powi(2);
            v += amp * (-0.5 * d).exp();
        }
        quantize(v + noise.sample(&mut rng))
    });
    let thresholds = spec.size_thresholds();
    let gts = masses
        .into_iter()
        .map(|(b, _)| GroundTruth::new(image_id, b, &thresholds))
        .collect();
    AnnotatedImage { image_id, pixels, gts }
}

/// Images `0..n_images`; a pure function of its arguments.
pub fn generate_dataset(spec: &SceneSpec, n_images: usize) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::Config("data.n_images must be at least 1".into()));
    }
    Ok((0..n_images).map(|i| generate_image(spec, i)).collect())
}

pub const NUM_PARTS: usize = 5;

/// Train/val/test ids of one replicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub parts: [Vec<usize>; NUM_PARTS],
}

impl SplitPlan {
    /// Replicate `r` tests on part `r`, validates on part `r + 1`, trains on
    /// the other three.
    pub fn replicate(&self, r: usize) -> Split {
        let r = r % NUM_PARTS;
        let v = (r + 1) % NUM_PARTS;
        let train = (0..NUM_PARTS)
            .filter(|&p| p != r && p != v)
            .flat_map(|p| self.parts[p].iter().copied())
            .collect();
        Split {
            train,
            val: self.parts[v].clone(),
            test: self.parts[r].clone(),
        }
    }

    pub fn part_sizes(&self) -> [usize; NUM_PARTS] {
        std::array::from_fn(|i| self.parts[i].len())
    }
}

/// Seeded shuffle dealt round-robin into five parts.
pub fn five_fold_split(ids: &[usize], seed: u64) -> Result<SplitPlan> {
    if ids.len() < NUM_PARTS {
        return Err(Error::InvalidArgument {
            op: "five_fold_split",
            detail: format!("need at least {NUM_PARTS} ids, got {}", ids.len()),
        });
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut SplitMix64::new(seed));
    let mut parts: [Vec<usize>; NUM_PARTS] = Default::default();
    for (i, id) in shuffled.into_iter().enumerate() {
        parts[i % NUM_PARTS].push(id);
    }
    Ok(SplitPlan { parts })
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    id: usize,
    file: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    image_id: usize,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
}

fn parse_err(source: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.display().to_string(),
        location: location.into(),
        message: message.into(),
    }
}

/// Binary 8-bit PGM of a `(1, 1, H, W)` image in `[0, 1]`.
pub fn encode_pgm(pixels: &Tensor<f64>) -> Vec<u8> {
    let s = pixels.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.width(), s.height()).into_bytes();
    out.extend(pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a binary PGM (`P5`, maxval ≤ 255) into a `(1, 1, H, W)` tensor
/// scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8], source: &Path) -> Result<Tensor<f64>> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(source, format!("byte {start}"), "truncated PGM header"));
        }
        tokens.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if tokens[0].1 != "P5" {
        return Err(parse_err(
            source,
            "byte 0",
            format!("expected magic P5, found {:?}", tokens[0].1),
        ));
    }
    let mut nums = [0usize; 3];
    for (k, (off, tok)) in tokens[1..].iter().enumerate() {
        nums[k] = tok
            .parse()
            .map_err(|_| parse_err(source, format!("byte {off}"), format!("expected an integer, found {tok:?}")))?;
    }
    let [width, height, maxval] = nums;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(parse_err(
            source,
            format!("byte {}", tokens[1].0),
            format!("unsupported geometry {width}x{height} maxval {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(parse_err(
            source,
            format!("byte {}", bytes.len()),
            format!("raster holds {} bytes, expected {need}", bytes.len().saturating_sub(pos)),
        ));
    }
    let scale = maxval as f64;
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / scale).collect();
    Tensor::from_vec(Shape::new(1, 1, height, width), data)
}

pub fn image_file_name(image_id: usize) -> String {
    format!("img_{image_id:05}.pgm")
}

/// Writes one PGM per image and `annotations.json` into `dir`.
pub fn save_annotations(dataset: &[AnnotatedImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut file = AnnotationFile {
        images: Vec::with_capacity(dataset.len()),
        annotations: Vec::new(),
    };
    for img in dataset {
        let name = image_file_name(img.image_id);
        fs::write(dir.join(&name), encode_pgm(&img.pixels))?;
        file.images.push(ImageEntry {
            id: img.image_id,
            file: name,
            width: img.width(),
            height: img.height(),
        });
        for g in &img.gts {
            file.annotations.push(AnnotationEntry {
                image_id: img.image_id,
                bbox: [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2],
            });
        }
    }
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(dir.join(ANNOTATION_FILE), json + "\n")?;
    Ok(())
}

/// Reads `annotations.json` and its images from `dir`. Image files resolve
/// relative to `dir`. Size classes use the COCO thresholds scaled to each
/// image's width.
pub fn load_annotations(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let path: PathBuf = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path)?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| {
        parse_err(&path, format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })?;
    let mut images = Vec::with_capacity(file.images.len());
    for entry in &file.images {
        if images.iter().any(|i: &AnnotatedImage| i.image_id == entry.id) {
            return Err(Error::Validation(format!("duplicate image id {}", entry.id)));
        }
        let img_path = dir.join(&entry.file);
        let pixels = decode_pgm(&fs::read(&img_path)?, &img_path)?;
        let s = pixels.shape();
        if (s.width(), s.height()) != (entry.width, entry.height) {
            return Err(Error::Validation(format!(
                "image {} is {}x{} but annotations say {}x{}",
                entry.id,
                s.width(),
                s.height(),
                entry.width,
                entry.height
            )));
        }
        images.push(AnnotatedImage {
            image_id: entry.id,
            pixels,
            gts: Vec::new(),
        });
    }
    for (k, a) in file.annotations.iter().enumerate() {
        let [x1, y1, x2, y2] = a.bbox;
        let b = BBox::new(x1, y1, x2, y2)
            .map_err(|e| Error::Validation(format!("annotation {k} (image {}): {e}", a.image_id)))?;
        let img = images
            .iter_mut()
            .find(|i| i.image_id == a.image_id)
            .ok_or_else(|| Error::Validation(format!("annotation {k} refers to unknown image {}", a.image_id)))?;
        if !b.contains_box(img.width() as f64, img.height() as f64) {
            return Err(Error::Validation(format!(
                "annotation {k}: box [{x1}, {y1}, {x2}, {y2}] leaves the {}x{} image",
                img.width(),
                img.height()
            )));
        }
        let th = SizeThresholds::for_image_side(img.width());
        img.gts.push(GroundTruth::new(a.image_id, b, &th));
    }
    Ok(images)
}
