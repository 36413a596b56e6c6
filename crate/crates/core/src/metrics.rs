//! Detection metrics: greedy matching, AP@x (COCO 101-point), TPR, FPPI,
//! FROC curves, size-bucketed AP and model cost.
//!
//! A detection is a true positive at threshold `x` when its IoU with a still
//! unmatched ground truth is strictly greater than `x`. Undefined values (no
//! ground truth to measure against) are `None` and print as `-`.

use std::cmp::Ordering;
use std::fmt;

use crate::boxes::{iou, BBox, Detection};
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// COCO reference image side that the area thresholds are defined for.
const COCO_SIDE: f64 = 800.0;
const COCO_SMALL_AREA: f64 = 32.0 * 32.0;
const COCO_LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeClass::Small => "S",
            SizeClass::Medium => "M",
            SizeClass::Large => "L",
        })
    }
}

/// Area cut points: small below `small_below`, large at or above `large_from`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeThresholds {
    pub small_below: f64,
    pub large_from: f64,
}

impl SizeThresholds {
    /// COCO area thresholds scaled by `image_side / 800`.
    pub fn for_image_side(image_side: usize) -> Self {
        let k = image_side as f64 / COCO_SIDE;
        Self {
            small_below: COCO_SMALL_AREA * k,
            large_from: COCO_LARGE_AREA * k,
        }
    }

    pub fn classify(&self, area: f64) -> SizeClass {
        if area < self.small_below {
            SizeClass::Small
        } else if area >= self.large_from {
            SizeClass::Large
        } else {
            SizeClass::Medium
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub bbox: BBox,
    pub size_class: SizeClass,
}

impl GroundTruth {
    pub fn new(image_id: usize, bbox: BBox, thresholds: &SizeThresholds) -> Self {
        Self {
            image_id,
            bbox,
            size_class: thresholds.classify(bbox.area()),
        }
    }
}

/// One detection in the global ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    /// Index into the per-image lists.
    pub image: usize,
    pub detection: Detection,
    /// Index of the matched ground truth within its image.
    pub gt: Option<usize>,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detections in global rank order.
    pub records: Vec<MatchRecord>,
    /// `gt_matched[image][g]`
    pub gt_matched: Vec<Vec<bool>>,
}

impl MatchResult {
    pub fn num_gt(&self) -> usize {
        self.gt_matched.iter().map(Vec::len).sum()
    }

    pub fn num_images(&self) -> usize {
        self.gt_matched.len()
    }

    pub fn true_positives(&self) -> usize {
        self.records.iter().filter(|r| r.is_tp()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.records.len() - self.true_positives()
    }
}

fn rank_order(a: &(usize, Detection), b: &(usize, Detection)) -> Ordering {
    let (ia, da) = a;
    let (ib, db) = b;
    db.score
        .total_cmp(&da.score)
        .then(ia.cmp(ib))
        .then(da.bbox.x1.total_cmp(&db.bbox.x1))
        .then(da.bbox.y1.total_cmp(&db.bbox.y1))
        .then(da.bbox.x2.total_cmp(&db.bbox.x2))
        .then(da.bbox.y2.total_cmp(&db.bbox.y2))
}

/// Ranks all detections by descending score (ties by image, then
/// coordinates) and matches greedily: each detection takes the unmatched
/// ground truth of its image with the highest IoU above `iou_thr`.
pub fn match_detections(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], iou_thr: f64) -> MatchResult {
    assert_eq!(dets.len(), gts.len(), "detections and ground truths must cover the same images");
    let mut ranked: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |&d| (i, d)))
        .collect();
    ranked.sort_by(rank_order);
    let mut gt_matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let records = ranked
        .into_iter()
        .map(|(image, detection)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts[image].iter().enumerate() {
                if gt_matched[image][g] {
                    continue;
                }
                let v = iou(&detection.bbox, &gt.bbox);
                if v > iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            let gt = best.map(|(g, _)| g);
            if let Some(g) = gt {
                gt_matched[image][g] = true;
            }
            MatchRecord { image, detection, gt }
        })
        .collect();
    MatchResult { records, gt_matched }
}

/// Precision/recall after each ranked detection, precision replaced by its
/// running maximum from the right (the interpolation envelope).
fn pr_envelope(tp_flags: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        tp += usize::from(flag);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (recall, precision)
}

/// COCO 101-point interpolated AP over ranked TP/FP flags. `None` when
/// `num_gt` is zero.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let (recall, precision) = pr_envelope(tp_flags, num_gt);
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let i = recall.partition_point(|&v| v < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / 101.0)
}

/// Area under the precision envelope, summed over recall steps.
pub fn average_precision_exact(tp_flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let (recall, precision) = pr_envelope(tp_flags, num_gt);
    let mut prev = 0.0;
    let mut area = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        area += (r - prev) * p;
        prev = *r;
    }
    Some(area)
}

pub fn tp_flags(m: &MatchResult) -> Vec<bool> {
    m.records.iter().map(MatchRecord::is_tp).collect()
}

pub fn ap_of(m: &MatchResult) -> Option<f64> {
    average_precision(&tp_flags(m), m.num_gt())
}

/// Fraction of ground truths matched; `None` with no ground truth.
pub fn tpr_at(m: &MatchResult) -> Option<f64> {
    let n = m.num_gt();
    let hit: usize = m.gt_matched.iter().flatten().filter(|&&v| v).count();
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Unmatched detections per image.
pub fn fppi(m: &MatchResult) -> f64 {
    m.false_positives() as f64 / m.num_images().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fppi: f64,
    pub tpr: Option<f64>,
}

/// TPR against FPPI, one point per score threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

impl FrocCurve {
    /// Best TPR among points with FPPI at most `max_fppi`; 0 when none qualify.
    pub fn tpr_at_fppi(&self, max_fppi: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fppi <= max_fppi)
            .filter_map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fppi,tpr\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.fppi, fmt_opt(p.tpr)));
        }
        s
    }
}

/// FROC over `thresholds` (sorted descending). Greedy matching in score order
/// means the detections above a threshold are matched exactly as in the full
/// ranking, so each point is read off a prefix.
pub fn froc(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], iou_thr: f64, thresholds: &[f64]) -> FrocCurve {
    let m = match_detections(dets, gts, iou_thr);
    froc_from_matches(&m, thresholds)
}

pub fn froc_from_matches(m: &MatchResult, thresholds: &[f64]) -> FrocCurve {
    let num_gt = m.num_gt();
    let images = m.num_images().max(1) as f64;
    let points = thresholds
        .iter()
        .map(|&t| {
            let prefix = m.records.partition_point(|r| r.detection.score >= t);
            let tp = m.records[..prefix].iter().filter(|r| r.is_tp()).count();
            FrocPoint {
                threshold: t,
                fppi: (prefix - tp) as f64 / images,
                tpr: (num_gt > 0).then(|| tp as f64 / num_gt as f64),
            }
        })
        .collect();
    FrocCurve { points }
}

/// AP restricted to ground truths of one size class. Detections matched to
/// another class's ground truth are dropped, as are unmatched detections
/// whose own area falls outside the class. `None` for an empty bucket.
pub fn size_bucketed_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thr: f64,
    bucket: SizeClass,
    thresholds: &SizeThresholds,
) -> Option<f64> {
    let m = match_detections(dets, gts, iou_thr);
    bucketed_ap_from_matches(&m, gts, bucket, thresholds)
}

pub fn bucketed_ap_from_matches(
    m: &MatchResult,
    gts: &[Vec<GroundTruth>],
    bucket: SizeClass,
    thresholds: &SizeThresholds,
) -> Option<f64> {
    let num_gt = gts.iter().flatten().filter(|g| g.size_class == bucket).count();
    let flags: Vec<bool> = m
        .records
        .iter()
        .filter_map(|r| match r.gt {
            Some(g) => (gts[r.image][g].size_class == bucket).then_some(true),
            None => (thresholds.classify(r.detection.bbox.area()) == bucket).then_some(false),
        })
        .collect();
    average_precision(&flags, num_gt)
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.numel()
}

/// IoU and score-sweep settings for a full report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Descending.
    pub score_thresholds: Vec<f64>,
    /// IoU threshold used for the FPPI column.
    pub fppi_iou: f64,
    /// IoU threshold used for the FROC curve.
    pub froc_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.2, 0.5, 0.75],
            score_thresholds: (1..=20).rev().map(|k| k as f64 / 20.0).collect(),
            fppi_iou: 0.2,
            froc_iou: 0.5,
        }
    }
}

/// A metric value at one IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtIou {
    pub iou: f64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub ap: Vec<AtIou>,
    pub tpr: Vec<AtIou>,
    pub ap_small: Vec<AtIou>,
    pub ap_large: Vec<AtIou>,
    pub fppi: f64,
    pub froc: FrocCurve,
    pub params: usize,
    pub flops: u64,
}

fn lookup(values: &[AtIou], iou: f64) -> Option<f64> {
    values.iter().find(|a| (a.iou - iou).abs() < 1e-12).and_then(|a| a.value)
}

/// Report CSV columns.
pub const REPORT_COLUMNS: [&str; 10] = [
    "variant", "AP@50", "AP@75", "AP@50S", "AP@50L", "TPR@50", "TPR@20", "FPPI", "Params", "FLOPs",
];

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn parse_opt(s: &str) -> Option<Option<f64>> {
    match s.trim() {
        "-" => Some(None),
        t => t.parse().ok().map(Some),
    }
}

impl MetricsReport {
    pub fn compute(
        variant: &str,
        dets: &[Vec<Detection>],
        gts: &[Vec<GroundTruth>],
        sizes: &SizeThresholds,
        config: &EvalConfig,
        params: usize,
        flops: u64,
    ) -> Self {
        let mut ap = Vec::new();
        let mut tpr = Vec::new();
        let mut ap_small = Vec::new();
        let mut ap_large = Vec::new();
        for &t in &config.iou_thresholds {
            let m = match_detections(dets, gts, t);
            ap.push(AtIou { iou: t, value: ap_of(&m) });
            tpr.push(AtIou { iou: t, value: tpr_at(&m) });
            ap_small.push(AtIou {
                iou: t,
                value: bucketed_ap_from_matches(&m, gts, SizeClass::Small, sizes),
            });
            ap_large.push(AtIou {
                iou: t,
                value: bucketed_ap_from_matches(&m, gts, SizeClass::Large, sizes),
            });
        }
        Self {
            variant: variant.to_string(),
            ap,
            tpr,
            ap_small,
            ap_large,
            fppi: fppi(&match_detections(dets, gts, config.fppi_iou)),
            froc: froc(dets, gts, config.froc_iou, &config.score_thresholds),
            params,
            flops,
        }
    }

    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        lookup(&self.ap, iou)
    }

    pub fn tpr_at(&self, iou: f64) -> Option<f64> {
        lookup(&self.tpr, iou)
    }

    pub fn ap_small_at(&self, iou: f64) -> Option<f64> {
        lookup(&self.ap_small, iou)
    }

    pub fn ap_large_at(&self, iou: f64) -> Option<f64> {
        lookup(&self.ap_large, iou)
    }

    /// Values in [`REPORT_COLUMNS`] order after the variant name.
    pub fn row_values(&self) -> [Option<f64>; 9] {
        [
            self.ap_at(0.5),
            self.ap_at(0.75),
            self.ap_small_at(0.5),
            self.ap_large_at(0.5),
            self.tpr_at(0.5),
            self.tpr_at(0.2),
            Some(self.fppi),
            Some(self.params as f64),
            Some(self.flops as f64),
        ]
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let v = self.row_values();
        let mut cells = vec![self.variant.clone()];
        cells.extend(v[..7].iter().map(|x| fmt_opt(*x)));
        cells.push(self.params.to_string());
        cells.push(self.flops.to_string());
        cells.join(",")
    }
}

/// Header plus one row per report.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut s = MetricsReport::csv_header();
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    fn gt(image: usize, b: BBox) -> GroundTruth {
        GroundTruth::new(image, b, &SizeThresholds::for_image_side(64))
    }

    #[test]
    fn thresholds_at_64() {
        let t = SizeThresholds::for_image_side(64);
        assert!((t.small_below - 81.92).abs() < 1e-12);
        assert!((t.large_from - 737.28).abs() < 1e-12);
        assert_eq!(t.classify(36.0), SizeClass::Small);
        assert_eq!(t.classify(400.0), SizeClass::Medium);
        assert_eq!(t.classify(900.0), SizeClass::Large);
    }

    #[test]
    fn single_match_and_duplicate() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![vec![gt(0, g)]];
        let m = match_detections(&[vec![det(bx(0.0, 0.0, 10.0, 9.0), 0.9)]], &gts, 0.5);
        assert!(m.records[0].is_tp());

        let m = match_detections(&[vec![det(g, 0.6), det(bx(0.0, 0.0, 10.0, 9.5), 0.8)]], &gts, 0.5);
        assert_eq!(m.records[0].detection.score, 0.8);
        assert!(m.records[0].is_tp());
        assert!(!m.records[1].is_tp());
    }

    #[test]
    fn iou_must_exceed_threshold() {
        let a = bx(0.0, 0.0, 2.0, 1.0);
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let m = match_detections(&[vec![det(b, 1.0)]], &[vec![gt(0, a)]], 0.5);
        assert!(!m.records[0].is_tp());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        let flags = [true, false, true];
        let exact = average_precision_exact(&flags, 2).unwrap();
        assert!((exact - 5.0 / 6.0).abs() < 1e-12);
        let coco = average_precision(&flags, 2).unwrap();
        assert!((coco - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn tpr_fppi_examples() {
        let gts = vec![vec![gt(0, bx(0.0, 0.0, 10.0, 10.0)), gt(0, bx(20.0, 20.0, 30.0, 30.0))], vec![]];
        let dets = vec![
            vec![det(bx(0.0, 0.0, 10.0, 10.0), 0.9), det(bx(40.0, 40.0, 50.0, 50.0), 0.5)],
            vec![det(bx(1.0, 1.0, 5.0, 5.0), 0.4), det(bx(2.0, 2.0, 6.0, 6.0), 0.3)],
        ];
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(tpr_at(&m), Some(0.5));
        assert_eq!(fppi(&m), 1.5);
        let empty_gt = match_detections(&[vec![]], &[vec![]], 0.5);
        assert_eq!(tpr_at(&empty_gt), None);
    }

    #[test]
    fn froc_end_points() {
        let gts = vec![vec![gt(0, bx(0.0, 0.0, 10.0, 10.0))]];
        let dets = vec![vec![det(bx(0.0, 0.0, 10.0, 10.0), 0.7), det(bx(30.0, 30.0, 40.0, 40.0), 0.2)]];
        let c = froc(&dets, &gts, 0.5, &[0.9, 0.5, 0.0]);
        assert_eq!(c.points[0].fppi, 0.0);
        assert_eq!(c.points[0].tpr, Some(0.0));
        assert_eq!(c.points[1].tpr, Some(1.0));
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(c.points[2].fppi, fppi(&m));
        assert_eq!(c.points[2].tpr, tpr_at(&m));
        assert_eq!(c.tpr_at_fppi(0.0), 1.0);
    }

    #[test]
    fn buckets() {
        let small = bx(0.0, 0.0, 5.0, 5.0);
        let large = bx(20.0, 20.0, 50.0, 50.0);
        let th = SizeThresholds::for_image_side(64);
        let gts = vec![vec![gt(0, small)]];
        let dets = vec![vec![det(small, 0.9)]];
        assert_eq!(size_bucketed_ap(&dets, &gts, 0.5, SizeClass::Small, &th), Some(1.0));
        assert_eq!(size_bucketed_ap(&dets, &gts, 0.5, SizeClass::Large, &th), None);

        // A detection on the large box does not count against the small bucket.
        let gts = vec![vec![gt(0, small), gt(0, large)]];
        let dets = vec![vec![det(large, 0.95), det(small, 0.9)]];
        assert_eq!(size_bucketed_ap(&dets, &gts, 0.5, SizeClass::Small, &th), Some(1.0));
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport::compute(
            "FPN",
            &[vec![]],
            &[vec![gt(0, bx(0.0, 0.0, 4.0, 4.0))]],
            &SizeThresholds::for_image_side(64),
            &EvalConfig::default(),
            10,
            20,
        );
        assert_eq!(
            MetricsReport::csv_header(),
            "variant,AP@50,AP@75,AP@50S,AP@50L,TPR@50,TPR@20,FPPI,Params,FLOPs"
        );
        assert_eq!(r.csv_row(), "FPN,0,0,0,-,0,0,0,10,20");
    }
}
