//! Brute-force reference metrics, written without the library's matching,
//! ranking or AP code, plus small-instance generators.

use mhfpn::boxes::{BBox, Detection};
use mhfpn::metrics::{
    ap_of, bucketed_ap_from_matches, fppi, froc, match_detections, tpr_at, GroundTruth, SizeClass,
    SizeThresholds,
};
use mhfpn::rng::SplitMix64;

pub struct Instance {
    pub dets: Vec<Vec<Detection>>,
    pub gts: Vec<Vec<GroundTruth>>,
}

/// Area cut points suited to the small boxes below: 4 is S, 12 is M, 16 is L.
pub const SIZES: SizeThresholds = SizeThresholds {
    small_below: 5.0,
    large_from: 15.0,
};

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).expect("valid box")
}

fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    let lo = if a1 > b1 { a1 } else { b1 };
    let hi = if a2 < b2 { a2 } else { b2 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
    let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    inter / (area_a + area_b - inter)
}

/// IoU by counting the centres of a `cells × cells` grid over the union's
/// bounding rectangle.
pub fn iou_grid(a: &BBox, b: &BBox, cells: usize) -> f64 {
    let (x0, y0) = (a.x1.min(b.x1), a.y1.min(b.y1));
    let (x1, y1) = (a.x2.max(b.x2), a.y2.max(b.y2));
    let (hx, hy) = ((x1 - x0) / cells as f64, (y1 - y0) / cells as f64);
    let inside = |r: &BBox, x: f64, y: f64| x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2;
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..cells {
        let y = y0 + (j as f64 + 0.5) * hy;
        for i in 0..cells {
            let x = x0 + (i as f64 + 0.5) * hx;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

/// True when `a` ranks before `b`: higher score, then lower image index,
/// then smaller coordinates.
fn ranks_before(a: &(usize, Detection), b: &(usize, Detection)) -> bool {
    let key = |(i, d): &(usize, Detection)| (-d.score, *i as f64, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2);
    let (ka, kb) = (key(a), key(b));
    [ka.0 - kb.0, ka.1 - kb.1, ka.2 - kb.2, ka.3 - kb.3, ka.4 - kb.4, ka.5 - kb.5]
        .into_iter()
        .find(|d| *d != 0.0)
        .is_some_and(|d| d < 0.0)
}

/// One ranked detection: image, detection, matched ground-truth index.
pub type Ranked = (usize, Detection, Option<usize>);

/// Selection-sort ranking and greedy matching against unmatched ground
/// truths with IoU strictly above `thr`, highest IoU first, lowest index on
/// ties.
pub fn match_ref(inst: &Instance, thr: f64, min_score: f64) -> (Vec<Ranked>, Vec<Vec<bool>>) {
    let mut pool: Vec<(usize, Detection)> = Vec::new();
    for (i, ds) in inst.dets.iter().enumerate() {
        for d in ds {
            if d.score >= min_score {
                pool.push((i, *d));
            }
        }
    }
    let mut taken: Vec<Vec<bool>> = inst.gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for k in 1..pool.len() {
            if ranks_before(&pool[k], &pool[best]) {
                best = k;
            }
        }
        let (img, det) = pool.remove(best);
        let mut hit: Option<usize> = None;
        let mut hit_iou = 0.0;
        for (g, gt) in inst.gts[img].iter().enumerate() {
            let v = iou_ref(&det.bbox, &gt.bbox);
            if !taken[img][g] && v > thr && (hit.is_none() || v > hit_iou) {
                hit = Some(g);
                hit_iou = v;
            }
        }
        if let Some(g) = hit {
            taken[img][g] = true;
        }
        out.push((img, det, hit));
    }
    (out, taken)
}

/// 101-point AP straight from the definition: at each recall level the best
/// precision over every cut-off reaching it.
pub fn ap_ref(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let mut best = 0.0f64;
        for cut in 0..flags.len() {
            let tp = flags[..=cut].iter().filter(|&&f| f).count();
            let recall = tp as f64 / num_gt as f64;
            let precision = tp as f64 / (cut + 1) as f64;
            if recall >= r && precision > best {
                best = precision;
            }
        }
        total += best;
    }
    Some(total / 101.0)
}

pub fn bucket_ref(inst: &Instance, ranked: &[Ranked], bucket: SizeClass) -> Option<f64> {
    let num_gt = inst.gts.iter().flatten().filter(|g| SIZES.classify(g.bbox.area()) == bucket).count();
    let mut flags = Vec::new();
    for (img, det, hit) in ranked {
        match hit {
            Some(g) if SIZES.classify(inst.gts[*img][*g].bbox.area()) == bucket => flags.push(true),
            Some(_) => {}
            None if SIZES.classify(det.bbox.area()) == bucket => flags.push(false),
            None => {}
        }
    }
    ap_ref(&flags, num_gt)
}

const THRESHOLDS: [f64; 3] = [0.2, 0.5, 0.75];
const SCORE_CUTS: [f64; 5] = [0.9, 0.7, 0.5, 0.3, 0.1];

/// Compares every library metric with the reference on one instance;
/// equality is exact.
pub fn compare(inst: &Instance) -> Result<(), String> {
    let num_gt: usize = inst.gts.iter().map(Vec::len).sum();
    for thr in THRESHOLDS {
        let m = match_detections(&inst.dets, &inst.gts, thr);
        let (ranked, taken) = match_ref(inst, thr, f64::NEG_INFINITY);
        let got: Vec<Ranked> = m.records.iter().map(|r| (r.image, r.detection, r.gt)).collect();
        if got != ranked {
            return Err(format!("match at {thr}: {got:?} vs {ranked:?}"));
        }
        let flags: Vec<bool> = ranked.iter().map(|r| r.2.is_some()).collect();
        let want_ap = ap_ref(&flags, num_gt);
        if ap_of(&m) != want_ap {
            return Err(format!("AP at {thr}: {:?} vs {want_ap:?}", ap_of(&m)));
        }
        let matched = taken.iter().flatten().filter(|&&t| t).count();
        let want_tpr = (num_gt > 0).then(|| matched as f64 / num_gt as f64);
        if tpr_at(&m) != want_tpr {
            return Err(format!("TPR at {thr}: {:?} vs {want_tpr:?}", tpr_at(&m)));
        }
        let fps = ranked.iter().filter(|r| r.2.is_none()).count();
        let want_fppi = fps as f64 / inst.dets.len() as f64;
        if fppi(&m) != want_fppi {
            return Err(format!("FPPI at {thr}: {} vs {want_fppi}", fppi(&m)));
        }
        for bucket in [SizeClass::Small, SizeClass::Medium, SizeClass::Large] {
            let got = bucketed_ap_from_matches(&m, &inst.gts, bucket, &SIZES);
            let want = bucket_ref(inst, &ranked, bucket);
            if got != want {
                return Err(format!("AP{bucket} at {thr}: {got:?} vs {want:?}"));
            }
        }
        let curve = froc(&inst.dets, &inst.gts, thr, &SCORE_CUTS);
        for p in &curve.points {
            let (r, t) = match_ref(inst, thr, p.threshold);
            let tp = t.iter().flatten().filter(|&&v| v).count();
            let fppi = r.iter().filter(|x| x.2.is_none()).count() as f64 / inst.dets.len() as f64;
            let tpr = (num_gt > 0).then(|| tp as f64 / num_gt as f64);
            if p.fppi != fppi || p.tpr != tpr {
                return Err(format!("FROC at {thr}, score {}: {p:?} vs ({fppi}, {tpr:?})", p.threshold));
            }
        }
    }
    Ok(())
}

fn gt(image: usize, b: BBox) -> GroundTruth {
    GroundTruth::new(image, b, &SIZES)
}

/// Single image: every subset of three ground truths against every sequence
/// of up to three detections drawn from eight (box, score) choices.
pub fn exhaustive_single_image() -> Vec<Instance> {
    let gt_pool = [bx(0.0, 0.0, 4.0, 4.0), bx(2.0, 2.0, 6.0, 6.0), bx(1.0, 0.0, 5.0, 3.0)];
    let det_boxes = [bx(0.0, 0.0, 4.0, 4.0), bx(1.0, 1.0, 5.0, 5.0), bx(2.0, 2.0, 6.0, 6.0), bx(0.0, 0.0, 2.0, 2.0)];
    let choices: Vec<Detection> = det_boxes
        .iter()
        .flat_map(|&b| [0.9, 0.5].map(|score| Detection { bbox: b, score }))
        .collect();
    let mut seqs: Vec<Vec<Detection>> = vec![vec![]];
    let mut frontier = seqs.clone();
    for _ in 0..3 {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                choices.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        seqs.extend(frontier.iter().cloned());
    }
    let mut out = Vec::new();
    for mask in 0..8u32 {
        let gts: Vec<GroundTruth> = (0..3).filter(|i| mask >> i & 1 == 1).map(|i| gt(0, gt_pool[i])).collect();
        for s in &seqs {
            out.push(Instance {
                dets: vec![s.clone()],
                gts: vec![gts.clone()],
            });
        }
    }
    out
}

/// Random instances with up to four images, five detections and three
/// ground truths in total, coordinates on a half-pixel grid and scores
/// drawn from four values so that ties are common.
pub fn random_instances(n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = SplitMix64::new(seed);
    let mut pick = |k: usize| (rng.next_f64() * k as f64) as usize % k;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let images = 1 + pick(4);
        let random_box = |pick: &mut dyn FnMut(usize) -> usize| {
            let x = pick(12) as f64 * 0.5;
            let y = pick(12) as f64 * 0.5;
            let w = 1.0 + pick(8) as f64 * 0.5;
            let h = 1.0 + pick(8) as f64 * 0.5;
            bx(x, y, x + w, y + h)
        };
        let mut dets = vec![Vec::new(); images];
        let mut gts = vec![Vec::new(); images];
        for _ in 0..pick(4) {
            let i = pick(images);
            let b = random_box(&mut pick);
            gts[i].push(gt(i, b));
        }
        for _ in 0..pick(6) {
            let i = pick(images);
            // Half the detections sit near a ground truth of their image.
            let b = match gts[i].last() {
                Some(g) if pick(2) == 0 => {
                    let dx = pick(3) as f64 * 0.5 - 0.5;
                    let g: &GroundTruth = g;
                    bx(g.bbox.x1 + dx, g.bbox.y1, g.bbox.x2 + dx, g.bbox.y2)
                }
                _ => random_box(&mut pick),
            };
            let score = [0.2, 0.4, 0.6, 0.8][pick(4)];
            dets[i].push(Detection { bbox: b, score });
        }
        out.push(Instance { dets, gts });
    }
    out
}
