//! Mask AP in the standard COCO convention: greedy matching per class at ten
//! IoU thresholds, 101-point interpolated precision, size buckets by
//! ground-truth mask area. Buckets can be scaled to small canvases so the
//! small/medium/large split stays meaningful.

use ndarray::Array2;

use crate::config::SizeBuckets;
use crate::error::{Error, Result};
use crate::supervision::Scene;

/// IoU thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// COCO size-bucket boundaries in pixels on a 640x640 reference canvas.
const SMALL_MAX: f64 = 32.0 * 32.0;
const MEDIUM_MAX: f64 = 96.0 * 96.0;
const REFERENCE_AREA: f64 = 640.0 * 640.0;

#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: u64,
    /// Foreground class, 1-based.
    pub class_id: usize,
    /// Binary mask at image resolution.
    pub mask: Array2<bool>,
    pub score: f64,
}

/// Undefined entries mark empty buckets (no ground truth in range).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

impl EvalReport {
    pub fn lines(&self) -> Vec<String> {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "undefined".to_owned(),
        };
        vec![
            format!("AP={}", fmt(self.ap)),
            format!("AP50={}", fmt(self.ap50)),
            format!("AP75={}", fmt(self.ap75)),
            format!("AP_S={}", fmt(self.ap_s)),
            format!("AP_M={}", fmt(self.ap_m)),
            format!("AP_L={}", fmt(self.ap_l)),
        ]
    }
}

/// Intersection over union of two equal-size binary masks; 0 when both are
/// empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "mask resolutions differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Size-bucket area bounds (inclusive low, exclusive high) for one image.
fn bucket_bounds(buckets: SizeBuckets, image_area: f64) -> [(f64, f64); 3] {
    let scale = match buckets {
        SizeBuckets::Scaled => image_area / REFERENCE_AREA,
        SizeBuckets::Coco => 1.0,
    };
    [
        (0.0, SMALL_MAX * scale),
        (SMALL_MAX * scale, MEDIUM_MAX * scale),
        (MEDIUM_MAX * scale, f64::INFINITY),
    ]
}

/// Per-(image, class) match context, IoUs precomputed once.
struct MatchUnit {
    /// [n_det, n_gt]
    ious: Array2<f64>,
    gt_areas: Vec<f64>,
    det_areas: Vec<f64>,
    /// (score, global detection id), already sorted for matching.
    dets: Vec<(f64, usize)>,
}

/// One detection's outcome under a (threshold, area-range) setting.
struct Outcome {
    score: f64,
    id: usize,
    matched: bool,
    ignored: bool,
}

/// Greedy matching for one image and class: detections in score order take
/// the highest-IoU free ground truth at or above the threshold, preferring
/// in-range ground truth over ignored. Unmatched detections whose own area
/// falls outside the range are ignored rather than counted as false
/// positives.
fn match_unit(unit: &MatchUnit, thr: f64, range: (f64, f64)) -> (Vec<Outcome>, usize) {
    let n_gt = unit.gt_areas.len();
    let gt_ignore: Vec<bool> = unit
        .gt_areas
        .iter()
        .map(|&a| a < range.0 || a >= range.1)
        .collect();
    let mut order: Vec<usize> = (0..n_gt).collect();
    order.sort_by_key(|&g| (gt_ignore[g], g));
    let npig = gt_ignore.iter().filter(|&&ig| !ig).count();

    let mut gt_taken = vec![false; n_gt];
    let mut outcomes = Vec::with_capacity(unit.dets.len());
    for (di, &(score, id)) in unit.dets.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for &g in &order {
            if gt_taken[g] {
                continue;
            }
            if let Some(b) = best {
                if !gt_ignore[b] && gt_ignore[g] {
                    break;
                }
            }
            if unit.ious[[di, g]] < best_iou {
                continue;
            }
            best_iou = unit.ious[[di, g]];
            best = Some(g);
        }
        let (matched, ignored) = match best {
            Some(g) => {
                gt_taken[g] = true;
                (true, gt_ignore[g])
            }
            None => {
                let a = unit.det_areas[di];
                (false, a < range.0 || a >= range.1)
            }
        };
        outcomes.push(Outcome {
            score,
            id,
            matched,
            ignored,
        });
    }
    (outcomes, npig)
}

/// 101-point interpolated average precision from globally sorted outcomes.
fn average_precision(mut outcomes: Vec<Outcome>, npig: usize) -> Option<f64> {
    if npig == 0 {
        return None;
    }
    outcomes.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.id.cmp(&b.id))
    });
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for o in &outcomes {
        if o.ignored {
            continue;
        }
        if o.matched {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / npig as f64);
    }
    // Monotone envelope from the right, then sample 101 recall points.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rc| rc >= r - 1e-12)
            .map_or(0.0, |i| precisions[i]);
        total += p;
    }
    Some(total / 101.0)
}

/// COCO-style evaluation over every scene. Per class and IoU threshold the
/// matches accumulate across images; AP is the mean over classes that have
/// ground truth, then over thresholds. Buckets restrict by ground-truth mask
/// area.
pub fn evaluate(
    detections: &[Detection],
    scenes: &[Scene],
    num_classes: usize,
    buckets: SizeBuckets,
) -> Result<EvalReport> {
    for (i, d) in detections.iter().enumerate() {
        if d.class_id == 0 || d.class_id > num_classes {
            return Err(Error::Eval(format!(
                "detection {i} has unknown class id {} (classes are 1..={num_classes})",
                d.class_id
            )));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Eval(format!(
                "detection {i} score {} outside [0, 1]",
                d.score
            )));
        }
        if !scenes.iter().any(|s| s.id == d.image_id) {
            return Err(Error::Eval(format!(
                "detection {i} references unknown image {}",
                d.image_id
            )));
        }
    }
    for scene in scenes {
        for inst in &scene.instances {
            if inst.class_id > num_classes {
                return Err(Error::Eval(format!(
                    "scene {} has ground-truth class {} beyond the configured {num_classes}",
                    scene.id, inst.class_id
                )));
            }
        }
    }

    // Precompute per-(image, class) IoUs and bucket bounds.
    let mut units: Vec<Vec<MatchUnit>> = Vec::new(); // [class-1][image]
    let mut bounds: Vec<[(f64, f64); 3]> = Vec::new();
    for _ in 0..num_classes {
        units.push(Vec::new());
    }
    for scene in scenes {
        let (h, w) = scene.size();
        bounds.push(bucket_bounds(buckets, (h * w) as f64));
        for class in 1..=num_classes {
            let gts: Vec<&crate::supervision::GtInstance> = scene
                .instances
                .iter()
                .filter(|i| i.class_id == class)
                .collect();
            let dets: Vec<(usize, &Detection)> = detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.image_id == scene.id && d.class_id == class)
                .collect();
            let mut sorted: Vec<(f64, usize, usize)> = dets
                .iter()
                .map(|(id, d)| (d.score, *id, *id))
                .collect();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut ious = Array2::zeros((sorted.len(), gts.len()));
            let mut det_areas = Vec::with_capacity(sorted.len());
            for (row, &(_, _, id)) in sorted.iter().enumerate() {
                let d = &detections[id];
                det_areas.push(d.mask.iter().filter(|&&b| b).count() as f64);
                for (col, gt) in gts.iter().enumerate() {
                    if d.mask.dim() != gt.visible_mask.dim() {
                        return Err(Error::Eval(format!(
                            "detection {id} mask resolution {:?} does not match image {} ({:?})",
                            d.mask.dim(),
                            scene.id,
                            gt.visible_mask.dim()
                        )));
                    }
                    ious[[row, col]] = mask_iou(&d.mask, &gt.visible_mask)?;
                }
            }
            units[class - 1].push(MatchUnit {
                ious,
                gt_areas: gts.iter().map(|g| g.area() as f64).collect(),
                det_areas,
                dets: sorted.iter().map(|&(s, _, id)| (s, id)).collect(),
            });
        }
    }

    let thresholds = iou_thresholds();
    // range index: 0 small, 1 medium, 2 large, 3 all
    let ap_at = |thr_idx: Option<usize>, range_idx: usize| -> Option<f64> {
        let mut class_aps = Vec::new();
        for class_units in &units {
            let mut per_thr = Vec::new();
            let mut defined = false;
            for (ti, &thr) in thresholds.iter().enumerate() {
                if thr_idx.is_some_and(|want| want != ti) {
                    continue;
                }
                let mut outcomes = Vec::new();
                let mut npig = 0usize;
                for (img, unit) in class_units.iter().enumerate() {
                    let range = if range_idx == 3 {
                        (0.0, f64::INFINITY)
                    } else {
                        bounds[img][range_idx]
                    };
                    let (mut o, n) = match_unit(unit, thr, range);
                    outcomes.append(&mut o);
                    npig += n;
                }
                match average_precision(outcomes, npig) {
                    Some(ap) => {
                        per_thr.push(ap);
                        defined = true;
                    }
                    None => {}
                }
            }
            if defined {
                class_aps.push(per_thr.iter().sum::<f64>() / per_thr.len() as f64);
            }
        }
        if class_aps.is_empty() {
            None
        } else {
            Some(class_aps.iter().sum::<f64>() / class_aps.len() as f64)
        }
    };

    Ok(EvalReport {
        ap: ap_at(None, 3),
        ap50: ap_at(Some(0), 3),
        ap75: ap_at(Some(5), 3),
        ap_s: ap_at(None, 0),
        ap_m: ap_at(None, 1),
        ap_l: ap_at(None, 2),
    })
}
