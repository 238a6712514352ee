//! Detection-quality measures: IoU, greedy NMS, and the
//! precision/recall/F1/AP/mAP evaluator over ranked detection lists.

use crate::error::{CoreError, Result};

/// Axis-aligned box, normalized center/size in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<BBox> {
        if !(w > 0.0 && h > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "box needs positive size, got w={w} h={h}"
            )));
        }
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("bbox"));
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clamp corners into the unit square, preserving a positive size.
    pub fn clamp_unit(&self) -> BBox {
        let (x1, y1, x2, y2) = self.corners();
        let x1 = x1.clamp(0.0, 1.0);
        let y1 = y1.clamp(0.0, 1.0);
        let x2 = x2.clamp(0.0, 1.0).max(x1 + 1e-9);
        let y2 = y2.clamp(0.0, 1.0).max(y1 + 1e-9);
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }
}

/// Intersection over union, in [0,1]. Areas are derived from the same
/// corner coordinates as the intersection, so iou(b, b) is exactly 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Greedy non-maximum suppression. Detections are visited in confidence
/// order (ties by lower input index); one is kept iff its IoU with every
/// already-kept detection of the same class is <= the threshold.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Evaluation summary. Precision/recall/F1 are reported at the max-F1 point
/// of the PR curve at the first requested IoU threshold; AP uses the
/// continuous precision-envelope (all-point) integral.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// (iou_threshold, AP) in the requested order.
    pub ap_per_threshold: Vec<(f64, f64)>,
    /// Mean AP over the requested thresholds.
    pub map: f64,
    /// AP at the first threshold over ground-truth area terciles.
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
}

impl Metrics {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.ap_per_threshold
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, ap)| ap)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "precision {:.4}\nrecall    {:.4}\nf1        {:.4}\n",
            self.precision, self.recall, self.f1
        ));
        for (t, ap) in &self.ap_per_threshold {
            out.push_str(&format!("ap@{t:.2}   {ap:.4}\n"));
        }
        out.push_str(&format!("map       {:.4}\n", self.map));
        out.push_str(&format!(
            "ap_small  {:.4}\nap_medium {:.4}\nap_large  {:.4}\n",
            self.ap_small, self.ap_medium, self.ap_large
        ));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut header = String::from("precision,recall,f1");
        let mut row = format!("{},{},{}", self.precision, self.recall, self.f1);
        for (t, ap) in &self.ap_per_threshold {
            header.push_str(&format!(",ap{t}"));
            row.push_str(&format!(",{ap}"));
        }
        header.push_str(",map,ap_small,ap_medium,ap_large\n");
        row.push_str(&format!(
            ",{},{},{},{}\n",
            self.map, self.ap_small, self.ap_medium, self.ap_large
        ));
        header + &row
    }
}

/// Outcome of ranking + greedy matching at one IoU threshold.
struct RankedMatches {
    /// true = TP, false = FP, in rank order.
    hits: Vec<bool>,
    total_gts: usize,
}

/// Rank all detections by confidence (ties by image then input index) and
/// greedily match each to the best-IoU unmatched ground truth of its class
/// (IoU ties by lower ground-truth index).
fn rank_and_match(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GroundTruth>],
    iou_threshold: f64,
    gt_keep: impl Fn(usize, usize) -> bool,
    det_ignore_out_of_bucket: bool,
) -> RankedMatches {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        for di in 0..dets.len() {
            ranked.push((img, di));
        }
    }
    ranked.sort_by(|&(ia, da), &(ib, db)| {
        dets_per_image[ia][da]
            .confidence
            .total_cmp(&dets_per_image[ib][db].confidence)
            .reverse()
            .then(ia.cmp(&ib))
            .then(da.cmp(&db))
    });

    let total_gts = gts_per_image
        .iter()
        .enumerate()
        .map(|(img, gts)| (0..gts.len()).filter(|&gi| gt_keep(img, gi)).count())
        .sum();

    let mut matched: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for (img, di) in ranked {
        let det = &dets_per_image[img][di];
        let gts = &gts_per_image[img];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.class != det.class || matched[img][gi] {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            if overlap < iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, b)) => overlap > b,
            };
            if better {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) if gt_keep(img, gi) => {
                matched[img][gi] = true;
                hits.push(true);
            }
            Some((gi, _)) => {
                // Matched a ground truth outside the current bucket: consume
                // it and drop the detection from this ranking entirely.
                matched[img][gi] = true;
                if !det_ignore_out_of_bucket {
                    hits.push(false);
                }
            }
            None => hits.push(false),
        }
    }
    RankedMatches { hits, total_gts }
}

/// Area under the precision envelope of the PR curve (all-point
/// interpolation). Vacuously 1 when there is nothing to find and nothing
/// found; 0 when detections exist but no ground truth does.
fn average_precision(m: &RankedMatches) -> f64 {
    if m.total_gts == 0 {
        return if m.hits.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(m.hits.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in &m.hits {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / m.total_gts as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    // Precision envelope from the right, integrated over recall.
    let mut ap = 0.0;
    let mut best_p = 0.0f64;
    let mut prev_r = points.last().map(|&(r, _)| r).unwrap_or(0.0);
    for &(r, p) in points.iter().rev() {
        best_p = best_p.max(p);
        ap += (prev_r - r) * best_p;
        prev_r = r;
    }
    ap += prev_r * best_p;
    ap
}

/// Full metric suite over per-image detections and ground truths.
///
/// `iou_thresholds` must be non-empty; the first threshold defines the
/// operating curve for precision/recall/F1 and the size-bucket APs.
pub fn evaluate(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GroundTruth>],
    iou_thresholds: &[f64],
) -> Result<Metrics> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(CoreError::InvalidArgument(format!(
            "evaluate: {} detection lists vs {} ground-truth lists",
            dets_per_image.len(),
            gts_per_image.len()
        )));
    }
    if iou_thresholds.is_empty() {
        return Err(CoreError::InvalidArgument("evaluate: no IoU thresholds".into()));
    }

    let mut ap_per_threshold = Vec::with_capacity(iou_thresholds.len());
    for &t in iou_thresholds {
        let m = rank_and_match(dets_per_image, gts_per_image, t, |_, _| true, false);
        ap_per_threshold.push((t, average_precision(&m)));
    }
    let map = ap_per_threshold.iter().map(|&(_, ap)| ap).sum::<f64>()
        / ap_per_threshold.len() as f64;

    // Operating point: max F1 along the PR curve at the first threshold.
    let first = rank_and_match(dets_per_image, gts_per_image, iou_thresholds[0], |_, _| true, false);
    let (mut precision, mut recall, mut f1) = if first.total_gts == 0 && first.hits.is_empty() {
        (1.0, 1.0, 1.0)
    } else {
        (0.0, 0.0, 0.0)
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in &first.hits {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if first.total_gts == 0 {
            continue;
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / first.total_gts as f64;
        if p + r > 0.0 {
            let f = 2.0 * p * r / (p + r);
            if f > f1 {
                f1 = f;
                precision = p;
                recall = r;
            }
        }
    }

    // Size buckets: ground-truth area terciles over the dataset.
    let mut areas: Vec<f64> = gts_per_image
        .iter()
        .flatten()
        .map(|g| g.bbox.area())
        .collect();
    areas.sort_by(f64::total_cmp);
    let bucket_of = |area: f64| -> usize {
        if areas.is_empty() {
            return 0;
        }
        let t1 = areas[areas.len() / 3];
        let t2 = areas[areas.len() * 2 / 3];
        if area < t1 {
            0
        } else if area < t2 {
            1
        } else {
            2
        }
    };
    let mut bucket_aps = [1.0; 3];
    for (b, slot) in bucket_aps.iter_mut().enumerate() {
        let m = rank_and_match(
            dets_per_image,
            gts_per_image,
            iou_thresholds[0],
            |img, gi| bucket_of(gts_per_image[img][gi].bbox.area()) == b,
            true,
        );
        *slot = average_precision(&m);
    }

    Ok(Metrics {
        precision,
        recall,
        f1,
        ap_per_threshold,
        map,
        ap_small: bucket_aps[0],
        ap_medium: bucket_aps[1],
        ap_large: bucket_aps[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = bb(0.3, 0.4, 0.2, 0.1);
        assert_eq!(iou(&b, &b), 1.0);
        let far = bb(0.8, 0.8, 0.1, 0.1);
        assert_eq!(iou(&b, &far), 0.0);
    }

    #[test]
    fn iou_half_width_offset_is_one_third() {
        // unit-area boxes offset by half a width: intersection 0.5, union 1.5
        let a = bb(0.5, 0.5, 0.4, 0.4);
        let b = bb(0.5 + 0.2, 0.5, 0.4, 0.4);
        let got = iou(&a, &b);
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn nms_keeps_higher_confidence_of_overlapping_pair() {
        let a = Detection { bbox: bb(0.5, 0.5, 0.2, 0.2), confidence: 0.9, class: 0 };
        // shift for IoU = 0.6: 1D overlap fraction o with IoU = o/(2-o) = 0.6 -> o = 0.75
        let b = Detection { bbox: bb(0.5 + 0.05, 0.5, 0.2, 0.2), confidence: 0.7, class: 0 };
        assert!(iou(&a.bbox, &b.bbox) > 0.5);
        let kept = nms(&[b, a], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn nms_disjoint_all_kept_sorted() {
        let d: Vec<Detection> = (0..4)
            .map(|i| Detection {
                bbox: bb(0.1 + 0.2 * i as f64, 0.5, 0.05, 0.05),
                confidence: 0.2 * (i + 1) as f64,
                class: 0,
            })
            .collect();
        let kept = nms(&d, 0.5);
        assert_eq!(kept.len(), 4);
        for w in kept.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
    }

    #[test]
    fn evaluate_perfect_single_detection() {
        let gt = vec![vec![GroundTruth { bbox: bb(0.5, 0.5, 0.2, 0.2), class: 0 }]];
        let det = vec![vec![Detection { bbox: bb(0.5, 0.5, 0.2, 0.2), confidence: 0.9, class: 0 }]];
        let m = evaluate(&det, &gt, &[0.5]).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.ap_at(0.5).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_fp_over_tp_gives_half_ap() {
        // one GT; a false positive above a true positive in rank.
        let gt = vec![vec![GroundTruth { bbox: bb(0.5, 0.5, 0.2, 0.2), class: 0 }]];
        let det = vec![vec![
            Detection { bbox: bb(0.1, 0.1, 0.05, 0.05), confidence: 0.9, class: 0 },
            Detection { bbox: bb(0.5, 0.5, 0.2, 0.2), confidence: 0.8, class: 0 },
        ]];
        let m = evaluate(&det, &gt, &[0.5]).unwrap();
        assert!((m.ap_at(0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_vacuous_and_zero_cases() {
        let m = evaluate(&[vec![]], &[vec![]], &[0.5]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.precision, 1.0);

        let det = vec![vec![Detection { bbox: bb(0.5, 0.5, 0.2, 0.2), confidence: 0.9, class: 0 }]];
        let m = evaluate(&det, &[vec![]], &[0.5]).unwrap();
        assert_eq!(m.map, 0.0);
        assert_eq!(m.precision, 0.0);
    }
}
