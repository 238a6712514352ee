//! Independent reference implementations used by the verification suites.
//!
//! Everything here is written directly from definitions (per-output-pixel
//! loops, exhaustive scans) and shares no code with the production paths it
//! checks. Keep it that way: these functions are the ground truth the tests
//! compare against.

use crate::metrics::{BBox, Detection, GroundTruth};
use crate::model::HeadLayout;

/// Direct-loop *standard* convolution (no dilation parameter at all), with
/// zero padding. Accumulation per output pixel runs over (channel, kernel
/// row, kernel col), matching the production summation order.
#[allow(clippy::too_many_arguments)]
pub fn standard_conv_direct(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let fetch = |ci: usize, y: i64, xx: i64| -> f64 {
        if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            x[(ci * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ki in 0..k {
                        for kj in 0..k {
                            let y = (oy * stride + ki) as i64 - pad as i64;
                            let xx = (ox * stride + kj) as i64 - pad as i64;
                            acc += fetch(ci, y, xx) * wt[((co * cin + ci) * k + ki) * k + kj];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Brute-force dilated convolution: the quadruple loop over output pixels
/// and kernel taps, sampling x(s*m + r*i - p, s*n + r*j - p).
#[allow(clippy::too_many_arguments)]
pub fn dilated_conv_direct(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Vec<f64> {
    let span = (dilation - 1) * (k - 1) + k;
    let ho = (h + 2 * pad - span) / stride + 1;
    let wo = (w + 2 * pad - span) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for m in 0..ho {
            for n in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for i in 0..k {
                        for j in 0..k {
                            let y = (m * stride + dilation * i) as i64 - pad as i64;
                            let xx = (n * stride + dilation * j) as i64 - pad as i64;
                            let sample = if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
                                0.0
                            } else {
                                x[(ci * h + y as usize) * w + xx as usize]
                            };
                            acc += sample * wt[((co * cin + ci) * k + i) * k + j];
                        }
                    }
                }
                out[(co * ho + m) * wo + n] = acc;
            }
        }
    }
    out
}

/// Per-pixel max pooling with out-of-bounds taps skipped.
pub fn maxpool_direct(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * stride + ky) as i64 - pad as i64;
                        let xx = (ox * stride + kx) as i64 - pad as i64;
                        if y >= 0 && xx >= 0 && y < h as i64 && xx < w as i64 {
                            best = best.max(x[(ci * h + y as usize) * w + xx as usize]);
                        }
                    }
                }
                out[(ci * ho + oy) * wo + ox] = best;
            }
        }
    }
    out
}

/// Double-loop evaluation of the position-attention equations: scores
/// R_i . S_j, row softmax over i, V_j = beta * sum_i u_ji T_i + Q_j.
/// R, S, T are given as already-projected matrices (rows = channels,
/// columns = the N positions).
#[allow(clippy::too_many_arguments)]
pub fn position_attention_direct(
    q: &[f64],
    c: usize,
    n: usize,
    r: &[f64],
    s: &[f64],
    t: &[f64],
    c_red: usize,
    beta: f64,
) -> Vec<f64> {
    let mut u = vec![0.0; n * n];
    for j in 0..n {
        let mut row = vec![0.0; n];
        for i in 0..n {
            let mut dot = 0.0;
            for ch in 0..c_red {
                dot += r[ch * n + i] * s[ch * n + j];
            }
            row[i] = dot;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for i in 0..n {
            u[j * n + i] = row[i] / z;
        }
    }
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for j in 0..n {
            let mut agg = 0.0;
            for i in 0..n {
                agg += u[j * n + i] * t[ch * n + i];
            }
            out[ch * n + j] = beta * agg + q[ch * n + j];
        }
    }
    out
}

/// Double-loop evaluation of the channel-attention equations over flattened
/// channels: z_ji = softmax_i(Q_i . Q_j), V_j = gamma * sum_i z_ji Q_i + Q_j.
pub fn channel_attention_direct(q: &[f64], c: usize, n: usize, gamma: f64) -> Vec<f64> {
    let mut z = vec![0.0; c * c];
    for j in 0..c {
        let mut row = vec![0.0; c];
        for i in 0..c {
            let mut dot = 0.0;
            for p in 0..n {
                dot += q[i * n + p] * q[j * n + p];
            }
            row[i] = dot;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut zsum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            zsum += *v;
        }
        for i in 0..c {
            z[j * c + i] = row[i] / zsum;
        }
    }
    let mut out = vec![0.0; c * n];
    for j in 0..c {
        for p in 0..n {
            let mut agg = 0.0;
            for i in 0..c {
                agg += z[j * c + i] * q[i * n + p];
            }
            out[j * n + p] = gamma * agg + q[j * n + p];
        }
    }
    out
}

fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// NMS by repeated scanning: pick the best unconsumed detection (confidence,
/// then input index), then mark everything it suppresses.
pub fn nms_exhaustive(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut consumed = vec![false; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if consumed[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if dets[i].confidence > dets[b].confidence => Some(i),
                other => other,
            };
        }
        let Some(b) = best else { break };
        consumed[b] = true;
        kept.push(dets[b]);
        for i in 0..dets.len() {
            if !consumed[i]
                && dets[i].class == dets[b].class
                && iou_ref(&dets[i].bbox, &dets[b].bbox) > iou_threshold
            {
                consumed[i] = true;
            }
        }
    }
    kept
}

/// AP at one IoU threshold, from first principles: rank every detection,
/// greedily match, then integrate the precision envelope with an O(n^2)
/// max scan.
pub fn average_precision_direct(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GroundTruth>],
    iou_threshold: f64,
) -> f64 {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        for di in 0..dets.len() {
            ranked.push((img, di));
        }
    }
    ranked.sort_by(|&(ia, da), &(ib, db)| {
        dets_per_image[ib][db]
            .confidence
            .total_cmp(&dets_per_image[ia][da].confidence)
            .then(ia.cmp(&ib))
            .then(da.cmp(&db))
    });
    let total: usize = gts_per_image.iter().map(Vec::len).sum();
    if total == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let mut used: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut pr: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (img, di) in ranked {
        let det = &dets_per_image[img][di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts_per_image[img].iter().enumerate() {
            if used[img][gi] || gt.class != det.class {
                continue;
            }
            let o = iou_ref(&det.bbox, &gt.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            used[img][gi] = true;
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        pr.push((tp / total as f64, tp / (tp + fp)));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..pr.len() {
        let (r, _) = pr[k];
        if r > prev_r {
            let env = pr[k..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_r) * env;
            prev_r = r;
        }
    }
    ap
}

/// Independent re-derivation of the target-assignment rule, structured as a
/// per-ground-truth candidate enumeration.
pub fn assignment_counts_direct(
    gts: &[GroundTruth],
    layouts: &[HeadLayout],
    img_size: usize,
) -> Vec<Vec<(usize, usize, usize)>> {
    let s = img_size as f64;
    let shape_iou = |w: f64, h: f64, aw: f64, ah: f64| -> f64 {
        let inter = w.min(aw) * h.min(ah);
        inter / (w * h + aw * ah - inter)
    };
    let mut slots: Vec<Vec<(usize, usize, usize)>> = layouts.iter().map(|_| Vec::new()).collect();
    let mut occupied: Vec<Vec<(usize, usize, usize)>> = layouts.iter().map(|_| Vec::new()).collect();
    for gt in gts {
        let (gw, gh) = (gt.bbox.w * s, gt.bbox.h * s);
        let mut any = false;
        for (hi, l) in layouts.iter().enumerate() {
            let gx = ((gt.bbox.cx * s / l.stride as f64) as usize).min(l.grid - 1);
            let gy = ((gt.bbox.cy * s / l.stride as f64) as usize).min(l.grid - 1);
            let mut cand: Vec<(usize, f64)> = Vec::new();
            for (ai, &(aw, ah)) in l.anchors.iter().enumerate() {
                let ratio = (gw / aw).max(aw / gw).max(gh / ah).max(ah / gh);
                if ratio <= 4.0 {
                    cand.push((ai, shape_iou(gw, gh, aw, ah)));
                }
            }
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (ai, _) in cand {
                if !occupied[hi].contains(&(ai, gy, gx)) {
                    occupied[hi].push((ai, gy, gx));
                    slots[hi].push((ai, gy, gx));
                    any = true;
                    break;
                }
            }
        }
        if !any {
            let mut global: Vec<(usize, usize, f64)> = Vec::new();
            for (hi, l) in layouts.iter().enumerate() {
                for (ai, &(aw, ah)) in l.anchors.iter().enumerate() {
                    global.push((hi, ai, shape_iou(gw, gh, aw, ah)));
                }
            }
            global.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut placed = false;
            for &(hi, ai, _) in &global {
                let l = &layouts[hi];
                let gx = ((gt.bbox.cx * s / l.stride as f64) as usize).min(l.grid - 1);
                let gy = ((gt.bbox.cy * s / l.stride as f64) as usize).min(l.grid - 1);
                if !occupied[hi].contains(&(ai, gy, gx)) {
                    occupied[hi].push((ai, gy, gx));
                    slots[hi].push((ai, gy, gx));
                    placed = true;
                    break;
                }
            }
            if !placed {
                let (hi, ai, _) = global[0];
                let l = &layouts[hi];
                let gx = ((gt.bbox.cx * s / l.stride as f64) as usize).min(l.grid - 1);
                let gy = ((gt.bbox.cy * s / l.stride as f64) as usize).min(l.grid - 1);
                slots[hi].push((ai, gy, gx));
            }
        }
    }
    slots
}
