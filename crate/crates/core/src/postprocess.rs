//! Letterbox preprocessing, anchor-free box decoding and non-maximum
//! suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded box in pixel coordinates with a class and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub score: f32,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// Affine mapping applied by [`letterbox`]; inverts exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxMeta {
    pub scale: f32,
    pub pad_x: usize,
    pub pad_y: usize,
}

const PAD_VALUE: f32 = 114.0 / 255.0;

/// Aspect-preserving bilinear resize onto a square `target` canvas with
/// centered gray padding.
pub fn letterbox(image: &Tensor, target: usize) -> Result<(Tensor, LetterboxMeta)> {
    if target == 0 || target % 32 != 0 {
        return Err(Error::Precondition(format!(
            "letterbox target must be a positive multiple of 32, got {target}"
        )));
    }
    let (batch, channels, h, w) = image.shape();
    if h == 0 || w == 0 {
        return Err(Error::Precondition("zero-sized image".into()));
    }
    let scale = (target as f32 / w as f32).min(target as f32 / h as f32);
    let new_w = ((w as f32 * scale).round() as usize).clamp(1, target);
    let new_h = ((h as f32 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - new_w) / 2;
    let pad_y = (target - new_h) / 2;

    let mut out = Tensor::full(batch, channels, target, target, PAD_VALUE);
    // bilinear sampling with half-pixel centers
    let sx = w as f32 / new_w as f32;
    let sy = h as f32 / new_h as f32;
    for b in 0..batch {
        for c in 0..channels {
            for oy in 0..new_h {
                let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let wy = fy - y0 as f32;
                for ox in 0..new_w {
                    let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wx = fx - x0 as f32;
                    let v = image.at(b, c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + image.at(b, c, y0, x1) * (1.0 - wy) * wx
                        + image.at(b, c, y1, x0) * wy * (1.0 - wx)
                        + image.at(b, c, y1, x1) * wy * wx;
                    out.set(b, c, pad_y + oy, pad_x + ox, v);
                }
            }
        }
    }
    Ok((out, LetterboxMeta { scale, pad_x, pad_y }))
}

/// Map a box from letterboxed coordinates back to original-image pixels.
pub fn unletterbox(bbox: [f32; 4], meta: &LetterboxMeta) -> [f32; 4] {
    [
        (bbox[0] - meta.pad_x as f32) / meta.scale,
        (bbox[1] - meta.pad_y as f32) / meta.scale,
        (bbox[2] - meta.pad_x as f32) / meta.scale,
        (bbox[3] - meta.pad_y as f32) / meta.scale,
    ]
}

/// Map a box from original-image pixels into letterboxed coordinates.
pub fn apply_letterbox(bbox: [f32; 4], meta: &LetterboxMeta) -> [f32; 4] {
    [
        bbox[0] * meta.scale + meta.pad_x as f32,
        bbox[1] * meta.scale + meta.pad_y as f32,
        bbox[2] * meta.scale + meta.pad_x as f32,
        bbox[3] * meta.scale + meta.pad_y as f32,
    ]
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode raw head outputs (4 + num_classes channels at strides 8/16/32)
/// into candidate detections in network input pixels, unclipped.
///
/// Per cell (i, j) at stride s the center is ((j + 0.5) s, (i + 0.5) s); the
/// first four channels are left/top/right/bottom distances in stride units,
/// clamped at zero; every class whose sigmoid score clears the threshold
/// yields a candidate.
pub fn decode(heads: &[Tensor; 3], conf_threshold: f32) -> Result<Vec<Detection>> {
    let strides = [8usize, 16, 32];
    let mut dets = Vec::new();
    for (head, stride) in heads.iter().zip(strides) {
        let (batch, channels, h, w) = head.shape();
        if batch != 1 {
            return Err(Error::Precondition("decode expects batch 1".into()));
        }
        if channels < 5 {
            return Err(Error::shape("decode", ">= 5 channels", format!("{channels}")));
        }
        let num_classes = channels - 4;
        for i in 0..h {
            for j in 0..w {
                let cx = (j as f32 + 0.5) * stride as f32;
                let cy = (i as f32 + 0.5) * stride as f32;
                let l = head.at(0, 0, i, j).max(0.0) * stride as f32;
                let t = head.at(0, 1, i, j).max(0.0) * stride as f32;
                let r = head.at(0, 2, i, j).max(0.0) * stride as f32;
                let b = head.at(0, 3, i, j).max(0.0) * stride as f32;
                let bbox = [cx - l, cy - t, cx + r, cy + b];
                for class_id in 0..num_classes {
                    let score = sigmoid(head.at(0, 4 + class_id, i, j));
                    if score > conf_threshold {
                        dets.push(Detection { bbox, score, class_id });
                    }
                }
            }
        }
    }
    Ok(dets)
}

/// Clip boxes to `[0, width] x [0, height]`, dropping degenerate results.
pub fn clip_detections(dets: &mut Vec<Detection>, width: usize, height: usize) {
    for d in dets.iter_mut() {
        d.bbox[0] = d.bbox[0].clamp(0.0, width as f32);
        d.bbox[1] = d.bbox[1].clamp(0.0, height as f32);
        d.bbox[2] = d.bbox[2].clamp(0.0, width as f32);
        d.bbox[3] = d.bbox[3].clamp(0.0, height as f32);
    }
    dets.retain(|d| d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3]);
}

pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox[0].partial_cmp(&b.bbox[0]).unwrap_or(std::cmp::Ordering::Equal))
}

/// Greedy per-class suppression by descending score; ties break on lower
/// class id then lower x1. Boxes are never mutated. Candidate lists larger
/// than 30000 are truncated to the top-scoring ones before suppression.
pub fn nms(dets: &[Detection], iou_threshold: f32, max_det: usize) -> Vec<Detection> {
    const CANDIDATE_CAP: usize = 30_000;
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| det_order(a, b));
    sorted.truncate(CANDIDATE_CAP);

    let mut kept: Vec<&Detection> = Vec::new();
    for cand in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept.truncate(max_det);
    kept.into_iter().cloned().collect()
}
