//! Detection and localization metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Threshold count above which the PRO sweep switches to quantiles.
pub const MAX_PRO_THRESHOLDS: usize = 512;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Area under the ROC curve, computed as the Mann–Whitney U statistic with
/// midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical {
            context: "AUROC scores".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie block i..=j shares the mean rank.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += midrank * pos_in_block as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// `f32` convenience wrapper used for pixel scores.
pub fn auroc_f32(scores: &[f32], labels: &[bool]) -> Result<f64> {
    let s: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
    auroc(&s, labels)
}

/// 4-connected components of the positive cells of a binary mask. Returns one
/// label per cell (`0` = background, regions numbered from 1) and the count.
pub fn connected_components(mask: &Matrix) -> (Vec<usize>, usize) {
    let (h, w) = (mask.rows(), mask.cols());
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.as_slice()[start] <= 0.5 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.as_slice()[q] > 0.5 && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
    }
    (labels, next)
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
///
/// Thresholds sweep the score values from high to low (all distinct values
/// when there are at most [`MAX_PRO_THRESHOLDS`], otherwise that many
/// rank-quantiles). At each threshold a pixel is detected when its score is
/// `>=` the threshold; PRO is the mean over ground-truth regions of the
/// detected fraction of the region, FPR the detected fraction of normal
/// pixels. The curve starts at `(0, 0)` and is integrated with the
/// trapezoid rule, interpolating linearly at `fpr_limit`.
pub fn aupro(maps: &[Matrix], masks: &[Matrix], fpr_limit: f64) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} score maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr_limit must lie in (0, 1], got {fpr_limit}")));
    }
    // Per pixel: score, region id (global, 0 = normal).
    let mut pixels: Vec<(f32, usize)> = Vec::new();
    let mut region_sizes = vec![0usize]; // index 0 unused
    for (map, mask) in maps.iter().zip(masks) {
        if (map.rows(), map.cols()) != (mask.rows(), mask.cols()) {
            return Err(Error::Dimension(format!(
                "score map {}x{} vs mask {}x{}",
                map.rows(),
                map.cols(),
                mask.rows(),
                mask.cols()
            )));
        }
        let (labels, count) = connected_components(mask);
        let base = region_sizes.len() - 1;
        region_sizes.extend(std::iter::repeat_n(0, count));
        for (&s, &l) in map.as_slice().iter().zip(&labels) {
            let region = if l == 0 { 0 } else { base + l };
            if region > 0 {
                region_sizes[region] += 1;
            }
            pixels.push((s, region));
        }
    }
    let n_regions = region_sizes.len() - 1;
    if n_regions == 0 {
        return Err(Error::UndefinedMetric("no anomalous region in any mask".into()));
    }
    let n_normal = pixels.iter().filter(|p| p.1 == 0).count();
    if n_normal == 0 {
        return Err(Error::UndefinedMetric("no normal pixels".into()));
    }
    if pixels.iter().any(|p| p.0.is_nan()) {
        return Err(Error::Numerical {
            context: "AUPRO scores".into(),
        });
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut distinct: Vec<f32> = pixels.iter().map(|p| p.0).collect();
    distinct.dedup();
    let thresholds: Vec<f32> = if distinct.len() <= MAX_PRO_THRESHOLDS {
        distinct
    } else {
        // Rank quantiles of the pixel scores, highest first.
        let n = pixels.len();
        let mut t: Vec<f32> = (1..=MAX_PRO_THRESHOLDS)
            .map(|q| pixels[((q * n) / MAX_PRO_THRESHOLDS).min(n) - 1].0)
            .collect();
        t.dedup();
        t
    };

    let mut curve = vec![(0.0f64, 0.0f64)];
    let mut cursor = 0;
    let mut fp = 0usize;
    let mut overlap_sum = 0.0f64;
    for &t in &thresholds {
        while cursor < pixels.len() && pixels[cursor].0 >= t {
            let region = pixels[cursor].1;
            if region == 0 {
                fp += 1;
            } else {
                overlap_sum += 1.0 / region_sizes[region] as f64;
            }
            cursor += 1;
        }
        curve.push((fp as f64 / n_normal as f64, overlap_sum / n_regions as f64));
    }

    let mut area = 0.0f64;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= fpr_limit {
            break;
        }
        if x1 <= fpr_limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_lim = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
            area += (fpr_limit - x0) * (y0 + y_lim) / 2.0;
        }
    }
    Ok(area / fpr_limit)
}

/// Detection and localization metrics for one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub p_aupro: Option<f64>,
    pub n_images: usize,
    pub n_pixels: usize,
}
