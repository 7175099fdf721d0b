//! Segmentation and localization metrics.
//!
//! Masks are row-major `bool` slices. F-score pools precision and recall over
//! all pixels of all samples before combining them. cIoU and AUC compare a
//! binarized probability map with the ground-truth box region.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA2: f64 = 0.3;

/// IoU thresholds of the success curve, `0.05, 0.10, …, 0.95`.
pub fn auc_thresholds() -> impl Iterator<Item = f64> {
    (1..=19).map(|i| i as f64 / 20.0)
}

/// `|P ∩ G| / |P ∪ G|`, or 1 when both masks are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn check_pairs<A, B>(pred: &[A], gt: &[B]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("{} predictions for {} ground truths", pred.len(), gt.len())));
    }
    Ok(())
}

/// Mean IoU over paired masks; 0 for an empty list.
pub fn miou<P: AsRef<[bool]>, G: AsRef<[bool]>>(pred: &[P], gt: &[G]) -> Result<f64> {
    check_pairs(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += iou(p.as_ref(), g.as_ref())?;
    }
    Ok(sum / pred.len() as f64)
}

/// `Fβ = (1 + β²)·P·R / (β²·P + R)` from pooled pixel counts.
pub fn fscore<P: AsRef<[bool]>, G: AsRef<[bool]>>(pred: &[P], gt: &[G], beta2: f64) -> Result<f64> {
    check_pairs(pred, gt)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p.len() != g.len() {
            return Err(Error::Contract(format!("mask sizes differ: {} vs {}", p.len(), g.len())));
        }
        for (&a, &b) in p.iter().zip(g) {
            tp += (a && b) as usize;
            fp += (a && !b) as usize;
            fneg += (!a && b) as usize;
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    Ok(f_beta(precision, recall, beta2))
}

pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }
}

/// Tight box around the set pixels of a `width`-wide mask.
pub fn mask_to_bbox(mask: &[bool], width: usize) -> Option<BBox> {
    let mut bbox: Option<BBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        bbox = Some(match bbox {
            None => BBox {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
            },
            Some(b) => BBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }
    bbox
}

/// IoU between `{p > τ}` and the box region.
pub fn box_iou(map: &[f64], width: usize, bbox: &BBox, tau: f64) -> f64 {
    let (mut inter, mut pred) = (0usize, 0usize);
    for (i, &p) in map.iter().enumerate() {
        if p > tau {
            pred += 1;
            inter += bbox.contains(i % width, i / width) as usize;
        }
    }
    let union = pred + bbox.area() - inter;
    inter as f64 / union as f64
}

/// `(cIoU, AUC)` with maps binarized at 0.5: cIoU is the fraction of samples
/// whose IoU exceeds 0.5, AUC the mean over [`auc_thresholds`] of the
/// fraction with IoU at least the threshold.
pub fn ciou_auc<M: AsRef<[f64]>>(maps: &[M], width: usize, boxes: &[BBox]) -> Result<(f64, f64)> {
    check_pairs(maps, boxes)?;
    if maps.is_empty() {
        return Ok((0.0, 0.0));
    }
    let ious: Vec<f64> = maps.iter().zip(boxes).map(|(m, b)| box_iou(m.as_ref(), width, b, 0.5)).collect();
    Ok(success_curve_summary(&ious))
}

/// `(fraction with IoU > 0.5, mean success over the threshold grid)`.
pub fn success_curve_summary(ious: &[f64]) -> (f64, f64) {
    if ious.is_empty() {
        return (0.0, 0.0);
    }
    let n = ious.len() as f64;
    let ciou = ious.iter().filter(|&&v| v > 0.5).count() as f64 / n;
    let grid: Vec<f64> = auc_thresholds().collect();
    let auc = grid
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .sum::<f64>()
        / grid.len() as f64;
    (ciou, auc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub id: String,
    pub iou: f64,
    /// IoU of the binarized map against the ground-truth box.
    pub box_iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub mode: String,
    pub shots: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub fscore: f64,
    pub ciou: f64,
    pub auc: f64,
    pub per_sample: Vec<SampleMetric>,
    pub meta: RunMeta,
}

impl MetricReport {
    /// Scores binary predictions `pred` and probability maps `probs` against
    /// `gt`. Samples whose ground truth is empty carry no box and are left
    /// out of cIoU and AUC.
    pub fn compute<G: AsRef<[bool]>>(
        ids: &[String],
        probs: &[Vec<f64>],
        gt: &[G],
        width: usize,
        beta2: f64,
        meta: RunMeta,
    ) -> Result<Self> {
        check_pairs(probs, gt)?;
        check_pairs(ids, gt)?;
        let pred: Vec<Vec<bool>> = probs
            .iter()
            .map(|m| m.iter().map(|&p| p > crate::decoder::MASK_THRESHOLD).collect())
            .collect();
        let mut per_sample = Vec::with_capacity(ids.len());
        let mut box_ious = Vec::new();
        for ((id, (p, m)), g) in ids.iter().zip(pred.iter().zip(probs)).zip(gt) {
            let bx = mask_to_bbox(g.as_ref(), width).map(|b| box_iou(m, width, &b, 0.5));
            box_ious.extend(bx);
            per_sample.push(SampleMetric {
                id: id.clone(),
                iou: iou(p, g.as_ref())?,
                box_iou: bx,
            });
        }
        let (ciou, auc) = success_curve_summary(&box_ious);
        Ok(Self {
            miou: miou(&pred, gt)?,
            fscore: fscore(&pred, gt, beta2)?,
            ciou,
            auc,
            per_sample,
            meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut m = alloc::vec![false; w * h];
        for &(x, y) in on {
            m[y * w + x] = true;
        }
        m
    }

    #[test]
    fn iou_cases() {
        let a = mask(2, 2, &[(0, 0), (1, 0)]);
        let b = mask(2, 2, &[(1, 0), (1, 1)]);
        assert_eq!(miou(&[a.clone()], &[b]).unwrap(), 1.0 / 3.0);
        assert_eq!(miou(&[a.clone()], &[a.clone()]).unwrap(), 1.0);
        let c = mask(2, 2, &[(0, 1)]);
        assert_eq!(miou(&[a.clone()], &[c]).unwrap(), 0.0);
        let e = mask(2, 2, &[]);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(miou(&[a.clone()], &[a.clone(), a]).is_err());
    }

    #[test]
    fn fscore_cases() {
        let g = mask(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(fscore(&[g.clone()], &[g.clone()], 0.3).unwrap(), 1.0);
        assert_eq!(fscore(&[mask(2, 2, &[])], &[g.clone()], 0.3).unwrap(), 0.0);
        // P = 0.5, R = 1.
        let p = mask(2, 2, &[(0, 0), (1, 1), (0, 1), (1, 0)]);
        let f = fscore(&[p], &[g], 0.3).unwrap();
        assert!((f - 1.3 * 0.5 / (0.15 + 1.0)).abs() < 1e-15);
        assert!((f - 0.5652).abs() < 1e-4);
    }

    #[test]
    fn bbox_cases() {
        let m = mask(5, 5, &[(3, 2)]);
        assert_eq!(
            mask_to_bbox(&m, 5),
            Some(BBox {
                x_min: 3,
                y_min: 2,
                x_max: 3,
                y_max: 2
            })
        );
        assert_eq!(mask_to_bbox(&mask(5, 5, &[]), 5), None);
    }

    #[test]
    fn ciou_auc_cases() {
        let b = BBox {
            x_min: 1,
            y_min: 1,
            x_max: 2,
            y_max: 2,
        };
        let filled: Vec<f64> = (0..16).map(|i| b.contains(i % 4, i / 4) as u8 as f64).collect();
        assert_eq!(ciou_auc(&[filled], 4, &[b]).unwrap(), (1.0, 1.0));
        assert_eq!(ciou_auc(&[alloc::vec![0.0; 16]], 4, &[b]).unwrap(), (0.0, 0.0));

        let (ciou, auc) = success_curve_summary(&[0.2, 0.6, 0.9]);
        assert_eq!(ciou, 2.0 / 3.0);
        // Thresholds 0.05..=0.20 pass all three (4 points), 0.25..=0.60 pass
        // two (8 points), 0.65..=0.90 pass one (6 points), 0.95 none.
        let want = (4.0 * 3.0 + 8.0 * 2.0 + 6.0 * 1.0) / 3.0 / 19.0;
        assert!((auc - want).abs() < 1e-15);
    }

    #[test]
    fn report_on_identical_masks() {
        let g = mask(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let probs: Vec<f64> = g.iter().map(|&v| v as u8 as f64).collect();
        let r = MetricReport::compute(&["a".into()], &[probs], &[g], 4, 0.3, RunMeta::default()).unwrap();
        assert_eq!((r.miou, r.fscore, r.ciou, r.auc), (1.0, 1.0, 1.0, 1.0));
    }
}
