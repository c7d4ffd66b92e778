//! Intersection-over-union and rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SegMask;

/// Row = ground truth class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn accumulate(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::dim(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        pred.check_classes(self.classes)?;
        gt.check_classes(self.classes)?;
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IOU; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn iou(&self) -> MiouResult {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let gt_total: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let pred_total: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouResult { per_class, miou }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IOU accumulated over every pixel of every mask pair.
pub fn miou(preds: &[SegMask], gts: &[SegMask], classes: usize) -> Result<MiouResult> {
    if preds.len() != gts.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} ground truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    Ok(cm.iou())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or fewer than two points exist.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, ids: &[u32]) -> SegMask {
        SegMask::new(h, w, ids.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(2, 3, &[0, 1, 2, 2, 1, 0]);
        let r = miou(&[m.clone()], &[m], 4).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), Some(1.0), None]);
    }

    #[test]
    fn hand_confusion_case() {
        let pred = mask(2, 2, &[0, 1, 1, 1]);
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let r = miou(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_prediction() {
        let r = miou(&[mask(2, 2, &[0; 4])], &[mask(2, 2, &[1; 4])], 2).unwrap();
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn out_of_range_class() {
        assert!(miou(&[mask(1, 1, &[3])], &[mask(1, 1, &[0])], 3).is_err());
        assert!(miou(&[mask(1, 2, &[0, 0])], &[mask(2, 1, &[0, 0])], 3).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 1.0]), None);
        // ties share the average rank
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.948_683_298_050_513_8).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn order_invariant(seed in 0u64..1000) {
            let mk = |s: u64| mask(3, 3, &(0..9).map(|i| ((i as u64 * 31 + s) % 5) as u32).collect::<Vec<_>>());
            let preds = vec![mk(seed), mk(seed + 1), mk(seed + 2)];
            let gts = vec![mk(seed + 7), mk(seed + 9), mk(seed + 3)];
            let a = miou(&preds, &gts, 5).unwrap();
            let rp: Vec<_> = preds.into_iter().rev().collect();
            let rg: Vec<_> = gts.into_iter().rev().collect();
            proptest::prop_assert_eq!(a, miou(&rp, &rg, 5).unwrap());
        }
    }
}
