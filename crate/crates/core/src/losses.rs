//! Consistency and cross-entropy losses.
//!
//! The consistency loss compares a warped logits mask against the logits
//! predicted directly in the target frame, weighting the per-entry L1
//! difference by a normalized weight map. Three weighting schemes exist
//! (uniform, label prior, pixel prior) and are mixed 0.2 / 0.4 / 0.4.
//! Weight maps, argmax labels and edge maps are constants in the graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ValidityMask;
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Scalar, Tensor};

/// Mix of (uniform, label prior, pixel prior) in the combined loss.
pub const COMBINED_MIX: [f64; 3] = [0.2, 0.4, 0.4];

/// Relative threshold on the Sobel magnitude for edge pixels.
pub const EDGE_THRESHOLD: f64 = 0.1;

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::dim(format!(
                "seg mask {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(SegMask { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= classes) {
            Some(id) => Err(Error::contract(format!("class id {id} >= {classes}"))),
            None => Ok(()),
        }
    }

    /// One-hot logits with value `scale` on the labelled class.
    pub fn to_one_hot<S: Scalar>(&self, classes: usize, scale: S) -> Result<Tensor<S>> {
        self.check_classes(classes)?;
        let mut data = vec![S::zero(); self.ids.len() * classes];
        for (px, &id) in self.ids.iter().enumerate() {
            data[px * classes + id as usize] = scale;
        }
        Tensor::new(&[self.height, self.width, classes], data)
    }
}

/// Normalized loss weights over HxWxC entries.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap<S: Scalar = f32>(Tensor<S>);

impl<S: Scalar> WeightMap<S> {
    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }

    pub fn total(&self) -> S {
        self.0.sum()
    }

    /// Linear combination of weight maps with matching shapes.
    pub fn mix(parts: &[(&WeightMap<S>, f64)]) -> Result<Self> {
        let (first, _) = parts.first().ok_or_else(|| Error::contract("empty weight mix"))?;
        let mut acc = Tensor::zeros(first.0.dims());
        for (w, k) in parts {
            acc.add_assign(&w.0.scale(S::lit(*k)))?;
        }
        Ok(WeightMap(acc))
    }
}

fn check_validity(h: usize, w: usize, validity: &ValidityMask) -> Result<()> {
    if (validity.height(), validity.width()) != (h, w) {
        return Err(Error::dim(format!(
            "validity {}x{} vs {h}x{w}",
            validity.height(),
            validity.width()
        )));
    }
    Ok(())
}

/// Constant weight over valid entries, normalized to sum to one.
pub fn weight_uniform<S: Scalar>(h: usize, w: usize, c: usize, validity: &ValidityMask) -> Result<WeightMap<S>> {
    check_validity(h, w, validity)?;
    let n = validity.count() * c;
    let mut data = vec![S::zero(); h * w * c];
    if n > 0 {
        let v = S::one() / S::lit(n as f64);
        for (px, &ok) in validity.values().iter().enumerate() {
            if ok {
                data[px * c..][..c].fill(v);
            }
        }
    }
    Ok(WeightMap(Tensor::new(&[h, w, c], data)?))
}

/// Per-pixel argmax over the channel axis, lowest index on ties.
pub(crate) fn argmax_channels<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<u32>> {
    let (_, _, c) = logits.hwc()?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

/// One-hot at each valid pixel's predicted class, normalized.
pub fn weight_label_prior<S: Scalar>(predicted: &Tensor<S>, validity: &ValidityMask) -> Result<WeightMap<S>> {
    let (h, w, c) = predicted.hwc()?;
    check_validity(h, w, validity)?;
    let labels = argmax_channels(predicted)?;
    let n = validity.count();
    let mut data = vec![S::zero(); h * w * c];
    if n > 0 {
        let v = S::one() / S::lit(n as f64);
        for (px, (&ok, &label)) in validity.values().iter().zip(&labels).enumerate() {
            if ok {
                data[px * c + label as usize] = v;
            }
        }
    }
    Ok(WeightMap(Tensor::new(&[h, w, c], data)?))
}

/// Binary edge map: Sobel magnitude of the channel-mean image, thresholded
/// at a fraction of the image maximum, then dilated by one pixel.
pub fn edge_map<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w, ch) = image.hwc()?;
    let inv = 1.0 / ch as f64;
    let gray: Vec<f64> = image
        .data()
        .chunks_exact(ch)
        .map(|px| px.iter().map(|v| v.as_f64()).sum::<f64>() * inv)
        .collect();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        gray[r * w + c]
    };
    let mut mag = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            mag[r as usize * w + c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    let mut out = vec![S::zero(); h * w];
    if max > 0.0 {
        let thr = EDGE_THRESHOLD * max;
        for r in 0..h {
            for c in 0..w {
                if mag[r * w + c] < thr {
                    continue;
                }
                for rr in r.saturating_sub(1)..(r + 2).min(h) {
                    for cc in c.saturating_sub(1)..(c + 2).min(w) {
                        out[rr * w + cc] = S::one();
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w], out)
}

/// Edge pixels weighted equally across channels; falls back to uniform
/// weighting when no valid edge pixel exists.
pub fn weight_pixel_prior_from_edges<S: Scalar>(
    edges: &Tensor<S>,
    c: usize,
    validity: &ValidityMask,
) -> Result<WeightMap<S>> {
    let (h, w) = match edges.dims() {
        &[h, w] => (h, w),
        d => return Err(Error::dim(format!("edge map must be HxW, got {d:?}"))),
    };
    check_validity(h, w, validity)?;
    let on: Vec<bool> = edges
        .data()
        .iter()
        .zip(validity.values())
        .map(|(&e, &ok)| ok && e > S::zero())
        .collect();
    let n = on.iter().filter(|&&b| b).count() * c;
    if n == 0 {
        return weight_uniform(h, w, c, validity);
    }
    let v = S::one() / S::lit(n as f64);
    let mut data = vec![S::zero(); h * w * c];
    for (px, &e) in on.iter().enumerate() {
        if e {
            data[px * c..][..c].fill(v);
        }
    }
    Ok(WeightMap(Tensor::new(&[h, w, c], data)?))
}

pub fn weight_pixel_prior<S: Scalar>(image_t1: &Tensor<S>, c: usize, validity: &ValidityMask) -> Result<WeightMap<S>> {
    weight_pixel_prior_from_edges(&edge_map(image_t1)?, c, validity)
}

struct WeightedL1Op<S: Scalar> {
    weights: Tensor<S>,
}

impl<S: Scalar> Op<S> for WeightedL1Op<S> {
    fn name(&self) -> &'static str {
        "weighted_l1"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let g = grad.item();
        let ga = Tensor::from_fn(inputs[0].dims(), |i| {
            let d = inputs[0].data()[i] - inputs[1].data()[i];
            let s = if d > S::zero() {
                S::one()
            } else if d < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            g * self.weights.data()[i] * s
        });
        let gb = needs[1].then(|| ga.scale(-S::one()));
        Ok(vec![needs[0].then_some(ga), gb])
    }
}

/// `sum_{x,c} W(x,c) |warped - predicted|`, weights zeroed at invalid pixels.
pub fn consistency_l1<S: Scalar>(
    g: &mut Graph<S>,
    warped: Var,
    predicted: Var,
    weights: &WeightMap<S>,
    validity: &ValidityMask,
) -> Result<Var> {
    let (a, b) = (g.value(warped), g.value(predicted));
    let (h, w, c) = a.hwc()?;
    if a.dims() != b.dims() || weights.0.dims() != a.dims() {
        return Err(Error::dim(format!(
            "consistency shapes: warped {:?}, predicted {:?}, weights {:?}",
            a.dims(),
            b.dims(),
            weights.0.dims()
        )));
    }
    check_validity(h, w, validity)?;
    let mut wt = weights.0.clone();
    for (px, &ok) in validity.values().iter().enumerate() {
        if !ok {
            wt.data_mut()[px * c..][..c].fill(S::zero());
        }
    }
    let value: S = a
        .data()
        .iter()
        .zip(b.data())
        .zip(wt.data())
        .map(|((&x, &y), &k)| k * (x - y).abs())
        .sum();
    Ok(g.record(
        Box::new(WeightedL1Op { weights: wt }),
        &[warped, predicted],
        Tensor::scalar(value),
    ))
}

/// Weighting scheme selector; also covers the pseudo-label variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Uniform,
    LabelPrior,
    PixelPrior,
    Combined,
    Ce,
    CombinedCe,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::Uniform,
        LossVariant::LabelPrior,
        LossVariant::PixelPrior,
        LossVariant::Combined,
        LossVariant::Ce,
        LossVariant::CombinedCe,
    ];

    /// Weights on (uniform, label prior, pixel prior).
    pub fn mix(self) -> [f64; 3] {
        match self {
            LossVariant::Uniform => [1.0, 0.0, 0.0],
            LossVariant::LabelPrior => [0.0, 1.0, 0.0],
            LossVariant::PixelPrior => [0.0, 0.0, 1.0],
            LossVariant::Combined | LossVariant::CombinedCe => COMBINED_MIX,
            LossVariant::Ce => [0.0, 0.0, 0.0],
        }
    }

    pub fn uses_l1(self) -> bool {
        self != LossVariant::Ce
    }

    pub fn uses_ce(self) -> bool {
        matches!(self, LossVariant::Ce | LossVariant::CombinedCe)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossVariant::Uniform => "uniform",
            LossVariant::LabelPrior => "label_prior",
            LossVariant::PixelPrior => "pixel_prior",
            LossVariant::Combined => "combined",
            LossVariant::Ce => "ce",
            LossVariant::CombinedCe => "combined_ce",
        }
    }
}

/// Weight map for `variant` over the predicted target-frame logits.
pub fn variant_weights<S: Scalar>(
    variant: LossVariant,
    predicted: &Tensor<S>,
    edges: &Tensor<S>,
    validity: &ValidityMask,
) -> Result<WeightMap<S>> {
    let (h, w, c) = predicted.hwc()?;
    let [ku, kl, kp] = variant.mix();
    let mut parts: Vec<(WeightMap<S>, f64)> = Vec::with_capacity(3);
    if ku > 0.0 {
        parts.push((weight_uniform(h, w, c, validity)?, ku));
    }
    if kl > 0.0 {
        parts.push((weight_label_prior(predicted, validity)?, kl));
    }
    if kp > 0.0 {
        parts.push((weight_pixel_prior_from_edges(edges, c, validity)?, kp));
    }
    if parts.is_empty() {
        return Ok(WeightMap(Tensor::zeros(&[h, w, c])));
    }
    let refs: Vec<(&WeightMap<S>, f64)> = parts.iter().map(|(m, k)| (m, *k)).collect();
    WeightMap::mix(&refs)
}

/// The 0.2 / 0.4 / 0.4 mix of the three weighted L1 losses.
pub fn combined_consistency<S: Scalar>(
    g: &mut Graph<S>,
    warped: Var,
    predicted: Var,
    image_t1: &Tensor<S>,
    validity: &ValidityMask,
) -> Result<Var> {
    let edges = edge_map(image_t1)?;
    let wt = variant_weights(LossVariant::Combined, g.value(predicted), &edges, validity)?;
    consistency_l1(g, warped, predicted, &wt, validity)
}

/// Consistency term for one direction of a frame pair.
///
/// `edges` is the edge map of the target-frame image.
pub fn consistency_term<S: Scalar>(
    g: &mut Graph<S>,
    variant: LossVariant,
    warped: Var,
    predicted: Var,
    edges: &Tensor<S>,
    validity: &ValidityMask,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    if variant.uses_l1() {
        let wt = variant_weights(variant, g.value(predicted), edges, validity)?;
        terms.push((consistency_l1(g, warped, predicted, &wt, validity)?, S::one()));
    }
    if variant.uses_ce() {
        let pseudo = argmax_channels(g.value(predicted))?;
        let (h, w, _) = g.value(predicted).hwc()?;
        let pseudo = SegMask::new(h, w, pseudo)?;
        terms.push((pseudo_label_ce(g, warped, &pseudo, validity)?, S::one()));
    }
    g.weighted_sum(&terms)
}

struct CrossEntropyOp<S: Scalar> {
    probs: Vec<S>,
    labels: Vec<u32>,
    mask: Vec<bool>,
    count: usize,
}

impl<S: Scalar> Op<S> for CrossEntropyOp<S> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (_, _, c) = inputs[0].hwc()?;
        let mut out = vec![S::zero(); inputs[0].len()];
        if self.count > 0 {
            let k = grad.item() / S::lit(self.count as f64);
            for (px, (&ok, &label)) in self.mask.iter().zip(&self.labels).enumerate() {
                if !ok {
                    continue;
                }
                let o = &mut out[px * c..][..c];
                for (o, &p) in o.iter_mut().zip(&self.probs[px * c..][..c]) {
                    *o = k * p;
                }
                o[label as usize] -= k;
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].dims(), out)?)])
    }
}

/// Mean over masked pixels of `-log softmax(logits)[label]`; zero when the
/// mask is empty.
fn masked_cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &SegMask, mask: &[bool]) -> Result<Var> {
    let l = g.value(logits);
    let (h, w, c) = l.hwc()?;
    if (labels.height, labels.width) != (h, w) || mask.len() != h * w {
        return Err(Error::dim(format!(
            "cross entropy: logits {h}x{w}, labels {}x{}",
            labels.height, labels.width
        )));
    }
    labels.check_classes(c)?;
    let mut probs = l.data().to_vec();
    let mut total = 0.0f64;
    let mut count = 0;
    for (px, chunk) in probs.chunks_exact_mut(c).enumerate() {
        if !mask[px] {
            continue;
        }
        let m = chunk.iter().copied().fold(S::neg_infinity(), S::max);
        let z: S = chunk.iter().map(|&v| (v - m).exp()).sum();
        let target = chunk[labels.ids[px] as usize];
        total += (m + z.ln() - target).as_f64();
        count += 1;
        crate::tensor::softmax_in_place(chunk);
    }
    let value = if count > 0 { total / count as f64 } else { 0.0 };
    Ok(g.record(
        Box::new(CrossEntropyOp {
            probs,
            labels: labels.ids.clone(),
            mask: mask.to_vec(),
            count,
        }),
        &[logits],
        Tensor::scalar(S::lit(value)),
    ))
}

/// Cross entropy of warped logits against argmax pseudo labels.
pub fn pseudo_label_ce<S: Scalar>(
    g: &mut Graph<S>,
    warped: Var,
    pseudo: &SegMask,
    validity: &ValidityMask,
) -> Result<Var> {
    masked_cross_entropy(g, warped, pseudo, validity.values())
}

/// Cross entropy against ground truth on pixels flagged in `label_validity`.
pub fn supervised_ce<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    labels: &SegMask,
    label_validity: &[bool],
) -> Result<Var> {
    masked_cross_entropy(g, logits, labels, label_validity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[h, w, c], v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_weights() {
        let all = ValidityMask::all(2, 2, true);
        let wm = weight_uniform::<f64>(2, 2, 2, &all).unwrap();
        assert!(wm.tensor().data().iter().all(|&v| v == 0.125));
        let one_off = ValidityMask::new(2, 2, vec![true, false, true, true]).unwrap();
        let wm = weight_uniform::<f64>(2, 2, 2, &one_off).unwrap();
        let d = wm.tensor().data();
        assert_eq!(&d[2..4], &[0.0, 0.0]);
        for i in [0, 1, 4, 5, 6, 7] {
            assert!((d[i] - 1.0 / 6.0).abs() < 1e-15);
        }
        let none = ValidityMask::all(2, 2, false);
        assert_eq!(weight_uniform::<f64>(2, 2, 2, &none).unwrap().total(), 0.0);
    }

    #[test]
    fn label_prior_weights() {
        let l = t3(1, 1, 3, &[0.1, 2.0, -1.0]);
        let wm = weight_label_prior(&l, &ValidityMask::all(1, 1, true)).unwrap();
        assert_eq!(wm.tensor().data(), &[0.0, 1.0, 0.0]);

        let l = t3(1, 2, 3, &[5.0, 1.0, 0.0, 0.0, 1.0, 3.0]);
        let wm = weight_label_prior(&l, &ValidityMask::all(1, 2, true)).unwrap();
        assert_eq!(wm.tensor().data(), &[0.5, 0.0, 0.0, 0.0, 0.0, 0.5]);

        let l = t3(1, 1, 2, &[1.0, 1.0]);
        let wm = weight_label_prior(&l, &ValidityMask::all(1, 1, true)).unwrap();
        assert_eq!(wm.tensor().data(), &[1.0, 0.0]);
    }

    #[test]
    fn edge_map_constant_and_step() {
        let flat = Tensor::<f64>::full(&[6, 6, 3], 0.4);
        assert!(edge_map(&flat).unwrap().data().iter().all(|&v| v == 0.0));

        // columns 0..4 dark, 4..8 bright; Sobel fires at columns 3 and 4,
        // dilation widens that to 2..=5
        let (h, w) = (6, 8);
        let step = Tensor::<f64>::from_fn(&[h, w, 3], |i| if (i / 3) % w >= 4 { 1.0 } else { 0.0 });
        let e = edge_map(&step).unwrap();
        for r in 0..h {
            for c in 0..w {
                let want = if (2..=5).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(e.data()[r * w + c], want, "({r},{c})");
            }
        }
    }

    #[test]
    fn pixel_prior_weights() {
        let flat = Tensor::<f64>::full(&[3, 4, 3], 0.2);
        let valid = ValidityMask::new(3, 4, (0..12).map(|i| i != 5).collect()).unwrap();
        assert_eq!(
            weight_pixel_prior(&flat, 2, &valid).unwrap(),
            weight_uniform(3, 4, 2, &valid).unwrap()
        );

        let mut edges = Tensor::<f64>::zeros(&[3, 3]);
        edges.data_mut()[4] = 1.0;
        let wm = weight_pixel_prior_from_edges(&edges, 2, &ValidityMask::all(3, 3, true)).unwrap();
        assert_eq!(&wm.tensor().data()[8..10], &[0.5, 0.5]);
        assert_eq!(wm.total(), 1.0);

        edges.data_mut()[0] = 1.0;
        let valid = ValidityMask::new(3, 3, (0..9).map(|i| i != 4).collect()).unwrap();
        let wm = weight_pixel_prior_from_edges(&edges, 2, &valid).unwrap();
        assert_eq!(&wm.tensor().data()[0..2], &[0.5, 0.5]);
        assert_eq!(&wm.tensor().data()[8..10], &[0.0, 0.0]);
    }

    #[test]
    fn l1_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t3(1, 1, 1, &[3.0]));
        let b = g.param(t3(1, 1, 1, &[1.0]));
        let valid = ValidityMask::all(1, 1, true);
        let wm = weight_uniform(1, 1, 1, &valid).unwrap();
        let l = consistency_l1(&mut g, a, b, &wm, &valid).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let same = consistency_l1(&mut g, a, a, &wm, &valid).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let c = g.param(t3(1, 1, 2, &[0.0, 0.0]));
        let wm2 = weight_uniform(1, 1, 1, &valid).unwrap();
        assert!(matches!(
            consistency_l1(&mut g, a, c, &wm2, &valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mix_weights_sum_to_one() {
        assert_eq!(COMBINED_MIX.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn ce_cases() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t3(1, 2, 2, &[0.0, 0.0, 0.0, 0.0]));
        let labels = SegMask::new(1, 2, vec![0, 1]).unwrap();
        let valid = ValidityMask::all(1, 2, true);
        let v = pseudo_label_ce(&mut g, l, &labels, &valid).unwrap();
        assert!((g.value(v).item() - 2f64.ln()).abs() < 1e-12);

        let l = g.param(t3(1, 2, 2, &[10.0, 0.0, 0.0, 10.0]));
        let v = pseudo_label_ce(&mut g, l, &labels, &valid).unwrap();
        assert!(g.value(v).item() < 1e-4);
        let v = supervised_ce(&mut g, l, &labels, &[true, true]).unwrap();
        assert!(g.value(v).item() < 1e-4);

        let none = ValidityMask::all(1, 2, false);
        let v = pseudo_label_ce(&mut g, l, &labels, &none).unwrap();
        assert_eq!(g.value(v).item(), 0.0);

        let u = g.param(Tensor::zeros(&[2, 2, 5]));
        let labels = SegMask::new(2, 2, vec![4, 0, 2, 3]).unwrap();
        let v = supervised_ce(&mut g, u, &labels, &[true; 4]).unwrap();
        assert!((g.value(v).item() - 5f64.ln()).abs() < 1e-12);

        let bad = SegMask::new(2, 2, vec![5, 0, 0, 0]).unwrap();
        assert!(supervised_ce(&mut g, u, &bad, &[true; 4]).is_err());
    }

    #[test]
    fn variant_table() {
        assert_eq!(LossVariant::ALL.len(), 6);
        assert!(!LossVariant::Ce.uses_l1());
        assert!(LossVariant::CombinedCe.uses_ce() && LossVariant::CombinedCe.uses_l1());
        for v in LossVariant::ALL {
            let s: f64 = v.mix().iter().sum();
            assert!(s == 1.0 || v == LossVariant::Ce);
        }
    }
}
