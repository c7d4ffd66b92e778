//! Brute-force oracles shared by the oracle tests and the acceptance run.
//!
//! Each check returns a one-line summary on success and a description of
//! the first disagreement otherwise.

#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stconsist::geometry::{warp_logits, DepthMap, Intrinsics, Se3Motion, ValidityMask, WarpMap, WarpMode, SPLAT_EPS};
use stconsist::graph::Graph;
use stconsist::losses::{consistency_term, supervised_ce, variant_weights, LossVariant, SegMask, COMBINED_MIX};
use stconsist::metrics::miou;
use stconsist::tensor::Tensor;

pub type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ramp(h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, c], |i| ((i * 37 % 101) as f64) / 10.0 - 5.0)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn warp_identity() -> Check {
    let src = ramp(6, 5, 3);
    let depth = DepthMap::new(6, 5, (0..30).map(|i| 1.0 + i as f32 * 0.1).collect()).unwrap();
    let k = Intrinsics::new(4.0, 4.0, 2.0, 2.5).unwrap();
    for mode in [WarpMode::ForwardSplat, WarpMode::InverseSample] {
        let (out, valid) = warp_logits(&src, &depth, &Se3Motion::identity(), &k, mode).map_err(|e| e.to_string())?;
        if out.data() != src.data() {
            return Err(format!("{mode:?}: identity warp changed values"));
        }
        if valid.count() != 30 {
            return Err(format!("{mode:?}: {} of 30 pixels valid", valid.count()));
        }
    }
    Ok("identity warp exact in both modes".into())
}

/// Depth 1, fx = fy = 2 and a half-unit sideways move shift by one pixel.
pub fn warp_one_pixel_shift() -> Check {
    let src = ramp(4, 4, 2);
    let depth = DepthMap::constant(4, 4, 1.0).unwrap();
    let k = Intrinsics::new(2.0, 2.0, 2.0, 2.0).unwrap();
    let mut worst = 0.0f64;
    for (mode, tx) in [(WarpMode::ForwardSplat, 0.5), (WarpMode::InverseSample, -0.5)] {
        let m = Se3Motion::from_translation(Vector3::new(tx, 0.0, 0.0));
        let (out, valid) = warp_logits(&src, &depth, &m, &k, mode).map_err(|e| e.to_string())?;
        for row in 0..4 {
            for col in 0..4 {
                if valid.get(row, col) != (col > 0) {
                    return Err(format!("{mode:?}: validity wrong at ({row},{col})"));
                }
                for ch in 0..2 {
                    let got = out.data()[(row * 4 + col) * 2 + ch];
                    let want = if col == 0 { 0.0 } else { src.data()[(row * 4 + col - 1) * 2 + ch] };
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    if worst > 1e-5 {
        return Err(format!("shift deviates by {worst:e}"));
    }
    Ok(format!("one-pixel shift max deviation {worst:.1e}"))
}

pub fn warp_behind_camera() -> Check {
    let src = ramp(4, 4, 2);
    let depth = DepthMap::constant(4, 4, 1.0).unwrap();
    let k = Intrinsics::new(2.0, 2.0, 2.0, 2.0).unwrap();
    let m = Se3Motion::from_translation(Vector3::new(0.0, 0.0, -10.0));
    for mode in [WarpMode::ForwardSplat, WarpMode::InverseSample] {
        let (_, valid) = warp_logits(&src, &depth, &m, &k, mode).map_err(|e| e.to_string())?;
        if valid.count() != 0 {
            return Err(format!("{mode:?}: {} pixels valid behind the camera", valid.count()));
        }
    }
    Ok("behind-camera validity empty".into())
}

struct RandomScene {
    h: usize,
    w: usize,
    depth: Vec<f64>,
    rot: nalgebra::Rotation3<f64>,
    t: Vector3<f64>,
    k: [f64; 4],
}

fn random_scene(r: &mut ChaCha8Rng) -> RandomScene {
    let (h, w) = (r.random_range(3..8), r.random_range(3..8));
    let depth = (0..h * w).map(|_| r.random_range(1.0f32..4.0) as f64).collect();
    let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 1.0).normalize();
    let angle = r.random_range(-0.15..0.15);
    let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    let t = Vector3::new(r.random_range(-0.4..0.4), r.random_range(-0.4..0.4), r.random_range(-0.4..0.4));
    let f = r.random_range(2.0..6.0);
    let k = [f, f * r.random_range(0.8..1.2), (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
    RandomScene { h, w, depth, rot, t, k }
}

impl RandomScene {
    /// Projection of pixel `(col, row)` into the other camera.
    fn reproject(&self, row: usize, col: usize) -> (f64, f64, f64) {
        let [fx, fy, cx, cy] = self.k;
        let d = self.depth[row * self.w + col];
        let x = Vector3::new((col as f64 - cx) / fx * d, (row as f64 - cy) / fy * d, d);
        let p = self.rot * x + self.t;
        (fx * p.x / p.z + cx, fy * p.y / p.z + cy, p.z)
    }

    fn build(&self, mode: WarpMode) -> WarpMap {
        let depth = DepthMap::new(self.h, self.w, self.depth.iter().map(|&d| d as f32).collect()).unwrap();
        let motion = Se3Motion::new(*self.rot.matrix(), self.t).unwrap();
        let [fx, fy, cx, cy] = self.k;
        WarpMap::build(&depth, &motion, &Intrinsics::new(fx, fy, cx, cy).unwrap(), mode).unwrap()
    }

    fn inside(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.w - 1) as f64 && v <= (self.h - 1) as f64
    }

    /// Tent-kernel weight of a continuous location on an integer pixel.
    fn tent(u: f64, v: f64, col: usize, row: usize) -> f64 {
        (1.0 - (u - col as f64).abs()).max(0.0) * (1.0 - (v - row as f64).abs()).max(0.0)
    }
}

/// Independent scalar reimplementation of both warp modes on random scenes.
pub fn warp_random_oracle(scenes: usize) -> Check {
    let mut compared = 0;
    for s in 0..scenes as u64 {
        let mut r = rng(0x3a3a ^ s);
        let sc = random_scene(&mut r);
        let (h, w, c) = (sc.h, sc.w, 3);
        let src: Vec<f64> = (0..h * w * c).map(|_| r.random_range(-2.0..2.0)).collect();
        let src_t = Tensor::new(&[h, w, c], src.clone()).unwrap();

        // gather
        let map = sc.build(WarpMode::InverseSample);
        let out = map.apply(&src_t).unwrap();
        for row in 0..h {
            for col in 0..w {
                let (u, v, z) = sc.reproject(row, col);
                let valid = z > 0.0 && sc.inside(u, v);
                if valid != map.validity().get(row, col) {
                    return Err(format!("gather scene {s}: validity differs at ({row},{col})"));
                }
                for ch in 0..c {
                    let mut want = 0.0;
                    if valid {
                        for sr in 0..h {
                            for scol in 0..w {
                                want += RandomScene::tent(u, v, scol, sr) * src[(sr * w + scol) * c + ch];
                            }
                        }
                    }
                    let got = out.data()[(row * w + col) * c + ch];
                    if !close(got, want, 1e-9) {
                        return Err(format!("gather scene {s}: ({row},{col},{ch}) {got} vs {want}"));
                    }
                    compared += 1;
                }
            }
        }

        // scatter with normalization
        let map = sc.build(WarpMode::ForwardSplat);
        let out = map.apply(&src_t).unwrap();
        let mut acc = vec![0.0; h * w * c];
        let mut mass = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let (u, v, z) = sc.reproject(row, col);
                if !(z > 0.0 && sc.inside(u, v)) {
                    continue;
                }
                for tr in 0..h {
                    for tc in 0..w {
                        let k = RandomScene::tent(u, v, tc, tr);
                        mass[tr * w + tc] += k;
                        for ch in 0..c {
                            acc[(tr * w + tc) * c + ch] += k * src[(row * w + col) * c + ch];
                        }
                    }
                }
            }
        }
        for px in 0..h * w {
            if (mass[px] - SPLAT_EPS).abs() < SPLAT_EPS {
                continue;
            }
            let valid = mass[px] > SPLAT_EPS;
            if valid != map.validity().values()[px] {
                return Err(format!("splat scene {s}: validity differs at pixel {px}"));
            }
            for ch in 0..c {
                let want = if valid { acc[px * c + ch] / mass[px] } else { 0.0 };
                let got = out.data()[px * c + ch];
                if !close(got, want, 1e-9) {
                    return Err(format!("splat scene {s}: pixel {px} ch {ch} {got} vs {want}"));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} warped entries match the scalar oracle over {scenes} scenes"))
}

/// One random loss instance.
struct LossCase {
    h: usize,
    w: usize,
    c: usize,
    warped: Vec<f64>,
    predicted: Vec<f64>,
    edges: Vec<f64>,
    valid: Vec<bool>,
    labels: Vec<u32>,
}

fn loss_case(i: u64) -> LossCase {
    let mut r = rng(0x1055 ^ i);
    let (h, w, c) = (r.random_range(1..7), r.random_range(1..7), r.random_range(2..6));
    let n = h * w;
    // some instances use integer logits so argmax ties occur
    let ties = i % 7 == 0;
    let draw = |r: &mut ChaCha8Rng| {
        if ties {
            r.random_range(-2..3) as f64
        } else {
            r.random_range(-4.0..4.0)
        }
    };
    let warped = (0..n * c).map(|_| draw(&mut r)).collect();
    let predicted = (0..n * c).map(|_| draw(&mut r)).collect();
    let p_edge = if i % 5 == 0 { 0.0 } else { 0.3 };
    let edges = (0..n).map(|_| if r.random_bool(p_edge) { 1.0 } else { 0.0 }).collect();
    let p_valid = if i % 11 == 0 { 0.0 } else { 0.8 };
    let valid = (0..n).map(|_| r.random_bool(p_valid)).collect();
    let labels = (0..n).map(|_| r.random_range(0..c as u32)).collect();
    LossCase {
        h,
        w,
        c,
        warped,
        predicted,
        edges,
        valid,
        labels,
    }
}

fn argmax(px: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..px.len() {
        if px[k] > px[best] {
            best = k;
        }
    }
    best
}

fn log_softmax_at(px: &[f64], k: usize) -> f64 {
    let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = px.iter().map(|v| (v - m).exp()).sum();
    px[k] - m - z.ln()
}

impl LossCase {
    /// Scalar-loop weights for one scheme; `None` when nothing is valid.
    fn weights(&self, scheme: usize) -> Vec<f64> {
        let (n, c) = (self.h * self.w, self.c);
        let mut wt = vec![0.0; n * c];
        let mut total = 0.0;
        for px in 0..n {
            if !self.valid[px] {
                continue;
            }
            for k in 0..c {
                let v = match scheme {
                    0 => 1.0,
                    1 => (argmax(&self.predicted[px * c..(px + 1) * c]) == k) as u8 as f64,
                    _ => self.edges[px],
                };
                wt[px * c + k] = v;
                total += v;
            }
        }
        if scheme == 2 && total == 0.0 {
            return self.weights(0);
        }
        if total > 0.0 {
            for v in &mut wt {
                *v /= total;
            }
        }
        wt
    }

    fn l1(&self, wt: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..wt.len() {
            s += wt[i] * (self.warped[i] - self.predicted[i]).abs();
        }
        s
    }

    fn pseudo_ce(&self) -> f64 {
        let c = self.c;
        let (mut s, mut n) = (0.0, 0);
        for px in 0..self.h * self.w {
            if self.valid[px] {
                let target = argmax(&self.predicted[px * c..(px + 1) * c]);
                s -= log_softmax_at(&self.warped[px * c..(px + 1) * c], target);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    fn supervised(&self) -> f64 {
        let c = self.c;
        let (mut s, mut n) = (0.0, 0);
        for px in 0..self.h * self.w {
            if self.valid[px] {
                s -= log_softmax_at(&self.predicted[px * c..(px + 1) * c], self.labels[px] as usize);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    fn expected(&self, v: LossVariant) -> f64 {
        let [a, b, p] = v.mix();
        let parts = [self.l1(&self.weights(0)), self.l1(&self.weights(1)), self.l1(&self.weights(2))];
        let l1 = a * parts[0] + b * parts[1] + p * parts[2];
        let ce = if v.uses_ce() { self.pseudo_ce() } else { 0.0 };
        l1 + ce
    }
}

/// Library losses, weights and recomposition against scalar loops.
pub fn loss_oracles(instances: u64) -> Check {
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut worst_mix = 0.0f64;
    for i in 0..instances {
        let case = loss_case(i);
        let (h, w, c) = (case.h, case.w, case.c);
        let validity = ValidityMask::new(h, w, case.valid.clone()).unwrap();
        let warped = Tensor::new(&[h, w, c], case.warped.clone()).unwrap();
        let predicted = Tensor::new(&[h, w, c], case.predicted.clone()).unwrap();
        let edges = Tensor::new(&[h, w], case.edges.clone()).unwrap();
        let mut values = std::collections::BTreeMap::new();
        for v in LossVariant::ALL {
            let mut g = Graph::<f64>::new();
            let a = g.param(warped.clone());
            let b = g.param(predicted.clone());
            let root = consistency_term(&mut g, v, a, b, &edges, &validity).map_err(|e| e.to_string())?;
            let got = g.value(root).item();
            let want = case.expected(v);
            let err = (got - want).abs();
            if err > 1e-6 {
                return Err(format!("instance {i} {}: {got} vs {want}", v.label()));
            }
            worst = worst.max(err);
            values.insert(v.label(), got);

            if v.uses_l1() && validity.count() > 0 {
                let total = variant_weights(v, &predicted, &edges, &validity).unwrap().total();
                worst_sum = worst_sum.max((total - 1.0).abs());
                if (total - 1.0).abs() > 1e-5 {
                    return Err(format!("instance {i} {}: weights sum to {total}", v.label()));
                }
            }
        }
        let [a, b, p] = COMBINED_MIX;
        let recomposed = a * values["uniform"] + b * values["label_prior"] + p * values["pixel_prior"];
        let mix_err = (values["combined"] - recomposed).abs();
        worst_mix = worst_mix.max(mix_err);
        if mix_err > 1e-6 {
            return Err(format!("instance {i}: combined {} vs parts {recomposed}", values["combined"]));
        }

        let labels = SegMask::new(h, w, case.labels.clone()).unwrap();
        let mut g = Graph::<f64>::new();
        let b = g.param(predicted.clone());
        let root = supervised_ce(&mut g, b, &labels, &case.valid).map_err(|e| e.to_string())?;
        let got = g.value(root).item();
        let want = case.supervised();
        if (got - want).abs() > 1e-6 {
            return Err(format!("instance {i} supervised: {got} vs {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(format!(
        "{instances} instances: loss error {worst:.1e}, weight-sum error {worst_sum:.1e}, recomposition error {worst_mix:.1e}"
    ))
}

/// Per-class IOU from pixel sets, then the mean over classes that occur.
fn brute_miou(preds: &[Vec<u32>], gts: &[Vec<u32>], classes: u32) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (p, g) in preds.iter().zip(gts) {
                for (&a, &b) in p.iter().zip(g) {
                    inter += (a == k && b == k) as u64;
                    union += (a == k || b == k) as u64;
                }
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let m = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per, m)
}

pub fn miou_oracle(pairs: u64) -> Check {
    for i in 0..pairs {
        let mut r = rng(0x10 ^ i);
        let classes = r.random_range(2..9u32);
        let frames = r.random_range(1..4);
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        // skew toward a few classes so some never occur
        let draw = |r: &mut ChaCha8Rng| {
            let k = r.random_range(0..classes);
            if r.random_bool(0.5) { k % 3 } else { k }
        };
        let preds: Vec<Vec<u32>> = (0..frames).map(|_| (0..h * w).map(|_| draw(&mut r)).collect()).collect();
        let gts: Vec<Vec<u32>> = (0..frames).map(|_| (0..h * w).map(|_| draw(&mut r)).collect()).collect();
        let masks = |v: &Vec<Vec<u32>>| v.iter().map(|m| SegMask::new(h, w, m.clone()).unwrap()).collect::<Vec<_>>();
        let got = miou(&masks(&preds), &masks(&gts), classes as usize).map_err(|e| e.to_string())?;
        let (per, m) = brute_miou(&preds, &gts, classes);
        if got.per_class != per || got.miou != m {
            return Err(format!("pair {i}: {:?} / {} vs {per:?} / {m}", got.per_class, got.miou));
        }
    }
    let pred = SegMask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let gt = SegMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let hand = miou(&[pred], &[gt], 2).map_err(|e| e.to_string())?;
    // 1/2 and 2/3 are exact; their f64 mean may sit one ulp from 7/12
    if hand.per_class != [Some(0.5), Some(2.0 / 3.0)] || (hand.miou - 7.0 / 12.0).abs() > f64::EPSILON {
        return Err(format!("hand case gives {:?} / {}, expected 7/12", hand.per_class, hand.miou));
    }
    Ok(format!("{pairs} random pairs exact; hand case = 7/12"))
}
