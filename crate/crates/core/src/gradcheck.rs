//! Central finite differences against reverse-mode gradients.
//!
//! Every differentiable op has a named case built from a seed; inputs are
//! drawn away from relu kinks, argmax ties and L1 kinks so the numeric
//! derivative is well defined.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, Se3Motion, ValidityMask, WarpMap, WarpMode};
use crate::graph::{Graph, Var};
use crate::losses::{consistency_term, edge_map, pseudo_label_ce, supervised_ce, LossVariant, SegMask};
use crate::segmenter::{init_params, segmenter_forward, segmenter_forward_graph, Architecture, SegmenterParams};
use crate::tensor::{self, Tensor};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

/// Floor on the relative-error denominator; entries with a vanishing
/// gradient are compared absolutely.
const FLOOR: f64 = 1e-3;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync;

/// A scalar-valued function of parameter tensors.
pub struct Case {
    pub build: Box<Build>,
    pub inputs: Vec<Tensor<f64>>,
}

/// Largest disagreement found by [`check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub relative: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const CASES: [&str; 14] = [
    "conv2d",
    "relu",
    "softmax",
    "elementwise",
    "warp_forward_splat",
    "warp_inverse_sample",
    "uniform",
    "label_prior",
    "pixel_prior",
    "combined",
    "ce",
    "combined_ce",
    "cross_entropy",
    "segmenter",
];

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    Ok(g.value(root).item())
}

pub fn check(case: &Case) -> Result<Worst> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = (case.build)(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let mut worst = Worst {
        relative: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, input) in case.inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.dims());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        for k in 0..input.len() {
            let mut shifted = case.inputs.to_vec();
            shifted[i].data_mut()[k] += STEP;
            let plus = eval(&*case.build, &shifted)?;
            shifted[i].data_mut()[k] -= 2.0 * STEP;
            let minus = eval(&*case.build, &shifted)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[k];
            let relative = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if relative > worst.relative || !relative.is_finite() {
                worst = Worst {
                    relative,
                    input: i,
                    element: k,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

pub fn run(name: &str, seed: u64) -> Result<Worst> {
    check(&case(name, seed)?)
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Result<Tensor<f64>> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Tensor<f64>> {
    Ok(rand_tensor(rng, &[h, w, 3], 0.5)?.map(|x| x + 0.5))
}

/// Contract a tensor-valued node to a scalar with fixed random coefficients.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let r = rand_tensor(&mut rng, g.value(x).dims(), 1.0)?;
    let r = g.constant(r);
    let m = g.mul(x, r)?;
    Ok(g.sum(m))
}

/// Depth and motion that keep most pixels in view.
fn scene(rng: &mut ChaCha8Rng, h: usize, w: usize, mode: WarpMode) -> Result<Arc<WarpMap>> {
    let depth = (0..h * w).map(|_| rng.random_range(1.5f32..3.0)).collect();
    let depth = DepthMap::new(h, w, depth)?;
    let axis = Vector3::new(rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0));
    let t = Vector3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.2..0.2),
    );
    let motion = Se3Motion::from_axis_angle(&axis, rng.random_range(-0.1..0.1), t);
    let k = Intrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?;
    Ok(Arc::new(WarpMap::build(&depth, &motion, &k, mode)?))
}

/// Smallest gap between the two largest entries of any pixel.
fn top_gap(logits: &Tensor<f64>) -> f64 {
    let c = logits.dims()[logits.dims().len() - 1];
    logits
        .data()
        .chunks(c)
        .map(|px| {
            let mut v = px.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[1]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Smallest `|a - b|` over all entries.
fn min_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(f64::INFINITY, |m, (x, y)| m.min((x - y).abs()))
}

/// Distance to the nearest kink of the segmenter objective.
fn margin(params: &SegmenterParams<f64>, map: &WarpMap, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let warped = map.apply(&segmenter_forward(a, params)?)?;
    let target = segmenter_forward(b, params)?;
    let mut m = min_abs_diff(&warped, &target);
    for img in [a, b] {
        let pre = tensor::conv2d(img, &params.tensors[0], &params.tensors[1])?;
        m = pre.data().iter().fold(m, |m, x| m.min(x.abs()));
        m = m.min(top_gap(&segmenter_forward(img, params)?));
    }
    Ok(m)
}

fn variant(name: &str) -> Option<LossVariant> {
    LossVariant::ALL.into_iter().find(|v| v.label() == name)
}

/// The named case for one seed.
pub fn case(name: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ name.len() as u64);
    let rng = &mut rng;
    let s = seed as usize;
    let case = match name {
        "conv2d" => {
            let (cin, cout, k) = (1 + s % 3, 1 + (s % 2) * 2, if s % 2 == 0 { 3 } else { 1 });
            Case {
                inputs: vec![
                    rand_tensor(rng, &[4, 5, cin], 1.0)?,
                    rand_tensor(rng, &[k, k, cin, cout], 0.5)?,
                    rand_tensor(rng, &[cout], 0.5)?,
                ],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2])?;
                    project(g, y, seed)
                }),
            }
        }
        "relu" => {
            let x = rand_tensor(rng, &[3, 4, 2], 1.0)?.map(|v| v + 0.05 * v.signum());
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.relu(v[0]);
                    project(g, y, seed)
                }),
            }
        }
        "softmax" => Case {
            inputs: vec![rand_tensor(rng, &[3, 3, 2 + s % 4], 3.0)?],
            build: Box::new(move |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, seed)
            }),
        },
        "elementwise" => {
            let k = rng.random_range(-2.0..2.0);
            Case {
                inputs: vec![rand_tensor(rng, &[2, 3, 2], 1.0)?, rand_tensor(rng, &[2, 3, 2], 1.0)?],
                build: Box::new(move |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let p = g.mul(s, v[0])?;
                    let q = g.scale(p, k);
                    let r = project(g, q, seed)?;
                    let t = g.sum(v[1]);
                    g.weighted_sum(&[(r, 0.7), (t, -1.3)])
                }),
            }
        }
        "warp_forward_splat" | "warp_inverse_sample" => {
            let mode = if name == "warp_forward_splat" {
                WarpMode::ForwardSplat
            } else {
                WarpMode::InverseSample
            };
            let map = scene(rng, 5, 6, mode)?;
            Case {
                inputs: vec![rand_tensor(rng, &[5, 6, 3], 2.0)?],
                build: Box::new(move |g, v| {
                    let y = map.record(g, v[0])?;
                    project(g, y, seed)
                }),
            }
        }
        "cross_entropy" => {
            let (h, w, c) = (3, 4, 5);
            let ids = (0..h * w).map(|_| rng.random_range(0..c as u32)).collect();
            let labels = SegMask::new(h, w, ids)?;
            let mask: Vec<bool> = (0..h * w).map(|i| (i + s) % 3 != 0).collect();
            let validity = ValidityMask::new(h, w, mask.clone())?;
            Case {
                inputs: vec![rand_tensor(rng, &[h, w, c], 3.0)?],
                build: Box::new(move |g, v| {
                    let a = supervised_ce(g, v[0], &labels, &mask)?;
                    let b = pseudo_label_ce(g, v[0], &labels, &validity)?;
                    g.weighted_sum(&[(a, 1.0), (b, 0.5)])
                }),
            }
        }
        "segmenter" => segmenter_case(rng, seed)?,
        other => {
            let variant = variant(other).ok_or_else(|| Error::Config(format!("unknown gradient case {other}")))?;
            let (h, w, c) = (4, 5, 4);
            let map = scene(rng, h, w, WarpMode::ForwardSplat)?;
            let edges = edge_map(&image(rng, h, w)?)?;
            let (source, target) = loop {
                let source = rand_tensor(rng, &[h, w, c], 3.0)?;
                let target = rand_tensor(rng, &[h, w, c], 3.0)?;
                if min_abs_diff(&map.apply(&source)?, &target) > 1e-2 && top_gap(&target) > 1e-2 {
                    break (source, target);
                }
            };
            Case {
                inputs: vec![source, target],
                build: Box::new(move |g, v| {
                    let warped = map.record(g, v[0])?;
                    consistency_term(g, variant, warped, v[1], &edges, map.validity())
                }),
            }
        }
    };
    Ok(case)
}

/// Full objective: two segmenter passes, warp, combined consistency and
/// supervised cross entropy.
fn segmenter_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<Case> {
    let (h, w, c) = (5, 5, 3);
    let arch = Architecture::with_widths(&[3], c);
    let map = scene(rng, h, w, WarpMode::InverseSample)?;
    let mut attempt = 0;
    let (params, img_a, img_b) = loop {
        let p = init_params::<f64>(&arch, seed * 1000 + attempt)?;
        let a = image(rng, h, w)?;
        let b = image(rng, h, w)?;
        if margin(&p, &map, &a, &b)? > 1e-2 {
            break (p, a, b);
        }
        attempt += 1;
    };
    let edges = edge_map(&img_b)?;
    let ids = (0..h * w).map(|_| rng.random_range(0..c as u32)).collect();
    let labels = SegMask::new(h, w, ids)?;
    let n = params.tensors.len();
    Ok(Case {
        inputs: params.tensors.clone(),
        build: Box::new(move |g, v| {
            let a = g.constant(img_a.clone());
            let b = g.constant(img_b.clone());
            let la = segmenter_forward_graph(g, &arch, a, &v[..n])?;
            let lb = segmenter_forward_graph(g, &arch, b, &v[..n])?;
            let warped = map.record(g, la)?;
            let cons = consistency_term(g, LossVariant::Combined, warped, lb, &edges, map.validity())?;
            let sup = supervised_ce(g, la, &labels, &[true; 25])?;
            g.weighted_sum(&[(sup, 1.0), (cons, 1.0)])
        }),
    })
}
