//! Pinhole cameras, rigid motions, and the differentiable logits warp.
//!
//! Camera coordinates are x right, y down, z forward. Pixel `(u, v)` names
//! the center of column `u`, row `v`. A motion maps points as
//! `p_dst = R * p_src + t`.

use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Scalar, Tensor};

const ORTHO_TOL: f64 = 1e-6;

/// Splat weight below which a target pixel is treated as empty.
pub const SPLAT_EPS: f64 = 1e-4;

/// Slack for projections landing on the image border.
const BORDER_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::contract(format!(
                "intrinsics need positive focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Check the principal point lies inside a `width x height` image.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if !(0.0..width as f64).contains(&self.cx) || !(0.0..height as f64).contains(&self.cy) {
            return Err(Error::contract(format!(
                "principal point ({}, {}) outside {width}x{height}",
                self.cx, self.cy
            )));
        }
        Ok(())
    }
}

pub fn unproject(pixel: (f64, f64), depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::contract(format!("unproject at depth {depth}")));
    }
    Ok(Vector3::new(
        (pixel.0 - k.cx) * depth / k.fx,
        (pixel.1 - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Pinhole projection. A returned `z <= 0` marks the point as not visible.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> ((f64, f64), f64) {
    let z = point.z;
    (
        (k.fx * point.x / z + k.cx, k.fy * point.y / z + k.cy),
        z,
    )
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Se3Repr", into = "Se3Repr")]
pub struct Se3Motion {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct Se3Repr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<Se3Motion> for Se3Repr {
    fn from(m: Se3Motion) -> Self {
        let r = &m.rotation;
        Se3Repr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [m.translation.x, m.translation.y, m.translation.z],
        }
    }
}

impl TryFrom<Se3Repr> for Se3Motion {
    type Error = Error;

    fn try_from(r: Se3Repr) -> Result<Self> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Se3Motion::new(rot, Vector3::from(r.translation))
    }
}

impl Se3Motion {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ORTHO_TOL) || !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::contract(format!(
                "rotation not orthonormal (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::contract("non-finite translation"));
        }
        Ok(Se3Motion {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Se3Motion {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Se3Motion {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about `axis` by `angle` radians, then translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rotation = if angle == 0.0 || axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
        };
        Se3Motion {
            rotation,
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Se3Motion) -> Se3Motion {
        Se3Motion {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3Motion {
        let rt = self.rotation.transpose();
        Se3Motion {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest entry-wise deviation from another motion.
    pub fn distance(&self, other: &Se3Motion) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// Motion from camera `t` coordinates to camera `t+1` coordinates given
/// camera-to-world poses.
pub fn relative_motion(pose_t: &Se3Motion, pose_t1: &Se3Motion) -> Se3Motion {
    pose_t1.inverse().compose(pose_t)
}

/// Per-pixel positive depth in meters, row-major `h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::contract(format!("depth value {bad} not positive and finite")));
        }
        Ok(DepthMap {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f32) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.height, self.width], self.values.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.dims() {
            &[h, w] => Self::new(h, w, t.data().to_vec()),
            d => Err(Error::dim(format!("depth tensor must be HxW, got {d:?}"))),
        }
    }
}

/// Binary per-pixel mask marking where a warped value is defined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim("validity mask size mismatch"));
        }
        Ok(ValidityMask {
            height,
            width,
            values,
        })
    }

    pub fn all(height: usize, width: usize, valid: bool) -> Self {
        ValidityMask {
            height,
            width,
            values: vec![valid; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim("validity mask size mismatch"));
        }
        Ok(ValidityMask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    /// Scatter source pixels into the target using source-frame depth.
    #[default]
    ForwardSplat,
    /// Gather from the source using target-frame depth.
    InverseSample,
}

/// Fixed-geometry warp as a sparse linear operator on per-pixel vectors.
///
/// Every entry reads `out[target] += weight * src[source]`.
#[derive(Debug, Clone)]
pub struct WarpMap {
    height: usize,
    width: usize,
    entries: Vec<(u32, u32, f64)>,
    validity: ValidityMask,
}

/// Bilinear footprint of a continuous pixel location; `None` when it does
/// not lie inside the grid.
fn bilinear(u: f64, v: f64, width: usize, height: usize) -> Option<[(usize, f64); 4]> {
    let max_u = (width - 1) as f64;
    let max_v = (height - 1) as f64;
    if !(u >= -BORDER_SLACK && u <= max_u + BORDER_SLACK && v >= -BORDER_SLACK && v <= max_v + BORDER_SLACK)
    {
        return None;
    }
    let u = u.clamp(0.0, max_u);
    let v = v.clamp(0.0, max_v);
    let x0 = (u.floor() as usize).min(width - 1);
    let y0 = (v.floor() as usize).min(height - 1);
    let ax = u - x0 as f64;
    let ay = v - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some([
        (y0 * width + x0, (1.0 - ax) * (1.0 - ay)),
        (y0 * width + x1, ax * (1.0 - ay)),
        (y1 * width + x0, (1.0 - ax) * ay),
        (y1 * width + x1, ax * ay),
    ])
}

/// Raw forward-splat accumulation before normalization.
#[derive(Debug, Clone)]
pub struct SplatAccumulation {
    /// Total bilinear weight received by each target pixel.
    pub weight: Vec<f64>,
    /// Source pixels that projected in front of the camera and inside the
    /// target grid.
    pub projected: usize,
    contributions: Vec<(u32, u32, f64)>,
}

/// Scatter every source pixel into the target grid.
pub fn splat_accumulate(depth: &DepthMap, motion: &Se3Motion, k: &Intrinsics) -> Result<SplatAccumulation> {
    let (h, w) = (depth.height, depth.width);
    let mut weight = vec![0.0; h * w];
    let mut contributions = Vec::with_capacity(4 * h * w);
    let mut projected = 0;
    for row in 0..h {
        for col in 0..w {
            let d = depth.at(row, col) as f64;
            let p = motion.apply(&unproject((col as f64, row as f64), d, k)?);
            let ((u, v), z) = project(&p, k);
            if !(z > 0.0) {
                continue;
            }
            let Some(taps) = bilinear(u, v, w, h) else {
                continue;
            };
            projected += 1;
            let src = (row * w + col) as u32;
            for (tgt, wt) in taps {
                if wt > 0.0 {
                    weight[tgt] += wt;
                    contributions.push((tgt as u32, src, wt));
                }
            }
        }
    }
    Ok(SplatAccumulation {
        weight,
        projected,
        contributions,
    })
}

impl WarpMap {
    /// Build the operator for `mode`.
    ///
    /// For [`WarpMode::ForwardSplat`], `depth` is the source-frame depth and
    /// `motion` maps source to target camera. For
    /// [`WarpMode::InverseSample`], `depth` is the target-frame depth and
    /// `motion` maps target to source camera.
    pub fn build(depth: &DepthMap, motion: &Se3Motion, k: &Intrinsics, mode: WarpMode) -> Result<Self> {
        let (h, w) = (depth.height, depth.width);
        match mode {
            WarpMode::ForwardSplat => {
                let acc = splat_accumulate(depth, motion, k)?;
                let valid: Vec<bool> = acc.weight.iter().map(|&s| s > SPLAT_EPS).collect();
                let mut entries: Vec<(u32, u32, f64)> = acc
                    .contributions
                    .into_iter()
                    .filter(|&(t, _, _)| valid[t as usize])
                    .map(|(t, s, wt)| (t, s, wt / acc.weight[t as usize]))
                    .collect();
                entries.sort_by_key(|&(t, s, _)| (t, s));
                Ok(WarpMap {
                    height: h,
                    width: w,
                    entries,
                    validity: ValidityMask::new(h, w, valid)?,
                })
            }
            WarpMode::InverseSample => {
                let mut entries = Vec::with_capacity(4 * h * w);
                let mut valid = vec![false; h * w];
                for row in 0..h {
                    for col in 0..w {
                        let d = depth.at(row, col) as f64;
                        let p = motion.apply(&unproject((col as f64, row as f64), d, k)?);
                        let ((u, v), z) = project(&p, k);
                        if !(z > 0.0) {
                            continue;
                        }
                        let Some(taps) = bilinear(u, v, w, h) else {
                            continue;
                        };
                        let tgt = row * w + col;
                        valid[tgt] = true;
                        for (src, wt) in taps {
                            if wt > 0.0 {
                                entries.push((tgt as u32, src as u32, wt));
                            }
                        }
                    }
                }
                Ok(WarpMap {
                    height: h,
                    width: w,
                    entries,
                    validity: ValidityMask::new(h, w, valid)?,
                })
            }
        }
    }

    pub fn validity(&self) -> &ValidityMask {
        &self.validity
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    fn check<S: Scalar>(&self, t: &Tensor<S>) -> Result<usize> {
        let (h, w, c) = t.hwc()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::dim(format!(
                "warp built for {}x{}, logits are {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(c)
    }

    /// Warp an HxWxC tensor; invalid target pixels are zero.
    pub fn apply<S: Scalar>(&self, src: &Tensor<S>) -> Result<Tensor<S>> {
        let c = self.check(src)?;
        let mut out = vec![S::zero(); src.len()];
        let sd = src.data();
        for &(t, s, wt) in &self.entries {
            let wt = S::lit(wt);
            let o = &mut out[t as usize * c..][..c];
            for (o, &x) in o.iter_mut().zip(&sd[s as usize * c..][..c]) {
                *o += wt * x;
            }
        }
        Tensor::new(src.dims(), out)
    }

    /// Adjoint of [`WarpMap::apply`].
    pub fn apply_transpose<S: Scalar>(&self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let c = self.check(grad)?;
        let mut out = vec![S::zero(); grad.len()];
        let gd = grad.data();
        for &(t, s, wt) in &self.entries {
            let wt = S::lit(wt);
            let o = &mut out[s as usize * c..][..c];
            for (o, &g) in o.iter_mut().zip(&gd[t as usize * c..][..c]) {
                *o += wt * g;
            }
        }
        Tensor::new(grad.dims(), out)
    }

    /// Record the warp of `src` as a differentiable graph node.
    pub fn record<S: Scalar>(self: &Arc<Self>, g: &mut Graph<S>, src: Var) -> Result<Var> {
        let out = self.apply(g.value(src))?;
        Ok(g.record(Box::new(WarpOp(Arc::clone(self))), &[src], out))
    }
}

struct WarpOp(Arc<WarpMap>);

impl<S: Scalar> Op<S> for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(self.0.apply_transpose(grad)?)])
    }
}

/// Warp a logits mask into another view. See [`WarpMap::build`] for which
/// depth and motion each mode expects.
pub fn warp_logits<S: Scalar>(
    src: &Tensor<S>,
    depth: &DepthMap,
    motion: &Se3Motion,
    k: &Intrinsics,
    mode: WarpMode,
) -> Result<(Tensor<S>, ValidityMask)> {
    let (h, w, _) = src.hwc()?;
    if (h, w) != (depth.height, depth.width) {
        return Err(Error::dim(format!(
            "logits {h}x{w} vs depth {}x{}",
            depth.height, depth.width
        )));
    }
    let map = WarpMap::build(depth, motion, k, mode)?;
    let out = map.apply(src)?;
    Ok((out, map.validity))
}

/// Inject pose and depth error emulating imperfect learned estimators.
pub fn perturb(
    motion: &Se3Motion,
    depth: &DepthMap,
    sigma_rot: f64,
    sigma_trans: f64,
    sigma_depth: f64,
    seed: u64,
) -> Result<(Se3Motion, DepthMap)> {
    if sigma_rot < 0.0 || sigma_trans < 0.0 || sigma_depth < 0.0 {
        return Err(Error::contract("perturbation sigmas must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_motion = *motion;
    if sigma_rot > 0.0 {
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let angle = Normal::new(0.0, sigma_rot).expect("sigma > 0").sample(&mut rng);
        let noise = Se3Motion::from_axis_angle(&Vector3::from(axis), angle, Vector3::zeros());
        out_motion = noise.compose(&out_motion);
        // strip rounding drift from the product
        out_motion.translation = motion.translation;
    }
    if sigma_trans > 0.0 {
        let n = Normal::new(0.0, sigma_trans).expect("sigma > 0");
        for i in 0..3 {
            out_motion.translation[i] += n.sample(&mut rng);
        }
    }
    let mut out_depth = depth.clone();
    if sigma_depth > 0.0 {
        let n = Normal::new(0.0, sigma_depth).expect("sigma > 0");
        for d in &mut out_depth.values {
            let scale = (1.0 + n.sample(&mut rng)).max(0.05);
            *d = (*d as f64 * scale) as f32;
        }
    }
    Ok((out_motion, out_depth))
}
