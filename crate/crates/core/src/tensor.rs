//! Dense row-major tensors and the numeric kernels the rest of the engine is
//! built from.
//!
//! Images and logits use HWC layout (`[h, w, c]`), convolution kernels use
//! `[kh, kw, cin, cout]`. Shapes are never broadcast except for the bias add
//! inside [`conv2d`].

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type code stored in the container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Training runs in `f32`; gradient
/// verification instantiates the same code with `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense tensor of rank 1 to 4.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("dtype", &S::DTYPE)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: &[usize], data: Vec<S>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::dim(format!("rank {} outside 1..=4", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "dims {dims:?} hold {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, S::zero())
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("valid rank")
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = dims.iter().product();
        Self::new(dims, (0..n).map(&mut f).collect()).expect("valid rank")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// `(h, w, c)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::dim(format!("expected HxWxC, got {:?}", self.dims))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same(other, "elementwise shape mismatch")?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|x| x * k)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "accumulate shape mismatch")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.check_same(other, "comparison shape mismatch")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| T::lit(x.as_f64())).collect(),
        }
    }
}

fn conv_geometry<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (h, w, cin) = input.hwc()?;
    let (kh, kw, kcin, cout) = match kernel.dims[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::dim(format!(
                "kernel must be kh x kw x cin x cout, got {:?}",
                kernel.dims
            )))
        }
    };
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
        )));
    }
    if bias.dims != [cout] {
        return Err(Error::dim(format!(
            "bias must be [{cout}], got {:?}",
            bias.dims
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::contract(format!("kernel {kh}x{kw} must be odd")));
    }
    Ok((h, w, cin, kh, kw, cout))
}

/// Stride-1 convolution with zero padding that preserves spatial extents.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (h, w, cin, kh, kw, cout) = conv_geometry(input, kernel, bias)?;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![S::zero(); h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * cout..][..cout];
            row.copy_from_slice(&bias.data);
            for dy in 0..kh {
                let Some(iy) = (y + dy).checked_sub(ph).filter(|&iy| iy < h) else {
                    continue;
                };
                for dx in 0..kw {
                    let Some(ix) = (x + dx).checked_sub(pw).filter(|&ix| ix < w) else {
                        continue;
                    };
                    let pix = &input.data[(iy * w + ix) * cin..][..cin];
                    let taps = &kernel.data[(dy * kw + dx) * cin * cout..][..cin * cout];
                    for (&a, krow) in pix.iter().zip(taps.chunks_exact(cout)) {
                        if a == S::zero() {
                            continue;
                        }
                        for (o, &k) in row.iter_mut().zip(krow) {
                            *o += a * k;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (h, w, cin, kh, kw, cout) = conv_geometry(input, kernel, bias)?;
    if grad_out.dims != [h, w, cout] {
        return Err(Error::dim("conv2d gradient shape mismatch"));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gin = vec![S::zero(); input.len()];
    let mut gk = vec![S::zero(); kernel.len()];
    let mut gb = vec![S::zero(); cout];
    for y in 0..h {
        for x in 0..w {
            let go = &grad_out.data[(y * w + x) * cout..][..cout];
            for (b, &g) in gb.iter_mut().zip(go) {
                *b += g;
            }
            for dy in 0..kh {
                let Some(iy) = (y + dy).checked_sub(ph).filter(|&iy| iy < h) else {
                    continue;
                };
                for dx in 0..kw {
                    let Some(ix) = (x + dx).checked_sub(pw).filter(|&ix| ix < w) else {
                        continue;
                    };
                    let base = (iy * w + ix) * cin;
                    let tap = (dy * kw + dx) * cin * cout;
                    let pix = &input.data[base..][..cin];
                    let gpix = &mut gin[base..][..cin];
                    let taps = &kernel.data[tap..][..cin * cout];
                    let gtaps = &mut gk[tap..][..cin * cout];
                    for ci in 0..cin {
                        let krow = &taps[ci * cout..][..cout];
                        let mut acc = S::zero();
                        for (&k, &g) in krow.iter().zip(go) {
                            acc += k * g;
                        }
                        gpix[ci] += acc;
                        let a = pix[ci];
                        if a != S::zero() {
                            for (gkk, &g) in gtaps[ci * cout..][..cout].iter_mut().zip(go) {
                                *gkk += a * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(&input.dims, gin)?,
        Tensor::new(&kernel.dims, gk)?,
        Tensor::new(&[cout], gb)?,
    ))
}

/// Elementwise `max(0, x)`.
pub fn relu<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.map(|x| x.max(S::zero()))
}

/// Subgradient of relu; zero at the kink.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    input.zip_map(grad_out, |x, g| if x > S::zero() { g } else { S::zero() })
}

/// Per-pixel softmax over the trailing channel axis of an HxWxC tensor.
pub fn softmax_channels<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, _, c) = logits.hwc()?;
    if c < 2 {
        return Err(Error::contract("softmax needs at least two channels"));
    }
    let mut out = logits.data.clone();
    for px in out.chunks_exact_mut(c) {
        softmax_in_place(px);
    }
    Tensor::new(&logits.dims, out)
}

pub(crate) fn softmax_in_place<S: Scalar>(px: &mut [S]) {
    let m = px.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for v in px.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in px.iter_mut() {
        *v = *v / z;
    }
}

/// Vector-Jacobian product of [`softmax_channels`] given its output.
pub fn softmax_backward<S: Scalar>(probs: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, _, c) = probs.hwc()?;
    if probs.dims != grad_out.dims {
        return Err(Error::dim("softmax gradient shape mismatch"));
    }
    let mut out = vec![S::zero(); probs.len()];
    for ((p, g), o) in probs
        .data
        .chunks_exact(c)
        .zip(grad_out.data.chunks_exact(c))
        .zip(out.chunks_exact_mut(c))
    {
        let dot: S = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((o, &pi), &gi) in o.iter_mut().zip(p).zip(g) {
            *o = pi * (gi - dot);
        }
    }
    Tensor::new(&probs.dims, out)
}

const STCT_MAGIC: &[u8; 4] = b"STCT";
const STCT_VERSION: u16 = 1;

impl<S: Scalar> Tensor<S> {
    /// Serialize into the STCT container: magic, u16 version, u8 rank,
    /// u32 dims, u8 dtype code, little-endian payload.
    pub fn to_stct_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + self.len() * S::DTYPE.width());
        out.extend_from_slice(STCT_MAGIC);
        out.extend_from_slice(&STCT_VERSION.to_le_bytes());
        out.push(self.rank() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(S::DTYPE.code());
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn write_stct(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_stct_bytes())
    }

    /// Parse an STCT container; the stored dtype must match `S`.
    pub fn from_stct_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cur.len() < n {
                return Err("truncated".into());
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != STCT_MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != STCT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let rank = take(1)?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(format!("rank {rank} outside 1..=4"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let code = take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
        if dtype != S::DTYPE {
            return Err(format!("dtype {dtype:?} stored, {:?} requested", S::DTYPE));
        }
        let n: usize = dims.iter().product();
        let payload = take(n * dtype.width())?;
        if !cur.is_empty() {
            return Err("trailing bytes".into());
        }
        let data = payload
            .chunks_exact(dtype.width())
            .map(S::read_le)
            .collect();
        Tensor::new(&dims, data).map_err(|e| e.to_string())
    }

    pub fn read_stct(mut r: impl Read) -> std::result::Result<Self, String> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| e.to_string())?;
        Self::from_stct_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[4]);
        assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[5, 4, 3], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_constant_interior() {
        let x = Tensor::<f32>::full(&[8, 8, 1], 5.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        for yy in 1..7 {
            for xx in 1..7 {
                assert_eq!(y.data()[yy * 8 + xx], 45.0);
            }
        }
        // corners see four taps
        assert_eq!(y.data()[0], 20.0);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros(&[6, 7, 2]);
        let k = Tensor::from_fn(&[3, 3, 2, 3], |i| i as f32);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, &b).unwrap();
        for px in y.data().chunks(3) {
            assert_eq!(px, b.data());
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1])),
            Err(Error::Dimension(_))
        ));
        let k = Tensor::zeros(&[2, 2, 2, 1]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn relu_values() {
        let t = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f32>::full(&[2, 2], -3.0);
        assert_eq!(relu(&neg), Tensor::zeros(&[2, 2]));
        let g = relu_backward(
            &Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(),
            &Tensor::full(&[3], 1.0),
        )
        .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::<f64>::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_channels(&t).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::<f32>::new(&[1, 1, 3], vec![1000.0; 3]).unwrap();
        let p = softmax_channels(&t).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let t = Tensor::<f64>::new(&[1, 1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);
        let one = Tensor::<f32>::zeros(&[1, 1, 1]);
        assert!(softmax_channels(&one).is_err());
    }

    #[test]
    fn stct_layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let b = t.to_stct_bytes();
        assert_eq!(&b[..4], b"STCT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(&b[7..11], &[2, 0, 0, 0]);
        assert_eq!(b[11], 0);
        assert_eq!(&b[12..16], &1f32.to_le_bytes());
        assert_eq!(b.len(), 20);
        assert!(Tensor::<f64>::from_stct_bytes(&b).is_err());
        assert!(Tensor::<f32>::from_stct_bytes(&b[..19]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn stct_roundtrip(dims in proptest::collection::vec(1usize..5, 1..=4), seed in 0u64..1000) {
            let t = Tensor::<f64>::from_fn(&dims, |i| ((i as u64 * 7919 + seed) as f64).sin());
            let bytes = t.to_stct_bytes();
            let back = Tensor::<f64>::from_stct_bytes(&bytes).unwrap();
            proptest::prop_assert_eq!(&back, &t);
            proptest::prop_assert_eq!(back.to_stct_bytes(), bytes);
        }

        #[test]
        fn conv_is_linear(seed in 0u64..200, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let f = |i: usize, s: u64| (((i as u64) * 2654435761 + s) % 1000) as f64 / 500.0 - 1.0;
            let x = Tensor::<f64>::from_fn(&[5, 6, 2], |i| f(i, seed));
            let y = Tensor::<f64>::from_fn(&[5, 6, 2], |i| f(i, seed + 17));
            let k = Tensor::<f64>::from_fn(&[3, 3, 2, 3], |i| f(i, seed + 31));
            let zero = Tensor::zeros(&[3]);
            let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &k, &zero).unwrap();
            let rhs = conv2d(&x, &k, &zero).unwrap().scale(a)
                .add(&conv2d(&y, &k, &zero).unwrap().scale(b)).unwrap();
            let scale = rhs.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            proptest::prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5 * scale);
        }
    }
}
