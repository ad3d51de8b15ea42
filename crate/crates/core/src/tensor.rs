//! Dense row-major tensors and the element types they hold.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;

use crate::error::{Error, Result};

/// On-disk element type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }
}

/// A value that can be stored in a [`Tensor`] and serialized little-endian.
pub trait Element: Copy + Send + Sync + Debug + Default + PartialEq + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes.len()` is exactly `DTYPE.width()`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Floating-point element with a GEMM kernel.
pub trait Real:
    Element + num_traits::Float + Sum + AddAssign + SubAssign + MulAssign + DivAssign + std::fmt::Display
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
    /// `trans_a` means `a` is stored as `k×m`; `trans_b` means `b` is stored as `n×k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Run `f` on a per-thread buffer of `len` elements with unspecified
    /// contents. `f` must write every element it reads.
    fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R;
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: the asserts above bound every index the kernel touches:
                // a is m×k, b is k×n and c is m×n under the given strides.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R {
                thread_local! {
                    static SCRATCH: std::cell::RefCell<Vec<$t>> = const { std::cell::RefCell::new(Vec::new()) };
                }
                // Taken out of the cell so a nested call gets its own buffer.
                let mut buf = SCRATCH.with(|c| c.take());
                if buf.len() < len {
                    buf.resize(len, 0.0);
                }
                let r = f(&mut buf[..len]);
                SCRATCH.with(|c| c.replace(buf));
                r
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// One of the four spatial transforms applied to MDIC channel quarters.
///
/// All four are involutions, so the inverse transform is the transform itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlipKind {
    Identity,
    /// Swap height and width (requires square maps).
    Transpose,
    /// Reverse both spatial axes.
    Rot180,
    /// Reverse the width axis. Equal to reversing both axes and then the
    /// height axis again.
    MirrorW,
}

impl FlipKind {
    /// Flip assigned to each channel quarter, in part order.
    pub const PART_ORDER: [FlipKind; 4] =
        [FlipKind::Identity, FlipKind::Transpose, FlipKind::Rot180, FlipKind::MirrorW];

    /// Transform that undoes `self`.
    pub fn inverse(self) -> FlipKind {
        self
    }

    pub fn name(self) -> &'static str {
        match self {
            FlipKind::Identity => "identity",
            FlipKind::Transpose => "transpose",
            FlipKind::Rot180 => "rot180",
            FlipKind::MirrorW => "mirror_w",
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Label map (class indices), typically `[N, H, W]` or `[H, W]`.
pub type LabelMap = Tensor<u8>;

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("extents must be >= 1, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("extents must be >= 1")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("extents must be >= 1")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// `(N, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("dims4", format!("expected 4-D tensor, got {:?}", self.shape))),
        }
    }

    /// Channel slice `[start, start+len)` of a 4-D tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} out of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::new(vec![n, len, h, w], data)
    }

    /// Concatenate 4-D tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("part {:?} incompatible with {:?}", p.shape, first.shape),
                ));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                let base = b * pc * plane;
                data.extend_from_slice(&p.data[base..base + pc * plane]);
            }
        }
        Tensor::new(vec![n, total, h, w], data)
    }

    /// Four contiguous channel quarters.
    pub fn split4(&self) -> Result<[Tensor<T>; 4]> {
        let (_, c, _, _) = self.dims4()?;
        if c % 4 != 0 {
            return Err(Error::shape("split4", format!("{c} channels not divisible by 4")));
        }
        let q = c / 4;
        Ok([
            self.slice_channels(0, q)?,
            self.slice_channels(q, q)?,
            self.slice_channels(2 * q, q)?,
            self.slice_channels(3 * q, q)?,
        ])
    }

    /// Apply a spatial transform to the last two axes.
    pub fn flip(&self, kind: FlipKind) -> Result<Self> {
        if self.ndim() < 2 {
            return Err(Error::shape("flip", format!("need >= 2 axes, got {:?}", self.shape)));
        }
        let nd = self.ndim();
        let (h, w) = (self.shape[nd - 2], self.shape[nd - 1]);
        if kind == FlipKind::Transpose && h != w {
            return Err(Error::shape("flip", format!("transpose needs square maps, got {h}x{w}")));
        }
        if kind == FlipKind::Identity {
            return Ok(self.clone());
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(self.data.len());
        for src in self.data.chunks_exact(plane) {
            for i in 0..h {
                for j in 0..w {
                    let idx = match kind {
                        FlipKind::Identity => i * w + j,
                        FlipKind::Transpose => j * w + i,
                        FlipKind::Rot180 => (h - 1 - i) * w + (w - 1 - j),
                        FlipKind::MirrorW => i * w + (w - 1 - j),
                    };
                    out.push(src[idx]);
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Reverse a single spatial axis (`0` = height, `1` = width) of the last two axes.
    pub fn reverse_spatial_axis(&self, axis: usize) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 || axis > 1 {
            return Err(Error::InvalidArgument(format!("bad spatial axis {axis}")));
        }
        let (h, w) = (self.shape[nd - 2], self.shape[nd - 1]);
        let mut out = Vec::with_capacity(self.data.len());
        for src in self.data.chunks_exact(h * w) {
            for i in 0..h {
                for j in 0..w {
                    let (si, sj) = if axis == 0 { (h - 1 - i, j) } else { (i, w - 1 - j) };
                    out.push(src[si * w + sj]);
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Convert to another real precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.as_f64()))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
