//! Dense `(batch, channel, height, width)` tensors.
//!
//! Storage is a single row-major buffer. Every kernel in the crate indexes
//! that buffer directly through [`Tensor::plane`] / [`Tensor::plane_mut`],
//! so no strided views are exposed.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, Range, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Element type tag, as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;
    /// Default lower clamp for normalization denominators at this precision.
    const DEFAULT_EPS: Self;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the first `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const DEFAULT_EPS: f32 = 1e-5;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const DEFAULT_EPS: f64 = 1e-8;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// A pixel position `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelCoord {
    pub y: usize,
    pub x: usize,
}

impl PixelCoord {
    pub fn new(y: usize, x: usize) -> Self {
        Self { y, x }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wraps `data`, checking its length and that every value is finite.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape("Tensor::from_vec", len, data.len()));
        }
        let t = Self { shape, data };
        t.ensure_finite("Tensor::from_vec")?;
        Ok(t)
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn spatial(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    /// In-place access; callers must keep values finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.shape;
        ((n * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn at(&self, n: usize, c: usize, p: PixelCoord) -> T {
        self.get(n, c, p.y, p.x)
    }

    /// The `h*w` slice of channel `c` in sample `n`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    /// All channels of sample `n` as one contiguous slice.
    #[inline]
    pub fn sample_slice(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.plane_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample(&self, n: usize) -> Tensor<T> {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.sample_slice(n).to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::shape("Tensor::stack", [c, h, w], &p.shape[1..]));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Copies out the channel range `range` of every sample.
    pub fn channel_range(&self, range: Range<usize>) -> Tensor<T> {
        let [n, c, h, w] = self.shape;
        assert!(range.end <= c, "channel range {range:?} exceeds {c} channels");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * range.len() * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + range.start * plane..base + range.end * plane]);
        }
        Tensor {
            shape: [n, range.len(), h, w],
            data,
        }
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(Error::shape("Tensor::concat_channels", first.shape, p.shape));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample_slice(b));
            }
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("Tensor::reshape", self.shape, shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => {
                let [_, c, h, w] = self.shape;
                let (x, y) = (i % w, (i / w) % h);
                let (ch, n) = ((i / (w * h)) % c, i / (w * h * c));
                Err(Error::NonFinite(format!(
                    "{context} at (n={n}, c={ch}, y={y}, x={x})"
                )))
            }
        }
    }

    pub fn same_spatial(&self, other: &Tensor<T>) -> bool {
        self.shape[0] == other.shape[0] && self.spatial() == other.spatial()
    }

    /// Embeds the tensor in a zero border of width `margin`.
    pub fn zero_pad(&self, margin: usize) -> Tensor<T> {
        let [n, c, h, w] = self.shape;
        let (ph, pw) = (h + 2 * margin, w + 2 * margin);
        let mut out = Tensor::zeros([n, c, ph, pw]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..h {
                    let d = (y + margin) * pw + margin;
                    dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        out
    }

    /// Spatial crop of size `(crop_h, crop_w)` whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, crop_h: usize, crop_w: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = self.shape;
        if y0 + crop_h > h || x0 + crop_w > w {
            return Err(Error::InvalidArgument(format!(
                "crop {crop_h}x{crop_w} at ({y0}, {x0}) exceeds {h}x{w}"
            )));
        }
        let mut out = Tensor::zeros([n, c, crop_h, crop_w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..crop_h {
                    let s = (y0 + y) * w + x0;
                    dst[y * crop_w..(y + 1) * crop_w].copy_from_slice(&src[s..s + crop_w]);
                }
            }
        }
        Ok(out)
    }

    /// Removes a border of width `margin` on every side.
    pub fn center_crop(&self, margin: usize) -> Result<Tensor<T>> {
        let (h, w) = self.spatial();
        if 2 * margin > h || 2 * margin > w {
            return Err(Error::InvalidArgument(format!(
                "margin {margin} too large for {h}x{w}"
            )));
        }
        self.crop(margin, margin, h - 2 * margin, w - 2 * margin)
    }

    /// Resizes the spatial dimensions with half-pixel-centred sampling
    /// (source coordinate `(i + 0.5) * in / out - 0.5`), clamped at borders.
    pub fn resample(&self, out_h: usize, out_w: usize, mode: ResampleMode) -> Result<Tensor<T>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resample target must be at least 1x1".into()));
        }
        let [n, c, h, w] = self.shape;
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("cannot resample an empty tensor".into()));
        }
        let ys = axis_taps(h, out_h, mode);
        let xs = axis_taps(w, out_w, mode);
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                        dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Per output index: the two source taps and the weight of the second.
fn axis_taps<T: Real>(len_in: usize, len_out: usize, mode: ResampleMode) -> Vec<(usize, usize, T)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|i| match mode {
            ResampleMode::Nearest => {
                let s = (((i as f64 + 0.5) * scale).floor() as usize).min(len_in - 1);
                (s, s, T::zero())
            }
            ResampleMode::Bilinear => {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
                let s0 = src.floor() as usize;
                let s1 = (s0 + 1).min(len_in - 1);
                (s0, s1, T::of(src - s0 as f64))
            }
        })
        .collect()
}

/// Crops every tensor at one shared offset drawn from `rng`.
pub fn random_crop_with<T: Real, R: Rng>(
    tensors: &[&Tensor<T>],
    crop_h: usize,
    crop_w: usize,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    let Some(first) = tensors.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.spatial();
    if let Some(t) = tensors.iter().find(|t| t.spatial() != (h, w)) {
        return Err(Error::shape("random_crop", (h, w), t.spatial()));
    }
    if crop_h > h || crop_w > w || crop_h == 0 || crop_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_h}x{crop_w} does not fit input {h}x{w}"
        )));
    }
    let y0 = rng.gen_range(0..=h - crop_h);
    let x0 = rng.gen_range(0..=w - crop_w);
    tensors.iter().map(|t| t.crop(y0, x0, crop_h, crop_w)).collect()
}

/// Crops all inputs at the same offset, drawn uniformly under `seed`.
pub fn random_crop_pair<T: Real>(
    tensors: &[&Tensor<T>],
    crop_h: usize,
    crop_w: usize,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_crop_with(tensors, crop_h, crop_w, &mut rng)
}
