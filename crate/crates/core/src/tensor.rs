use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::real::Real;

/// Dense row-major array with shape metadata.
///
/// Image-like data uses batch × channel × height × width axis order. Gradient
/// bookkeeping lives on the [`Tape`](crate::Tape), not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(invalid!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Extents of a rank-4 tensor as (batch, channels, height, width).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(invalid!("expected rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    /// Extents of a rank-3 tensor as (channels, height, width).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(invalid!("expected rank-3 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| invalid!("stack of zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(invalid!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape,
                    first.shape
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    /// Slice `index` along the leading axis.
    pub fn index_first(&self, index: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| invalid!("index_first on scalar"))?;
        if index >= lead {
            return Err(invalid!("index {} out of range for extent {}", index, lead));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }
}

/// Inverse of [`Tape::pixel_shuffle`](crate::Tape::pixel_shuffle): B×C×sH×sW → B×(C·s²)×H×W.
pub fn pixel_unshuffle<T: Real>(input: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(invalid!("extent {}x{} not divisible by {}", h, w, s));
    }
    let (oh, ow) = (h / s, w / s);
    let oc = c * s * s;
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let o = ci * s * s + (y % s) * s + (x % s);
                    out[((bi * oc + o) * oh + y / s) * ow + x / s] =
                        src[((bi * c + ci) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(&[b, oc, oh, ow], out)
}
