//! Dense row-major n-dimensional arrays.
//!
//! [`NdArray<T>`] is the value type used everywhere: `f64` arrays flow
//! through the differentiable tape, `Complex64` arrays hold k-space and
//! coil data (real/imag interleaved per element), and `f32` exists for
//! storage. Inside networks a complex array with `K` channels is carried
//! as a real array with `2K` channels: channels `[0, K)` hold the real
//! parts and channels `[K, 2K)` the imaginary parts. [`to_planar`] and
//! [`from_planar`] convert between the two conventions.

use num_complex::Complex64;

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Tensor = NdArray<f64>;
pub type CArray = NdArray<Complex64>;

impl<T: Clone + Default> NdArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }
}

impl<T> NdArray<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "NdArray::from_vec",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

impl<T: Copy> NdArray<T> {
    pub fn get(&self, index: &[usize]) -> T {
        self.data[offset_of(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = offset_of(&self.shape, index);
        self.data[o] = value;
    }
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖ / ‖other‖`, falling back to the absolute norm when
    /// `other` is zero.
    pub fn rel_err(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = other.norm_sq().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
}

impl CArray {
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn offset_of(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    let mut o = 0;
    for (e, i) in shape.iter().zip(index) {
        debug_assert!(i < e, "index {index:?} out of bounds for {shape:?}");
        o = o * e + i;
    }
    o
}

/// Advances a row-major multi-index; returns false after the last index.
pub fn next_index(index: &mut [usize], shape: &[usize]) -> bool {
    for ax in (0..shape.len()).rev() {
        index[ax] += 1;
        if index[ax] < shape[ax] {
            return true;
        }
        index[ax] = 0;
    }
    false
}

/// Complex `(B, K, ...)` to planar real `(B, 2K, ...)`.
pub fn to_planar(x: &CArray) -> Tensor {
    let shape = x.shape();
    assert!(shape.len() >= 2, "to_planar needs (batch, channel, ...)");
    let (b, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[1] = 2 * k;
    let mut out = vec![0.0; x.len() * 2];
    for bi in 0..b {
        for ki in 0..k {
            let src = &x.data()[(bi * k + ki) * inner..][..inner];
            let re0 = (bi * 2 * k + ki) * inner;
            let im0 = (bi * 2 * k + k + ki) * inner;
            for (j, v) in src.iter().enumerate() {
                out[re0 + j] = v.re;
                out[im0 + j] = v.im;
            }
        }
    }
    Tensor::from_vec(&out_shape, out).expect("planar shape")
}

/// Planar real `(B, 2K, ...)` back to complex `(B, K, ...)`.
pub fn from_planar(x: &Tensor) -> Result<CArray> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] % 2 != 0 {
        return Err(shape_err(
            "from_planar",
            format!("need (batch, even channels, ...), got {shape:?}"),
        ));
    }
    let (b, c2) = (shape[0], shape[1]);
    let k = c2 / 2;
    let inner: usize = shape[2..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[1] = k;
    let mut out = vec![Complex64::new(0.0, 0.0); b * k * inner];
    for bi in 0..b {
        for ki in 0..k {
            let re0 = (bi * c2 + ki) * inner;
            let im0 = (bi * c2 + k + ki) * inner;
            let dst = &mut out[(bi * k + ki) * inner..][..inner];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = Complex64::new(x.data()[re0 + j], x.data()[im0 + j]);
            }
        }
    }
    CArray::from_vec(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn planar_round_trip() {
        let data: Vec<Complex64> = (0..24)
            .map(|i| Complex64::new(i as f64, -(i as f64) * 0.5))
            .collect();
        let c = CArray::from_vec(&[2, 3, 4], data).unwrap();
        let p = to_planar(&c);
        assert_eq!(p.shape(), &[2, 6, 4]);
        assert_eq!(p.get(&[1, 4, 2]), c.get(&[1, 1, 2]).im);
        assert_eq!(p.get(&[1, 1, 2]), c.get(&[1, 1, 2]).re);
        assert_eq!(from_planar(&p).unwrap(), c);
    }

    #[test]
    fn multi_index_walk() {
        let shape = [2, 2];
        let mut idx = vec![0, 0];
        let mut seen = vec![idx.clone()];
        while next_index(&mut idx, &shape) {
            seen.push(idx.clone());
        }
        assert_eq!(seen, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }
}
