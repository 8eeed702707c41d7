//! Undersampled multi-coil k-space volumes and their calibration region.
//!
//! Spatial axis 0 is the fully sampled frequency-encoding axis; every
//! later axis is a phase-encoding axis. K-space is stored centred (DC at
//! index `n/2` of each axis) and coils lie on the leading axis.

use std::ops::Range;

use num_complex::Complex64;

use crate::array::{CArray, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Fully sampled centre of k-space: one index range per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcsRegion {
    pub ranges: Vec<Range<usize>>,
}

/// Number of centre lines for a fraction of `extent`, rounded to nearest.
pub fn center_lines(extent: usize, fraction: f64) -> usize {
    ((fraction * extent as f64).round() as usize).min(extent)
}

/// The contiguous `n`-line window around the DC index `extent/2`.
pub fn center_range(extent: usize, n: usize) -> Range<usize> {
    let start = extent / 2 - n / 2;
    start..start + n
}

impl AcsRegion {
    /// Centre `fraction` of every phase axis; the frequency axis is whole.
    pub fn centered(extents: &[usize], fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(invalid("AcsRegion", format!("fraction {fraction} outside [0, 1]")));
        }
        let ranges: Vec<_> = extents
            .iter()
            .enumerate()
            .map(|(a, &e)| if a == 0 { 0..e } else { center_range(e, center_lines(e, fraction)) })
            .collect();
        let r = Self { ranges };
        r.validate(extents)?;
        Ok(r)
    }

    pub fn validate(&self, extents: &[usize]) -> Result<()> {
        if self.ranges.len() != extents.len() {
            return Err(shape_err("AcsRegion", format!("{} ranges for extents {extents:?}", self.ranges.len())));
        }
        for (a, (r, &e)) in self.ranges.iter().zip(extents).enumerate() {
            if r.is_empty() || r.end > e {
                return Err(invalid("AcsRegion", format!("axis {a}: range {r:?} empty or outside 0..{e}")));
            }
        }
        Ok(())
    }

    pub fn extents(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub fn contains(&self, index: &[usize]) -> bool {
        self.ranges.iter().zip(index).all(|(r, i)| r.contains(i))
    }

    /// 0/1 indicator over the spatial extents.
    pub fn indicator(&self, extents: &[usize]) -> Tensor {
        let mut m = Tensor::zeros(extents);
        let mut idx = vec![0; extents.len()];
        for v in m.data_mut() {
            if self.contains(&idx) {
                *v = 1.0;
            }
            crate::array::next_index(&mut idx, extents);
        }
        m
    }
}

/// Measured k-space `K̄` with its sampling mask and calibration region.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceVolume {
    /// `(N, spatial...)`, zero wherever the mask is zero.
    pub data: CArray,
    /// 0/1 over the spatial extents.
    pub mask: Tensor,
    pub acs: AcsRegion,
}

impl KSpaceVolume {
    /// Applies `mask` to fully sampled k-space.
    pub fn undersample(full: &CArray, mask: &Tensor, acs: AcsRegion) -> Result<Self> {
        let sp = &full.shape()[1..];
        if full.ndim() < 2 || sp != mask.shape() {
            return Err(shape_err(
                "KSpaceVolume",
                format!("mask {:?} does not match k-space {:?}", mask.shape(), full.shape()),
            ));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(invalid("KSpaceVolume", "mask must be binary"));
        }
        acs.validate(sp)?;
        let n = mask.len();
        let mut data = full.clone();
        data.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v *= mask.data()[i % n]);
        Ok(Self {
            data,
            mask: mask.clone(),
            acs,
        })
    }

    pub fn coils(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    /// Flat spatial indices of the sampled set Ω.
    pub fn sampled(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| self.mask.data()[j] != 0.0).collect()
    }

    /// Zeroes every line outside the calibration region.
    pub fn mask_center(&self) -> Result<Self> {
        let sp = self.spatial().to_vec();
        self.acs.validate(&sp)?;
        let keep = self.acs.indicator(&sp);
        let mut out = self.clone();
        let n = keep.len();
        out.data
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v *= keep.data()[i % n]);
        Ok(out)
    }

    /// Copy of the calibration block `(N, acs extents...)`.
    pub fn extract_acs(&self) -> Result<CArray> {
        extract_region(&self.data, &self.acs)
    }

    /// Planar `(N, 2, spatial...)` copy of the data.
    pub fn planar(&self) -> Tensor {
        coils_to_planar(&self.data)
    }
}

/// Copies the block of `x` (`(N, spatial...)`) selected by `region`.
pub fn extract_region(x: &CArray, region: &AcsRegion) -> Result<CArray> {
    let sp = &x.shape()[1..];
    region.validate(sp)?;
    let ext = region.extents();
    let mut shape = vec![x.shape()[0]];
    shape.extend_from_slice(&ext);
    let mut out = Vec::with_capacity(shape.iter().product());
    let strides = crate::array::strides_of(sp);
    let n: usize = sp.iter().product();
    for c in 0..x.shape()[0] {
        let mut idx = vec![0; ext.len()];
        loop {
            let off: usize = idx
                .iter()
                .zip(&region.ranges)
                .zip(&strides)
                .map(|((i, r), s)| (r.start + i) * s)
                .sum();
            out.push(x.data()[c * n + off]);
            if !crate::array::next_index(&mut idx, &ext) {
                break;
            }
        }
    }
    CArray::from_vec(&shape, out)
}

/// `(N, spatial...)` complex to planar `(N, 2, spatial...)`.
pub fn coils_to_planar(x: &CArray) -> Tensor {
    let mut shape = vec![x.shape()[0], 1];
    shape.extend_from_slice(&x.shape()[1..]);
    crate::array::to_planar(&x.clone().reshape(&shape).expect("same length"))
}

/// Planar `(N, 2, spatial...)` back to complex `(N, spatial...)`.
pub fn planar_to_coils(x: &Tensor) -> Result<CArray> {
    if x.ndim() < 3 || x.shape()[1] != 2 {
        return Err(shape_err("planar_to_coils", format!("need (N, 2, ...), got {:?}", x.shape())));
    }
    let c = crate::array::from_planar(x)?;
    let mut shape = vec![x.shape()[0]];
    shape.extend_from_slice(&x.shape()[2..]);
    c.reshape(&shape)
}

/// `(N, spatial...)` complex to `(1, 2N, spatial...)`: real parts of all
/// coils, then imaginary parts.
pub fn coils_to_channels(x: &CArray) -> Tensor {
    let n = x.shape()[0];
    let m: usize = x.shape()[1..].iter().product();
    let mut out = vec![0.0; 2 * n * m];
    for (i, v) in x.data().iter().enumerate() {
        out[i] = v.re;
        out[n * m + i] = v.im;
    }
    let mut shape = vec![1, 2 * n];
    shape.extend_from_slice(&x.shape()[1..]);
    Tensor::from_vec(&shape, out).expect("channel shape")
}

/// Inverse of [`coils_to_channels`].
pub fn channels_to_coils(x: &Tensor) -> Result<CArray> {
    if x.ndim() < 3 || x.shape()[0] != 1 || x.shape()[1] % 2 != 0 {
        return Err(shape_err("channels_to_coils", format!("need (1, 2N, ...), got {:?}", x.shape())));
    }
    let half = x.len() / 2;
    let d = x.data();
    let data = (0..half).map(|i| Complex64::new(d[i], d[half + i])).collect();
    let mut shape = vec![x.shape()[1] / 2];
    shape.extend_from_slice(&x.shape()[2..]);
    CArray::from_vec(&shape, data)
}

/// Root-sum-of-squares across coils of `(N, spatial...)` complex data.
pub fn rss(x: &CArray) -> Tensor {
    let n = x.shape()[0];
    let sp = &x.shape()[1..];
    let m: usize = sp.iter().product();
    let mut out = vec![0.0; m];
    for c in 0..n {
        for (o, v) in out.iter_mut().zip(&x.data()[c * m..(c + 1) * m]) {
            *o += v.norm_sqr();
        }
    }
    Tensor::from_vec(sp, out.into_iter().map(f64::sqrt).collect()).expect("spatial shape")
}

/// Centred unitary inverse transform of every coil.
pub fn coil_images(k: &CArray) -> CArray {
    let axes: Vec<usize> = (1..k.ndim()).collect();
    crate::fft::ifft_c(k, &axes)
}

/// Centred unitary forward transform of every coil.
pub fn coil_kspace(x: &CArray) -> CArray {
    let axes: Vec<usize> = (1..x.ndim()).collect();
    crate::fft::fft_c(x, &axes)
}

/// Zero-filled reconstruction: RSS of the inverse transform.
pub fn zero_filled(k: &KSpaceVolume) -> Tensor {
    rss(&coil_images(&k.data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: &[usize]) -> CArray {
        CArray::full(shape, Complex64::new(1.0, 0.5))
    }

    #[test]
    fn center_lines_round_to_nearest() {
        assert_eq!(center_lines(368, 0.08), 29);
        assert_eq!(center_lines(320, 0.16), 51);
        assert_eq!(center_lines(256, 0.16), 41);
    }

    #[test]
    fn mask_center_keeps_acs_lines() {
        let k = ones(&[2, 4, 368]);
        let acs = AcsRegion::centered(&[4, 368], 0.08).unwrap();
        let v = KSpaceVolume::undersample(&k, &Tensor::full(&[4, 368], 1.0), acs).unwrap();
        let c = v.mask_center().unwrap();
        let lines = (0..368).filter(|&p| c.data.get(&[0, 0, p]).norm() > 0.0).count();
        assert_eq!(lines, 29);
        assert!(c.acs.contains(&[0, 184]));
        assert_eq!(c.mask_center().unwrap(), c);
        let all = AcsRegion::centered(&[4, 368], 1.0).unwrap();
        let v = KSpaceVolume::undersample(&k, &Tensor::full(&[4, 368], 1.0), all).unwrap();
        assert_eq!(v.mask_center().unwrap(), v);
    }

    #[test]
    fn empty_acs_is_rejected() {
        assert!(AcsRegion::centered(&[8, 8], 0.01).is_err());
    }

    #[test]
    fn acs_extraction() {
        let k = ones(&[1, 6, 320, 256]);
        let acs = AcsRegion::centered(&[6, 320, 256], 0.16).unwrap();
        let v = KSpaceVolume::undersample(&k, &Tensor::full(&[6, 320, 256], 1.0), acs).unwrap();
        assert_eq!(v.extract_acs().unwrap().shape(), &[1, 6, 51, 41]);
        let whole = AcsRegion::centered(&[6, 320, 256], 1.0).unwrap();
        assert_eq!(whole.extents(), vec![6, 320, 256]);
    }

    #[test]
    fn planar_round_trip() {
        let x = CArray::from_vec(&[2, 3], (0..6).map(|i| Complex64::new(i as f64, -(i as f64))).collect()).unwrap();
        let p = coils_to_planar(&x);
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert_eq!(p.get(&[1, 1, 0]), -3.0);
        assert_eq!(planar_to_coils(&p).unwrap(), x);
        let c = coils_to_channels(&x);
        assert_eq!(c.shape(), &[1, 4, 3]);
        assert_eq!(c.get(&[0, 1, 2]), 5.0);
        assert_eq!(c.get(&[0, 3, 2]), -5.0);
        assert_eq!(channels_to_coils(&c).unwrap(), x);
    }
}
