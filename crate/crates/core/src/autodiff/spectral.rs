use num_complex::Complex64;

use super::{Tape, Var};
use crate::array::Tensor;
use crate::error::{shape_err, Result};
use crate::fft::{fft_axes_inplace, shift_axes};

/// Unitary transform of planar `(B, 2K, spatial...)` data over all spatial
/// axes, treating channel `k` and `k + K` as the real and imaginary part of
/// one complex channel.
pub(crate) fn planar_fft(x: &Tensor, inverse: bool, centered: bool) -> Tensor {
    let shape = x.shape();
    let (batch, c2) = (shape[0], shape[1]);
    let k = c2 / 2;
    let sp = &shape[2..];
    let n: usize = sp.iter().product();
    let axes: Vec<usize> = (0..sp.len()).collect();
    let mut out = vec![0.0; x.len()];
    let mut buf = vec![Complex64::default(); n];
    for b in 0..batch {
        for ki in 0..k {
            let re0 = (b * c2 + ki) * n;
            let im0 = (b * c2 + k + ki) * n;
            for j in 0..n {
                buf[j] = Complex64::new(x.data()[re0 + j], x.data()[im0 + j]);
            }
            if centered {
                shift_axes(&mut buf, sp, &axes, true);
            }
            fft_axes_inplace(&mut buf, sp, &axes, inverse);
            if centered {
                shift_axes(&mut buf, sp, &axes, false);
            }
            for j in 0..n {
                out[re0 + j] = buf[j].re;
                out[im0 + j] = buf[j].im;
            }
        }
    }
    Tensor::from_vec(shape, out).expect("same shape")
}

impl Tape {
    /// Forward (or inverse) unitary FFT over the spatial axes of planar
    /// complex data. The adjoint of the unitary transform is its inverse.
    pub fn fft(&mut self, x: Var, inverse: bool, centered: bool) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 3 || xs[1] % 2 != 0 {
            return Err(shape_err(
                "fft",
                format!("need (B, even channels, spatial...), got {xs:?}"),
            ));
        }
        self.count_fft(inverse);
        let v = planar_fft(self.value(x), inverse, centered);
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| vec![Some(planar_fft(c.grad, !inverse, centered))]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::params::ParamStore;

    #[test]
    fn round_trip_and_energy() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let mut s = ParamStore::new();
        let id = s.add_uniform("x", &[2, 4, 6, 5], 1.0, &mut rng);
        let x = s.value(id).clone();
        for centered in [false, true] {
            let f = planar_fft(&x, false, centered);
            assert!((f.norm_sq() - x.norm_sq()).abs() / x.norm_sq() < 1e-12);
            let back = planar_fft(&f, true, centered);
            assert!(back.rel_err(&x) < 1e-12);
        }
    }

    #[test]
    fn gradient_is_adjoint() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(12);
        let mut s = ParamStore::new();
        s.add_uniform("x", &[1, 2, 4, 3], 1.0, &mut rng);
        let w = Tensor::from_vec(&[1, 2, 4, 3], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        for centered in [false, true] {
            let err = gradcheck(&mut s, 24, 1e-5, |t, s| {
                let x = t.param(s, s.find("x").unwrap());
                let y = t.fft(x, false, centered)?;
                let y = t.mul(y, y)?;
                let y = t.fft(y, true, centered)?;
                let y = t.mul_const(y, &w)?;
                Ok(t.sum(y))
            })
            .unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }
}
