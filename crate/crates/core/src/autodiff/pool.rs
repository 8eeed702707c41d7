use super::{Tape, Var};
use crate::array::{next_index, strides_of, Tensor};
use crate::error::{Error, Result};

/// For every position of `fine` (row-major), the linear index of the
/// coarse cell containing it when each axis is divided by `factor`.
fn coarse_index(fine: &[usize], factor: &[usize]) -> Vec<usize> {
    let coarse: Vec<usize> = fine.iter().zip(factor).map(|(e, f)| e / f).collect();
    let cs = strides_of(&coarse);
    let n: usize = fine.iter().product();
    let mut idx = vec![0usize; fine.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(idx.iter().zip(factor).zip(&cs).map(|((i, f), s)| (i / f) * s).sum());
        next_index(&mut idx, fine);
    }
    out
}

fn check_divisible(shape: &[usize], window: &[usize]) -> Result<()> {
    for (a, (&e, &w)) in shape[2..].iter().zip(window).enumerate() {
        if w == 0 || e % w != 0 {
            return Err(Error::Indivisible {
                axis: a + 2,
                extent: e,
                divisor: w,
                padded: e.div_ceil(w.max(1)) * w,
            });
        }
    }
    Ok(())
}

impl Tape {
    /// Non-overlapping average pooling with the given window per spatial axis.
    pub fn avg_pool(&mut self, x: Var, window: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if window.len() + 2 != xs.len() {
            return Err(crate::error::invalid("avg_pool", format!("window {window:?} for input {xs:?}")));
        }
        check_divisible(&xs, window)?;
        let fine = xs[2..].to_vec();
        let map = coarse_index(&fine, window);
        let ip = map.len();
        let op = ip / window.iter().product::<usize>();
        let inv = 1.0 / window.iter().product::<usize>() as f64;
        let bc = xs[0] * xs[1];
        let mut out = vec![0.0; bc * op];
        {
            let xv = self.value(x).data();
            for k in 0..bc {
                for (j, &m) in map.iter().enumerate() {
                    out[k * op + m] += xv[k * ip + j] * inv;
                }
            }
        }
        let mut shape = xs[..2].to_vec();
        shape.extend(fine.iter().zip(window).map(|(e, w)| e / w));
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut gx = vec![0.0; bc * ip];
                for k in 0..bc {
                    for (j, &m) in map.iter().enumerate() {
                        gx[k * ip + j] = g[k * op + m] * inv;
                    }
                }
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Nearest-neighbour upsampling: every voxel is replicated
    /// `factor` times along each spatial axis.
    pub fn upsample(&mut self, x: Var, factor: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if factor.len() + 2 != xs.len() || factor.contains(&0) {
            return Err(crate::error::invalid("upsample", format!("factor {factor:?} for input {xs:?}")));
        }
        let fine: Vec<usize> = xs[2..].iter().zip(factor).map(|(e, f)| e * f).collect();
        let map = coarse_index(&fine, factor);
        let op = map.len();
        let ip: usize = xs[2..].iter().product();
        let bc = xs[0] * xs[1];
        let mut out = vec![0.0; bc * op];
        {
            let xv = self.value(x).data();
            for k in 0..bc {
                for (j, &m) in map.iter().enumerate() {
                    out[k * op + j] = xv[k * ip + m];
                }
            }
        }
        let mut shape = xs[..2].to_vec();
        shape.extend_from_slice(&fine);
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut gx = vec![0.0; bc * ip];
                for k in 0..bc {
                    for (j, &m) in map.iter().enumerate() {
                        gx[k * ip + m] += g[k * op + j];
                    }
                }
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::params::ParamStore;
    use proptest::prelude::*;

    #[test]
    fn pool_then_upsample() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = t.avg_pool(x, &[2, 2]).unwrap();
        assert_eq!(t.value(p).data(), &[4.0]);
        let u = t.upsample(p, &[2, 2]).unwrap();
        assert_eq!(t.value(u).data(), &[4.0; 4]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 5, 4]));
        match t.avg_pool(x, &[2, 2]) {
            Err(Error::Indivisible { extent: 5, padded: 6, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradients_3d() {
        let mut s = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        s.add_uniform("x", &[1, 2, 4, 2, 4], 1.0, &mut rng);
        let w = Tensor::from_vec(&[1, 2, 4, 2, 4], (0..64).map(|i| (i % 5) as f64).collect()).unwrap();
        let err = gradcheck(&mut s, 64, 1e-5, |t, s| {
            let x = t.param(s, s.find("x").unwrap());
            let p = t.avg_pool(x, &[2, 2, 2])?;
            let p = t.mul(p, p)?;
            let u = t.upsample(p, &[2, 2, 2])?;
            let u = t.mul_const(u, &w)?;
            Ok(t.sum(u))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn pool_of_upsample_is_identity(vals in proptest::collection::vec(-10.0f64..10.0, 12)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::from_vec(&[1, 2, 3, 2], vals.clone()).unwrap());
            let u = t.upsample(x, &[2, 3]).unwrap();
            let p = t.avg_pool(u, &[2, 3]).unwrap();
            prop_assert!(t.value(p).max_abs_diff(t.value(x)) < 1e-12);
        }
    }
}
