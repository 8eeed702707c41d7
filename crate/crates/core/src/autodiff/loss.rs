use super::{Tape, Var};
use crate::array::Tensor;
use crate::error::{shape_err, Result};
use crate::metrics::{box_scatter, slices_of, SsimWindows, SSIM_WINDOW};

impl Tape {
    /// `1 − SSIM(x, target)` averaged over every slice of the last two axes,
    /// with the metric constants from [`crate::metrics`]. `range` is the
    /// data range (conventionally the target maximum).
    pub fn ssim_loss(&mut self, x: Var, target: &Tensor, range: f64) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(shape_err("ssim_loss", format!("{:?} vs target {:?}", self.shape(x), target.shape())));
        }
        let (ns, h, w) = slices_of("ssim_loss", target.shape())?;
        let n = h * w;
        let mut total = 0.0;
        {
            let xv = self.value(x).data();
            for s in 0..ns {
                let m = SsimWindows::new(&xv[s * n..(s + 1) * n], &target.data()[s * n..(s + 1) * n], h, w, range).map();
                total += m.iter().sum::<f64>() / m.len() as f64;
            }
        }
        let loss = 1.0 - total / ns as f64;
        let t = target.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            &[x],
            Box::new(move |c| {
                let xv = c.inputs[0].data();
                let g0 = c.grad.data()[0];
                let win = SSIM_WINDOW;
                let nw = ((h - win + 1) * (w - win + 1)) as f64;
                let scale = -g0 / (ns as f64 * nw * (win * win) as f64);
                let mut gx = vec![0.0; xv.len()];
                for s in 0..ns {
                    let (xs, ys) = (&xv[s * n..(s + 1) * n], &t.data()[s * n..(s + 1) * n]);
                    let sw = SsimWindows::new(xs, ys, h, w, range);
                    let k = sw.cov_norm;
                    let m = sw.a1.len();
                    let (mut da, mut db, mut dc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
                    for i in 0..m {
                        let (a1, a2, b1, b2) = (sw.a1[i], sw.a2[i], sw.b1[i], sw.b2[i]);
                        let v = a1 * a2 / (b1 * b2);
                        let (ux, uy) = (sw.mu_x[i], sw.mu_y[i]);
                        // ∂S/∂μx, ∂S/∂E[x²], ∂S/∂E[xy]
                        da[i] = v * (2.0 * uy / a1 - 2.0 * k * uy / a2 - 2.0 * ux / b1 + 2.0 * k * ux / b2);
                        db[i] = -v * k / b2;
                        dc[i] = 2.0 * v * k / a2;
                    }
                    let (ga, gb, gc) = (box_scatter(&da, h, w, win), box_scatter(&db, h, w, win), box_scatter(&dc, h, w, win));
                    for j in 0..n {
                        gx[s * n + j] = scale * (ga[j] + 2.0 * xs[j] * gb[j] + ys[j] * gc[j]);
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
    use crate::autodiff::{gradcheck, ConvCfg};
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let y = Tensor::from_vec(&[1, 1, 8, 9], (0..72).map(|i| (i as f64 * 0.3).sin().abs()).collect()).unwrap();
        let mut t = Tape::new();
        let x = t.constant(y.clone());
        let l = t.ssim_loss(x, &y, y.max()).unwrap();
        assert!(t.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn two_layer_net_gradient() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add_uniform("w1", &[4, 1, 3, 3], 0.5, &mut r);
        s.add_uniform("b1", &[4], 0.5, &mut r);
        s.add_uniform("w2", &[1, 4, 3, 3], 0.5, &mut r);
        s.add_uniform("b2", &[1], 0.5, &mut r);
        let x = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|_| r.random::<f64>()).collect()).unwrap();
        let y = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|_| r.random::<f64>()).collect()).unwrap();
        let cfg = ConvCfg::same(&[3, 3], &[1, 1]);
        let err = gradcheck(&mut s, 40, 1e-5, |t, s| {
            let xv = t.constant(x.clone());
            let w1 = t.param(s, s.find("w1").unwrap());
            let b1 = t.param(s, s.find("b1").unwrap());
            let w2 = t.param(s, s.find("w2").unwrap());
            let b2 = t.param(s, s.find("b2").unwrap());
            let h = t.conv(xv, w1, Some(b1), &cfg)?;
            let h = t.leaky_relu(h, 0.2);
            let o = t.conv(h, w2, Some(b2), &cfg)?;
            t.ssim_loss(o, &y, y.max())
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn input_gradient_multi_slice() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        s.add_uniform("x", &[2, 1, 9, 8], 1.0, &mut r);
        let y = Tensor::from_vec(&[2, 1, 9, 8], (0..144).map(|_| r.random::<f64>()).collect()).unwrap();
        let err = gradcheck(&mut s, 144, 1e-5, |t, s| {
            let x = t.param(s, s.find("x").unwrap());
            t.ssim_loss(x, &y, 1.3)
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
