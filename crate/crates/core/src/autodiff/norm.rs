use super::{Tape, Var};
use crate::array::Tensor;
use crate::error::{shape_err, Result};

impl Tape {
    /// Instance normalization: per sample and channel, subtract the spatial
    /// mean and divide by `sqrt(var + eps)` (biased variance), then apply
    /// the per-channel affine `scale·x̂ + shift`.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(shape_err("instance_norm", format!("need (B, C, spatial...), got {xs:?}")));
        }
        let (batch, ch) = (xs[0], xs[1]);
        if self.shape(scale) != [ch] || self.shape(shift) != [ch] {
            return Err(shape_err(
                "instance_norm",
                format!(
                    "scale {:?} / shift {:?} for {} channels",
                    self.shape(scale),
                    self.shape(shift),
                    ch
                ),
            ));
        }
        let n: usize = xs[2..].iter().product();
        let mut mean = vec![0.0; batch * ch];
        let mut inv_std = vec![0.0; batch * ch];
        let mut out = vec![0.0; batch * ch * n];
        {
            let xv = self.value(x).data();
            let g = self.value(scale).data();
            let bta = self.value(shift).data();
            for (bc, (src, dst)) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
                let c = bc % ch;
                let m = sum(src.iter().copied()) / n as f64;
                let var = sum(src.iter().map(|v| (v - m) * (v - m))) / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                mean[bc] = m;
                inv_std[bc] = is;
                let (a, b) = (g[c] * is, bta[c] - g[c] * is * m);
                dst.iter_mut().zip(src).for_each(|(o, v)| *o = a * v + b);
            }
        }
        let v = Tensor::from_vec(&xs, out)?;
        Ok(self.push(
            v,
            &[x, scale, shift],
            Box::new(move |c| {
                let g = c.grad.data();
                let xv = c.inputs[0].data();
                let gamma = c.inputs[1].data();
                let mut gx = vec![0.0; if c.needs[0] { g.len() } else { 0 }];
                let mut ggamma = vec![0.0; ch];
                let mut gbeta = vec![0.0; ch];
                for bc in 0..batch * ch {
                    let ci = bc % ch;
                    let gs = &g[bc * n..(bc + 1) * n];
                    let xs = &xv[bc * n..(bc + 1) * n];
                    let (m, is) = (mean[bc], inv_std[bc]);
                    let sum_g = sum(gs.iter().copied());
                    let sum_gh = sum(gs.iter().zip(xs).map(|(gv, xv)| gv * (xv - m) * is));
                    ggamma[ci] += sum_gh;
                    gbeta[ci] += sum_g;
                    if c.needs[0] {
                        // dx = γ·inv_std/n · (n·g − Σg − x̂·Σ(g·x̂))
                        let k = gamma[ci] * is / n as f64;
                        let nf = n as f64;
                        gx[bc * n..(bc + 1) * n]
                            .iter_mut()
                            .zip(gs.iter().zip(xs))
                            .for_each(|(o, (gv, xv))| *o = k * (nf * gv - sum_g - (xv - m) * is * sum_gh));
                    }
                }
                vec![
                    c.needs[0].then(|| Tensor::from_vec(c.inputs[0].shape(), gx).unwrap()),
                    c.needs[1].then(|| Tensor::from_vec(&[ch], ggamma).unwrap()),
                    c.needs[2].then(|| Tensor::from_vec(&[ch], gbeta).unwrap()),
                ]
            }),
        ))
    }
}

/// Sum with four independent accumulators, so long reductions are not
/// bound by the latency of one addition chain.
fn sum(it: impl Iterator<Item = f64>) -> f64 {
    let mut acc = [0.0; 4];
    for (i, v) in it.enumerate() {
        acc[i & 3] += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}
