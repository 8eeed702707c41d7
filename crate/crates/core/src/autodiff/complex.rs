//! Complex arithmetic on planar `(B, 2K, spatial...)` data.

use super::{Tape, Var};
use crate::array::Tensor;
use crate::error::{shape_err, Result};

/// Below this root-sum-of-squares a pixel is treated as empty.
pub const RSS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy)]
struct Layout {
    batch: usize,
    k: usize,
    n: usize,
}

fn layout(shape: &[usize]) -> Option<Layout> {
    if shape.len() < 3 || shape[1] % 2 != 0 {
        return None;
    }
    Some(Layout {
        batch: shape[0],
        k: shape[1] / 2,
        n: shape[2..].iter().product(),
    })
}

#[inline]
fn re_idx(l: Layout, b: usize, k: usize, j: usize) -> usize {
    (b * 2 * l.k + k) * l.n + j
}
#[inline]
fn im_idx(l: Layout, b: usize, k: usize, j: usize) -> usize {
    (b * 2 * l.k + l.k + k) * l.n + j
}

/// `out = op(a, b)` with `b` broadcast over batch and channel; `conj_a`
/// selects `conj(a)·b` instead of `a·b`.
fn cmul_raw(a: &Tensor, la: Layout, b: &Tensor, lb: Layout, conj_a: bool) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    let (ad, bd) = (a.data(), b.data());
    let sa = if conj_a { -1.0 } else { 1.0 };
    for bi in 0..la.batch {
        let bb = if lb.batch == 1 { 0 } else { bi };
        for k in 0..la.k {
            let kb = if lb.k == 1 { 0 } else { k };
            for j in 0..la.n {
                let (ar, ai) = (ad[re_idx(la, bi, k, j)], sa * ad[im_idx(la, bi, k, j)]);
                let (br, bim) = (bd[re_idx(lb, bb, kb, j)], bd[im_idx(lb, bb, kb, j)]);
                out[re_idx(la, bi, k, j)] = ar * br - ai * bim;
                out[im_idx(la, bi, k, j)] = ar * bim + ai * br;
            }
        }
    }
    out
}

impl Tape {
    fn complex_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Layout, Layout)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Some(la), Some(lb)) = (layout(sa), layout(sb)) else {
            return Err(shape_err(op, format!("planar complex operands needed, got {sa:?} and {sb:?}")));
        };
        let ok = sa[2..] == sb[2..] && (lb.batch == 1 || lb.batch == la.batch) && (lb.k == 1 || lb.k == la.k);
        if !ok {
            return Err(shape_err(op, format!("{sa:?} cannot broadcast with {sb:?}")));
        }
        Ok((la, lb))
    }

    /// Elementwise complex product `a·b`; `b` may have batch 1 and/or one
    /// complex channel, in which case it is broadcast.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.cmul_impl("cmul", a, b, false)
    }

    /// Elementwise `conj(a)·b` with the same broadcasting as [`Tape::cmul`].
    pub fn cmul_conj(&mut self, a: Var, b: Var) -> Result<Var> {
        self.cmul_impl("cmul_conj", a, b, true)
    }

    fn cmul_impl(&mut self, op: &'static str, a: Var, b: Var, conj_a: bool) -> Result<Var> {
        let (la, lb) = self.complex_pair(op, a, b)?;
        let v = cmul_raw(self.value(a), la, self.value(b), lb, conj_a);
        let v = Tensor::from_vec(self.shape(a), v)?;
        Ok(self.push(
            v,
            &[a, b],
            Box::new(move |c| {
                let (ad, bd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut ga = c.needs[0].then(|| vec![0.0; ad.len()]);
                let mut gb = c.needs[1].then(|| vec![0.0; bd.len()]);
                for bi in 0..la.batch {
                    let bb = if lb.batch == 1 { 0 } else { bi };
                    for k in 0..la.k {
                        let kb = if lb.k == 1 { 0 } else { k };
                        for j in 0..la.n {
                            let (ia_r, ia_i) = (re_idx(la, bi, k, j), im_idx(la, bi, k, j));
                            let (ib_r, ib_i) = (re_idx(lb, bb, kb, j), im_idx(lb, bb, kb, j));
                            let (gr, gi) = (g[ia_r], g[ia_i]);
                            let (ar, ai) = (ad[ia_r], ad[ia_i]);
                            let (br, bim) = (bd[ib_r], bd[ib_i]);
                            if conj_a {
                                // y = conj(a)·b: ga = conj(g)·b, gb = g·a
                                if let Some(ga) = ga.as_mut() {
                                    ga[ia_r] += gr * br + gi * bim;
                                    ga[ia_i] += gr * bim - gi * br;
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[ib_r] += gr * ar - gi * ai;
                                    gb[ib_i] += gr * ai + gi * ar;
                                }
                            } else {
                                // y = a·b: ga = g·conj(b), gb = g·conj(a)
                                if let Some(ga) = ga.as_mut() {
                                    ga[ia_r] += gr * br + gi * bim;
                                    ga[ia_i] += gi * br - gr * bim;
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[ib_r] += gr * ar + gi * ai;
                                    gb[ib_i] += gi * ar - gr * ai;
                                }
                            }
                        }
                    }
                }
                vec![
                    ga.map(|d| Tensor::from_vec(c.inputs[0].shape(), d).unwrap()),
                    gb.map(|d| Tensor::from_vec(c.inputs[1].shape(), d).unwrap()),
                ]
            }),
        ))
    }

    /// Sums over the batch axis, keeping it with extent 1.
    pub fn sum_batch(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("sum_batch", format!("{xs:?}")));
        }
        let per: usize = xs[1..].iter().product();
        let mut out = vec![0.0; per];
        for chunk in self.value(x).data().chunks(per) {
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
        }
        let mut shape = xs.clone();
        shape[0] = 1;
        let v = Tensor::from_vec(&shape, out)?;
        let batch = xs[0];
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let mut g = Vec::with_capacity(batch * per);
                for _ in 0..batch {
                    g.extend_from_slice(c.grad.data());
                }
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), g).unwrap())]
            }),
        ))
    }

    /// Magnitude of each complex value: `(B, 2K, ...) → (B, K, ...)`.
    pub fn magnitude(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let l = layout(&xs).ok_or_else(|| shape_err("magnitude", format!("{xs:?}")))?;
        let mut out = vec![0.0; l.batch * l.k * l.n];
        {
            let d = self.value(x).data();
            for b in 0..l.batch {
                for k in 0..l.k {
                    for j in 0..l.n {
                        let (r, i) = (d[re_idx(l, b, k, j)], d[im_idx(l, b, k, j)]);
                        out[(b * l.k + k) * l.n + j] = (r * r + i * i).sqrt();
                    }
                }
            }
        }
        let mut shape = xs.clone();
        shape[1] = l.k;
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let d = c.inputs[0].data();
                let (g, m) = (c.grad.data(), c.output.data());
                let mut gx = vec![0.0; d.len()];
                for b in 0..l.batch {
                    for k in 0..l.k {
                        for j in 0..l.n {
                            let o = (b * l.k + k) * l.n + j;
                            if m[o] > 0.0 {
                                let s = g[o] / m[o];
                                gx[re_idx(l, b, k, j)] = s * d[re_idx(l, b, k, j)];
                                gx[im_idx(l, b, k, j)] = s * d[im_idx(l, b, k, j)];
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Root-sum-of-squares across the batch (coil) axis:
    /// `(N, 2K, ...) → (1, K, ...)`.
    pub fn rss_batch(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let l = layout(&xs).ok_or_else(|| shape_err("rss_batch", format!("{xs:?}")))?;
        let mut out = vec![0.0; l.k * l.n];
        {
            let d = self.value(x).data();
            for b in 0..l.batch {
                for k in 0..l.k {
                    for j in 0..l.n {
                        let (r, i) = (d[re_idx(l, b, k, j)], d[im_idx(l, b, k, j)]);
                        out[k * l.n + j] += r * r + i * i;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v = v.sqrt());
        }
        let mut shape = xs.clone();
        shape[0] = 1;
        shape[1] = l.k;
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let d = c.inputs[0].data();
                let (g, r) = (c.grad.data(), c.output.data());
                let mut gx = vec![0.0; d.len()];
                for b in 0..l.batch {
                    for k in 0..l.k {
                        for j in 0..l.n {
                            let o = k * l.n + j;
                            if r[o] > 0.0 {
                                let s = g[o] / r[o];
                                gx[re_idx(l, b, k, j)] = s * d[re_idx(l, b, k, j)];
                                gx[im_idx(l, b, k, j)] = s * d[im_idx(l, b, k, j)];
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Divides each coil by the pixelwise root-sum-of-squares across the
    /// batch (coil) axis so that `Σ_i |S_i|² = 1`. Pixels whose RSS is below
    /// [`RSS_FLOOR`] are set to zero.
    pub fn dss(&mut self, s: Var) -> Result<Var> {
        let xs = self.shape(s).to_vec();
        let l = layout(&xs).ok_or_else(|| shape_err("dss", format!("{xs:?}")))?;
        let rss = move |d: &[f64]| -> Vec<f64> {
            let mut r = vec![0.0; l.k * l.n];
            for b in 0..l.batch {
                for k in 0..l.k {
                    for j in 0..l.n {
                        let (x, y) = (d[re_idx(l, b, k, j)], d[im_idx(l, b, k, j)]);
                        r[k * l.n + j] += x * x + y * y;
                    }
                }
            }
            r.iter_mut().for_each(|v| *v = v.sqrt());
            r
        };
        let r = rss(self.value(s).data());
        let mut out = vec![0.0; self.value(s).len()];
        {
            let d = self.value(s).data();
            for b in 0..l.batch {
                for k in 0..l.k {
                    for j in 0..l.n {
                        let rv = r[k * l.n + j];
                        if rv > RSS_FLOOR {
                            out[re_idx(l, b, k, j)] = d[re_idx(l, b, k, j)] / rv;
                            out[im_idx(l, b, k, j)] = d[im_idx(l, b, k, j)] / rv;
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&xs, out)?;
        Ok(self.push(
            v,
            &[s],
            Box::new(move |c| {
                let d = c.inputs[0].data();
                let g = c.grad.data();
                let r = rss(d);
                let mut q = vec![0.0; l.k * l.n];
                for b in 0..l.batch {
                    for k in 0..l.k {
                        for j in 0..l.n {
                            let (ir, ii) = (re_idx(l, b, k, j), im_idx(l, b, k, j));
                            q[k * l.n + j] += g[ir] * d[ir] + g[ii] * d[ii];
                        }
                    }
                }
                let mut gs = vec![0.0; d.len()];
                for b in 0..l.batch {
                    for k in 0..l.k {
                        for j in 0..l.n {
                            let o = k * l.n + j;
                            let rv = r[o];
                            if rv > RSS_FLOOR {
                                let r3 = rv * rv * rv;
                                for idx in [re_idx(l, b, k, j), im_idx(l, b, k, j)] {
                                    gs[idx] = g[idx] / rv - q[o] * d[idx] / r3;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), gs).unwrap())]
            }),
        ))
    }

    /// Generic gather: `out[j] = x[map[j]]`. `map` must be a permutation
    /// of the input indices for the adjoint to be exact.
    fn gather(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let out: Vec<f64> = map.iter().map(|&m| xv[m]).collect();
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let mut gx = vec![0.0; c.inputs[0].len()];
                for (j, &m) in map.iter().enumerate() {
                    gx[m] += c.grad.data()[j];
                }
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Per-coil planar `(N, 2, ...)` to stacked channels `(1, 2N, ...)`
    /// (real parts of all coils first, then imaginary parts).
    pub fn coils_to_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 || xs[1] != 2 {
            return Err(shape_err("coils_to_channels", format!("need (N, 2, ...), got {xs:?}")));
        }
        let (nc, n) = (xs[0], xs[2..].iter().product::<usize>());
        let mut map = Vec::with_capacity(nc * 2 * n);
        for part in 0..2 {
            for coil in 0..nc {
                map.extend((0..n).map(|j| (coil * 2 + part) * n + j));
            }
        }
        let mut shape = xs.clone();
        shape[0] = 1;
        shape[1] = 2 * nc;
        self.gather(x, shape, map)
    }

    /// Inverse of [`Tape::coils_to_channels`].
    pub fn channels_to_coils(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 || xs[0] != 1 || xs[1] % 2 != 0 {
            return Err(shape_err("channels_to_coils", format!("need (1, 2N, ...), got {xs:?}")));
        }
        let (nc, n) = (xs[1] / 2, xs[2..].iter().product::<usize>());
        let mut map = Vec::with_capacity(nc * 2 * n);
        for coil in 0..nc {
            for part in 0..2 {
                map.extend((0..n).map(|j| (part * nc + coil) * n + j));
            }
        }
        let mut shape = xs.clone();
        shape[0] = nc;
        shape[1] = 2;
        self.gather(x, shape, map)
    }
}
