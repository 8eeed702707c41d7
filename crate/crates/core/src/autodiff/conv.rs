//! N-dimensional convolution (im2col + GEMM) and the stride-2 transposed
//! convolution used for U-Net upsampling.

use super::{Tape, Var};
use crate::array::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Stride, dilation and zero padding per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub pad_before: Vec<usize>,
    pub pad_after: Vec<usize>,
}

impl ConvCfg {
    /// Stride 1, no dilation, no padding.
    pub fn valid(rank: usize) -> Self {
        Self {
            stride: vec![1; rank],
            dilation: vec![1; rank],
            pad_before: vec![0; rank],
            pad_after: vec![0; rank],
        }
    }

    /// Stride 1 with zero padding that preserves extents. For an even
    /// effective span the extra tap goes after.
    pub fn same(kernel: &[usize], dilation: &[usize]) -> Self {
        let span: Vec<usize> = kernel
            .iter()
            .zip(dilation)
            .map(|(k, d)| (k - 1) * d)
            .collect();
        Self {
            stride: vec![1; kernel.len()],
            dilation: dilation.to_vec(),
            pad_before: span.iter().map(|s| s / 2).collect(),
            pad_after: span.iter().map(|s| s - s / 2).collect(),
        }
    }

    /// Symmetric padding per axis.
    pub fn new(stride: &[usize], dilation: &[usize], padding: &[usize]) -> Self {
        Self {
            stride: stride.to_vec(),
            dilation: dilation.to_vec(),
            pad_before: padding.to_vec(),
            pad_after: padding.to_vec(),
        }
    }

    fn rank(&self) -> usize {
        self.stride.len()
    }

    fn is_pointwise(&self) -> bool {
        self.stride.iter().all(|&s| s == 1)
            && self.pad_before.iter().all(|&p| p == 0)
            && self.pad_after.iter().all(|&p| p == 0)
    }
}

pub fn conv_output_extent(n: usize, k: usize, stride: usize, dil: usize, pb: usize, pa: usize) -> Option<usize> {
    let padded = n + pb + pa;
    let span = dil * (k - 1) + 1;
    if padded < span || stride == 0 {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

/// `C = alpha·A·B + beta·C` on row-major/strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= if m * k > 0 { 1 } else { 0 });
    // SAFETY: callers pass slices covering the full strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

struct Geometry {
    in_sp: Vec<usize>,
    out_sp: Vec<usize>,
    kernel: Vec<usize>,
    cfg: ConvCfg,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
    fn in_pix(&self) -> usize {
        self.in_sp.iter().product()
    }
    fn out_pix(&self) -> usize {
        self.out_sp.iter().product()
    }

    /// Number of output lines (all axes but the last) and their length.
    fn lines(&self) -> (usize, usize) {
        let last = self.out_sp.len() - 1;
        (self.out_sp[..last].iter().product(), self.out_sp[last])
    }

    /// Output lines per tile so that one unfolded tile stays near
    /// `TILE_ELEMS` values.
    fn lines_per_tile(&self, cin: usize) -> usize {
        const TILE_ELEMS: usize = 1 << 18;
        let (n, len) = self.lines();
        (TILE_ELEMS / (cin * self.taps() * len).max(1)).clamp(1, n.max(1))
    }

    /// Visits every (tap, output line) pair for output lines
    /// `first..end`: `f(tap, in_base, out_base, lo, hi, in_start)` where
    /// `out_base` is relative to the first line of the range and output
    /// positions `lo..hi` of the line read input
    /// `in_base + in_start + (o − lo)·stride`.
    fn for_each_run(&self, first: usize, end: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let d = self.in_sp.len();
        let last = d - 1;
        let in_str = crate::array::strides_of(&self.in_sp);
        let outer_shape: Vec<usize> = self.out_sp[..last].to_vec();
        let line_len = self.out_sp[last];
        let mut tap = vec![0usize; d];
        for t in 0..self.taps() {
            let s = self.cfg.stride[last] as isize;
            let off = (tap[last] * self.cfg.dilation[last]) as isize - self.cfg.pad_before[last] as isize;
            let n_in = self.in_sp[last] as isize;
            let n_out = line_len as isize;
            // input = o·s + off must lie in [0, n_in)
            let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
            let hi = if n_in - off <= 0 { 0 } else { ((n_in - off + s - 1) / s).min(n_out) };
            if lo < hi {
                let mut oidx = vec![0usize; last];
                let mut rem = first;
                for a in (0..last).rev() {
                    oidx[a] = rem % outer_shape[a];
                    rem /= outer_shape[a];
                }
                for line in first..end {
                    let mut ok = true;
                    let mut in_base = 0isize;
                    for a in 0..last {
                        let i = (oidx[a] * self.cfg.stride[a] + tap[a] * self.cfg.dilation[a]) as isize
                            - self.cfg.pad_before[a] as isize;
                        if i < 0 || i >= self.in_sp[a] as isize {
                            ok = false;
                            break;
                        }
                        in_base += i * in_str[a] as isize;
                    }
                    if ok {
                        f(t, in_base as usize, (line - first) * line_len, lo as usize, hi as usize, (lo * s + off) as usize);
                    }
                    if last > 0 {
                        crate::array::next_index(&mut oidx, &outer_shape);
                    }
                }
            }
            crate::array::next_index(&mut tap, &self.kernel);
        }
    }

    /// Unfolds output lines `first..end` of one sample `(Cin, in_sp)` into
    /// `(Cin·taps, tile_pix)`.
    fn im2col(&self, x: &[f64], cin: usize, first: usize, end: usize, col: &mut [f64]) {
        let (ip, taps) = (self.in_pix(), self.taps());
        let tp = (end - first) * self.lines().1;
        col[..cin * taps * tp].iter_mut().for_each(|v| *v = 0.0);
        let s = self.cfg.stride[self.in_sp.len() - 1];
        self.for_each_run(first, end, |t, in_base, out_base, lo, hi, i0| {
            for c in 0..cin {
                let src = &x[c * ip + in_base..];
                let dst = &mut col[(c * taps + t) * tp + out_base..];
                if s == 1 {
                    dst[lo..hi].copy_from_slice(&src[i0..i0 + (hi - lo)]);
                } else {
                    for (j, o) in (lo..hi).enumerate() {
                        dst[o] = src[i0 + j * s];
                    }
                }
            }
        });
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds columns back.
    fn col2im(&self, col: &[f64], cin: usize, first: usize, end: usize, gx: &mut [f64]) {
        let (ip, taps) = (self.in_pix(), self.taps());
        let tp = (end - first) * self.lines().1;
        let s = self.cfg.stride[self.in_sp.len() - 1];
        self.for_each_run(first, end, |t, in_base, out_base, lo, hi, i0| {
            for c in 0..cin {
                let src = &col[(c * taps + t) * tp + out_base..];
                let dst = &mut gx[c * ip + in_base..];
                for (j, o) in (lo..hi).enumerate() {
                    dst[i0 + j * s] += src[o];
                }
            }
        });
    }

    /// Tiles of output lines `(first, end)`.
    fn tiles(&self, cin: usize) -> impl Iterator<Item = (usize, usize)> {
        let (n, _) = self.lines();
        let step = self.lines_per_tile(cin);
        (0..n.max(1)).step_by(step).map(move |f| (f, (f + step).min(n.max(1))))
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &Geometry) -> Tensor {
    let (batch, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let (ip, op) = (g.in_pix(), g.out_pix());
    let kdim = cin * g.taps();
    let mut out_shape = vec![batch, cout];
    out_shape.extend_from_slice(&g.out_sp);
    let mut out = vec![0.0; batch * cout * op];
    let pointwise = g.taps() == 1 && g.cfg.is_pointwise();
    let line = g.lines().1;
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * g.lines_per_tile(cin) * line] };
    for b in 0..batch {
        let xb = &x.data()[b * cin * ip..(b + 1) * cin * ip];
        let ob = &mut out[b * cout * op..(b + 1) * cout * op];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(op).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if pointwise {
            gemm(cout, kdim, op, 1.0, w.data(), kdim as isize, 1, xb, op as isize, 1, beta, ob, op as isize, 1);
            continue;
        }
        for (first, end) in g.tiles(cin) {
            let tp = (end - first) * line;
            g.im2col(xb, cin, first, end, &mut col);
            gemm(
                cout,
                kdim,
                tp,
                1.0,
                w.data(),
                kdim as isize,
                1,
                &col,
                tp as isize,
                1,
                beta,
                &mut ob[first * line..],
                op as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&out_shape, out).expect("conv output shape")
}

impl Tape {
    /// N-d convolution. `x` is `(B, Cin, s...)`, `weight` is
    /// `(Cout, Cin, k...)`, `bias` is `(Cout)`.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Option<Var>, cfg: &ConvCfg) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() < 3 || ws.len() != xs.len() {
            return Err(shape_err(
                "conv",
                format!("input {:?} and weight {:?} must have equal rank ≥ 3", xs, ws),
            ));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                "conv",
                format!(
                    "input {:?} has {} channels but weight {:?} expects {}",
                    xs, xs[1], ws, ws[1]
                ),
            ));
        }
        let rank = xs.len() - 2;
        if cfg.rank() != rank || cfg.dilation.len() != rank || cfg.pad_before.len() != rank || cfg.pad_after.len() != rank {
            return Err(invalid("conv", format!("config {:?} does not match spatial rank {rank}", cfg)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let mut out_sp = Vec::with_capacity(rank);
        for a in 0..rank {
            let e = conv_output_extent(
                xs[2 + a],
                ws[2 + a],
                cfg.stride[a],
                cfg.dilation[a],
                cfg.pad_before[a],
                cfg.pad_after[a],
            )
            .ok_or_else(|| shape_err("conv", format!("kernel {:?} larger than padded input {:?}", ws, xs)))?;
            out_sp.push(e);
        }
        let geom = Geometry {
            in_sp: xs[2..].to_vec(),
            out_sp,
            kernel: ws[2..].to_vec(),
            cfg: cfg.clone(),
        };
        let v = conv_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &geom);
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            v,
            &parents,
            Box::new(move |c| {
                let x = c.inputs[0];
                let w = c.inputs[1];
                let (batch, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let (ip, op) = (geom.in_pix(), geom.out_pix());
                let kdim = cin * geom.taps();
                let pointwise = geom.taps() == 1 && geom.cfg.is_pointwise();
                let mut gx = c.needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = c.needs[1].then(|| vec![0.0; w.len()]);
                let line = geom.lines().1;
                let tile = geom.lines_per_tile(cin) * line;
                let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * tile] };
                let mut gcol = if pointwise || gx.is_none() { Vec::new() } else { vec![0.0; kdim * tile] };
                for b in 0..batch {
                    let gb = &c.grad.data()[b * cout * op..(b + 1) * cout * op];
                    let xb = &x.data()[b * cin * ip..(b + 1) * cin * ip];
                    if pointwise {
                        if let Some(gw) = gw.as_mut() {
                            // gW (cout × cin) += G (cout × op) · Xᵀ (op × cin)
                            gemm(cout, op, kdim, 1.0, gb, op as isize, 1, xb, 1, op as isize, 1.0, gw, kdim as isize, 1);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gxb = &mut gx[b * cin * ip..(b + 1) * cin * ip];
                            gemm(cin, cout, op, 1.0, w.data(), 1, kdim as isize, gb, op as isize, 1, 1.0, gxb, op as isize, 1);
                        }
                        continue;
                    }
                    for (first, end) in geom.tiles(cin) {
                        let tp = (end - first) * line;
                        let gt = &gb[first * line..];
                        if let Some(gw) = gw.as_mut() {
                            geom.im2col(xb, cin, first, end, &mut col);
                            gemm(cout, tp, kdim, 1.0, gt, op as isize, 1, &col, 1, tp as isize, 1.0, gw, kdim as isize, 1);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gxb = &mut gx[b * cin * ip..(b + 1) * cin * ip];
                            gemm(kdim, cout, tp, 1.0, w.data(), 1, kdim as isize, gt, op as isize, 1, 0.0, &mut gcol, tp as isize, 1);
                            geom.col2im(&gcol, cin, first, end, gxb);
                        }
                    }
                }
                let mut res = vec![
                    gx.map(|d| Tensor::from_vec(x.shape(), d).unwrap()),
                    gw.map(|d| Tensor::from_vec(w.shape(), d).unwrap()),
                ];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut gb = vec![0.0; cout];
                        for b in 0..batch {
                            for (co, acc) in gb.iter_mut().enumerate() {
                                let s = (b * cout + co) * op;
                                *acc += c.grad.data()[s..s + op].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_vec(&[cout], gb).unwrap()
                    }));
                }
                res
            }),
        ))
    }

    /// Transposed convolution with kernel 2 and stride 2 on every spatial
    /// axis; doubles each extent. `weight` is `(Cin, Cout, 2, ..., 2)`.
    pub fn conv_transpose2(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() < 3 || ws.len() != xs.len() || xs[1] != ws[0] {
            return Err(shape_err(
                "conv_transpose2",
                format!("input {:?} incompatible with weight {:?}", xs, ws),
            ));
        }
        let rank = xs.len() - 2;
        if stride.len() != rank || stride.iter().any(|&s| s != 2) || ws[2..].iter().any(|&k| k != 2) {
            return Err(invalid(
                "conv_transpose2",
                format!("only kernel 2 / stride 2 is supported, got kernel {:?} stride {:?}", &ws[2..], stride),
            ));
        }
        let cout = ws[1];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose2", format!("bias {:?} for {} outputs", self.shape(b), cout)));
            }
        }
        let in_sp = xs[2..].to_vec();
        let out_sp: Vec<usize> = in_sp.iter().map(|e| e * 2).collect();
        let taps = 1usize << rank;
        let ip: usize = in_sp.iter().product();
        let op: usize = out_sp.iter().product();
        // output offset of each input position and each tap
        let ostr = crate::array::strides_of(&out_sp);
        let mut base = Vec::with_capacity(ip);
        let mut idx = vec![0usize; rank];
        for _ in 0..ip {
            base.push(idx.iter().zip(&ostr).map(|(i, s)| 2 * i * s).sum::<usize>());
            crate::array::next_index(&mut idx, &in_sp);
        }
        let tap_off: Vec<usize> = (0..taps)
            .map(|t| (0..rank).map(|a| ((t >> (rank - 1 - a)) & 1) * ostr[a]).sum())
            .collect();
        let batch = xs[0];
        let cin = xs[1];
        let ct = cout * taps;
        let mut out = vec![0.0; batch * cout * op];
        let mut y = vec![0.0; ct * ip];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            for b in 0..batch {
                // Y (ct × ip) = Wᵀ (ct × cin) · X (cin × ip)
                gemm(ct, cin, ip, 1.0, wv, 1, ct as isize, &xv[b * cin * ip..], ip as isize, 1, 0.0, &mut y, ip as isize, 1);
                let ob = &mut out[b * cout * op..(b + 1) * cout * op];
                for co in 0..cout {
                    let bv = bias.map(|bb| self.value(bb).data()[co]).unwrap_or(0.0);
                    for (t, toff) in tap_off.iter().enumerate() {
                        let row = &y[(co * taps + t) * ip..(co * taps + t + 1) * ip];
                        for (p, &v) in row.iter().enumerate() {
                            ob[co * op + base[p] + toff] = v + bv;
                        }
                    }
                }
            }
        }
        let mut shape = vec![batch, cout];
        shape.extend_from_slice(&out_sp);
        let v = Tensor::from_vec(&shape, out)?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            v,
            &parents,
            Box::new(move |c| {
                let xv = c.inputs[0].data();
                let wv = c.inputs[1].data();
                let mut gy = vec![0.0; ct * ip];
                let mut gx = c.needs[0].then(|| vec![0.0; xv.len()]);
                let mut gw = c.needs[1].then(|| vec![0.0; wv.len()]);
                let mut gb = vec![0.0; cout];
                for b in 0..batch {
                    let g = &c.grad.data()[b * cout * op..(b + 1) * cout * op];
                    for co in 0..cout {
                        gb[co] += g[co * op..(co + 1) * op].iter().sum::<f64>();
                        for (t, toff) in tap_off.iter().enumerate() {
                            let row = &mut gy[(co * taps + t) * ip..(co * taps + t + 1) * ip];
                            for (p, r) in row.iter_mut().enumerate() {
                                *r = g[co * op + base[p] + toff];
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(cin, ct, ip, 1.0, wv, ct as isize, 1, &gy, ip as isize, 1, 0.0, &mut gx[b * cin * ip..], ip as isize, 1);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(cin, ip, ct, 1.0, &xv[b * cin * ip..], ip as isize, 1, &gy, 1, ip as isize, 1.0, gw, ct as isize, 1);
                    }
                }
                let mut res = vec![
                    gx.map(|d| Tensor::from_vec(c.inputs[0].shape(), d).unwrap()),
                    gw.map(|d| Tensor::from_vec(c.inputs[1].shape(), d).unwrap()),
                ];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| Tensor::from_vec(&[cout], gb).unwrap()));
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct summation over the definition, any rank.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, cfg: &ConvCfg) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let rank = xs.len() - 2;
        let out_sp: Vec<usize> = (0..rank)
            .map(|a| {
                conv_output_extent(xs[2 + a], ws[2 + a], cfg.stride[a], cfg.dilation[a], cfg.pad_before[a], cfg.pad_after[a])
                    .unwrap()
            })
            .collect();
        let mut shape = vec![xs[0], ws[0]];
        shape.extend_from_slice(&out_sp);
        let mut out = Tensor::zeros(&shape);
        let mut oi = vec![0usize; shape.len()];
        loop {
            let (bi, co) = (oi[0], oi[1]);
            let mut acc = b.map(|b| b.data()[co]).unwrap_or(0.0);
            for ci in 0..xs[1] {
                let mut k = vec![0usize; rank];
                loop {
                    let mut idx = vec![bi, ci];
                    let mut ok = true;
                    for a in 0..rank {
                        let i = (oi[2 + a] * cfg.stride[a] + k[a] * cfg.dilation[a]) as isize - cfg.pad_before[a] as isize;
                        if i < 0 || i >= xs[2 + a] as isize {
                            ok = false;
                        }
                        idx.push(i.max(0) as usize);
                    }
                    if ok {
                        let mut widx = vec![co, ci];
                        widx.extend_from_slice(&k);
                        acc += x.get(&idx) * w.get(&widx);
                    }
                    if !crate::array::next_index(&mut k, &ws[2..]) {
                        break;
                    }
                }
            }
            out.set(&oi, acc);
            if !crate::array::next_index(&mut oi, &shape) {
                break;
            }
        }
        out
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[2, 3, 4, 5], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0);
        }
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w);
        let bv = t.constant(Tensor::zeros(&[3]));
        let y = t.conv(xv, wv, Some(bv), &ConvCfg::valid(2)).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn box_filter_on_constant_field() {
        let x = Tensor::full(&[1, 1, 5, 5], 2.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x), t.constant(w));
        let y = t.conv(xv, wv, None, &ConvCfg::same(&[3, 3], &[1, 1])).unwrap();
        let y = t.value(y);
        for i in 0..5 {
            for j in 0..5 {
                let rows = if i == 0 || i == 4 { 2 } else { 3 };
                let cols = if j == 0 || j == 4 { 2 } else { 3 };
                let want = 2.0 * (rows * cols) as f64 / 9.0;
                assert!((y.get(&[0, 0, i, j]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dilated_two_tap() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x), t.constant(w));
        let cfg = ConvCfg::new(&[1], &[2], &[0]);
        let y = t.conv(xv, wv, None, &cfg).unwrap();
        assert_eq!(t.value(y).data(), &[101.0, 1010.0]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = t.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let e = t.conv(x, w, None, &ConvCfg::same(&[3, 3], &[1, 1])).unwrap_err().to_string();
        assert!(e.contains("[1, 3, 4, 4]") && e.contains("[2, 4, 3, 3]"), "{e}");
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cases: Vec<(Vec<usize>, Vec<usize>, ConvCfg)> = vec![
            (vec![2, 3, 7, 6], vec![4, 3, 3, 3], ConvCfg::same(&[3, 3], &[1, 1])),
            (vec![1, 2, 7, 6], vec![3, 2, 3, 2], ConvCfg::new(&[2, 1], &[1, 2], &[1, 0])),
            (vec![1, 2, 6, 5, 4], vec![2, 2, 3, 3, 3], ConvCfg::same(&[3, 3, 3], &[1, 1, 1])),
            (
                vec![1, 4, 8, 6, 6],
                vec![3, 4, 5, 2, 2],
                ConvCfg {
                    stride: vec![1, 1, 1],
                    dilation: vec![1, 2, 2],
                    pad_before: vec![2, 2, 2],
                    pad_after: vec![2, 0, 0],
                },
            ),
        ];
        for (xs, ws, cfg) in cases {
            let x = rand_t(&xs, &mut rng);
            let w = rand_t(&ws, &mut rng);
            let b = rand_t(&[ws[0]], &mut rng);
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv(xv, wv, Some(bv), &cfg).unwrap();
            let want = conv_oracle(&x, &w, Some(&b), &cfg);
            assert!(t.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add("x", rand_t(&[2, 3, 5, 4], &mut rng));
        s.add("w", rand_t(&[2, 3, 3, 2], &mut rng));
        s.add("b", rand_t(&[2], &mut rng));
        let target = rand_t(&[2, 2, 5, 4], &mut rng);
        let cfg = ConvCfg {
            stride: vec![1, 1],
            dilation: vec![1, 2],
            pad_before: vec![1, 2],
            pad_after: vec![1, 0],
        };
        let err = gradcheck(&mut s, 20, 1e-5, |t, s| {
            let x = t.param(s, s.find("x").unwrap());
            let w = t.param(s, s.find("w").unwrap());
            let b = t.param(s, s.find("b").unwrap());
            let y = t.conv(x, w, Some(b), &cfg)?;
            t.mse(y, &target)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn transposed_single_tap_expansion() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 1, 1, 1], 3.5));
        let w = t.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = t.conv_transpose2(x, w, None, &[2, 2]).unwrap();
        assert_eq!(t.value(y), &Tensor::full(&[1, 1, 2, 2], 3.5));
    }

    #[test]
    fn transposed_rejects_other_strides() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(t.conv_transpose2(x, w, None, &[2, 2]).is_err());
        let w2 = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(t.conv_transpose2(x, w2, None, &[1, 1]).is_err());
    }

    #[test]
    fn transposed_then_pool_gives_kernel_mean() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 1, 2, 3], 2.0));
        let w = t.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.conv_transpose2(x, w, None, &[2, 2]).unwrap();
        let p = t.avg_pool(y, &[2, 2]).unwrap();
        // each 2×2 window holds value·(1+2+3+4) spread over four taps
        assert!(t.value(p).data().iter().all(|v| (v - 2.0 * 10.0 / 4.0).abs() < 1e-14));
    }

    #[test]
    fn transposed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        s.add("x", rand_t(&[1, 2, 4, 4], &mut rng));
        s.add("w", rand_t(&[2, 3, 2, 2], &mut rng));
        s.add("b", rand_t(&[3], &mut rng));
        let target = rand_t(&[1, 3, 8, 8], &mut rng);
        let err = gradcheck(&mut s, 64, 1e-5, |t, s| {
            let x = t.param(s, s.find("x").unwrap());
            let w = t.param(s, s.find("w").unwrap());
            let b = t.param(s, s.find("b").unwrap());
            let y = t.conv_transpose2(x, w, Some(b), &[2, 2])?;
            t.mse(y, &target)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");

        let mut s3 = ParamStore::new();
        s3.add("x", rand_t(&[1, 2, 2, 2, 2], &mut rng));
        s3.add("w", rand_t(&[2, 2, 2, 2, 2], &mut rng));
        let target = rand_t(&[1, 2, 4, 4, 4], &mut rng);
        let err = gradcheck(&mut s3, 64, 1e-5, |t, s| {
            let x = t.param(s, s.find("x").unwrap());
            let w = t.param(s, s.find("w").unwrap());
            let y = t.conv_transpose2(x, w, None, &[2, 2, 2])?;
            t.mse(y, &target)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
