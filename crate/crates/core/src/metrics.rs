//! Image quality metrics following the fastMRI conventions.
//!
//! SSIM uses a 7×7 uniform window, `k1 = 0.01`, `k2 = 0.03` and a sample
//! covariance normalization of `n/(n−1)`. Volumes are evaluated slice by
//! slice over their last two axes, with the data range taken from the
//! ground-truth volume maximum.

use crate::array::Tensor;
use crate::error::{invalid, shape_err, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(shape_err(op, format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// `‖pred − gt‖² / ‖gt‖²`.
pub fn nmse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("nmse", pred, gt)?;
    nmse_slice(pred.data(), gt.data())
}

fn nmse_slice(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let den: f64 = gt.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(invalid("nmse", "ground truth is all zero"));
    }
    let num: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(num / den)
}

/// `10·log10(range² / MSE)` with the range set to the ground-truth maximum.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("psnr", pred, gt)?;
    psnr_slice(pred.data(), gt.data(), gt.max())
}

fn psnr_slice(pred: &[f64], gt: &[f64], range: f64) -> Result<f64> {
    if gt.iter().all(|v| *v == 0.0) {
        return Err(invalid("psnr", "ground truth is all zero"));
    }
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / gt.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Slice geometry of a tensor: number of slices, rows, columns.
pub(crate) fn slices_of(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("need at least two axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(op, format!("window {SSIM_WINDOW} larger than slice {h}×{w}")));
    }
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// Means of every valid `win × win` window, via a summed-area table.
pub(crate) fn box_mean(img: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += img[i * w + j];
            sat[(i + 1) * (w + 1) + j + 1] = sat[i * (w + 1) + j + 1] + row;
        }
    }
    let (oh, ow) = (h - win + 1, w - win + 1);
    let inv = 1.0 / (win * win) as f64;
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let s = sat[(i + win) * (w + 1) + j + win] - sat[i * (w + 1) + j + win] - sat[(i + win) * (w + 1) + j]
                + sat[i * (w + 1) + j];
            out[i * ow + j] = s * inv;
        }
    }
    out
}

/// Adjoint of [`box_mean`] without the `1/win²` factor: every pixel
/// receives the sum of the window values whose window covers it.
pub(crate) fn box_scatter(vals: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut sat = vec![0.0; (oh + 1) * (ow + 1)];
    for i in 0..oh {
        let mut row = 0.0;
        for j in 0..ow {
            row += vals[i * ow + j];
            sat[(i + 1) * (ow + 1) + j + 1] = sat[i * (ow + 1) + j + 1] + row;
        }
    }
    let rect = |i0: usize, i1: usize, j0: usize, j1: usize| {
        sat[i1 * (ow + 1) + j1] - sat[i0 * (ow + 1) + j1] - sat[i1 * (ow + 1) + j0] + sat[i0 * (ow + 1) + j0]
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let (i0, i1) = ((i + 1).saturating_sub(win), (i + 1).min(oh));
        for j in 0..w {
            let (j0, j1) = ((j + 1).saturating_sub(win), (j + 1).min(ow));
            out[i * w + j] = rect(i0, i1, j0, j1);
        }
    }
    out
}

/// Per-window quantities shared by the metric and the loss.
pub(crate) struct SsimWindows {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub cov_norm: f64,
}

impl SsimWindows {
    pub fn new(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> Self {
        let win = SSIM_WINDOW;
        let np = (win * win) as f64;
        let cov_norm = np / (np - 1.0);
        let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
        let mu_x = box_mean(x, h, w, win);
        let mu_y = box_mean(y, h, w, win);
        let xx = box_mean(&sq(x, x), h, w, win);
        let yy = box_mean(&sq(y, y), h, w, win);
        let xy = box_mean(&sq(x, y), h, w, win);
        let c1 = (SSIM_K1 * range).powi(2);
        let c2 = (SSIM_K2 * range).powi(2);
        let n = mu_x.len();
        let (mut a1, mut a2, mut b1, mut b2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for k in 0..n {
            let (ux, uy) = (mu_x[k], mu_y[k]);
            let vx = cov_norm * (xx[k] - ux * ux);
            let vy = cov_norm * (yy[k] - uy * uy);
            let vxy = cov_norm * (xy[k] - ux * uy);
            a1[k] = 2.0 * ux * uy + c1;
            a2[k] = 2.0 * vxy + c2;
            b1[k] = ux * ux + uy * uy + c1;
            b2[k] = vx + vy + c2;
        }
        Self {
            mu_x,
            mu_y,
            a1,
            a2,
            b1,
            b2,
            cov_norm,
        }
    }

    pub fn map(&self) -> Vec<f64> {
        (0..self.a1.len())
            .map(|k| self.a1[k] * self.a2[k] / (self.b1[k] * self.b2[k]))
            .collect()
    }
}

/// Mean SSIM of one `h × w` slice.
pub fn ssim_slice(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let m = SsimWindows::new(x, y, h, w, range).map();
    m.iter().sum::<f64>() / m.len() as f64
}

/// Mean SSIM over all slices, data range = ground-truth maximum.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    ssim_with_range(pred, gt, gt.max())
}

pub fn ssim_with_range(pred: &Tensor, gt: &Tensor, range: f64) -> Result<f64> {
    check_pair("ssim", pred, gt)?;
    let (ns, h, w) = slices_of("ssim", gt.shape())?;
    let n = h * w;
    let total: f64 = (0..ns)
        .map(|s| ssim_slice(&pred.data()[s * n..(s + 1) * n], &gt.data()[s * n..(s + 1) * n], h, w, range))
        .sum();
    Ok(total / ns as f64)
}

/// Per-slice and aggregate metrics of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub nmse: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_nmse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn slices(&self) -> usize {
        self.ssim.len()
    }

    /// CSV with a leading `# ` comment line, a header and one row per slice.
    pub fn to_csv(&self, comment: &str) -> String {
        let mut s = format!("# {comment}\nslice-index,nmse,psnr,ssim\n");
        for i in 0..self.slices() {
            s.push_str(&format!("{i},{},{},{}\n", self.nmse[i], self.psnr[i], self.ssim[i]));
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    let finite: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if finite.is_empty() {
        return f64::NAN;
    }
    finite.iter().sum::<f64>() / finite.len() as f64
}

/// Metrics on every slice along the first axis of an `(F, P, S)` volume.
/// The data range for PSNR and SSIM is the volume maximum. A slice whose
/// ground truth is entirely zero has no defined NMSE; it is reported as
/// NaN and left out of the NMSE mean.
pub fn evaluate_volume(pred: &Tensor, gt: &Tensor) -> Result<MetricsReport> {
    check_pair("evaluate_volume", pred, gt)?;
    if gt.ndim() != 3 {
        return Err(shape_err("evaluate_volume", format!("need (F, P, S), got {:?}", gt.shape())));
    }
    let (ns, h, w) = slices_of("evaluate_volume", gt.shape())?;
    let range = gt.max();
    let n = h * w;
    let (mut e, mut p, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..ns {
        let (ps, gs) = (&pred.data()[i * n..(i + 1) * n], &gt.data()[i * n..(i + 1) * n]);
        e.push(nmse_slice(ps, gs).unwrap_or(f64::NAN));
        let mse = ps.iter().zip(gs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
        p.push(if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (range * range / mse).log10()
        });
        s.push(ssim_slice(ps, gs, h, w, range));
    }
    Ok(MetricsReport {
        mean_nmse: mean(&e),
        mean_psnr: mean(&p),
        mean_ssim: mean(&s),
        nmse: e,
        psnr: p,
        ssim: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    /// Every window evaluated independently from the textbook formula.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
        let win = 7;
        let np = 49.0;
        let (c1, c2) = ((0.01 * range) * (0.01 * range), (0.03 * range) * (0.03 * range));
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - win {
            for j in 0..=w - win {
                let px: Vec<f64> = (0..win).flat_map(|a| (0..win).map(move |b| (a, b))).map(|(a, b)| x[(i + a) * w + j + b]).collect();
                let py: Vec<f64> = (0..win).flat_map(|a| (0..win).map(move |b| (a, b))).map(|(a, b)| y[(i + a) * w + j + b]).collect();
                let mx = px.iter().sum::<f64>() / np;
                let my = py.iter().sum::<f64>() / np;
                let vx = px.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / (np - 1.0);
                let vy = py.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / (np - 1.0);
                let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (np - 1.0);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn nmse_cases() {
        let gt = random(&[4, 5], 1);
        assert_eq!(nmse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(nmse(&Tensor::zeros(&[4, 5]), &gt).unwrap(), 1.0);
        assert!((nmse(&gt.scaled(2.0), &gt).unwrap() - 1.0).abs() < 1e-15);
        assert!(nmse(&gt, &Tensor::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn psnr_cases() {
        let gt = Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap();
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        // errors of ±2 give MSE = range² → 0 dB
        let p = Tensor::from_vec(&[2], vec![2.0, 0.0]).unwrap();
        assert!(psnr(&p, &gt).unwrap().abs() < 1e-12);
        let p = Tensor::from_vec(&[2], vec![0.2, 1.8]).unwrap();
        assert!((psnr(&p, &gt).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        for seed in 0..3 {
            let x = random(&[16, 16], 10 + seed);
            let y = random(&[16, 16], 20 + seed);
            let got = ssim(&x, &y).unwrap();
            let want = ssim_oracle(x.data(), y.data(), 16, 16, y.max());
            assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_identity_and_constant() {
        let x = random(&[2, 9, 11], 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::full(&[8, 8], 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_slice() {
        let x = Tensor::zeros(&[6, 10]);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn scatter_is_adjoint_of_box_mean() {
        let x = random(&[9, 12], 4);
        let v = random(&[3, 6], 5);
        let lhs: f64 = box_mean(x.data(), 9, 12, 7).iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = box_scatter(v.data(), 9, 12, 7).iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() / 49.0;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn volume_report() {
        let gt = random(&[5, 8, 8], 6);
        let r = evaluate_volume(&gt, &gt).unwrap();
        assert_eq!(r.slices(), 5);
        assert!(r.nmse.iter().all(|v| *v == 0.0));
        assert!(r.ssim.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let pred = random(&[5, 8, 8], 7);
        let r = evaluate_volume(&pred, &gt).unwrap();
        assert_eq!(r.mean_ssim, r.ssim.iter().sum::<f64>() / 5.0);
        assert!(r.to_csv("x").lines().nth(1) == Some("slice-index,nmse,psnr,ssim"));
    }
}
