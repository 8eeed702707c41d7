//! Synthetic multi-coil MRI data: ellipsoid phantoms, smooth coil
//! profiles, the coil forward model and undersampling masks.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::array::{next_index, CArray, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::volume::{center_lines, center_range, coil_kspace, AcsRegion, KSpaceVolume};

/// One additive ellipsoid in normalized coordinates `[-1, 1]^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    pub semi_axes: Vec<f64>,
    /// Rotation in the plane of the last two axes.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipsoid {
    fn contains(&self, p: &[f64]) -> bool {
        let d = p.len();
        let mut q: Vec<f64> = p.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (q[d - 2], q[d - 1]);
        q[d - 2] = c * u + s * v;
        q[d - 1] = -s * u + c * v;
        q.iter().zip(&self.semi_axes).map(|(x, a)| (x / a).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Tensor,
    pub seed: u64,
    pub ellipsoids: Vec<Ellipsoid>,
}

fn coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Sum of a head-like outer shell and randomized inner ellipsoids,
/// clipped to `[0, 1]`.
pub fn make_phantom(seed: u64, extents: &[usize]) -> Result<Phantom> {
    if extents.len() < 2 || extents.iter().any(|&e| e < 8) {
        return Err(invalid("make_phantom", format!("need rank ≥ 2 and extents ≥ 8, got {extents:?}")));
    }
    let d = extents.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipsoids = vec![
        Ellipsoid {
            center: vec![0.0; d],
            semi_axes: (0..d).map(|_| rng.random_range(0.78..0.9)).collect(),
            angle: rng.random_range(-0.2..0.2),
            intensity: 0.8,
        },
        Ellipsoid {
            center: vec![0.0; d],
            semi_axes: (0..d).map(|_| rng.random_range(0.66..0.74)).collect(),
            angle: rng.random_range(-0.2..0.2),
            intensity: -0.5,
        },
    ];
    let inner = rng.random_range(4..9);
    for _ in 0..inner {
        ellipsoids.push(Ellipsoid {
            center: (0..d).map(|_| rng.random_range(-0.4..0.4)).collect(),
            semi_axes: (0..d).map(|_| rng.random_range(0.08..0.3)).collect(),
            angle: rng.random_range(0.0..PI),
            intensity: rng.random_range(-0.2..0.5),
        });
    }
    let mut volume = Tensor::zeros(extents);
    let mut idx = vec![0; d];
    let mut p = vec![0.0; d];
    for v in volume.data_mut() {
        for a in 0..d {
            p[a] = coord(idx[a], extents[a]);
        }
        let s: f64 = ellipsoids.iter().filter(|e| e.contains(&p)).map(|e| e.intensity).sum();
        *v = s.clamp(0.0, 1.0);
        next_index(&mut idx, extents);
    }
    Ok(Phantom {
        volume,
        seed,
        ellipsoids,
    })
}

/// `N` smooth complex receive profiles, `(N, spatial...)`, with unit
/// root-sum-of-squares at every position.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilProfileSet {
    pub maps: CArray,
}

/// Gaussian magnitudes centred on a ring just outside the field of view in
/// the plane of the last two axes, each with a gentle linear phase, then
/// normalized pixelwise by their RSS.
pub fn make_coils(n: usize, extents: &[usize], seed: u64) -> Result<CoilProfileSet> {
    if n == 0 || extents.len() < 2 {
        return Err(invalid("make_coils", format!("need ≥ 1 coil and rank ≥ 2, got {n}, {extents:?}")));
    }
    let d = extents.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Coil {
        center: Vec<f64>,
        width: f64,
        phase0: f64,
        ramp: Vec<f64>,
    }
    let coils: Vec<Coil> = (0..n)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / n as f64 + rng.random_range(-0.2..0.2);
            let mut center: Vec<f64> = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
            center[d - 2] = 1.2 * theta.cos();
            center[d - 1] = 1.2 * theta.sin();
            Coil {
                center,
                width: rng.random_range(0.8..1.2),
                phase0: rng.random_range(-PI..PI),
                ramp: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            }
        })
        .collect();
    let m: usize = extents.iter().product();
    let mut data = vec![Complex64::new(0.0, 0.0); n * m];
    let mut idx = vec![0; d];
    let mut p = vec![0.0; d];
    for j in 0..m {
        for a in 0..d {
            p[a] = coord(idx[a], extents[a]);
        }
        let mut ss = 0.0;
        for (c, coil) in coils.iter().enumerate() {
            let r2: f64 = p.iter().zip(&coil.center).map(|(x, c)| (x - c).powi(2)).sum();
            let mag = (-r2 / (2.0 * coil.width * coil.width)).exp();
            let ph = coil.phase0 + p.iter().zip(&coil.ramp).map(|(x, k)| x * k).sum::<f64>();
            let v = Complex64::from_polar(mag, ph);
            ss += v.norm_sqr();
            data[c * m + j] = v;
        }
        let r = ss.sqrt();
        for c in 0..n {
            data[c * m + j] /= r;
        }
        next_index(&mut idx, extents);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(extents);
    Ok(CoilProfileSet {
        maps: CArray::from_vec(&shape, data)?,
    })
}

/// Fully sampled centred k-space `K_i = F(S_i·x) + ε_i` with complex white
/// noise of standard deviation `sigma` per real component.
pub fn simulate_kspace(phantom: &Tensor, coils: &CoilProfileSet, sigma: f64, seed: u64) -> Result<CArray> {
    let sp = &coils.maps.shape()[1..];
    if sp != phantom.shape() {
        return Err(shape_err(
            "simulate_kspace",
            format!("phantom {:?} vs coils {:?}", phantom.shape(), coils.maps.shape()),
        ));
    }
    let m = phantom.len();
    let mut img = coils.maps.clone();
    img.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v *= phantom.data()[i % m]);
    let mut k = coil_kspace(&img);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| invalid("simulate_kspace", e.to_string()))?;
        for v in k.data_mut() {
            *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Random phase-encode lines along spatial axis 1 plus a centre band.
    Random1d,
    /// Every `R`-th line along spatial axes 1 and 2 plus a centre rectangle.
    Equispaced2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Acceleration: the overall factor for `Random1d`, the lattice stride
    /// per phase axis for `Equispaced2d`.
    pub accel: Vec<usize>,
    pub center_fraction: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn random_1d(accel: usize, center_fraction: f64, seed: u64) -> Self {
        Self {
            kind: MaskKind::Random1d,
            accel: vec![accel],
            center_fraction,
            seed,
        }
    }

    pub fn equispaced_2d(accel: [usize; 2], center_fraction: f64) -> Self {
        Self {
            kind: MaskKind::Equispaced2d,
            accel: accel.to_vec(),
            center_fraction,
            seed: 0,
        }
    }
}

/// A binary sampling mask over the spatial extents with its calibration
/// region.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub mask: Tensor,
    pub acs: AcsRegion,
}

impl Mask {
    pub fn sampled_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

/// Whether phase line `i` lies on the stride-`r` lattice through DC.
pub fn on_lattice(i: usize, extent: usize, r: usize) -> bool {
    i % r == (extent / 2) % r
}

pub fn make_mask(spec: &MaskSpec, extents: &[usize]) -> Result<Mask> {
    match spec.kind {
        MaskKind::Random1d => random_1d(spec, extents),
        MaskKind::Equispaced2d => equispaced_2d(spec, extents),
    }
}

fn random_1d(spec: &MaskSpec, extents: &[usize]) -> Result<Mask> {
    if extents.len() < 2 || spec.accel.len() != 1 || spec.accel[0] == 0 {
        return Err(invalid("make_mask", "random-1d needs rank ≥ 2 and one positive acceleration"));
    }
    let p = extents[1];
    let acs_n = center_lines(p, spec.center_fraction);
    let budget = (p as f64 / spec.accel[0] as f64).round() as usize;
    if acs_n == 0 || acs_n > budget {
        return Err(invalid(
            "make_mask",
            format!("{acs_n} centre lines do not fit a budget of {budget} lines (P = {p}, AF = {})", spec.accel[0]),
        ));
    }
    let band = center_range(p, acs_n);
    let outside: Vec<usize> = (0..p).filter(|i| !band.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lines = vec![false; p];
    band.clone().for_each(|i| lines[i] = true);
    for k in index::sample(&mut rng, outside.len(), budget - acs_n) {
        lines[outside[k]] = true;
    }
    let mut ranges: Vec<_> = extents.iter().map(|&e| 0..e).collect();
    ranges[1] = band;
    Ok(Mask {
        mask: line_mask(extents, |idx| lines[idx[1]]),
        acs: AcsRegion { ranges },
    })
}

fn equispaced_2d(spec: &MaskSpec, extents: &[usize]) -> Result<Mask> {
    if extents.len() != 3 || spec.accel.len() != 2 || spec.accel.contains(&0) {
        return Err(invalid("make_mask", "equispaced-2d needs rank 3 and two positive strides"));
    }
    let acs = AcsRegion::centered(extents, spec.center_fraction)?;
    let (rp, rs) = (spec.accel[0], spec.accel[1]);
    let (p, s) = (extents[1], extents[2]);
    let mask = line_mask(extents, |idx| {
        acs.contains(idx) || (on_lattice(idx[1], p, rp) && on_lattice(idx[2], s, rs))
    });
    Ok(Mask { mask, acs })
}

fn line_mask(extents: &[usize], keep: impl Fn(&[usize]) -> bool) -> Tensor {
    let mut m = Tensor::zeros(extents);
    let mut idx = vec![0; extents.len()];
    for v in m.data_mut() {
        if keep(&idx) {
            *v = 1.0;
        }
        next_index(&mut idx, extents);
    }
    m
}

/// `K̄ = M ⊙ K`, broadcast over coils.
pub fn apply_mask(k: &CArray, mask: &Mask) -> Result<KSpaceVolume> {
    KSpaceVolume::undersample(k, &mask.mask, mask.acs.clone())
}

/// One simulated acquisition: ground truth, fully sampled and measured
/// k-space.
#[derive(Clone, Debug)]
pub struct Acquisition {
    /// RSS magnitude of the noiseless coil images.
    pub target: Tensor,
    pub full: CArray,
    pub measured: KSpaceVolume,
}

/// Phantom, coils, forward model and mask from one seed.
pub fn simulate(seed: u64, extents: &[usize], coils: usize, sigma: f64, mask: &MaskSpec) -> Result<Acquisition> {
    let ph = make_phantom(seed, extents)?;
    let cs = make_coils(coils, extents, seed.wrapping_add(1))?;
    let full = simulate_kspace(&ph.volume, &cs, sigma, seed.wrapping_add(2))?;
    let m = make_mask(mask, extents)?;
    let measured = apply_mask(&full, &m)?;
    Ok(Acquisition {
        target: ph.volume,
        full,
        measured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{coil_images, rss};

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        let a = make_phantom(3, &[16, 24]).unwrap();
        let b = make_phantom(3, &[16, 24]).unwrap();
        assert_eq!(a, b);
        assert!(a.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.volume.max() > 0.0);
        let c = make_phantom(4, &[16, 24]).unwrap();
        assert_ne!(a.volume, c.volume);
        assert!(make_phantom(1, &[4, 16]).is_err());
    }

    #[test]
    fn coils_have_unit_rss_and_are_smooth() {
        let c = make_coils(4, &[12, 20, 20], 5).unwrap();
        assert!(rss(&c.maps).data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let one = make_coils(1, &[8, 8], 0).unwrap();
        assert!(one.maps.data().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        // largest step between neighbours along the last axis
        let c = make_coils(8, &[32, 32], 9).unwrap();
        let mut worst: f64 = 0.0;
        for (i, v) in c.maps.data().iter().enumerate() {
            if i % 32 != 31 {
                worst = worst.max((c.maps.data()[i + 1] - v).norm());
            }
        }
        assert!(worst < 0.25, "max neighbour step {worst}");
    }

    #[test]
    fn noiseless_rss_reconstruction_is_exact() {
        let ph = make_phantom(1, &[16, 12]).unwrap();
        let cs = make_coils(3, &[16, 12], 2).unwrap();
        let k = simulate_kspace(&ph.volume, &cs, 0.0, 0).unwrap();
        assert!(rss(&coil_images(&k)).max_abs_diff(&ph.volume) <= 1e-10);
        let n1 = simulate_kspace(&ph.volume, &cs, 0.01, 4).unwrap();
        let n2 = simulate_kspace(&ph.volume, &cs, 0.01, 4).unwrap();
        assert_eq!(n1, n2);
        assert_ne!(n1, k);
    }

    #[test]
    fn single_unit_coil_is_plain_fft() {
        let ph = make_phantom(1, &[8, 8]).unwrap();
        let unit = CoilProfileSet {
            maps: CArray::full(&[1, 8, 8], Complex64::new(1.0, 0.0)),
        };
        let k = simulate_kspace(&ph.volume, &unit, 0.0, 0).unwrap();
        let x = CArray::from_vec(&[1, 8, 8], ph.volume.data().iter().map(|&v| Complex64::new(v, 0.0)).collect())
            .unwrap();
        assert_eq!(k, crate::fft::fft_c(&x, &[1, 2]));
    }

    #[test]
    fn random_mask_line_budget() {
        let m = make_mask(&MaskSpec::random_1d(4, 0.08, 1), &[4, 368]).unwrap();
        assert_eq!(m.acs.ranges[1].len(), 29);
        let lines = (0..368).filter(|&p| m.mask.get(&[0, p]) == 1.0).count();
        assert_eq!(lines, 92);
        assert!((0..4).all(|f| m.mask.get(&[f, 200]) == m.mask.get(&[0, 200])));
        assert_eq!(m, make_mask(&MaskSpec::random_1d(4, 0.08, 1), &[4, 368]).unwrap());
        assert!(make_mask(&MaskSpec::random_1d(8, 0.2, 1), &[4, 100]).is_err());
    }

    #[test]
    fn equispaced_mask_layout() {
        let m = make_mask(&MaskSpec::equispaced_2d([2, 2], 0.16), &[2, 320, 256]).unwrap();
        assert_eq!(m.acs.extents(), vec![2, 51, 41]);
        let r = &m.acs.ranges;
        for p in 0..320 {
            for s in 0..256 {
                let inside = r[1].contains(&p) && r[2].contains(&s);
                let want = inside || (p % 2 == 0 && s % 2 == 0);
                assert_eq!(m.mask.get(&[1, p, s]) == 1.0, want);
            }
        }
    }

    #[test]
    fn masking_is_idempotent_and_counts_match() {
        let acq = simulate(2, &[8, 16], 2, 0.0, &MaskSpec::random_1d(4, 0.25, 3)).unwrap();
        let m = Mask {
            mask: acq.measured.mask.clone(),
            acs: acq.measured.acs.clone(),
        };
        let twice = apply_mask(&acq.measured.data, &m).unwrap();
        assert_eq!(twice, acq.measured);
        let nz = acq.measured.data.data().iter().filter(|v| v.norm() > 0.0).count();
        assert_eq!(nz as f64, m.mask.sum() * 2.0);
        let ones = Mask {
            mask: Tensor::full(&[8, 16], 1.0),
            acs: m.acs.clone(),
        };
        assert_eq!(apply_mask(&acq.full, &ones).unwrap().data, acq.full);
        let zf = crate::volume::zero_filled(&acq.measured);
        assert!(crate::metrics::nmse(&zf, &acq.target).unwrap() > 0.0);
    }
}
