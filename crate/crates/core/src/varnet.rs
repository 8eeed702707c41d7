//! Unrolled multi-coil variational network: learned sensitivity maps,
//! expand/reduce coil operators, an image-domain refinement network and
//! soft data consistency in k-space, repeated over cascades.
//!
//! Coil data on the tape is planar `(N, 2, spatial...)` with coils on the
//! batch axis, so one network serves every coil.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Tensor;
use crate::autodiff::{Tape, Var};
use crate::blocks::BlockKind;
use crate::error::{invalid, Error, Result};
use crate::params::{ParamId, ParamStore, Rule};
use crate::unet::{UNet, UNetSpec};
use crate::volume::{coil_images, coils_to_planar};

pub use crate::volume::{AcsRegion, KSpaceVolume};

/// `x_i = S_i·x`: one image `(1, 2, ...)` to per-coil images `(N, 2, ...)`.
pub fn expand(t: &mut Tape, x: Var, maps: Var) -> Result<Var> {
    t.cmul(maps, x)
}

/// `Σ_i conj(S_i)·x_i`: per-coil images to one image.
pub fn reduce(t: &mut Tape, xs: Var, maps: Var) -> Result<Var> {
    let p = t.cmul_conj(maps, xs)?;
    t.sum_batch(p)
}

/// Sensitivity maps `dSS(net(F⁻¹(mask_center(K̄))))` with every coil passed
/// through `net` as a separate batch item.
pub fn estimate_sensitivities(
    t: &mut Tape,
    k: &KSpaceVolume,
    net: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let center = k.mask_center()?;
    let x = t.constant(coils_to_planar(&coil_images(&center.data)));
    let y = net(t, x)?;
    t.dss(y)
}

/// Refinement term `G(K) = F ∘ expand ∘ net ∘ reduce ∘ F⁻¹ (K)`.
pub fn refine(t: &mut Tape, k: Var, maps: Var, net: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Var> {
    let imgs = t.fft(k, true, true)?;
    let x = reduce(t, imgs, maps)?;
    let y = net(t, x)?;
    let e = expand(t, y, maps)?;
    t.fft(e, false, true)
}

/// `K^{t+1} = K^t − η·M(K^t − K̄) + G(K^t)`.
pub fn cascade_update(t: &mut Tape, k: Var, measured: Var, mask: &Tensor, eta: Var, g: Var) -> Result<Var> {
    let d = t.sub(k, measured)?;
    let dm = t.mul_const(d, mask)?;
    let step = t.mul_scalar(dm, eta)?;
    let k1 = t.sub(k, step)?;
    t.add(k1, g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarNetSpec {
    pub cascades: usize,
    /// Block kind and size of every refinement network.
    pub kind: BlockKind,
    pub channels: usize,
    pub levels: usize,
    /// Block kind and size of the sensitivity network.
    pub sens_kind: BlockKind,
    pub sens_channels: usize,
    pub sens_levels: usize,
    pub rank: usize,
}

impl VarNetSpec {
    /// Both networks of one kind and size.
    pub fn uniform(kind: BlockKind, cascades: usize, channels: usize, levels: usize, rank: usize) -> Self {
        Self {
            cascades,
            kind,
            channels,
            levels,
            sens_kind: kind,
            sens_channels: channels,
            sens_levels: levels,
            rank,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarNet {
    pub spec: VarNetSpec,
    pub sens: UNet,
    pub refiners: Vec<UNet>,
    /// Per-cascade data-consistency weight η, initialized to 1.
    pub etas: Vec<ParamId>,
}

impl VarNet {
    pub fn new(store: &mut ParamStore, spec: VarNetSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.cascades == 0 {
            return Err(invalid("VarNet", "need at least one cascade"));
        }
        let sens_spec = UNetSpec::new(spec.sens_kind, spec.sens_channels, spec.sens_levels, 2, 2, spec.rank);
        let sens = UNet::new(store, "sens", sens_spec, rng)?;
        let mut refiners = Vec::with_capacity(spec.cascades);
        let mut etas = Vec::with_capacity(spec.cascades);
        for c in 0..spec.cascades {
            let rs = UNetSpec::new(spec.kind, spec.channels, spec.levels, 2, 2, spec.rank);
            refiners.push(UNet::new(store, &format!("cascade{c}.net"), rs, rng)?);
            etas.push(store.add(format!("cascade{c}.eta"), Tensor::full(&[1], 1.0)));
        }
        Ok(Self {
            spec,
            sens,
            refiners,
            etas,
        })
    }

    /// Final k-space estimate `K^T`, planar `(N, 2, spatial...)`.
    pub fn kspace(&self, t: &mut Tape, s: &ParamStore, k: &KSpaceVolume) -> Result<Var> {
        let maps = estimate_sensitivities(t, k, |t, x| self.sens.forward(t, s, x))?;
        let measured = t.constant(k.planar());
        let mut kt = measured;
        for (net, &eta) in self.refiners.iter().zip(&self.etas) {
            let g = refine(t, kt, maps, |t, x| net.forward(t, s, x))?;
            let eta = t.param(s, eta);
            kt = cascade_update(t, kt, measured, &k.mask, eta, g)?;
        }
        Ok(kt)
    }

    /// Magnitude image `(1, 1, spatial...)`: RSS of the inverse transform
    /// of the final k-space.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, k: &KSpaceVolume) -> Result<Var> {
        let kt = self.kspace(t, s, k)?;
        let imgs = t.fft(kt, true, true)?;
        t.rss_batch(imgs)
    }
}

#[derive(Clone, Debug)]
pub struct VarNetModel {
    pub net: VarNet,
    pub store: ParamStore,
}

impl VarNetModel {
    pub fn new(spec: VarNetSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = VarNet::new(&mut store, spec, &mut rng)?;
        Ok(Self { net, store })
    }

    /// Reconstructed magnitude over the spatial extents.
    pub fn reconstruct(&self, k: &KSpaceVolume) -> Result<Tensor> {
        let mut t = Tape::inference();
        let y = self.net.forward(&mut t, &self.store, k)?;
        t.value(y).clone().reshape(k.spatial())
    }

    /// One Adam step on `1 − SSIM` against `target` per example; returns the
    /// mean loss before the step.
    pub fn train_step(&mut self, batch: &[(KSpaceVolume, Tensor)], lr: f64) -> Result<f64> {
        let mut total = 0.0;
        for (k, target) in batch {
            let mut t = Tape::new();
            let y = self.net.forward(&mut t, &self.store, k)?;
            let mut shape = vec![1, 1];
            shape.extend_from_slice(target.shape());
            let tgt = target.clone().reshape(&shape)?;
            let loss = t.ssim_loss(y, &tgt, target.max())?;
            let l = t.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::NonFinite("varnet loss".into()));
            }
            total += l;
            t.backward(loss)?;
            self.store.accumulate_from(&t);
        }
        let n = batch.len().max(1) as f64;
        self.store.scale_grads(1.0 / n);
        self.store.step(Rule::adam(), lr)?;
        Ok(total / n)
    }
}

/// Reconstruction with a trained model, as a free function.
pub fn varnet_forward(model: &VarNetModel, k: &KSpaceVolume) -> Result<Tensor> {
    model.reconstruct(k)
}
