//! The split-slice image stage: overlapping slice blocks along the readout
//! axis, a shared 3D sensitivity network per block, coil fusion and
//! residual refinement cascades, merged back into one volume. The staged
//! pipeline (RAKI, K-Net, this stage) is assembled at the end.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::{CArray, NdArray, Tensor};
use crate::autodiff::{Tape, Var};
use crate::blocks::BlockKind;
use crate::error::{invalid, Error, Result};
use crate::kspace::{knet_train, raki_infer, raki_train, GroupExample, KNetModel, KNetSpec, LrSchedule, RakiSpec};
use crate::params::{ParamStore, Rule};
use crate::simdata::Acquisition;
use crate::unet::{UNet, UNetSpec};
use crate::varnet::{expand, reduce};
use crate::volume::{coils_to_planar, planar_to_coils, KSpaceVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    First,
    Interior,
    Last,
    /// The only block, when `F = L`.
    Whole,
}

/// `L` consecutive slices along the readout axis of an `(N, F, ...)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBlock<T> {
    pub data: NdArray<T>,
    pub start: usize,
    pub role: BlockRole,
}

fn check_split(f: usize, l: usize) -> Result<()> {
    if l == 0 || l % 4 != 0 {
        return Err(invalid("split_slices", format!("block length {l} must be a positive multiple of 4")));
    }
    if f < l || f % (l / 2) != 0 {
        let padded = f.max(l).div_ceil(l / 2) * (l / 2);
        return Err(invalid(
            "split_slices",
            format!("{f} slices do not split into blocks of {l} with stride {}; pad to {padded}", l / 2),
        ));
    }
    Ok(())
}

/// Number of blocks, `2F/L − 1`.
pub fn block_count(f: usize, l: usize) -> Result<usize> {
    check_split(f, l)?;
    Ok(2 * f / l - 1)
}

/// Training items produced by `volumes` volumes of `f` slices.
pub fn training_items(volumes: usize, f: usize, l: usize) -> Result<usize> {
    Ok(volumes * block_count(f, l)?)
}

/// Slices a block contributes to the merged volume, in global indices.
pub fn contribution(start: usize, role: BlockRole, l: usize) -> Range<usize> {
    match role {
        BlockRole::Whole => start..start + l,
        BlockRole::First => start..start + 3 * l / 4,
        BlockRole::Interior => start + l / 4..start + 3 * l / 4,
        BlockRole::Last => start + l / 4..start + l,
    }
}

/// Splits axis 1 of `x` into `2F/L − 1` blocks starting every `L/2` slices.
pub fn split_slices<T: Clone>(x: &NdArray<T>, l: usize) -> Result<Vec<SliceBlock<T>>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(invalid("split_slices", format!("need (N, F, ...), got {shape:?}")));
    }
    let (n, f) = (shape[0], shape[1]);
    let count = block_count(f, l)?;
    let inner: usize = shape[2..].iter().product();
    let mut bshape = shape.to_vec();
    bshape[1] = l;
    (0..count)
        .map(|b| {
            let start = b * l / 2;
            let role = match (b, count) {
                (_, 1) => BlockRole::Whole,
                (0, _) => BlockRole::First,
                (b, c) if b + 1 == c => BlockRole::Last,
                _ => BlockRole::Interior,
            };
            let mut data = Vec::with_capacity(n * l * inner);
            for c in 0..n {
                let base = (c * f + start) * inner;
                data.extend_from_slice(&x.data()[base..base + l * inner]);
            }
            Ok(SliceBlock {
                data: NdArray::from_vec(&bshape, data)?,
                start,
                role,
            })
        })
        .collect()
}

/// Reassembles `F` slices from the blocks of one split; every slice must
/// be contributed by exactly one block.
pub fn merge_slices<T: Clone + Default>(blocks: &[SliceBlock<T>], f: usize) -> Result<NdArray<T>> {
    let first = blocks.first().ok_or_else(|| invalid("merge_slices", "no blocks"))?;
    let bshape = first.data.shape().to_vec();
    let (n, l) = (bshape[0], bshape[1]);
    if blocks.len() != block_count(f, l)? {
        return Err(invalid("merge_slices", format!("{} blocks for {f} slices of length {l}", blocks.len())));
    }
    let inner: usize = bshape[2..].iter().product();
    let mut shape = bshape.clone();
    shape[1] = f;
    let mut out = NdArray::zeros(&shape);
    let mut covered = vec![0u32; f];
    for b in blocks {
        if b.data.shape() != bshape.as_slice() || b.start + l > f {
            return Err(invalid("merge_slices", format!("block at {} with shape {:?}", b.start, b.data.shape())));
        }
        let r = contribution(b.start, b.role, l);
        r.clone().for_each(|s| covered[s] += 1);
        for c in 0..n {
            let src = (c * l + r.start - b.start) * inner;
            let dst = (c * f + r.start) * inner;
            let len = r.len() * inner;
            out.data_mut()[dst..dst + len].clone_from_slice(&b.data.data()[src..src + len]);
        }
    }
    if let Some(s) = covered.iter().position(|&c| c != 1) {
        return Err(invalid("merge_slices", format!("slice {s} covered {} times", covered[s])));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FasNetSpec {
    /// Slices per block `L`.
    pub block: usize,
    /// Refinement cascades `T`.
    pub cascades: usize,
    pub kind: BlockKind,
    pub sens_channels: usize,
    pub sens_levels: usize,
    pub channels: usize,
    pub levels: usize,
    pub schedule: LrSchedule,
}

impl FasNetSpec {
    pub fn standard() -> Self {
        Self {
            block: 16,
            cascades: 2,
            kind: BlockKind::FasterFc,
            sens_channels: 8,
            sens_levels: 2,
            channels: 18,
            levels: 4,
            schedule: LrSchedule::fasnet(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.block == 0 || self.block % 4 != 0 || self.cascades == 0 {
            return Err(invalid("FasNetSpec", format!("{self:?}: L must be a positive multiple of 4 and T ≥ 1")));
        }
        if self.block % (1 << self.levels) != 0 || self.block % (1 << self.sens_levels) != 0 {
            return Err(invalid(
                "FasNetSpec",
                format!("L = {} is not divisible by 2^levels for levels {} / {}", self.block, self.levels, self.sens_levels),
            ));
        }
        Ok(())
    }
}

/// Sensitivity network plus refinement cascades, all 3D.
#[derive(Clone, Debug)]
pub struct FasNet {
    pub spec: FasNetSpec,
    pub sens: UNet,
    pub refiners: Vec<UNet>,
}

impl FasNet {
    /// The last convolution of every network starts at zero, so each
    /// residual stage begins as the identity.
    pub fn new(store: &mut ParamStore, spec: FasNetSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let ss = UNetSpec::new(spec.kind, spec.sens_channels, spec.sens_levels, 2, 2, 3);
        let sens = UNet::new(store, "fas.sens", ss, rng)?;
        sens.out.zero(store);
        let refiners = (0..spec.cascades)
            .map(|c| {
                let rs = UNetSpec::new(spec.kind, spec.channels, spec.levels, 2, 2, 3);
                let net = UNet::new(store, &format!("fas.cascade{c}"), rs, rng)?;
                net.out.zero(store);
                Ok(net)
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, sens, refiners })
    }

    /// Reconstructed complex block `(1, 2, L, P, S)` from coil images
    /// `(N, 2, L, P, S)`.
    pub fn block_forward(&self, t: &mut Tape, s: &ParamStore, coils: Var) -> Result<Var> {
        let maps = estimate_sensitivities_3d(t, coils, |t, x| self.sens.forward(t, s, x))?;
        let x = fuse_coils(t, coils, maps)?;
        cascade_refine(t, x, self.refiners.iter().map(|n| move |t: &mut Tape, x: Var| n.forward(t, s, x)))
    }
}

/// `dSS(x + net(x))` with every coil as a batch item of one shared network.
pub fn estimate_sensitivities_3d(t: &mut Tape, coils: Var, net: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Var> {
    let y = net(t, coils)?;
    let y = t.add(y, coils)?;
    t.dss(y)
}

/// `Σ_i conj(S_i)·x_i`.
pub fn fuse_coils(t: &mut Tape, coils: Var, maps: Var) -> Result<Var> {
    if t.shape(coils) != t.shape(maps) {
        return Err(invalid(
            "fuse_coils",
            format!("coil images {:?} vs maps {:?}", t.shape(coils), t.shape(maps)),
        ));
    }
    reduce(t, coils, maps)
}

/// `x^{t+1} = net_t(x^t) + x^t` for each network in turn.
pub fn cascade_refine<F>(t: &mut Tape, x: Var, nets: impl IntoIterator<Item = F>) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    nets.into_iter().try_fold(x, |x, net| {
        let y = net(t, x)?;
        t.add(y, x)
    })
}

/// One training item: coil images of a block and its magnitude target.
#[derive(Clone, Debug)]
pub struct BlockItem {
    /// `(N, L, P, S)` complex coil images.
    pub coils: CArray,
    /// `(L, P, S)` magnitude.
    pub target: Tensor,
    /// SSIM data range: the maximum of the whole target volume.
    pub range: f64,
}

/// Splits matching coil-image and target volumes into block items.
pub fn block_items(coils: &CArray, target: &Tensor, l: usize) -> Result<Vec<BlockItem>> {
    if coils.shape()[1..] != *target.shape() {
        return Err(invalid("block_items", format!("coils {:?} vs target {:?}", coils.shape(), target.shape())));
    }
    let mut tshape = vec![1];
    tshape.extend_from_slice(target.shape());
    let tb = split_slices(&target.clone().reshape(&tshape)?, l)?;
    let range = target.max();
    split_slices(coils, l)?
        .into_iter()
        .zip(tb)
        .map(|(c, t)| {
            let shape = t.data.shape()[1..].to_vec();
            Ok(BlockItem {
                coils: c.data,
                target: t.data.reshape(&shape)?,
                range,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FasNetModel {
    pub net: FasNet,
    pub store: ParamStore,
}

impl FasNetModel {
    pub fn new(spec: FasNetSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = FasNet::new(&mut store, spec, &mut rng)?;
        Ok(Self { net, store })
    }

    /// `1 − SSIM(|x̄_b|, target)` for one block.
    pub fn loss(&self, t: &mut Tape, item: &BlockItem) -> Result<Var> {
        let x = t.constant(coils_to_planar(&item.coils));
        let y = self.net.block_forward(t, &self.store, x)?;
        let mag = t.rss_batch(y)?;
        let mut shape = vec![1, 1];
        shape.extend_from_slice(item.target.shape());
        t.ssim_loss(mag, &item.target.clone().reshape(&shape)?, item.range)
    }

    /// Magnitude volume `(F, P, S)` from K-Net coil images `(N, F, P, S)`.
    pub fn reconstruct(&self, coils: &CArray) -> Result<Tensor> {
        let blocks = split_slices(coils, self.net.spec.block)?;
        let mut out = Vec::with_capacity(blocks.len());
        for b in blocks {
            let mut t = Tape::inference();
            let x = t.constant(coils_to_planar(&b.data));
            let y = self.net.block_forward(&mut t, &self.store, x)?;
            out.push(SliceBlock {
                data: planar_to_coils(t.value(y))?,
                start: b.start,
                role: b.role,
            });
        }
        let merged = merge_slices(&out, coils.shape()[1])?;
        merged.map(|v| v.norm()).reshape(&coils.shape()[1..])
    }

    /// Adam over every block item once per epoch; returns mean epoch losses.
    pub fn train(&mut self, items: &[BlockItem], schedule: LrSchedule) -> Result<Vec<f64>> {
        let mut history = Vec::with_capacity(schedule.epochs);
        for epoch in 0..schedule.epochs {
            let mut total = 0.0;
            for item in items {
                let mut t = Tape::new();
                let loss = self.loss(&mut t, item)?;
                let l = t.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("fas-net loss at epoch {epoch}")));
                }
                total += l;
                t.backward(loss)?;
                self.store.accumulate_from(&t);
                self.store.step(Rule::adam(), schedule.lr(epoch))?;
            }
            history.push(total / items.len().max(1) as f64);
        }
        Ok(history)
    }
}

pub fn fasnet_reconstruct(model: &FasNetModel, coils: &CArray) -> Result<Tensor> {
    model.reconstruct(coils)
}

/// Trains on `(coil images, magnitude target)` volume pairs.
pub fn fasnet_train(volumes: &[(CArray, Tensor)], spec: FasNetSpec, seed: u64) -> Result<(FasNetModel, Vec<f64>)> {
    let mut items = Vec::new();
    for (c, t) in volumes {
        items.extend(block_items(c, t, spec.block)?);
    }
    let mut m = FasNetModel::new(spec, seed)?;
    let h = m.train(&items, spec.schedule)?;
    Ok((m, h))
}

/// Configuration of the three-stage pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub raki: RakiSpec,
    pub knet: KNetSpec,
    pub knet_schedule: LrSchedule,
    pub fasnet: FasNetSpec,
    pub seed: u64,
}

impl PipelineConfig {
    /// Reduced widths and epochs for 64³ volumes on one CPU core. With so
    /// few K-Net steps, a larger step only adds broadband k-space noise,
    /// so the group stage stays close to its identity start and the
    /// image stage gets most of the budget.
    pub fn desk(coils: usize, rate: usize, block: usize) -> Self {
        let mut raki = RakiSpec::standard(rate);
        raki.epochs = 200;
        Self {
            raki,
            knet: KNetSpec {
                channels: 8,
                levels: 2,
                coils,
                rank: 3,
                residual: true,
            },
            knet_schedule: LrSchedule {
                base: 1e-5,
                decayed: 1e-6,
                switch_epoch: 2,
                epochs: 2,
            },
            fasnet: FasNetSpec {
                block,
                cascades: 2,
                kind: BlockKind::FasterFc,
                sens_channels: 4,
                sens_levels: 1,
                channels: 8,
                levels: 2,
                schedule: LrSchedule {
                    base: 1e-3,
                    decayed: 1e-4,
                    switch_epoch: 8,
                    epochs: 10,
                },
            },
            seed: 0,
        }
    }
}

/// Scan-specific RAKI: one model per coil, trained on this volume's ACS.
pub fn raki_fill(k: &KSpaceVolume, spec: &RakiSpec, seed: u64) -> Result<CArray> {
    let models = (0..k.coils())
        .map(|c| raki_train(k, c, spec, seed.wrapping_add(c as u64)))
        .collect::<Result<Vec<_>>>()?;
    raki_infer(k, &models)
}

/// The trained group stages; RAKI is retrained per scan.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub knet: KNetModel,
    pub fasnet: FasNetModel,
    pub knet_history: Vec<f64>,
    pub fasnet_history: Vec<f64>,
}

/// Stage-wise training: each stage is fixed once trained and its outputs
/// become the next stage's dataset.
pub fn train_pipeline(data: &[Acquisition], config: &PipelineConfig) -> Result<Pipeline> {
    let mut group = Vec::with_capacity(data.len());
    for (i, a) in data.iter().enumerate() {
        let filled = raki_fill(&a.measured, &config.raki, config.seed.wrapping_add(1000 * i as u64))?;
        group.push(GroupExample {
            filled,
            measured: a.measured.clone(),
            target: a.target.clone(),
        });
    }
    let (knet, knet_history) = knet_train(&group, config.knet, config.knet_schedule, config.seed)?;
    let mut volumes = Vec::with_capacity(group.len());
    for ex in &group {
        volumes.push((knet.reconstruct(&ex.filled, &ex.measured)?, ex.target.clone()));
    }
    let (fasnet, fasnet_history) = fasnet_train(&volumes, config.fasnet, config.seed.wrapping_add(1))?;
    Ok(Pipeline {
        config: config.clone(),
        knet,
        fasnet,
        knet_history,
        fasnet_history,
    })
}

impl Pipeline {
    /// Magnitude reconstruction of one undersampled scan.
    pub fn reconstruct(&self, k: &KSpaceVolume, seed: u64) -> Result<Tensor> {
        let filled = raki_fill(k, &self.config.raki, seed)?;
        let coils = self.knet.reconstruct(&filled, k)?;
        self.fasnet.reconstruct(&coils)
    }
}

/// Block extents must satisfy the refinement network's divisibility.
pub fn check_block_extents(spec: &FasNetSpec, spatial: &[usize]) -> Result<()> {
    let f = 1usize << spec.levels.max(spec.sens_levels);
    for (a, &e) in spatial.iter().enumerate().skip(1) {
        if e % f != 0 {
            return Err(Error::Indivisible {
                axis: a + 2,
                extent: e,
                divisor: f,
                padded: e.div_ceil(f) * f,
            });
        }
    }
    block_count(spatial[0], spec.block).map(|_| ())
}

/// Convenience: the block tensor seen by the networks, `(N, 2, L, P, S)`.
pub fn block_planar(b: &SliceBlock<num_complex::Complex64>) -> Tensor {
    coils_to_planar(&b.data)
}

/// `expand` re-exported for symmetry with [`fuse_coils`].
pub fn spread_image(t: &mut Tape, x: Var, maps: Var) -> Result<Var> {
    expand(t, x, maps)
}
