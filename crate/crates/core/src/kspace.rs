//! The k-space stage: scan-specific RAKI interpolation per coil, then a
//! K-Net trained across volumes with cross-domain pooling, soft data
//! consistency and an SSIM loss on the coil-combined magnitude.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::{next_index, CArray, Tensor};
use crate::autodiff::{ConvCfg, Tape, Var};
use crate::blocks::{Block, TwoConvBlock};
use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::Conv;
use crate::params::{ParamId, ParamStore, Rule};
use crate::simdata::on_lattice;
use crate::volume::{coils_to_channels, coils_to_planar, extract_region, KSpaceVolume};

pub use crate::volume::{rss, AcsRegion};

/// Three-layer dilated convolutional interpolator, one per coil.
#[derive(Clone, Debug, PartialEq)]
pub struct RakiSpec {
    /// Kernel extents per layer, frequency axis first.
    pub kernels: [Vec<usize>; 3],
    /// Hidden widths `n1`, `n2`.
    pub widths: [usize; 2],
    /// Undersampling rate along each phase axis.
    pub rate: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
}

impl RakiSpec {
    /// The 3D configuration for rate `r` along both phase axes.
    pub fn standard(r: usize) -> Self {
        Self {
            kernels: [vec![5, 2, 2], vec![1, 1, 1], vec![3, 2, 2]],
            widths: [32, 8],
            rate: vec![r, r],
            lr: 0.003,
            epochs: 1000,
            momentum: 0.9,
        }
    }

    fn rank(&self) -> usize {
        self.kernels[0].len()
    }

    /// Output channels: real and imaginary part for every offset inside
    /// one lattice cell.
    pub fn n_out(&self) -> usize {
        2 * self.rate.iter().product::<usize>()
    }

    fn validate(&self, spatial: &[usize]) -> Result<()> {
        let d = self.rank();
        let ok = d == spatial.len()
            && self.kernels.iter().all(|k| k.len() == d && !k.contains(&0))
            && self.rate.len() + 1 == d
            && !self.rate.contains(&0)
            && self.kernels[1].iter().all(|&k| k == 1);
        if !ok {
            return Err(invalid("RakiSpec", format!("{self:?} does not fit spatial extents {spatial:?}")));
        }
        Ok(())
    }
}

/// Lattice of guaranteed samples: every `rate`-th line through DC on each
/// phase axis, all frequency positions.
pub fn lattice_mask(spatial: &[usize], rate: &[usize]) -> Tensor {
    let mut m = Tensor::zeros(spatial);
    let mut idx = vec![0; spatial.len()];
    for v in m.data_mut() {
        if (1..spatial.len()).all(|a| on_lattice(idx[a], spatial[a], rate[a - 1])) {
            *v = 1.0;
        }
        next_index(&mut idx, spatial);
    }
    m
}

fn masked(x: &CArray, m: &Tensor) -> CArray {
    let n = m.len();
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v *= m.data()[i % n]);
    out
}

#[derive(Clone, Debug)]
pub struct RakiModel {
    pub coil: usize,
    pub spec: RakiSpec,
    pub layers: [Conv; 3],
    pub store: ParamStore,
    /// Inputs are divided by this before the network and outputs multiplied.
    pub scale: f64,
    /// Training loss per epoch (normalized units).
    pub losses: Vec<f64>,
}

impl RakiModel {
    fn new(coils: usize, coil: usize, spec: &RakiSpec, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.rank();
        let rate = |a: usize| if a == 0 { 1 } else { spec.rate[a - 1] };
        let dil: Vec<usize> = (0..d).map(rate).collect();
        // first layer reads the lattice points at offsets {−R, 0}, the last
        // reads {0, +R}: together each cell sees both of its neighbours
        let cfg = |k: &[usize], before: bool| {
            let mut c = ConvCfg::same(k, &dil);
            for a in 1..d {
                let span = (k[a] - 1) * dil[a];
                c.pad_before[a] = if before { span } else { 0 };
                c.pad_after[a] = span - c.pad_before[a];
            }
            c
        };
        let mut store = ParamStore::new();
        let [n1, n2] = spec.widths;
        let k = &spec.kernels;
        let l1 = Conv::with_cfg(&mut store, "w1", 2 * coils, n1, &k[0], cfg(&k[0], true), false, rng);
        let l2 = Conv::with_cfg(&mut store, "w2", n1, n2, &k[1], ConvCfg::valid(d), false, rng);
        let l3 = Conv::with_cfg(&mut store, "w3", n2, spec.n_out(), &k[2], cfg(&k[2], false), false, rng);
        if n1 % 2 == 0 && n2 % 2 == 0 {
            mirror_init(&mut store, [&l1, &l2, &l3]);
        }
        Self {
            coil,
            spec: spec.clone(),
            layers: [l1, l2, l3],
            store,
            scale: 1.0,
            losses: Vec::new(),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let s = &self.store;
        let h = self.layers[0].forward(t, s, x)?;
        let h = t.relu(h);
        let h = self.layers[1].forward(t, s, h)?;
        let h = t.relu(h);
        self.layers[2].forward(t, s, h)
    }
}

/// Antithetic initialization: hidden units come in pairs `(u, −u)` wired
/// so that `relu(u) − relu(−u) = u` at every layer, making the network
/// exactly linear at the start.
fn mirror_init(store: &mut ParamStore, layers: [&Conv; 3]) {
    let [l1, l2, l3] = layers;
    let (h1, h2) = (l1.cout / 2, l2.cout / 2);
    // w1: (n1, cin, k...) second half negates the first
    let w = store.value_mut(l1.weight).data_mut();
    let row = w.len() / l1.cout;
    let (a, b) = w.split_at_mut(h1 * row);
    b[..h1 * row].iter_mut().zip(a.iter()).for_each(|(b, a)| *b = -a);
    // w2: (n2, n1) blocks [[C, −C], [−C, C]]
    let w = store.value_mut(l2.weight).data_mut();
    let n1 = l2.cin;
    for o in 0..h2 {
        for i in 0..h1 {
            let c = w[o * n1 + i];
            w[o * n1 + h1 + i] = -c;
            w[(h2 + o) * n1 + i] = -c;
            w[(h2 + o) * n1 + h1 + i] = c;
        }
    }
    // w3: (n_out, n2, k...) input blocks [D, −D]
    let w = store.value_mut(l3.weight).data_mut();
    let taps = w.len() / (l3.cout * l3.cin);
    for o in 0..l3.cout {
        for i in 0..h2 {
            for k in 0..taps {
                w[(o * l3.cin + h2 + i) * taps + k] = -w[(o * l3.cin + i) * taps + k];
            }
        }
    }
}

/// Training problem for one coil: lattice-only ACS input, per-offset
/// targets at every anchor whose receptive field lies inside the ACS.
struct RakiProblem {
    input: Tensor,
    target: Tensor,
    weight: Tensor,
}

fn raki_problem(k: &KSpaceVolume, coil: usize, spec: &RakiSpec, scale: f64) -> Result<RakiProblem> {
    let sp = k.spatial().to_vec();
    let d = sp.len();
    let acs = &k.acs;
    for a in 1..d {
        let r = spec.rate[a - 1];
        if acs.ranges[a].len() < 2 * r + 1 {
            return Err(invalid(
                "raki_train",
                format!(
                    "calibration region spans {} lines on axis {a}; at least {} are needed for rate {r}",
                    acs.ranges[a].len(),
                    2 * r + 1
                ),
            ));
        }
    }
    let block = extract_region(&k.data, acs)?;
    let ext = acs.extents();
    let global = |idx: &[usize], a: usize| acs.ranges[a].start + idx[a];
    // lattice of the block in global coordinates
    let mut lat = Tensor::zeros(&ext);
    let mut idx = vec![0; d];
    for v in lat.data_mut() {
        if (1..d).all(|a| on_lattice(global(&idx, a), sp[a], spec.rate[a - 1])) {
            *v = 1.0;
        }
        next_index(&mut idx, &ext);
    }
    let mut input = coils_to_channels(&masked(&block, &lat));
    input.data_mut().iter_mut().for_each(|v| *v /= scale);

    let cell: Vec<usize> = spec.rate.clone();
    let cells: usize = cell.iter().product();
    let m: usize = ext.iter().product();
    let strides = crate::array::strides_of(&ext);
    let mut target = vec![0.0; 2 * cells * m];
    let mut weight = vec![0.0; 2 * cells * m];
    let coil_data = &block.data()[coil * m..(coil + 1) * m];
    let mut idx = vec![0; d];
    let mut anchors = 0;
    for j in 0..m {
        let anchor = lat.data()[j] == 1.0
            && (1..d).all(|a| {
                let r = spec.rate[a - 1];
                idx[a] >= r && idx[a] + r < ext[a]
            });
        if anchor {
            anchors += 1;
            let mut off = vec![0; d - 1];
            for c in 0..cells {
                let pos: usize = j + (1..d).map(|a| off[a - 1] * strides[a]).sum::<usize>();
                let v = coil_data[pos] / scale;
                target[c * m + j] = v.re;
                target[(cells + c) * m + j] = v.im;
                weight[c * m + j] = 1.0;
                weight[(cells + c) * m + j] = 1.0;
                next_index(&mut off, &cell);
            }
        }
        next_index(&mut idx, &ext);
    }
    if anchors == 0 {
        return Err(invalid("raki_train", "no lattice anchor inside the calibration region"));
    }
    let mut shape = vec![1, 2 * cells];
    shape.extend_from_slice(&ext);
    Ok(RakiProblem {
        input,
        target: Tensor::from_vec(&shape, target)?,
        weight: Tensor::from_vec(&shape, weight)?,
    })
}

fn check_lattice(k: &KSpaceVolume, rate: &[usize]) -> Result<()> {
    let lat = lattice_mask(k.spatial(), rate);
    if lat.data().iter().zip(k.mask.data()).any(|(&l, &m)| l == 1.0 && m == 0.0) {
        return Err(invalid("raki", format!("sampling mask does not contain the rate-{rate:?} lattice")));
    }
    Ok(())
}

/// Scan-specific training of the interpolator for `coil` by momentum
/// gradient descent on the masked squared error over the ACS.
pub fn raki_train(k: &KSpaceVolume, coil: usize, spec: &RakiSpec, seed: u64) -> Result<RakiModel> {
    spec.validate(k.spatial())?;
    check_lattice(k, &spec.rate)?;
    if coil >= k.coils() {
        return Err(invalid("raki_train", format!("coil {coil} of {}", k.coils())));
    }
    let acs = k.extract_acs()?;
    let scale = (acs.data().iter().map(|v| v.norm_sqr()).sum::<f64>() / acs.len() as f64).sqrt();
    if scale == 0.0 {
        return Err(invalid("raki_train", "calibration region is all zero"));
    }
    let prob = raki_problem(k, coil, spec, scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RakiModel::new(k.coils(), coil, spec, &mut rng);
    model.scale = scale;
    let rule = Rule::SgdMomentum {
        momentum: spec.momentum,
    };
    for _ in 0..spec.epochs {
        let mut t = Tape::new();
        let x = t.constant(prob.input.clone());
        let y = model.forward(&mut t, x)?;
        // squared error summed over each anchor's outputs, averaged over anchors
        let mse = t.masked_mse(y, &prob.target, &prob.weight)?;
        let loss = t.scale(mse, spec.n_out() as f64);
        let l = t.value(mse).data()[0];
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("raki loss for coil {coil}")));
        }
        model.losses.push(l);
        t.backward(loss)?;
        model.store.accumulate_from(&t);
        model.store.step(rule, spec.lr)?;
    }
    Ok(model)
}

/// Fills every coil's full grid from the per-coil models, then restores
/// measured samples exactly.
pub fn raki_infer(k: &KSpaceVolume, models: &[RakiModel]) -> Result<CArray> {
    if models.len() != k.coils() || models.iter().enumerate().any(|(i, m)| m.coil != i) {
        return Err(invalid("raki_infer", format!("{} models for {} coils", models.len(), k.coils())));
    }
    let sp = k.spatial().to_vec();
    let d = sp.len();
    let spec = &models[0].spec;
    spec.validate(&sp)?;
    check_lattice(k, &spec.rate)?;
    let lat = lattice_mask(&sp, &spec.rate);
    // pad by one cell before each phase axis so every position has an anchor
    let padded: Vec<usize> = (0..d).map(|a| if a == 0 { sp[0] } else { sp[a] + spec.rate[a - 1] }).collect();
    let lattice_only = masked(&k.data, &lat);
    let n = k.coils();
    let m: usize = sp.iter().product();
    let pm: usize = padded.iter().product();
    let mut pin = CArray::zeros(&{
        let mut s = vec![n];
        s.extend_from_slice(&padded);
        s
    });
    let pstr = crate::array::strides_of(&padded);
    let shift = |idx: &[usize]| -> usize {
        (0..d)
            .map(|a| (idx[a] + if a == 0 { 0 } else { spec.rate[a - 1] }) * pstr[a])
            .sum()
    };
    let mut idx = vec![0; d];
    for j in 0..m {
        let pj = shift(&idx);
        for c in 0..n {
            pin.data_mut()[c * pm + pj] = lattice_only.data()[c * m + j];
        }
        next_index(&mut idx, &sp);
    }
    let cells: usize = spec.rate.iter().product();
    let cstr = crate::array::strides_of(&spec.rate);
    let mut out = k.data.clone();
    for model in models {
        let mut x = coils_to_channels(&pin);
        x.data_mut().iter_mut().for_each(|v| *v /= model.scale);
        let mut t = Tape::inference();
        let xv = t.constant(x);
        let y = model.forward(&mut t, xv)?;
        let y = t.value(y).data();
        let mut idx = vec![0; d];
        for j in 0..m {
            if k.mask.data()[j] == 0.0 {
                // anchor: nearest lattice point at or below, per phase axis
                let mut anchor = idx.clone();
                let mut cell = 0;
                for a in 1..d {
                    let r = spec.rate[a - 1];
                    let off = (idx[a] + r - (sp[a] / 2) % r) % r;
                    anchor[a] = idx[a] + r - off;
                    cell += off * cstr[a - 1];
                }
                let pa: usize = (0..d).map(|a| anchor[a] * pstr[a]).sum();
                let re = y[cell * pm + pa];
                let im = y[(cells + cell) * pm + pa];
                out.data_mut()[model.coil * m + j] = num_complex::Complex64::new(re, im) * model.scale;
            }
            next_index(&mut idx, &sp);
        }
    }
    Ok(out)
}

/// `IFFT → 2×…×2 average pool → FFT` over the spatial axes of planar data.
pub fn cross_domain_pool(t: &mut Tape, x: Var) -> Result<Var> {
    let rank = t.shape(x).len() - 2;
    let img = t.fft(x, true, true)?;
    let p = t.avg_pool(img, &vec![2; rank])?;
    t.fft(p, false, true)
}

/// `IFFT → ×2 nearest-neighbour upsampling → FFT`.
pub fn cross_domain_upsample(t: &mut Tape, x: Var) -> Result<Var> {
    let rank = t.shape(x).len() - 2;
    let img = t.fft(x, true, true)?;
    let u = t.upsample(img, &vec![2; rank])?;
    t.fft(u, false, true)
}

/// `pred − γ·M(pred − measured)`: the prediction off the sampled set, a
/// γ-weighted blend on it.
pub fn soft_dc(t: &mut Tape, pred: Var, measured: Var, mask: &Tensor, gamma: Var) -> Result<Var> {
    let d = t.sub(pred, measured)?;
    let dm = t.mul_const(d, mask)?;
    let step = t.mul_scalar(dm, gamma)?;
    t.sub(pred, step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KNetSpec {
    pub channels: usize,
    pub levels: usize,
    pub coils: usize,
    pub rank: usize,
    pub residual: bool,
}

impl KNetSpec {
    pub fn standard(coils: usize) -> Self {
        Self {
            channels: 16,
            levels: 3,
            coils,
            rank: 3,
            residual: true,
        }
    }
}

/// Step-wise learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decayed: f64,
    /// First epoch that uses `decayed`.
    pub switch_epoch: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn knet() -> Self {
        Self {
            base: 1e-3,
            decayed: 1e-4,
            switch_epoch: 240,
            epochs: 250,
        }
    }

    pub fn fasnet() -> Self {
        Self {
            base: 1e-3,
            decayed: 1e-4,
            switch_epoch: 160,
            epochs: 260,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.base
        } else {
            self.decayed
        }
    }
}

/// U-Net over 2N-channel k-space whose pooling and upsampling pass
/// through the image domain.
#[derive(Clone, Debug)]
pub struct KNet {
    pub spec: KNetSpec,
    pub encoder: Vec<TwoConvBlock>,
    pub decoder: Vec<TwoConvBlock>,
    pub out: Conv,
    /// Soft data-consistency weight γ, initialized to 1.
    pub gamma: ParamId,
}

impl KNet {
    /// The output convolution starts at zero so that the residual network
    /// begins as the identity.
    pub fn new(store: &mut ParamStore, spec: KNetSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.levels == 0 || spec.channels == 0 || spec.channels % 2 != 0 || spec.coils == 0 {
            return Err(invalid("KNet", format!("{spec:?}: need levels ≥ 1 and an even channel count")));
        }
        let c = spec.channels;
        let mut encoder = Vec::new();
        let mut cin = 2 * spec.coils;
        for i in 0..=spec.levels {
            encoder.push(TwoConvBlock::new(store, &format!("knet.enc{i}"), cin, c << i, spec.rank, rng));
            cin = c << i;
        }
        let decoder = (0..spec.levels)
            .rev()
            .map(|i| TwoConvBlock::new(store, &format!("knet.dec{i}"), (c << i) + (c << (i + 1)), c << i, spec.rank, rng))
            .collect();
        let out = Conv::pointwise(store, "knet.out", c, 2 * spec.coils, spec.rank, rng);
        out.zero(store);
        let gamma = store.add("knet.gamma", Tensor::full(&[1], 1.0));
        Ok(Self {
            spec,
            encoder,
            decoder,
            out,
            gamma,
        })
    }

    /// Network output (without the residual) on `(1, 2N, spatial...)`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let sp = t.shape(x)[2..].to_vec();
        let f = 1usize << self.spec.levels;
        for (a, &e) in sp.iter().enumerate() {
            if e % f != 0 {
                return Err(Error::Indivisible {
                    axis: a + 2,
                    extent: e,
                    divisor: f,
                    padded: e.div_ceil(f) * f,
                });
            }
        }
        let mut skips = Vec::new();
        let mut h = self.encoder[0].forward(t, s, x)?;
        for block in &self.encoder[1..] {
            skips.push(h);
            let p = cross_domain_pool(t, h)?;
            h = block.forward(t, s, p)?;
        }
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let u = cross_domain_upsample(t, h)?;
            let cat = t.concat_channels(&[*skip, u])?;
            h = block.forward(t, s, cat)?;
        }
        self.out.forward(t, s, h)
    }
}

#[derive(Clone, Debug)]
pub struct KNetModel {
    pub net: KNet,
    pub store: ParamStore,
}

/// One training or evaluation example for the group stage.
#[derive(Clone, Debug)]
pub struct GroupExample {
    /// RAKI-filled k-space `(N, spatial...)`.
    pub filled: CArray,
    pub measured: KSpaceVolume,
    /// Ground-truth magnitude over the spatial extents.
    pub target: Tensor,
}

/// Multi-coil images `F⁻¹(SoftDC(KNet(K̃) + K̃))` as planar
/// `(N, 2, spatial...)`. The network sees `K̃` divided by the largest
/// measured magnitude and its output is scaled back.
pub fn group_reconstruct(t: &mut Tape, s: &ParamStore, net: &KNet, filled: &CArray, k: &KSpaceVolume) -> Result<Var> {
    if filled.shape() != k.data.shape() || filled.shape()[0] != net.spec.coils {
        return Err(shape_err(
            "group_reconstruct",
            format!("filled {:?}, measured {:?}, {} coils", filled.shape(), k.data.shape(), net.spec.coils),
        ));
    }
    let scale = k.data.data().iter().map(|v| v.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let x = coils_to_channels(filled);
    let xv = t.constant(x.scaled(1.0 / scale));
    let y = net.forward(t, s, xv)?;
    let y = t.scale(y, scale);
    let y = if net.spec.residual {
        let raw = t.constant(x);
        t.add(y, raw)?
    } else {
        y
    };
    let pred = t.channels_to_coils(y)?;
    let measured = t.constant(coils_to_planar(&k.data));
    let gamma = t.param(s, net.gamma);
    let dc = soft_dc(t, pred, measured, &k.mask, gamma)?;
    t.fft(dc, true, true)
}

impl KNetModel {
    pub fn new(spec: KNetSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = KNet::new(&mut store, spec, &mut rng)?;
        Ok(Self { net, store })
    }

    /// `1 − SSIM(RSS(x̄), target)` on the tape.
    pub fn loss(&self, t: &mut Tape, ex: &GroupExample) -> Result<Var> {
        let imgs = group_reconstruct(t, &self.store, &self.net, &ex.filled, &ex.measured)?;
        let mag = t.rss_batch(imgs)?;
        let mut shape = vec![1, 1];
        shape.extend_from_slice(ex.target.shape());
        t.ssim_loss(mag, &ex.target.clone().reshape(&shape)?, ex.target.max())
    }

    /// Complex coil images after the group stage, `(N, spatial...)`.
    pub fn reconstruct(&self, filled: &CArray, k: &KSpaceVolume) -> Result<CArray> {
        let mut t = Tape::inference();
        let y = group_reconstruct(&mut t, &self.store, &self.net, filled, k)?;
        crate::volume::planar_to_coils(t.value(y))
    }

    /// Adam over the examples, one step per example, following `schedule`.
    /// Returns the mean loss of every epoch.
    pub fn train(&mut self, data: &[GroupExample], schedule: LrSchedule) -> Result<Vec<f64>> {
        let mut history = Vec::with_capacity(schedule.epochs);
        for epoch in 0..schedule.epochs {
            let mut total = 0.0;
            for ex in data {
                let mut t = Tape::new();
                let loss = self.loss(&mut t, ex)?;
                let l = t.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("k-net loss at epoch {epoch}")));
                }
                total += l;
                t.backward(loss)?;
                self.store.accumulate_from(&t);
                self.store.step(Rule::adam(), schedule.lr(epoch))?;
            }
            history.push(total / data.len().max(1) as f64);
        }
        Ok(history)
    }
}

/// Convenience wrapper: train a K-Net from a seed.
pub fn knet_train(data: &[GroupExample], spec: KNetSpec, schedule: LrSchedule, seed: u64) -> Result<(KNetModel, Vec<f64>)> {
    let mut m = KNetModel::new(spec, seed)?;
    let h = m.train(data, schedule)?;
    Ok((m, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::simdata::{simulate, MaskSpec};
    use crate::volume::{channels_to_coils, coil_images, planar_to_coils};
    use num_complex::Complex64;
    use rand::Rng;

    fn random_c(shape: &[usize], rng: &mut ChaCha8Rng) -> CArray {
        let n = shape.iter().product();
        CArray::from_vec(
            shape,
            (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn soft_dc_cases() {
        let mut t = Tape::inference();
        let pred = t.constant(Tensor::full(&[1, 2, 2], 2.0));
        let meas = t.constant(Tensor::zeros(&[1, 2, 2]));
        let mask = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let half = t.constant(Tensor::full(&[1], 0.5));
        let y = soft_dc(&mut t, pred, meas, &mask, half).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 1.0, 2.0]);
        let one = t.constant(Tensor::full(&[1], 1.0));
        let y = soft_dc(&mut t, pred, meas, &mask, one).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0, 0.0, 2.0]);
        let zero = t.constant(Tensor::full(&[1], 0.0));
        let y = soft_dc(&mut t, pred, meas, &mask, zero).unwrap();
        assert_eq!(t.value(y), t.value(pred));
    }

    #[test]
    fn cross_domain_ops_are_linear_and_match_image_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = coils_to_planar(&random_c(&[1, 4, 8, 6], &mut rng));
        let b = coils_to_planar(&random_c(&[1, 4, 8, 6], &mut rng));
        let mut t = Tape::inference();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let mut combo = a.scaled(0.7);
        combo.data_mut().iter_mut().zip(b.data()).for_each(|(c, b)| *c -= 1.3 * b);
        let cv = t.constant(combo);
        let pa = cross_domain_pool(&mut t, av).unwrap();
        let pb = cross_domain_pool(&mut t, bv).unwrap();
        let pc = cross_domain_pool(&mut t, cv).unwrap();
        assert_eq!(t.shape(pa), &[1, 2, 2, 4, 3]);
        let mut lin = t.value(pa).scaled(0.7);
        lin.data_mut().iter_mut().zip(t.value(pb).data()).for_each(|(c, b)| *c -= 1.3 * b);
        assert!(t.value(pc).max_abs_diff(&lin) <= 1e-10);
        let ua = cross_domain_upsample(&mut t, pa).unwrap();
        assert_eq!(t.shape(ua), t.shape(av));

        // oracle: a k-space delta, pooled and upsampled by hand in image space
        let mut k = CArray::zeros(&[1, 8, 8]);
        k.set(&[0, 5, 3], Complex64::new(1.0, 0.0));
        let img = crate::fft::ifft_c(&k, &[1, 2]);
        let mut low = CArray::zeros(&[1, 8, 8]);
        for i in 0..8 {
            for j in 0..8 {
                let mut s = Complex64::new(0.0, 0.0);
                for di in 0..2 {
                    for dj in 0..2 {
                        s += img.get(&[0, (i / 2) * 2 + di, (j / 2) * 2 + dj]);
                    }
                }
                low.set(&[0, i, j], s / 4.0);
            }
        }
        let want = coils_to_planar(&crate::fft::fft_c(&low, &[1, 2]));
        let kv = t.constant(coils_to_planar(&k));
        let p = cross_domain_pool(&mut t, kv).unwrap();
        let u = cross_domain_upsample(&mut t, p).unwrap();
        assert!(t.value(u).max_abs_diff(&want) <= 1e-10);
        let odd = t.constant(Tensor::zeros(&[1, 2, 5, 4]));
        assert!(cross_domain_pool(&mut t, odd).is_err());
    }

    #[test]
    fn rss_cases() {
        let x = CArray::from_vec(&[2, 1], vec![Complex64::new(3.0, 0.0), Complex64::new(0.0, 4.0)]).unwrap();
        assert_eq!(rss(&x).data(), &[5.0]);
        let one = CArray::from_vec(&[1, 2], vec![Complex64::new(-3.0, 4.0), Complex64::new(0.0, -2.0)]).unwrap();
        assert_eq!(rss(&one).data(), &[5.0, 2.0]);
    }

    /// K-space whose off-lattice samples are bilinear combinations of the
    /// surrounding lattice samples (zero beyond the last lattice line).
    fn linear_kspace(coils: usize, sp: &[usize], r: usize, seed: u64) -> CArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, p, s) = (sp[0], sp[1], sp[2]);
        let lat = |c: usize, i: usize, j: usize, k: usize, vals: &CArray| -> Complex64 {
            if j >= p || k >= s {
                Complex64::new(0.0, 0.0)
            } else {
                vals.get(&[c, i, j, k])
            }
        };
        let vals = random_c(&[coils, f, p, s], &mut rng);
        let mut out = CArray::zeros(&[coils, f, p, s]);
        for c in 0..coils {
            for i in 0..f {
                for j in 0..p {
                    for k in 0..s {
                        let (j0, k0) = (j - j % r, k - k % r);
                        let (u, v) = ((j % r) as f64 / r as f64, (k % r) as f64 / r as f64);
                        let val = lat(c, i, j0, k0, &vals) * (1.0 - u) * (1.0 - v)
                            + lat(c, i, j0 + r, k0, &vals) * u * (1.0 - v)
                            + lat(c, i, j0, k0 + r, &vals) * (1.0 - u) * v
                            + lat(c, i, j0 + r, k0 + r, &vals) * u * v;
                        out.set(&[c, i, j, k], val);
                    }
                }
            }
        }
        out
    }

    fn lattice_volume(full: &CArray, r: usize, frac: f64) -> KSpaceVolume {
        let sp = &full.shape()[1..];
        let mask = crate::simdata::make_mask(&MaskSpec::equispaced_2d([r, r], frac), sp).unwrap();
        KSpaceVolume::undersample(full, &mask.mask, mask.acs).unwrap()
    }

    #[test]
    fn raki_rejects_small_acs_and_keeps_measured_samples() {
        let full = linear_kspace(2, &[4, 16, 16], 2, 3);
        let small = lattice_volume(&full, 2, 0.2);
        let e = raki_train(&small, 0, &RakiSpec::standard(2), 0).unwrap_err().to_string();
        assert!(e.contains("at least 5"), "{e}");
        let k = lattice_volume(&full, 2, 0.5);
        let mut spec = RakiSpec::standard(2);
        spec.epochs = 5;
        let models: Vec<_> = (0..2).map(|c| raki_train(&k, c, &spec, c as u64).unwrap()).collect();
        let out = raki_infer(&k, &models).unwrap();
        assert_eq!(out.shape(), &[2, 4, 16, 16]);
        for (i, v) in out.data().iter().enumerate() {
            if k.mask.data()[i % 1024] == 1.0 {
                assert_eq!(v, &k.data.data()[i]);
            }
        }
        assert!(raki_infer(&k, &models[..1]).is_err());
    }

    #[test]
    fn raki_zero_input_gives_zero_output() {
        let full = linear_kspace(1, &[4, 16, 16], 2, 4);
        let k = lattice_volume(&full, 2, 0.5);
        let mut spec = RakiSpec::standard(2);
        spec.epochs = 3;
        let m = raki_train(&k, 0, &spec, 1).unwrap();
        let mut t = Tape::inference();
        let z = t.constant(Tensor::zeros(&[1, 2, 4, 16, 16]));
        let y = m.forward(&mut t, z).unwrap();
        assert_eq!(t.value(y).max_abs_diff(&Tensor::zeros(t.shape(y))), 0.0);
    }

    #[test]
    fn raki_learns_an_exactly_linear_interpolation() {
        let full = linear_kspace(2, &[32, 32, 32], 2, 5);
        let k = lattice_volume(&full, 2, 0.5);
        let spec = RakiSpec::standard(2);
        let models: Vec<_> = (0..2).map(|c| raki_train(&k, c, &spec, 10 + c as u64).unwrap()).collect();
        for m in &models {
            let l = &m.losses;
            let rises = l.windows(2).take(50).filter(|w| w[1] > w[0]).count();
            assert!(rises <= 2, "{rises} rises in the first 50 epochs");
            assert!(l[999] < 0.02 * l[0], "ACS MSE {} -> {}", l[0], l[999]);
        }
        let out = raki_infer(&k, &models).unwrap();
        let err = |x: &CArray| -> f64 {
            let num: f64 = x.data().iter().zip(full.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
            num / full.data().iter().map(|v| v.norm_sqr()).sum::<f64>()
        };
        let (raki, zf) = (err(&out), err(&k.data));
        assert!(raki <= 0.1 * zf, "raki {raki} vs zero-filled {zf}");
    }

    #[test]
    fn mirrored_init_is_linear() {
        let full = linear_kspace(1, &[4, 16, 16], 2, 6);
        let k = lattice_volume(&full, 2, 0.5);
        let mut spec = RakiSpec::standard(2);
        spec.epochs = 0;
        let m = raki_train(&k, 0, &spec, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = coils_to_channels(&random_c(&[1, 4, 16, 16], &mut rng));
        let mut t = Tape::inference();
        let (a, b) = (t.constant(x.clone()), t.constant(x.scaled(-2.0)));
        let (fa, fb) = (m.forward(&mut t, a).unwrap(), m.forward(&mut t, b).unwrap());
        let want = t.value(fa).scaled(-2.0);
        assert!(t.value(fb).max_abs_diff(&want) <= 1e-12 * want.max_abs_diff(&Tensor::zeros(want.shape())).max(1.0));
    }

    fn tiny_group(seed: u64) -> GroupExample {
        let acq = simulate(seed, &[8, 8, 8], 2, 0.0, &MaskSpec::equispaced_2d([2, 2], 0.3)).unwrap();
        GroupExample {
            filled: acq.measured.data.clone(),
            measured: acq.measured,
            target: acq.target,
        }
    }

    #[test]
    fn zero_knet_with_hard_dc_is_inverse_transform() {
        let ex = tiny_group(1);
        let mut m = KNetModel::new(KNetSpec { channels: 4, levels: 1, coils: 2, rank: 3, residual: true }, 0).unwrap();
        m.store.zero_values();
        let g = m.net.gamma;
        m.store.value_mut(g).data_mut()[0] = 1.0;
        let x = m.reconstruct(&ex.filled, &ex.measured).unwrap();
        assert_eq!(x.shape(), &[2, 8, 8, 8]);
        let want = coil_images(&ex.measured.data);
        let d = x.data().iter().zip(want.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(d <= 1e-12);
    }

    #[test]
    fn group_reconstruct_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ex = tiny_group(2);
        let filled = random_c(&[2, 8, 8, 8], &mut rng);
        let mut m = KNetModel::new(KNetSpec { channels: 4, levels: 1, coils: 2, rank: 3, residual: true }, 3).unwrap();
        let g = m.net.gamma;
        m.store.value_mut(g).data_mut()[0] = 0.3;
        let got = m.reconstruct(&filled, &ex.measured).unwrap();
        // oracle: network output evaluated separately, then the formula
        // applied entry by entry
        let scale = ex.measured.data.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut t = Tape::inference();
        let xv = t.constant(coils_to_channels(&filled).scaled(1.0 / scale));
        let y = m.net.forward(&mut t, &m.store, xv).unwrap();
        let net = channels_to_coils(&t.value(y).scaled(scale)).unwrap();
        let mut k = CArray::zeros(&[2, 8, 8, 8]);
        for i in 0..k.len() {
            let pred = net.data()[i] + filled.data()[i];
            let meas = ex.measured.data.data()[i];
            let v = if ex.measured.mask.data()[i % 512] == 1.0 { pred - 0.3 * (pred - meas) } else { pred };
            k.data_mut()[i] = v;
        }
        let want = coil_images(&k);
        let d = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(d <= 1e-10, "{d}");
        let _ = planar_to_coils;
    }

    #[test]
    fn knet_gradient_check() {
        let ex = tiny_group(3);
        let mut m = KNetModel::new(KNetSpec { channels: 2, levels: 1, coils: 2, rank: 3, residual: true }, 4).unwrap();
        // move the output layer off zero so every parameter matters
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in [m.net.out.weight, m.net.out.bias.unwrap()] {
            m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let net = m.net.clone();
        let err = gradcheck(&mut m.store, 3, 1e-5, |t, s| {
            let imgs = group_reconstruct(t, s, &net, &ex.filled, &ex.measured)?;
            let mag = t.rss_batch(imgs)?;
            t.ssim_loss(mag, &ex.target.clone().reshape(&[1, 1, 8, 8, 8]).unwrap(), ex.target.max())
        })
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn knet_overfits_one_volume() {
        let acq = simulate(11, &[32, 32, 32], 2, 0.0, &MaskSpec::equispaced_2d([2, 2], 0.16)).unwrap();
        let ex = GroupExample {
            filled: acq.measured.data.clone(),
            measured: acq.measured,
            target: acq.target,
        };
        let schedule = LrSchedule {
            base: 1e-3,
            decayed: 1e-3,
            switch_epoch: 60,
            epochs: 60,
        };
        let (_, history) = knet_train(&[ex], KNetSpec::standard(2), schedule, 1).unwrap();
        let best = history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best <= 0.75 * history[0], "loss {} -> {best}", history[0]);
    }

    #[test]
    fn knet_loss_bounds_and_perfect_prediction() {
        let ex = tiny_group(4);
        let m = KNetModel::new(KNetSpec { channels: 4, levels: 1, coils: 2, rank: 3, residual: true }, 5).unwrap();
        let mut t = Tape::inference();
        let l = m.loss(&mut t, &ex).unwrap();
        let l = t.value(l).data()[0];
        assert!((0.0..=2.0).contains(&l));
        let mut perfect = ex.clone();
        perfect.target = crate::volume::rss(&m.reconstruct(&ex.filled, &ex.measured).unwrap());
        let l = m.loss(&mut t, &perfect).unwrap();
        assert!(t.value(l).data()[0].abs() < 1e-12);
    }
}
