//! Encoder–decoder networks with interchangeable blocks, in 2D and 3D.
//!
//! Level `i` of the encoder holds one block with `2^i·c` output channels;
//! downsampling is parameter-free average pooling and upsampling is a
//! 2×…×2 stride-2 transposed convolution. Skip connections concatenate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Tensor;
use crate::autodiff::{Tape, Var};
use crate::blocks::{AnyBlock, Block, BlockKind};
use crate::error::{invalid, Error, Result};
use crate::layers::{BlockMode, Conv, UpConv};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetSpec {
    /// Entry channel count `c`.
    pub channels: usize,
    /// Number of downsamplings `L`.
    pub levels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial rank, 2 or 3.
    pub rank: usize,
    pub kind: BlockKind,
}

impl UNetSpec {
    pub fn new(kind: BlockKind, channels: usize, levels: usize, in_channels: usize, out_channels: usize, rank: usize) -> Self {
        Self {
            channels,
            levels,
            in_channels,
            out_channels,
            rank,
            kind,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: UNetSpec,
    pub encoder: Vec<AnyBlock>,
    pub up: Vec<UpConv>,
    pub decoder: Vec<AnyBlock>,
    pub out: Conv,
}

impl UNet {
    /// Registers every parameter in `store` under `name`.
    pub fn new(store: &mut ParamStore, name: &str, spec: UNetSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.rank != 2 && spec.rank != 3 {
            return Err(invalid("UNet", format!("spatial rank must be 2 or 3, got {}", spec.rank)));
        }
        if spec.channels == 0 || spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(invalid("UNet", "channel counts must be positive"));
        }
        let c = spec.channels;
        let mut encoder = vec![AnyBlock::new(spec.kind, store, &format!("{name}.enc0"), spec.in_channels, c, spec.rank, rng)?];
        for i in 1..=spec.levels {
            let cin = c << (i - 1);
            encoder.push(AnyBlock::new(spec.kind, store, &format!("{name}.enc{i}"), cin, cin * 2, spec.rank, rng)?);
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for i in (1..=spec.levels).rev() {
            let hi = c << i;
            up.push(UpConv::new(store, &format!("{name}.up{i}"), hi, hi / 2, spec.rank, rng));
            decoder.push(AnyBlock::new(spec.kind, store, &format!("{name}.dec{i}"), hi, hi / 2, spec.rank, rng)?);
        }
        let out = Conv::pointwise(store, &format!("{name}.out"), c, spec.out_channels, spec.rank, rng);
        Ok(Self {
            spec,
            encoder,
            up,
            decoder,
            out,
        })
    }

    /// Rejects spatial extents not divisible by `2^L`, naming the padded size.
    pub fn check_extents(&self, spatial: &[usize]) -> Result<()> {
        let f = 1usize << self.spec.levels;
        for (a, &e) in spatial.iter().enumerate() {
            if e % f != 0 || e == 0 {
                return Err(Error::Indivisible {
                    axis: a + 2,
                    extent: e,
                    divisor: f,
                    padded: e.div_ceil(f).max(1) * f,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let shape = t.shape(x).to_vec();
        if shape.len() != self.spec.rank + 2 || shape[1] != self.spec.in_channels {
            return Err(crate::error::shape_err(
                "unet",
                format!("input {shape:?} for {} input channels, rank {}", self.spec.in_channels, self.spec.rank),
            ));
        }
        self.check_extents(&shape[2..])?;
        let window = vec![2; self.spec.rank];
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = self.encoder[0].forward(t, s, x)?;
        for block in &self.encoder[1..] {
            skips.push(h);
            let p = t.avg_pool(h, &window)?;
            h = block.forward(t, s, p)?;
        }
        for ((up, block), skip) in self.up.iter().zip(&self.decoder).zip(skips.iter().rev()) {
            let u = up.forward(t, s, h)?;
            let cat = t.concat_channels(&[*skip, u])?;
            h = block.forward(t, s, cat)?;
        }
        self.out.forward(t, s, h)
    }

    pub fn set_mode(&mut self, mode: BlockMode) {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).for_each(|b| b.set_mode(mode));
    }

    /// Analytic FLOPs for one sample of the given spatial extents.
    pub fn flops(&self, spatial: &[usize]) -> f64 {
        let at = |i: usize| -> Vec<usize> { spatial.iter().map(|e| e >> i).collect() };
        let pix = |i: usize| -> f64 { at(i).iter().product::<usize>() as f64 };
        let mut f = 0.0;
        for (i, b) in self.encoder.iter().enumerate() {
            f += b.flops(&at(i));
            if i > 0 {
                // pooling: one add per input element and one scale per output
                f += (b.in_channels() as f64) * (pix(i - 1) + pix(i));
            }
        }
        for (j, (up, b)) in self.up.iter().zip(&self.decoder).enumerate() {
            let i = self.spec.levels - j;
            f += up.flops(&at(i)) + b.flops(&at(i - 1));
        }
        f + self.out.flops(spatial)
    }
}

/// A network together with the parameters it owns.
#[derive(Clone, Debug)]
pub struct NetworkInstance {
    pub net: UNet,
    pub store: ParamStore,
}

/// Builds a standalone U-Net with parameters drawn from `seed`.
pub fn build_unet(spec: UNetSpec, seed: u64) -> Result<NetworkInstance> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = UNet::new(&mut store, "unet", spec, &mut rng)?;
    Ok(NetworkInstance { net, store })
}

impl NetworkInstance {
    /// Inference on a constant input.
    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::inference();
        let xv = t.constant(x.clone());
        let y = self.net.forward(&mut t, &self.store, xv)?;
        Ok(t.value(y).clone())
    }

    pub fn count_params(&self) -> usize {
        count_params_actual(&self.store)
    }
}

/// Total number of scalar parameters.
pub fn count_params_actual(store: &ParamStore) -> usize {
    store.count()
}

/// Analytic GFLOPs of one forward pass.
pub fn flops_estimate(net: &UNet, spatial: &[usize]) -> f64 {
    net.flops(spatial) / 1e9
}

/// Which printed closed form to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosedForm {
    UNet,
    FasterFcUNet,
}

/// Parameter counts exactly as the printed closed forms for `N_u` and
/// `N_FastFCu` read, sums taken over every term inside them.
pub fn count_params_closed_form(form: ClosedForm, c: u64, levels: u32) -> u64 {
    let p = |i: u32| c << i;
    match form {
        ClosedForm::FasterFcUNet => {
            let mut n = 4 * c + 4 * c * c + c * c * 9;
            for i in 1..=levels {
                n += p(i - 1) * p(i) + 4 * p(i) * p(i) + p(i) * p(i) * 9;
            }
            for i in 1..=levels {
                n += p(i) * p(i - 1) + 4 * p(i - 1) * p(i - 1) + p(i - 1) * p(i - 1) * 9;
            }
            n + (1..=levels).map(|i| p(i) * p(i - 1)).sum::<u64>() * 4
        }
        ClosedForm::UNet => {
            let mut first = 2 * c + c * c;
            for i in 1..levels {
                first += p(i - 1) * p(i) + p(i) * p(i);
            }
            let dec: u64 = (1..=levels).map(|i| p(i) * p(i - 1) + p(i - 1) * p(i - 1)).sum();
            let bottom = p(levels - 1) * p(levels) + p(levels) * p(levels);
            let up: u64 = (1..=levels).map(|i| p(i) * p(i - 1)).sum();
            first * 9 + 2 * c + dec * 9 + bottom * 9 + up * 4
        }
    }
}

/// `N_FastFCu / N_u`.
pub fn closed_form_ratio(c: u64, levels: u32) -> f64 {
    count_params_closed_form(ClosedForm::FasterFcUNet, c, levels) as f64 / count_params_closed_form(ClosedForm::UNet, c, levels) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn closed_forms_reference_values() {
        // Independently hand-expanded for c = 32, L = 4.
        assert_eq!(count_params_closed_form(ClosedForm::UNet, 32, 4), 7_756_416);
        assert_eq!(count_params_closed_form(ClosedForm::FasterFcUNet, 32, 4), 6_715_520);
        assert!((closed_form_ratio(32, 4) - 0.86).abs() <= 0.01);
        for c in 8..=64 {
            for l in 2..=5 {
                assert!(closed_form_ratio(c, l) < 1.0, "c={c} L={l}");
            }
        }
    }

    #[test]
    fn shapes_and_degenerate_depth() {
        for kind in BlockKind::ALL {
            let net = build_unet(UNetSpec::new(kind, 4, 2, 1, 2, 2), 1).unwrap();
            assert_eq!(net.run(&random(&[1, 1, 8, 12], 2)).unwrap().shape(), &[1, 2, 8, 12]);
        }
        let net = build_unet(UNetSpec::new(BlockKind::FasterFc, 4, 0, 2, 2, 2), 1).unwrap();
        assert_eq!(net.net.encoder.len(), 1);
        assert!(net.net.decoder.is_empty());
        assert_eq!(net.run(&random(&[1, 2, 5, 7], 2)).unwrap().shape(), &[1, 2, 5, 7]);
        let net = build_unet(UNetSpec::new(BlockKind::FasterFc, 2, 1, 2, 2, 3), 1).unwrap();
        assert_eq!(net.run(&random(&[2, 2, 4, 4, 6], 2)).unwrap().shape(), &[2, 2, 4, 4, 6]);
    }

    #[test]
    fn indivisible_extent_gives_padding_hint() {
        let net = build_unet(UNetSpec::new(BlockKind::TwoConv, 2, 2, 1, 1, 2), 1).unwrap();
        match net.run(&Tensor::zeros(&[1, 1, 10, 8])) {
            Err(Error::Indivisible { extent: 10, padded: 12, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn count_is_structural() {
        let mut net = build_unet(UNetSpec::new(BlockKind::FasterFc, 4, 2, 1, 1, 2), 3).unwrap();
        let n = net.count_params();
        net.store.zero_values();
        assert_eq!(net.count_params(), n);
    }

    #[test]
    fn flops_ordering_and_scaling() {
        let f = |kind, e: usize| {
            let net = build_unet(UNetSpec::new(kind, 4, 2, 1, 1, 2), 0).unwrap();
            flops_estimate(&net.net, &[e, e])
        };
        let two = f(BlockKind::TwoConv, 32);
        assert!((f(BlockKind::TwoConv, 64) / two - 4.0).abs() < 1e-9);
    }

    #[test]
    fn fasterfc_unet_gradient() {
        let mut net = build_unet(UNetSpec::new(BlockKind::FasterFc, 8, 2, 1, 1, 2), 5).unwrap();
        let x = random(&[1, 1, 16, 16], 6);
        let w = random(&[1, 1, 16, 16], 7);
        let unet = net.net.clone();
        let err = gradcheck(&mut net.store, 3, 1e-5, |t, s| {
            let xv = t.constant(x.clone());
            let y = unet.forward(t, s, xv)?;
            let y = t.mul_const(y, &w)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
