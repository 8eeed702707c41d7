//! Parameterized building blocks shared by every network: convolution,
//! transposed convolution and instance normalization, plus the switches
//! used to put blocks into stage-by-stage test configurations.

use rand_chacha::ChaCha8Rng;

use crate::array::Tensor;
use crate::autodiff::{ConvCfg, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Default negative slope of every leaky ReLU.
pub const LRELU_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Analytic FLOP counts used throughout.
pub mod flops {
    /// Real FLOPs of one complex transform over `n` points.
    pub fn fft(n: usize) -> f64 {
        if n <= 1 {
            0.0
        } else {
            5.0 * n as f64 * (n as f64).log2()
        }
    }
    /// Instance normalization with affine, per element.
    pub const NORM: f64 = 8.0;
    pub const ACT: f64 = 1.0;
    pub const ADD: f64 = 1.0;
}

/// Behaviour switches for normalization and activation. The default is
/// the trained configuration; the others exist to isolate stages in tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockMode {
    pub bypass_norm: bool,
    pub slope: f64,
}

impl Default for BlockMode {
    fn default() -> Self {
        Self {
            bypass_norm: false,
            slope: LRELU_SLOPE,
        }
    }
}

impl BlockMode {
    /// Norm bypassed and activation reduced to the identity.
    pub fn linear() -> Self {
        Self {
            bypass_norm: true,
            slope: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<usize>,
    pub cfg: ConvCfg,
}

impl Conv {
    /// Zero-padded "same" convolution with uniform `±1/√fan_in` init.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let dil = vec![1; kernel.len()];
        Self::with_cfg(store, name, cin, cout, kernel, ConvCfg::same(kernel, &dil), true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_cfg(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        cfg: ConvCfg,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let taps: usize = kernel.iter().product();
        let bound = 1.0 / ((cin * taps) as f64).sqrt();
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let weight = store.add_uniform(format!("{name}.w"), &shape, bound, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.b"), &[cout], bound, rng));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel: kernel.to_vec(),
            cfg,
        }
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(store, name, cin, cout, &vec![1; rank], rng)
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(s, self.weight);
        let b = self.bias.map(|b| t.param(s, b));
        t.conv(x, w, b, &self.cfg)
    }

    /// FLOPs on an input of the given spatial extents ("same" geometry).
    pub fn flops(&self, spatial: &[usize]) -> f64 {
        let pix: usize = spatial.iter().product();
        let taps: usize = self.kernel.iter().product();
        let macs = (self.cin * self.cout * taps * pix) as f64;
        2.0 * macs + if self.bias.is_some() { (self.cout * pix) as f64 } else { 0.0 }
    }

    /// Sets the weight to the identity over channels (centre tap) and the
    /// bias to zero. Requires `cin == cout`.
    pub fn set_identity(&self, s: &mut ParamStore) {
        assert_eq!(self.cin, self.cout, "identity needs a square channel map");
        let taps: usize = self.kernel.iter().product();
        let centre = crate::array::offset_of(&self.kernel, &self.kernel.iter().map(|k| (k - 1) / 2).collect::<Vec<_>>());
        let w = s.value_mut(self.weight);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.cin {
            w.data_mut()[(c * self.cin + c) * taps + centre] = 1.0;
        }
        if let Some(b) = self.bias {
            s.value_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn zero(&self, s: &mut ParamStore) {
        s.value_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = self.bias {
            s.value_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// 2×…×2 stride-2 transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub rank: usize,
}

impl UpConv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let taps = 1usize << rank;
        let bound = 1.0 / ((cout * taps) as f64).sqrt();
        let mut shape = vec![cin, cout];
        shape.extend(std::iter::repeat_n(2, rank));
        let weight = store.add_uniform(format!("{name}.w"), &shape, bound, rng);
        let bias = store.add_uniform(format!("{name}.b"), &[cout], bound, rng);
        Self {
            weight,
            bias,
            cin,
            cout,
            rank,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(s, self.weight);
        let b = t.param(s, self.bias);
        t.conv_transpose2(x, w, Some(b), &vec![2; self.rank])
    }

    /// FLOPs for an input of the given (coarse) spatial extents.
    pub fn flops(&self, spatial: &[usize]) -> f64 {
        let pix: usize = spatial.iter().product();
        let taps = 1usize << self.rank;
        2.0 * (self.cin * self.cout * taps * pix) as f64 + (self.cout * pix * taps) as f64
    }
}

/// Instance normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[channels], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    /// Normalization followed by leaky ReLU, honouring `mode`.
    pub fn norm_act(&self, t: &mut Tape, s: &ParamStore, x: Var, mode: BlockMode) -> Result<Var> {
        let y = if mode.bypass_norm {
            x
        } else {
            let g = t.param(s, self.scale);
            let b = t.param(s, self.shift);
            t.instance_norm(x, g, b, NORM_EPS)?
        };
        Ok(if mode.slope == 1.0 { y } else { t.leaky_relu(y, mode.slope) })
    }

    /// FLOPs of normalization plus activation over `elements` values.
    pub fn flops(&self, pix: usize) -> f64 {
        (self.channels * pix) as f64 * (flops::NORM + flops::ACT)
    }
}
