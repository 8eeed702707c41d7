//! FasterFC block, the FFC baseline and the plain two-convolution block.
//!
//! All three map `(B, Cin, s...)` to `(B, Cout, s...)` with the spatial
//! extents unchanged, in 2D or 3D.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;

use crate::array::{CArray, Tensor};
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::layers::{flops, BlockMode, Conv, Norm};
use crate::params::ParamStore;

/// Complex view of a real feature map: complex channel `k` is
/// `f[k] + i·f[k + C/2]`.
pub fn channels_to_complex(f: &Tensor) -> Result<CArray> {
    let s = f.shape();
    if s.len() < 2 || s[1] % 2 != 0 {
        return Err(invalid("channels_to_complex", format!("needs an even channel count, got shape {s:?}")));
    }
    let (b, k) = (s[0], s[1] / 2);
    let n: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(b * k * n);
    for bi in 0..b {
        for ki in 0..k {
            let re = (bi * 2 * k + ki) * n;
            let im = (bi * 2 * k + k + ki) * n;
            out.extend((0..n).map(|j| Complex64::new(f.data()[re + j], f.data()[im + j])));
        }
    }
    let mut shape = s.to_vec();
    shape[1] = k;
    CArray::from_vec(&shape, out)
}

/// Inverse of [`channels_to_complex`].
pub fn complex_to_channels(z: &CArray) -> Result<Tensor> {
    let s = z.shape();
    if s.len() < 2 {
        return Err(invalid("complex_to_channels", format!("needs (B, K, ...), got {s:?}")));
    }
    let (b, k) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    let mut out = vec![0.0; 2 * z.len()];
    for bi in 0..b {
        for ki in 0..k {
            for j in 0..n {
                let v = z.data()[(bi * k + ki) * n + j];
                out[(bi * 2 * k + ki) * n + j] = v.re;
                out[(bi * 2 * k + k + ki) * n + j] = v.im;
            }
        }
    }
    let mut shape = s.to_vec();
    shape[1] = 2 * k;
    Tensor::from_vec(&shape, out)
}

/// Common interface of the interchangeable blocks.
pub trait Block {
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var>;
    /// Analytic FLOPs of one forward pass on a single sample.
    fn flops(&self, spatial: &[usize]) -> f64;
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn set_mode(&mut self, mode: BlockMode);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    TwoConv,
    Ffc,
    FasterFc,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::TwoConv, BlockKind::Ffc, BlockKind::FasterFc];
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::TwoConv => "two-conv",
            BlockKind::Ffc => "ffc",
            BlockKind::FasterFc => "fasterfc",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-conv" | "unet" => Ok(BlockKind::TwoConv),
            "ffc" | "ffc-unet" => Ok(BlockKind::Ffc),
            "fasterfc" | "fasterfc-unet" => Ok(BlockKind::FasterFc),
            other => Err(invalid("block kind", format!("unknown kind {other:?}"))),
        }
    }
}

fn kernel3(rank: usize) -> Vec<usize> {
    vec![3; rank]
}

/// Two consecutive 3×3(×3) convolutions, each followed by normalization
/// and leaky ReLU.
#[derive(Clone, Debug)]
pub struct TwoConvBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub mode: BlockMode,
}

impl TwoConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, &kernel3(rank), rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, &kernel3(rank), rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), cout),
            mode: BlockMode::default(),
        }
    }
}

impl Block for TwoConvBlock {
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(t, s, x)?;
        let h = self.norm1.norm_act(t, s, h, self.mode)?;
        let h = self.conv2.forward(t, s, h)?;
        self.norm2.norm_act(t, s, h, self.mode)
    }

    fn flops(&self, spatial: &[usize]) -> f64 {
        let pix: usize = spatial.iter().product();
        self.conv1.flops(spatial) + self.conv2.flops(spatial) + self.norm1.flops(pix) + self.norm2.flops(pix)
    }

    fn in_channels(&self) -> usize {
        self.conv1.cin
    }

    fn out_channels(&self) -> usize {
        self.conv2.cout
    }

    fn set_mode(&mut self, mode: BlockMode) {
        self.mode = mode;
    }
}

/// Intermediate feature maps of one FasterFC forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FasterFcStages {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
    pub output: Var,
}

/// The FasterFC block: alternating 1×1 convolutions in the spatial and
/// Fourier domains around one 3×3(×3) convolution.
#[derive(Clone, Debug)]
pub struct FasterFcBlock {
    pub conv_in: Conv,
    pub conv3: Conv,
    pub conv_mid: Conv,
    pub conv_spec: Conv,
    pub conv_out: Conv,
    pub norms: [Norm; 5],
    pub mode: BlockMode,
}

impl FasterFcBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cout == 0 || cout % 2 != 0 {
            return Err(invalid(
                "FasterFcBlock",
                format!("output channels must be even to pair halves as complex values, got {cout}"),
            ));
        }
        let n = |i: usize| format!("{name}.norm{i}");
        Ok(Self {
            conv_in: Conv::pointwise(store, &format!("{name}.conv_in"), cin, cout, rank, rng),
            conv3: Conv::new(store, &format!("{name}.conv3"), cout, cout, &kernel3(rank), rng),
            conv_mid: Conv::pointwise(store, &format!("{name}.conv_mid"), cout, cout, rank, rng),
            conv_spec: Conv::pointwise(store, &format!("{name}.conv_spec"), cout, cout, rank, rng),
            conv_out: Conv::pointwise(store, &format!("{name}.conv_out"), 2 * cout, cout, rank, rng),
            norms: [
                Norm::new(store, &n(1), cout),
                Norm::new(store, &n(2), cout),
                Norm::new(store, &n(3), cout),
                Norm::new(store, &n(4), cout),
                Norm::new(store, &n(5), cout),
            ],
            mode: BlockMode::default(),
        })
    }

    pub fn stages(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<FasterFcStages> {
        let m = self.mode;
        let h = self.conv_in.forward(t, s, x)?;
        let f1 = self.norms[0].norm_act(t, s, h, m)?;
        let h = self.conv3.forward(t, s, f1)?;
        let h = self.norms[1].norm_act(t, s, h, m)?;
        let f2 = t.add(h, f1)?;
        let h = self.conv_mid.forward(t, s, f2)?;
        let f3 = self.norms[2].norm_act(t, s, h, m)?;
        let z = t.fft(f3, false, false)?;
        let z = self.conv_spec.forward(t, s, z)?;
        let z = self.norms[3].norm_act(t, s, z, m)?;
        let z = t.fft(z, true, false)?;
        let f4 = t.add(z, f3)?;
        let f34 = t.concat_channels(&[f3, f4])?;
        let h = self.conv_out.forward(t, s, f34)?;
        let output = self.norms[4].norm_act(t, s, h, m)?;
        Ok(FasterFcStages { f1, f2, f3, f4, output })
    }
}

impl Block for FasterFcBlock {
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.stages(t, s, x)?.output)
    }

    fn flops(&self, spatial: &[usize]) -> f64 {
        let pix: usize = spatial.iter().product();
        let c = self.conv_out.cout;
        let convs = [&self.conv_in, &self.conv3, &self.conv_mid, &self.conv_spec, &self.conv_out]
            .iter()
            .map(|cv| cv.flops(spatial))
            .sum::<f64>();
        let norms = self.norms.iter().map(|n| n.flops(pix)).sum::<f64>();
        let spectral = 2.0 * (c / 2) as f64 * flops::fft(pix);
        let adds = 2.0 * (c * pix) as f64 * flops::ADD;
        convs + norms + spectral + adds
    }

    fn in_channels(&self) -> usize {
        self.conv_in.cin
    }

    fn out_channels(&self) -> usize {
        self.conv_out.cout
    }

    fn set_mode(&mut self, mode: BlockMode) {
        self.mode = mode;
    }
}

/// Global path of an FFC layer: reduce, Fourier unit with residual, expand.
#[derive(Clone, Debug)]
struct SpectralTransform {
    conv1: Conv,
    norm1: Norm,
    fu_conv: Conv,
    fu_norm: Norm,
    conv2: Conv,
    hidden: usize,
}

impl SpectralTransform {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (cout / 2).max(1);
        let conv = |store: &mut ParamStore, n: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            let k = vec![1; rank];
            Conv::with_cfg(store, &format!("{name}.{n}"), i, o, &k, crate::autodiff::ConvCfg::valid(rank), false, rng)
        };
        Self {
            conv1: conv(store, "conv1", cin, hidden, rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), hidden),
            fu_conv: conv(store, "fu_conv", 2 * hidden, 2 * hidden, rng),
            fu_norm: Norm::new(store, &format!("{name}.fu_norm"), 2 * hidden),
            conv2: conv(store, "conv2", hidden, cout, rng),
            hidden,
        }
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, mode: BlockMode) -> Result<Var> {
        let h = self.conv1.forward(t, s, x)?;
        let h = self.norm1.norm_act(t, s, h, mode)?;
        // Fourier unit on real input: zero imaginary part in, real part out.
        let mut zshape = t.shape(h).to_vec();
        zshape[1] = self.hidden;
        let zeros = t.constant(Tensor::zeros(&zshape));
        let z = t.concat_channels(&[h, zeros])?;
        let z = t.fft(z, false, false)?;
        let z = self.fu_conv.forward(t, s, z)?;
        let z = self.fu_norm.norm_act(t, s, z, mode)?;
        let z = t.fft(z, true, false)?;
        let fu = t.slice_channels(z, 0, self.hidden)?;
        let y = t.add(h, fu)?;
        self.conv2.forward(t, s, y)
    }

    fn flops(&self, spatial: &[usize]) -> f64 {
        let pix: usize = spatial.iter().product();
        self.conv1.flops(spatial)
            + self.norm1.flops(pix)
            + 2.0 * self.hidden as f64 * flops::fft(pix)
            + self.fu_conv.flops(spatial)
            + self.fu_norm.flops(pix)
            + (self.hidden * pix) as f64 * flops::ADD
            + self.conv2.flops(spatial)
    }
}

/// One FFC layer with its trailing normalization and activation on both
/// the local and the global half.
#[derive(Clone, Debug)]
struct FfcLayer {
    cin_l: usize,
    cin_g: usize,
    l2l: Conv,
    l2g: Conv,
    g2l: Option<Conv>,
    spectral: Option<SpectralTransform>,
    norm_l: Norm,
    norm_g: Norm,
}

impl FfcLayer {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let cin_g = cin / 2;
        let cin_l = cin - cin_g;
        let cout_g = cout / 2;
        let cout_l = cout - cout_g;
        let k = kernel3(rank);
        let dil = vec![1; rank];
        let conv3 = |store: &mut ParamStore, n: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            let cfg = crate::autodiff::ConvCfg::same(&k, &dil);
            Conv::with_cfg(store, &format!("{name}.{n}"), i, o, &k, cfg, false, rng)
        };
        Self {
            cin_l,
            cin_g,
            l2l: conv3(store, "l2l", cin_l, cout_l, rng),
            l2g: conv3(store, "l2g", cin_l, cout_g, rng),
            g2l: (cin_g > 0).then(|| conv3(store, "g2l", cin_g, cout_l, rng)),
            spectral: (cin_g > 0).then(|| SpectralTransform::new(store, &format!("{name}.st"), cin_g, cout_g, rank, rng)),
            norm_l: Norm::new(store, &format!("{name}.norm_l"), cout_l),
            norm_g: Norm::new(store, &format!("{name}.norm_g"), cout_g),
        }
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, mode: BlockMode) -> Result<Var> {
        let xl = t.slice_channels(x, 0, self.cin_l)?;
        let mut yl = self.l2l.forward(t, s, xl)?;
        let mut yg = self.l2g.forward(t, s, xl)?;
        if let (Some(g2l), Some(st)) = (&self.g2l, &self.spectral) {
            let xg = t.slice_channels(x, self.cin_l, self.cin_g)?;
            let a = g2l.forward(t, s, xg)?;
            yl = t.add(yl, a)?;
            let b = st.forward(t, s, xg, mode)?;
            yg = t.add(yg, b)?;
        }
        let yl = self.norm_l.norm_act(t, s, yl, mode)?;
        let yg = self.norm_g.norm_act(t, s, yg, mode)?;
        t.concat_channels(&[yl, yg])
    }

    fn flops(&self, spatial: &[usize]) -> f64 {
        let pix: usize = spatial.iter().product();
        let mut f = self.l2l.flops(spatial) + self.l2g.flops(spatial) + self.norm_l.flops(pix) + self.norm_g.flops(pix);
        if let (Some(g2l), Some(st)) = (&self.g2l, &self.spectral) {
            f += g2l.flops(spatial) + st.flops(spatial);
            f += ((self.l2l.cout + self.l2g.cout) * pix) as f64 * flops::ADD;
        }
        f
    }
}

/// Fast Fourier Convolution baseline with a 0.5 local/global split: two
/// FFC layers, each with its own spectral round trip.
#[derive(Clone, Debug)]
pub struct FfcBlock {
    layers: [FfcLayer; 2],
    cin: usize,
    cout: usize,
    pub mode: BlockMode,
}

impl FfcBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cout < 2 {
            return Err(invalid("FfcBlock", format!("needs at least two output channels, got {cout}")));
        }
        Ok(Self {
            layers: [
                FfcLayer::new(store, &format!("{name}.ffc1"), cin, cout, rank, rng),
                FfcLayer::new(store, &format!("{name}.ffc2"), cout, cout, rank, rng),
            ],
            cin,
            cout,
            mode: BlockMode::default(),
        })
    }
}

impl Block for FfcBlock {
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(t, s, x, self.mode)?;
        self.layers[1].forward(t, s, h, self.mode)
    }

    fn flops(&self, spatial: &[usize]) -> f64 {
        self.layers.iter().map(|l| l.flops(spatial)).sum()
    }

    fn in_channels(&self) -> usize {
        self.cin
    }

    fn out_channels(&self) -> usize {
        self.cout
    }

    fn set_mode(&mut self, mode: BlockMode) {
        self.mode = mode;
    }
}

/// Any of the three block kinds.
#[derive(Clone, Debug)]
pub enum AnyBlock {
    TwoConv(TwoConvBlock),
    Ffc(FfcBlock),
    FasterFc(FasterFcBlock),
}

impl AnyBlock {
    pub fn new(kind: BlockKind, store: &mut ParamStore, name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match kind {
            BlockKind::TwoConv => AnyBlock::TwoConv(TwoConvBlock::new(store, name, cin, cout, rank, rng)),
            BlockKind::Ffc => AnyBlock::Ffc(FfcBlock::new(store, name, cin, cout, rank, rng)?),
            BlockKind::FasterFc => AnyBlock::FasterFc(FasterFcBlock::new(store, name, cin, cout, rank, rng)?),
        })
    }

    fn inner(&self) -> &dyn Block {
        match self {
            AnyBlock::TwoConv(b) => b,
            AnyBlock::Ffc(b) => b,
            AnyBlock::FasterFc(b) => b,
        }
    }
}

impl Block for AnyBlock {
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        self.inner().forward(t, s, x)
    }

    fn flops(&self, spatial: &[usize]) -> f64 {
        self.inner().flops(spatial)
    }

    fn in_channels(&self) -> usize {
        self.inner().in_channels()
    }

    fn out_channels(&self) -> usize {
        self.inner().out_channels()
    }

    fn set_mode(&mut self, mode: BlockMode) {
        match self {
            AnyBlock::TwoConv(b) => b.set_mode(mode),
            AnyBlock::Ffc(b) => b.set_mode(mode),
            AnyBlock::FasterFc(b) => b.set_mode(mode),
        }
    }
}

/// Which output spatial positions change when input position `pos`
/// (row-major over the spatial axes, all channels) is perturbed by
/// `delta`. Changes below `1e-9` of the largest change count as round-off.
pub fn receptive_field_probe<F>(forward: F, input: &Tensor, pos: usize, delta: f64) -> Result<Vec<bool>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let base = forward(input)?;
    let mut bumped = input.clone();
    let shape = input.shape().to_vec();
    let n: usize = shape[2..].iter().product();
    for bc in 0..shape[0] * shape[1] {
        bumped.data_mut()[bc * n + pos] += delta;
    }
    let moved = forward(&bumped)?;
    let on: usize = base.shape()[2..].iter().product();
    let mut change = vec![0.0f64; on];
    for (i, (a, b)) in base.data().iter().zip(moved.data()).enumerate() {
        let c = &mut change[i % on];
        *c = c.max((a - b).abs());
    }
    let peak = change.iter().cloned().fold(0.0, f64::max);
    Ok(change.iter().map(|&c| peak > 0.0 && c > 1e-9 * peak).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(block: &dyn Block, s: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::inference();
        let xv = t.constant(x.clone());
        let y = block.forward(&mut t, s, xv)?;
        Ok(t.value(y).clone())
    }

    #[test]
    fn complex_channel_pairing() {
        let z = channels_to_complex(&Tensor::from_vec(&[1, 2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(z.data()[0], Complex64::new(1.0, 0.0));
        let z = channels_to_complex(&Tensor::from_vec(&[1, 2, 1], vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(z.data()[0], Complex64::new(0.0, 1.0));
        let x = random(&[2, 6, 3, 2], 1);
        assert_eq!(complex_to_channels(&channels_to_complex(&x).unwrap()).unwrap(), x);
        assert!(channels_to_complex(&Tensor::zeros(&[1, 3, 2])).is_err());
    }

    #[test]
    fn shape_contract_all_kinds() {
        for kind in BlockKind::ALL {
            let mut s = ParamStore::new();
            let b = AnyBlock::new(kind, &mut s, "b", 2, 8, 2, &mut rng(2)).unwrap();
            let y = run(&b, &s, &random(&[1, 2, 16, 16], 3)).unwrap();
            assert_eq!(y.shape(), &[1, 8, 16, 16], "{kind}");
        }
        let mut s = ParamStore::new();
        let b = AnyBlock::new(BlockKind::FasterFc, &mut s, "b", 1, 4, 3, &mut rng(2)).unwrap();
        assert_eq!(run(&b, &s, &random(&[2, 1, 4, 6, 5], 3)).unwrap().shape(), &[2, 4, 4, 6, 5]);
    }

    #[test]
    fn odd_output_channels_rejected() {
        let mut s = ParamStore::new();
        assert!(FasterFcBlock::new(&mut s, "b", 2, 7, 2, &mut rng(0)).is_err());
    }

    fn spectral_setup(identity: bool) -> (ParamStore, FasterFcBlock, Tensor, Tensor) {
        let mut s = ParamStore::new();
        let mut b = FasterFcBlock::new(&mut s, "b", 3, 4, 2, &mut rng(4)).unwrap();
        b.mode = BlockMode::linear();
        if identity {
            b.conv_spec.set_identity(&mut s);
        } else if let Some(bias) = b.conv_spec.bias {
            s.value_mut(bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random(&[1, 3, 5, 6], 5);
        let mut t = Tape::inference();
        let xv = t.constant(x);
        let st = b.stages(&mut t, &s, xv).unwrap();
        let (f3, f4) = (t.value(st.f3).clone(), t.value(st.f4).clone());
        (s, b, f3, f4)
    }

    #[test]
    fn identity_spectral_conv_doubles_f3() {
        let (_, _, f3, f4) = spectral_setup(true);
        assert!(f4.max_abs_diff(&f3.scaled(2.0)) < 1e-12);
    }

    /// With the spectral weight `W = [[A, B], [C, D]]` acting on stacked
    /// real/imaginary parts, the branch is `y = p ⊛ z + q ⊛ conj(z(−·))`
    /// with `p = (A + D)/2 + i(C − B)/2`, `q = (A − D)/2 + i(C + B)/2`
    /// times the unit impulse. Evaluated here by direct circular summation.
    #[test]
    fn spectral_branch_matches_circular_convolution() {
        let (s, b, f3, f4) = spectral_setup(false);
        let w = s.value(b.conv_spec.weight).data().to_vec();
        let c = 4;
        let k = c / 2;
        let (h, wd) = (5usize, 6usize);
        let n = h * wd;
        let z = channels_to_complex(&f3).unwrap();
        let got = channels_to_complex(&f4).unwrap();
        let wat = |o: usize, i: usize| w[o * c + i];
        let delta = |dy: usize, dx: usize| if dy == 0 && dx == 0 { 1.0 } else { 0.0 };
        for ko in 0..k {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = z.data()[ko * n + y * wd + x];
                    for ki in 0..k {
                        let (a, bb, cc, d) = (wat(ko, ki), wat(ko, k + ki), wat(k + ko, ki), wat(k + ko, k + ki));
                        let p = Complex64::new((a + d) / 2.0, (cc - bb) / 2.0);
                        let q = Complex64::new((a - d) / 2.0, (cc + bb) / 2.0);
                        for sy in 0..h {
                            for sx in 0..wd {
                                let kern = delta((y + h - sy) % h, (x + wd - sx) % wd);
                                if kern == 0.0 {
                                    continue;
                                }
                                let zs = z.data()[ki * n + sy * wd + sx];
                                let zr = z.data()[ki * n + ((h - sy) % h) * wd + (wd - sx) % wd].conj();
                                acc += p * zs * kern + q * zr * kern;
                            }
                        }
                    }
                    let g = got.data()[ko * n + y * wd + x];
                    assert!((g - acc).norm() <= 1e-6 * acc.norm().max(1e-3), "{g} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn fft_round_trips_per_block() {
        let counts = |kind| {
            let mut s = ParamStore::new();
            let b = AnyBlock::new(kind, &mut s, "b", 4, 4, 2, &mut rng(6)).unwrap();
            let mut t = Tape::inference();
            let x = t.constant(random(&[1, 4, 8, 8], 7));
            b.forward(&mut t, &s, x).unwrap();
            t.fft_counts()
        };
        assert_eq!(counts(BlockKind::FasterFc), (1, 1));
        assert_eq!(counts(BlockKind::Ffc), (2, 2));
        assert_eq!(counts(BlockKind::TwoConv), (0, 0));
    }

    fn probe(kind: BlockKind, shape: &[usize], zero: bool) -> Vec<bool> {
        let mut s = ParamStore::new();
        let mut b = AnyBlock::new(kind, &mut s, "b", shape[1], 4, shape.len() - 2, &mut rng(8)).unwrap();
        b.set_mode(BlockMode {
            bypass_norm: true,
            ..BlockMode::default()
        });
        if zero {
            s.zero_values();
        }
        let x = random(shape, 9);
        let centre = shape[2..].iter().rev().fold((0, 1), |(o, st), e| (o + (e / 2) * st, st * e)).0;
        receptive_field_probe(|x| run(&b, &s, x), &x, centre, 1e-3).unwrap()
    }

    #[test]
    fn fasterfc_influence_is_global() {
        assert!(probe(BlockKind::FasterFc, &[1, 2, 12, 12], false).iter().all(|v| *v));
        assert!(probe(BlockKind::FasterFc, &[1, 2, 8, 8, 8], false).iter().all(|v| *v));
    }

    #[test]
    fn two_conv_influence_is_local() {
        let m = probe(BlockKind::TwoConv, &[1, 2, 12, 12], false);
        for (i, v) in m.iter().enumerate() {
            let (y, x) = (i / 12, i % 12);
            assert_eq!(*v, y.abs_diff(6) <= 2 && x.abs_diff(6) <= 2, "({y},{x})");
        }
        let m = probe(BlockKind::TwoConv, &[1, 1, 9, 9, 9], false);
        assert_eq!(m.iter().filter(|v| **v).count(), 125);
    }

    #[test]
    fn zero_block_has_no_influence() {
        assert!(probe(BlockKind::FasterFc, &[1, 2, 8, 8], true).iter().all(|v| !*v));
    }

    fn block_gradcheck(kind: BlockKind, shape: &[usize], cout: usize) -> f64 {
        let mut s = ParamStore::new();
        let mut r = rng(10);
        let b = AnyBlock::new(kind, &mut s, "b", shape[1], cout, shape.len() - 2, &mut r).unwrap();
        // Perturb norm affine away from (1, 0) so every parameter matters.
        for id in s.ids().collect::<Vec<_>>() {
            if s.name(id).ends_with("scale") || s.name(id).ends_with("shift") {
                s.value_mut(id).data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
            }
        }
        let x = random(shape, 11);
        let w = random(&[shape[0], cout].iter().chain(&shape[2..]).copied().collect::<Vec<_>>(), 12);
        gradcheck(&mut s, 6, 1e-5, |t, s| {
            let xv = t.constant(x.clone());
            let y = b.forward(t, s, xv)?;
            let y = t.mul_const(y, &w)?;
            Ok(t.sum(y))
        })
        .unwrap()
    }

    #[test]
    fn block_gradients() {
        for (kind, shape) in [
            (BlockKind::FasterFc, vec![1, 2, 6, 4]),
            (BlockKind::FasterFc, vec![1, 1, 4, 4, 4]),
            (BlockKind::Ffc, vec![1, 4, 4, 6]),
            (BlockKind::TwoConv, vec![2, 2, 5, 4]),
        ] {
            let err = block_gradcheck(kind, &shape, 4);
            assert!(err <= 1e-4, "{kind} {shape:?}: {err}");
        }
    }
}
