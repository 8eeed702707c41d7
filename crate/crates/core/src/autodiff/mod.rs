//! Reverse-mode differentiation over a fixed set of array primitives.
//!
//! A [`Tape`] records every primitive applied during a forward pass along
//! with a closure computing the vector-Jacobian product. [`Tape::backward`]
//! replays those closures in reverse order. One training step owns one
//! tape; a tape is not shared across threads.

mod complex;
mod conv;
mod elementwise;
mod loss;
mod norm;
mod pool;
mod spectral;

pub use conv::{conv_output_extent, ConvCfg};

use crate::array::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) struct BackCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub(crate) type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    no_grad: bool,
    fft_calls: usize,
    ifft_calls: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; no adjoints are kept.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn reset(&mut self) {
        let no_grad = self.no_grad;
        *self = Self {
            no_grad,
            ..Self::default()
        };
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of forward and inverse FFT primitives applied so far.
    pub fn fft_counts(&self) -> (usize, usize) {
        (self.fft_calls, self.ifft_calls)
    }

    pub(crate) fn count_fft(&mut self, inverse: bool) {
        if inverse {
            self.ifft_calls += 1;
        } else {
            self.fft_calls += 1;
        }
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// Records an input whose gradient should be tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, !self.no_grad, None)
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.leaf(store.value(id).clone(), !self.no_grad, Some(id))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], back: BackFn) -> Var {
        let requires_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            back: if requires_grad { Some(back) } else { None },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to `v`, available after
    /// [`Tape::backward`]. Values the loss does not depend on get zeros.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.back.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let pg = back(&ctx);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, pgrad) in node.parents.iter().zip(pg) {
                let Some(pgrad) = pgrad else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pgrad.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pgrad),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Parameter leaves and their gradients after [`Tape::backward`].
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let id = n.param?;
            let g = self.grads.get(i)?.as_ref()?;
            Some((id, g))
        })
    }
}

/// Central finite-difference check of every parameter in `store` (or a
/// seeded sample of at most `samples` entries per parameter).
///
/// `loss` must rebuild the forward pass from the store each time it is
/// called. Returns the largest error over all parameters, each measured as
/// `max|analytic − numeric| / max|numeric|`.
///
/// Two numerical guards keep the measure meaningful:
/// - the denominator is floored at `1e-5` of the largest numeric derivative
///   in the whole store (and at `1e-6·max(1, |L|)`), so parameters whose
///   true derivative is zero, such as a bias feeding a normalization, do
///   not divide round-off by round-off;
/// - each entry is differenced with `step` and `step/10`. When the two
///   disagree, a kink of a piecewise-linear activation lies inside the
///   wider stencil and the narrower estimate is used instead.
pub fn gradcheck<F>(store: &mut ParamStore, samples: usize, step: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    use rand::{seq::index::sample, SeedableRng};

    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let l0 = tape.value(l).data()[0];
    tape.backward(l)?;
    store.zero_grads();
    store.accumulate_from(&tape);
    let analytic: Vec<Tensor> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let l = loss(&mut t, store)?;
        Ok(t.value(l).data()[0])
    };

    struct Entry {
        param: usize,
        analytic: f64,
        numeric: f64,
        kink: bool,
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut entries = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        let n = store.value(id).len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            sample(&mut rng, n, samples).into_vec()
        };
        for j in picks {
            let orig = store.value(id).data()[j];
            let mut central = |h: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[j] = orig + h;
                let up = eval(store)?;
                store.value_mut(id).data_mut()[j] = orig - h;
                let down = eval(store)?;
                store.value_mut(id).data_mut()[j] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let wide = central(step)?;
            let narrow = central(step / 10.0)?;
            let noise = 1e-11 * l0.abs().max(1.0) / step;
            let kink = (wide - narrow).abs() > 1e-6 * wide.abs().max(narrow.abs()) + noise;
            entries.push(Entry {
                param: k,
                analytic: analytic[k].data()[j],
                numeric: if kink { narrow } else { wide },
                kink,
            });
        }
    }
    let global = entries.iter().map(|e| e.numeric.abs()).fold(0.0, f64::max);
    let floor = (1e-5 * global).max(1e-6 * l0.abs().max(1.0));
    let debug = std::env::var_os("GRADCHECK_DEBUG").is_some();
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let mine: Vec<&Entry> = entries.iter().filter(|e| e.param == k).collect();
        let max_num = mine.iter().map(|e| e.numeric.abs()).fold(0.0, f64::max);
        let max_diff = mine.iter().map(|e| (e.numeric - e.analytic).abs()).fold(0.0, f64::max);
        let err = max_diff / max_num.max(floor);
        if debug {
            let kinks = mine.iter().filter(|e| e.kink).count();
            eprintln!("{}: err {err:.3e}, |num| {max_num:.3e}, kinks {kinks}/{}", store.name(id), mine.len());
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
