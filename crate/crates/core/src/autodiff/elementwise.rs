use super::{Tape, Var};
use crate::array::Tensor;
use crate::error::{shape_err, Result};

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.scaled(-1.0))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| zip_map(c.grad, c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| zip_map(c.grad, c.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scaled(s);
        self.push(v, &[x], Box::new(move |c| vec![Some(c.grad.scaled(s))]))
    }

    /// Multiplies by a constant whose shape equals the trailing axes of `x`
    /// (e.g. a sampling mask broadcast over coils and readout).
    pub fn mul_const(&mut self, x: Var, m: &Tensor) -> Result<Var> {
        let xs = self.shape(x);
        if m.ndim() > xs.len() || xs[xs.len() - m.ndim()..] != *m.shape() {
            return Err(shape_err(
                "mul_const",
                format!("constant {:?} does not match trailing axes of {:?}", m.shape(), xs),
            ));
        }
        let m = m.data().to_vec();
        let k = m.len();
        let mut v = self.value(x).clone();
        v.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, e)| *e *= m[i % k]);
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let mut g = c.grad.clone();
                g.data_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, e)| *e *= m[i % k]);
                vec![Some(g)]
            }),
        ))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).scaled(sv);
        Ok(self.push(
            v,
            &[x, s],
            Box::new(|c| {
                let sv = c.inputs[1].data()[0];
                let gs: f64 = c.grad.data().iter().zip(c.inputs[0].data()).map(|(g, x)| g * x).sum();
                vec![
                    c.needs[0].then(|| c.grad.scaled(sv)),
                    c.needs[1].then(|| Tensor::from_vec(c.inputs[1].shape(), vec![gs]).unwrap()),
                ]
            }),
        ))
    }

    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        // select rather than branch: signs of activations are close to random
        let v = self.value(x).map(|&e| e.max(0.0) + slope * e.min(0.0));
        self.push(
            v,
            &[x],
            Box::new(move |c| {
                vec![Some(zip_map(c.grad, c.inputs[0], |g, x| {
                    let d = if x >= 0.0 { 1.0 } else { slope };
                    g * d
                }))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(
            v,
            &[x],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.data()[0]))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let w = Tensor::full(target.shape(), 1.0);
        self.masked_mse(x, target, &w)
    }

    /// `Σ w·(x − t)² / Σ w` against a constant target and weights.
    pub fn masked_mse(&mut self, x: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() || target.shape() != weight.shape() {
            return Err(shape_err(
                "masked_mse",
                format!(
                    "input {:?}, target {:?}, weight {:?}",
                    self.shape(x),
                    target.shape(),
                    weight.shape()
                ),
            ));
        }
        let wsum = weight.sum();
        if wsum <= 0.0 {
            return Err(crate::error::invalid("masked_mse", "weights sum to zero"));
        }
        let t = target.clone();
        let w = weight.clone();
        let loss: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(t.data())
            .zip(w.data())
            .map(|((x, t), w)| w * (x - t) * (x - t))
            .sum::<f64>()
            / wsum;
        Ok(self.push(
            Tensor::scalar(loss),
            &[x],
            Box::new(move |c| {
                let g0 = c.grad.data()[0] * 2.0 / wsum;
                let data = c.inputs[0]
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(w.data())
                    .map(|((x, t), w)| g0 * w * (x - t))
                    .collect();
                vec![Some(Tensor::from_vec(c.inputs[0].shape(), data).unwrap())]
            }),
        ))
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat_channels", format!("{:?} vs {:?}", first, s)));
            }
            chans.push(s[1]);
        }
        let total: usize = chans.iter().sum();
        let inner: usize = first[2..].iter().product();
        let batch = first[0];
        let mut shape = first.clone();
        shape[1] = total;
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            v,
            xs,
            Box::new(move |c| {
                let mut res = Vec::with_capacity(chans.len());
                let mut off = 0;
                for (k, &ch) in chans.iter().enumerate() {
                    if !c.needs[k] {
                        res.push(None);
                        off += ch;
                        continue;
                    }
                    let mut g = Vec::with_capacity(batch * ch * inner);
                    for b in 0..batch {
                        let start = (b * total + off) * inner;
                        g.extend_from_slice(&c.grad.data()[start..start + ch * inner]);
                    }
                    let mut s = c.inputs[k].shape().to_vec();
                    s[1] = ch;
                    res.push(Some(Tensor::from_vec(&s, g).unwrap()));
                    off += ch;
                }
                res
            }),
        ))
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(shape_err(
                "slice_channels",
                format!("channels [{start}, {}) of {:?}", start + len, shape),
            ));
        }
        let (batch, total) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(batch * len * inner);
        for b in 0..batch {
            let s = (b * total + start) * inner;
            out.extend_from_slice(&self.value(x).data()[s..s + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = len;
        let v = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c| {
                let mut g = Tensor::zeros(&shape);
                for b in 0..batch {
                    let s = (b * total + start) * inner;
                    g.data_mut()[s..s + len * inner]
                        .copy_from_slice(&c.grad.data()[b * len * inner..(b + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Reinterprets the shape without moving data.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()).unwrap())]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::params::ParamStore;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::from_vec(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn leaky_relu_values() {
        let mut tp = Tape::new();
        let x = tp.input(t(&[2], &[2.0, -1.0]));
        let y = tp.leaky_relu(x, 0.2);
        assert_eq!(tp.value(y).data(), &[2.0, -0.2]);
    }

    #[test]
    fn leaky_relu_gradient_matches_finite_difference() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(-1.0));
        let err = gradcheck(&mut store, 8, 1e-5, |tp, s| {
            let x = tp.param(s, s.find("x").unwrap());
            let y = tp.leaky_relu(x, 0.2);
            Ok(tp.sum(y))
        })
        .unwrap();
        assert!(err < 1e-8);
        let mut tp = Tape::new();
        let x = tp.input(Tensor::scalar(-1.0));
        let y = tp.leaky_relu(x, 0.2);
        tp.backward(y).unwrap();
        assert!((tp.grad(x).data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn composite_gradients() {
        let mut store = ParamStore::new();
        store.add("a", t(&[1, 3, 2], &[0.3, -0.2, 1.1, 0.7, -0.9, 0.4]));
        store.add("b", t(&[1, 2, 2], &[0.5, 0.1, -0.6, 0.8]));
        store.add("s", Tensor::scalar(0.7));
        let target = t(&[1, 5, 2], &[0.1; 10]);
        let mask = t(&[2], &[1.0, 0.0]);
        let err = gradcheck(&mut store, 16, 1e-5, |tp, s| {
            let a = tp.param(s, s.find("a").unwrap());
            let b = tp.param(s, s.find("b").unwrap());
            let sc = tp.param(s, s.find("s").unwrap());
            let cat = tp.concat_channels(&[a, b])?;
            let sl = tp.slice_channels(cat, 1, 3)?;
            let m = tp.mul(sl, sl)?;
            let m = tp.mul_const(m, &mask)?;
            let m = tp.mul_scalar(m, sc)?;
            let back = tp.concat_channels(&[m, b])?;
            let r = tp.leaky_relu(back, 0.1);
            tp.mse(r, &target)
        })
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tp = Tape::new();
        let a = tp.input(Tensor::zeros(&[2, 3]));
        let b = tp.input(Tensor::zeros(&[3, 2]));
        let e = tp.add(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[3, 2]"));
    }
}
