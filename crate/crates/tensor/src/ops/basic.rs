use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Elementwise unary functions with known derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        if matches!(op, Unary::Log | Unary::Sqrt) {
            if let Some(i) = x.data().iter().position(|&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    op: op.name(),
                    msg: format!("non-positive input {} at index {i}", x.data()[i]),
                });
            }
        }
        let out = Tensor::from_fn(x.shape().to_vec(), |i| op.apply(x.data()[i]));
        Ok(self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            let x = bw.value(a).data();
            let y = bw.output().data();
            bw.accumulate(a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * op.derivative(x[i], y[i]);
                }
            });
        }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid has no domain error")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh has no domain error")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu has no domain error")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp has no domain error")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + y.data()[i]);
        Ok(self.custom(&[a, b], out, move |bw| {
            let g = bw.grad_out();
            for v in [a, b] {
                bw.accumulate(v, |gv| gv.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] - y.data()[i]);
        Ok(self.custom(&[a, b], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            bw.accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * y.data()[i]);
        Ok(self.custom(&[a, b], out, move |bw| {
            let g = bw.grad_out();
            let xa = bw.value(a).data();
            let xb = bw.value(b).data();
            bw.accumulate(a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * xb[i];
                }
            });
            bw.accumulate(b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * xa[i];
                }
            });
        }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * c);
        self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c));
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + c);
        self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
        })
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i].clamp(lo, hi));
        self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            let x = bw.value(a).data();
            bw.accumulate(a, |ga| {
                for i in 0..ga.len() {
                    if x[i] >= lo && x[i] <= hi {
                        ga[i] += g[i];
                    }
                }
            });
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.custom(&[a], Tensor::scalar(s), move |bw| {
            let g = bw.grad_out()[0];
            bw.accumulate(a, |ga| ga.iter_mut().for_each(|d| *d += g));
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Weighted sum `Σ w·a` with constant weights.
    pub fn dot_const(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(a) != weights.shape() {
            return Err(shape_err("dot_const", format!("{:?}", weights.shape()), self.shape(a)));
        }
        let s: f64 = self.value(a).data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let w = weights.data().to_vec();
        Ok(self.custom(&[a], Tensor::scalar(s), move |bw| {
            let g = bw.grad_out()[0];
            bw.accumulate(a, |ga| ga.iter_mut().zip(&w).for_each(|(d, w)| *d += g * w));
        }))
    }

    /// Sum over the last axis, dropping it (rank-1 input yields shape `[1]`).
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let shape = x.shape();
        let len = *shape.last().unwrap();
        let out_shape = reduced_shape(shape);
        let rows = x.numel() / len;
        let out = Tensor::from_fn(out_shape, |r| x.data()[r * len..(r + 1) * len].iter().sum());
        debug_assert_eq!(out.numel(), rows);
        self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| {
                for (r, chunk) in ga.chunks_mut(len).enumerate() {
                    chunk.iter_mut().for_each(|d| *d += g[r]);
                }
            });
        })
    }

    /// Maximum over the last axis; the gradient flows to the first maximiser.
    pub fn max_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let shape = x.shape();
        let len = *shape.last().unwrap();
        let mut argmax = Vec::with_capacity(x.numel() / len);
        let mut vals = Vec::with_capacity(x.numel() / len);
        for row in x.data().chunks(len) {
            let (i, v) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            argmax.push(i);
            vals.push(v);
        }
        let out = Tensor::new(reduced_shape(shape), vals).expect("max_last shape");
        self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| {
                for (r, &i) in argmax.iter().enumerate() {
                    ga[r * len + i] += g[r];
                }
            });
        })
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}
