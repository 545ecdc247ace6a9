use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · bᵀ` for `b[k×n]`
fn gemm_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += s;
        }
    }
}

/// `c[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

impl Tape {
    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("[_, {}] x [{}, _]", sb.first().copied().unwrap_or(0), sa.get(1).copied().unwrap_or(0)),
                &sb,
            ));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let (m, n) = (sa[0], sb[1]);
        let c = self.bmm(a3, b3)?;
        self.reshape(c, &[m, n])
    }

    /// Batched matrix product `[B×m×k] · [B×k×n] -> [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err(
                "bmm",
                format!(
                    "[{}, {}, _] compatible with lhs {sa:?}",
                    sa.first().copied().unwrap_or(0),
                    sa.get(2).copied().unwrap_or(0)
                ),
                &sb,
            ));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                gemm_acc(
                    &x[bi * m * k..(bi + 1) * m * k],
                    &y[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.custom(&[a, b], out, move |bw| {
            let g = bw.grad_out();
            let x = bw.value(a).data();
            let y = bw.value(b).data();
            bw.accumulate(a, |ga| {
                for bi in 0..batch {
                    gemm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &y[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            });
            bw.accumulate(b, |gb| {
                for bi in 0..batch {
                    gemm_tn_acc(
                        &x[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            });
        }))
    }

    /// Affine map over the last axis: `y[.., j] = Σ_i x[.., i] w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let sb = self.shape(bias).to_vec();
        let d_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != d_in {
            return Err(shape_err("linear", format!("weight [{d_in}, _]"), &sw));
        }
        let d_out = sw[1];
        if sb != [d_out] {
            return Err(shape_err("linear", format!("bias [{d_out}]"), &sb));
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = Vec::with_capacity(rows * d_out);
        let bvals = self.value(bias).data();
        for _ in 0..rows {
            out.extend_from_slice(bvals);
        }
        gemm_acc(self.value(x).data(), self.value(weight).data(), &mut out, rows, d_in, d_out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let out = Tensor::new(shape, out)?;
        Ok(self.custom(&[x, weight, bias], out, move |bw| {
            let g = bw.grad_out();
            let xv = bw.value(x).data();
            let wv = bw.value(weight).data();
            bw.accumulate(x, |gx| gemm_nt_acc(g, wv, gx, rows, d_in, d_out));
            bw.accumulate(weight, |gw| gemm_tn_acc(xv, g, gw, rows, d_in, d_out));
            bw.accumulate(bias, |gb| {
                for row in g.chunks(d_out) {
                    gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                }
            });
        }))
    }
}
