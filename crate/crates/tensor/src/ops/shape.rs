use super::strides;
use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(shape.to_vec(), x.data().to_vec())
            .map_err(|_| shape_err("reshape", format!("{} elements", x.numel()), shape))?;
        Ok(self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
        }))
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(shape_err("permute", format!("a permutation of {} axes", shape.len()), axes));
        }
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let map = index_map(&out_shape, &src_strides);
        let out = Tensor::from_fn(out_shape, |i| x.data()[map[i]]);
        Ok(self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| {
                for (i, &src) in map.iter().enumerate() {
                    ga[src] += g[i];
                }
            });
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose_last", "rank >= 2", self.shape(a)));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Repeats size-1 axes of `a` to reach `shape` (equal rank required).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let xs = x.shape();
        if xs.len() != shape.len() || xs.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(shape_err("broadcast_to", format!("broadcastable to {shape:?}"), xs));
        }
        if xs == shape {
            return Ok(a);
        }
        let in_strides = strides(xs);
        let src_strides: Vec<usize> = xs.iter().zip(&in_strides).map(|(&s, &st)| if s == 1 { 0 } else { st }).collect();
        let map = index_map(shape, &src_strides);
        let out = Tensor::from_fn(shape.to_vec(), |i| x.data()[map[i]]);
        Ok(self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| {
                for (i, &src) in map.iter().enumerate() {
                    ga[src] += g[i];
                }
            });
        }))
    }

    /// `a + b` where `b` broadcasts to the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(a, bb)
    }

    /// `a * b` where `b` broadcasts to the shape of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.mul(a, bb)
    }

    /// Selects rows (first-axis slices) of `a` by index; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n = x.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(shape_err("gather_rows", format!("row indices < {n}"), rows));
        }
        let row_len = x.numel() / n;
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * row_len..(r + 1) * row_len]);
        }
        let out = Tensor::new(shape, data)?;
        let rows = rows.to_vec();
        Ok(self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| {
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut ga[r * row_len..(r + 1) * row_len];
                    dst.iter_mut().zip(&g[k * row_len..(k + 1) * row_len]).for_each(|(d, s)| *d += s);
                }
            });
        }))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let last = *x.shape().last().unwrap();
        if len == 0 || start + len > last {
            return Err(shape_err("slice_last", format!("range {start}..{} within last axis", start + len), x.shape()));
        }
        let rows = x.numel() / last;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * last + start..r * last + start + len]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(a, |ga| {
                for r in 0..rows {
                    for c in 0..len {
                        ga[r * last + start + c] += g[r * len + c];
                    }
                }
            });
        }))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_last", format!("leading shape {lead:?}"), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let parts_owned = parts.to_vec();
        Ok(self.custom(parts, out, move |bw| {
            let g = bw.grad_out();
            let mut off = 0;
            for (&p, &w) in parts_owned.iter().zip(&widths) {
                bw.accumulate(p, |gp| {
                    for r in 0..rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + off + c];
                        }
                    }
                });
                off += w;
            }
        }))
    }
}

/// For each flat output index over `shape`, the source offset given per-axis
/// source strides.
fn index_map(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}
