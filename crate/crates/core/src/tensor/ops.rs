//! Elementwise maps, reductions, and shape plumbing.

use super::{numel, Tensor};
use crate::error::{Error, Result};

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f64> = x.values().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        op,
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, out, parents| {
            let inp = parents[0].values();
            let gx = g
                .iter()
                .zip(inp)
                .zip(out)
                .map(|((g, &i), &o)| g * df(i, o))
                .collect();
            vec![Some(gx)]
        }),
    )
}

/// Split `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.values().iter().zip(other.values()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.values().iter().zip(other.values()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.values().iter().zip(other.values()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (p[0].values(), p[1].values());
                let ga = g.iter().zip(b).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// `self + bias` with `bias` broadcast along every axis but the last.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let width = *self.shape().last().unwrap_or(&0);
        if bias.len() != width {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.values();
        let data = self
            .values()
            .chunks(width)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            "add_bias",
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; width];
                for row in g.chunks(width) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        unary(self, "scale", |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, "add_scalar", |v| v + s, |_, _| 1.0)
    }

    /// max(x, 0); the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        super::trace_branches(|| self.values().iter().map(|&v| v > 0.0).collect::<Vec<_>>());
        unary(self, "relu", |v| v.max(0.0), |i, _| if i > 0.0 { 1.0 } else { 0.0 })
    }

    /// max(x, floor); the subgradient at the floor is 0.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        super::trace_branches(|| self.values().iter().map(|&v| v > floor).collect::<Vec<_>>());
        unary(self, "clamp_min", |v| v.max(floor), move |i, _| if i > floor { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        unary(self, "exp", f64::exp, |_, o| o)
    }

    pub fn log(&self) -> Tensor {
        unary(self, "log", f64::ln, |i, _| 1.0 / i)
    }

    /// log(1 + e^x), evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        unary(
            self,
            "softplus",
            |v| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() },
            |i, _| {
                if i >= 0.0 {
                    1.0 / (1.0 + (-i).exp())
                } else {
                    let e = i.exp();
                    e / (1.0 + e)
                }
            },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let total = self.values().iter().sum();
        let n = self.len();
        Tensor::from_op(
            "sum_all",
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`; that axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..][..inner];
                out[o * inner..][..inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Max over `axis`. The gradient goes to the argmax; ties resolve to the
    /// lowest index along the axis.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || self.shape()[axis] == 0 {
            return Err(Error::invalid("max_axis", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.values();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = x[base + i];
                    let k = o * inner + i;
                    if v > out[k] || l == 0 {
                        out[k] = v;
                        arg[k] = base + i;
                    }
                }
            }
        }
        super::trace_branches(|| arg.clone());
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let n = self.len();
        Ok(Tensor::from_op(
            "max_axis",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (k, &src) in arg.iter().enumerate() {
                    gx[src] += g[k];
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            let s = p.shape();
            if s.len() != first.shape().len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", first.shape(), s));
            }
        }
        let rows = numel(lead);
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.values()[r * w..][..w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let widths_bw = widths.clone();
        Ok(Tensor::from_op(
            "concat_last",
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut grads: Vec<Vec<f64>> =
                    widths_bw.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths_bw) {
                        gp.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor> {
        let width = *self.shape().last().unwrap_or(&0);
        if start >= end || end > width {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{end} for shape {:?}", self.shape()),
            ));
        }
        let w = end - start;
        let data = self
            .values()
            .chunks(width)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let n = self.len();
        Ok(Tensor::from_op(
            "slice_last",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (dst, src) in gx.chunks_mut(width).zip(g.chunks(w)) {
                    dst[start..end].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Divide each row of a 2-D tensor by its Euclidean norm. Rows with norm
    /// below `1e-12` are rejected.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::invalid("l2_normalize_rows", format!("need 2-D, got {:?}", self.shape())));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for row in x.chunks(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite("l2_normalize_rows input".into()));
            }
            if n <= 1e-12 {
                return Err(Error::ZeroNorm("l2_normalize_rows"));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        Ok(Tensor::from_op(
            "l2_normalize_rows",
            data,
            vec![rows, cols],
            vec![self.clone()],
            Box::new(move |g, out, _| {
                // d(x/|x|) = (g - y (y.g)) / |x|
                let mut gx = Vec::with_capacity(rows * cols);
                for ((gr, yr), n) in g.chunks(cols).zip(out.chunks(cols)).zip(&norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * dot) / n));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Select rows (first-axis slices) by index; duplicates allowed. The
    /// gradient scatters back with accumulation.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {rows}")));
        }
        let x = self.values();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&x[i * cols..][..cols]);
        }
        let mut shape = self.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = indices.len();
        let idx = indices.to_vec();
        let n = self.len();
        Ok(Tensor::from_op(
            "gather_rows",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i * cols..][..cols].iter_mut().zip(&g[k * cols..][..cols]).for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Flat-index gather into a tensor of the given shape.
    pub fn gather_flat(&self, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != indices.len() {
            return Err(Error::invalid("gather_flat", format!("{} indices for shape {shape:?}", indices.len())));
        }
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather_flat", format!("index {bad} out of {n}")));
        }
        let x = self.values();
        let data = indices.iter().map(|&i| x[i]).collect();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "gather_flat",
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (gv, &i) in g.iter().zip(&idx) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Output row `r` is `Σ w · self[i]` over the `(i, w)` pairs in
    /// `mix[r]`. Weights are constants.
    pub fn mix_rows(&self, mix: &[Vec<(usize, f64)>]) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        for m in mix {
            if let Some(&(bad, _)) = m.iter().find(|(i, _)| *i >= rows) {
                return Err(Error::invalid("mix_rows", format!("row {bad} out of {rows}")));
            }
        }
        let x = self.values();
        let mut data = vec![0.0; mix.len() * cols];
        for (out, m) in data.chunks_mut(cols.max(1)).zip(mix) {
            for &(i, w) in m {
                out.iter_mut().zip(&x[i * cols..][..cols]).for_each(|(o, v)| *o += w * v);
            }
        }
        let mix = mix.to_vec();
        let n = self.len();
        let shape = vec![mix.len(), cols];
        Ok(Tensor::from_op(
            "mix_rows",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (gr, m) in g.chunks(cols.max(1)).zip(&mix) {
                    for &(i, w) in m {
                        gx[i * cols..][..cols].iter_mut().zip(gr).for_each(|(a, b)| *a += w * b);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::param(v.to_vec(), s).unwrap()
    }

    #[test]
    fn relu_definition() {
        assert_eq!(t(&[-1.0, 2.0], &[2]).relu().values(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_kink_subgradient_is_zero() {
        let x = t(&[0.0], &[1]);
        x.relu().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn normalize_three_four_five() {
        let y = t(&[3.0, 4.0], &[1, 2]).l2_normalize_rows().unwrap();
        assert_eq!(y.values(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        assert!(matches!(
            t(&[0.0, 0.0], &[1, 2]).l2_normalize_rows(),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn square_sum_grad() {
        let x = t(&[1.0, 2.0], &[2]);
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn log_exp_identity_grad() {
        let x = t(&[0.7], &[1]);
        x.exp().log().sum_all().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_ties_go_to_lowest_index() {
        let x = t(&[1.0, 3.0, 3.0, 0.0, 5.0, 5.0], &[2, 3]);
        let m = x.max_axis(1).unwrap();
        assert_eq!(m.values(), &[3.0, 5.0]);
        m.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_over_middle_axis() {
        let x = t(&[1.0, 9.0, 4.0, 2.0, 7.0, 0.0, 3.0, 8.0], &[2, 2, 2]);
        let m = x.max_axis(1).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.values(), &[4.0, 9.0, 7.0, 8.0]);
    }

    #[test]
    fn sum_axis_shapes() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum_axis(0).unwrap().values(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().values(), &[6.0, 15.0]);
        assert!(x.sum_axis(2).is_err());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat_last(&[a.clone(), b]).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice_last(0, 2).unwrap().values(), a.values());
    }

    #[test]
    fn mismatch_names_op_and_shapes() {
        let err = t(&[1.0, 2.0], &[2]).add(&t(&[1.0], &[1])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[1]"), "{msg}");
    }

    #[test]
    fn softplus_is_stable() {
        let y = t(&[-800.0, 0.0, 800.0], &[3]).softplus();
        assert_eq!(y.values()[0], 0.0);
        assert!((y.values()[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.values()[2], 800.0);
    }

    #[test]
    fn gather_duplicates_accumulate() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let g = x.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(g.values(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        g.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
    }
}
