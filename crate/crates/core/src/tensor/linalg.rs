use super::Tensor;
use crate::error::{Error, Result};

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Stored rows and columns (before any transposition).
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat { data, rows, cols, trans: false }
    }

    pub fn t(self) -> Self {
        Mat { trans: !self.trans, ..self }
    }

    fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c`, with `c` row-major `[m, n]`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the slices cover m*k, k*n and m*n elements under the given
    // strides, which is what dgemm reads and writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// `[n, k] · [k, m] → [n, m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(Mat::new(self.values(), n, k), Mat::new(other.values(), k, m), &mut out, 0.0);
        Ok(Tensor::from_op(
            "matmul",
            out,
            vec![n, m],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let gm = Mat::new(g, n, m);
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; n * k];
                    gemm(gm, Mat::new(p[1].values(), k, m).t(), &mut ga, 0.0);
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; k * m];
                    gemm(Mat::new(p[0].values(), n, k).t(), gm, &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("need 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(Tensor::from_op(
            "transpose",
            out,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().values(), &[4.0, 5.0, 10.0, 11.0]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn gemm_transposed_operands() {
        // a^T b with a: [2,3] stored, b: [2,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; 6];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&b, 2, 2), &mut c, 0.0);
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transpose().unwrap().values(), a.values());
    }
}
