//! Dense row-major `f64` tensors and the matmul kernel everything sits on.

use super::AutogradError;

/// A dense tensor with row-major layout. Rank is the length of `shape`;
/// scalars are rank 0 with a single element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches the shape's element
    /// count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutogradError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "tensor::new",
                detail: format!("shape {shape:?} wants {expect} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutogradError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single element of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value; callers use it only
    /// on scalars they produced themselves.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of {} elements", self.data.len());
        self.data[0]
    }

    /// Rows of a rank-2 tensor. Rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            r => panic!("cols() on rank-{r} tensor"),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let w = self.cols();
        &self.data[row * w..(row + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, AutogradError> {
        Tensor::new(shape, self.data.clone())
    }
}

/// `out = a × b` for logical shapes `a: m×k`, `b: k×n`, where either operand
/// may be stored transposed (`a_stored_t` means the buffer holds `aᵀ`, i.e. a
/// `k×m` row-major matrix). Strides keep us from materialising transposes in
/// the backward pass.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_stored_t: bool,
    b: &[f64],
    b_stored_t: bool,
    out: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm rhs buffer size");
    assert_eq!(out.len(), m * n, "gemm out buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    let (rsa, csa) = if a_stored_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_stored_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(4.25);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t.item(), 4.25);
    }

    #[test]
    fn gemm_matches_naive() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 - i as f64 * 0.25).collect();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut out);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposed_operands() {
        // a stored transposed: buffer holds aᵀ (k×m); b stored transposed:
        // buffer holds bᵀ (n×k). Result must equal the plain product.
        let m = 2;
        let k = 3;
        let n = 4;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut plain = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut plain);
        let mut strided = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut strided);
        for (x, y) in plain.iter().zip(&strided) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_zero_inner_dimension_zeroes_output() {
        let mut out = vec![7.0; 4];
        gemm(2, 0, 2, &[], false, &[], false, &mut out);
        assert_eq!(out, vec![0.0; 4]);
    }
}
