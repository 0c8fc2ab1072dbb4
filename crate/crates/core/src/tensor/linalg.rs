use super::Tensor;
use crate::error::{Error, Result};

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size m×k and `op(b)` k×n.
///
/// `a_t` / `b_t` mean the operand is stored transposed (k×m, n×k). Backed by
/// `matrixmultiply`'s blocked kernel: each output element accumulates its k
/// products in ascending k order within a cache block, blocks in ascending
/// order. That order does not depend on m, n or the element's position, so a
/// row of the product is bitwise identical whether computed alone or inside a
/// larger batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted
    // above in debug builds, guaranteed by every caller), and the strides
    // describe row-major / transposed row-major layouts within them.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    t.expect_rank(2, op)?;
    Ok((t.dims()[0], t.dims()[1]))
}

fn finish(dims: &[usize], data: Vec<f64>, op: &str) -> Result<Tensor> {
    let out = Tensor::from_parts(dims, data);
    out.ensure_finite(op)?;
    Ok(out)
}

/// Matrix product `a · b` of an M×K and a K×N matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner extents differ ({} vs {})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    finish(&[m, n], out, "matmul")
}

/// `aᵀ · b` for a K×M and a K×N matrix.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = matrix_dims(a, "matmul_tn")?;
    let (k2, n) = matrix_dims(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_tn: leading extents differ ({} vs {})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), true, b.data(), false, 0.0, &mut out);
    finish(&[m, n], out, "matmul_tn")
}

/// `a · bᵀ` for an M×K and an N×K matrix.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul_nt")?;
    let (n, k2) = matrix_dims(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt: trailing extents differ ({} vs {})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), true, 0.0, &mut out);
    finish(&[m, n], out, "matmul_nt")
}
