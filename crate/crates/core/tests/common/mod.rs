#![allow(dead_code)]

use rg_core::linalg::Matrix;
use rg_core::norms::NormSpec;

/// Square matrix from the first `n²` values.
pub fn square(n: usize, raw: &[f64]) -> Matrix {
    Matrix::from_row_major(n, n, raw[..n * n].to_vec()).unwrap()
}

/// `RRᵀ + 0.2·I` from the first `n²` values.
pub fn spd(n: usize, raw: &[f64]) -> Matrix {
    let r = square(n, raw);
    r.matmul(&r.transpose()).add(&Matrix::identity(n).scale(0.2)).symmetric_part()
}

/// One of L1, L2, Linf or a random weighted norm.
pub fn norm(kind: usize, n: usize, raw: &[f64]) -> NormSpec {
    match kind % 4 {
        0 => NormSpec::l1(),
        1 => NormSpec::l2(),
        2 => NormSpec::linf(),
        _ => NormSpec::weighted(&spd(n, raw)).unwrap(),
    }
}
