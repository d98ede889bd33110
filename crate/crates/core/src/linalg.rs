//! QR orthogonalization used for the rotation's initialization and retraction.

use alloc::vec;

use crate::tensor::Tensor;

/// Orthogonal factor `Q` of `a = QR` (square `a`), computed by modified
/// Gram-Schmidt on the columns with the signs fixed so that `diag(R) > 0`.
///
/// A column that collapses numerically is replaced by the first canonical
/// basis vector that survives re-orthogonalization.
pub fn qr_orthogonal(a: &Tensor) -> Tensor {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    // work on columns as contiguous rows of the transpose
    let mut cols = a.transpose().into_data();
    for j in 0..n {
        for i in 0..j {
            let (done, rest) = cols.split_at_mut(j * n);
            let qi = &done[i * n..(i + 1) * n];
            let cj = &mut rest[..n];
            let r: f64 = qi.iter().zip(cj.iter()).map(|(x, y)| x * y).sum();
            for (c, q) in cj.iter_mut().zip(qi) {
                *c -= r * q;
            }
        }
        let mut nrm = libm::sqrt(cols[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>());
        if nrm < 1e-12 {
            let mut e = 0;
            loop {
                let mut cand = vec![0.0; n];
                cand[e] = 1.0;
                for i in 0..j {
                    let qi = &cols[i * n..(i + 1) * n];
                    let r: f64 = qi.iter().zip(&cand).map(|(x, y)| x * y).sum();
                    for (c, q) in cand.iter_mut().zip(qi) {
                        *c -= r * q;
                    }
                }
                let cn = libm::sqrt(cand.iter().map(|v| v * v).sum::<f64>());
                if cn > 1e-6 || e + 1 == n {
                    cols[j * n..(j + 1) * n].copy_from_slice(&cand);
                    nrm = cn;
                    break;
                }
                e += 1;
            }
        }
        for v in &mut cols[j * n..(j + 1) * n] {
            *v /= nrm;
        }
    }
    Tensor::matrix(n, n, cols)
        .expect("square buffer")
        .transpose()
}

/// `max |A A^T - I|`.
pub fn orthogonality_error(a: &Tensor) -> f64 {
    let prod = a.matmul(&a.transpose()).expect("square");
    let n = a.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((prod.at(i, j) - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_tensor, seeded};

    #[test]
    fn qr_of_random_matrix_is_orthogonal() {
        let mut rng = seeded(3);
        for n in [1, 2, 5, 16] {
            let a = gaussian_tensor(&mut rng, &[n, n], 1.0);
            let q = qr_orthogonal(&a);
            assert!(orthogonality_error(&q) < 1e-12);
        }
    }

    #[test]
    fn qr_recovers_positive_diagonal() {
        let mut rng = seeded(11);
        let a = gaussian_tensor(&mut rng, &[6, 6], 1.0);
        let q = qr_orthogonal(&a);
        // R = Q^T A must be upper triangular with positive diagonal
        let r = q.transpose().matmul(&a).unwrap();
        for i in 0..6 {
            assert!(r.at(i, i) > 0.0);
            for j in 0..i {
                assert!(r.at(i, j).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn qr_of_orthogonal_is_identity_map() {
        let mut rng = seeded(5);
        let q = qr_orthogonal(&gaussian_tensor(&mut rng, &[8, 8], 1.0));
        let q2 = qr_orthogonal(&q);
        for (a, b) in q.data().iter().zip(q2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_input_still_orthogonal() {
        let a = Tensor::matrix(3, 3, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let q = qr_orthogonal(&a);
        assert!(orthogonality_error(&q) < 1e-12);
    }
}
