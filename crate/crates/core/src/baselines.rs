//! Time-varying LQR along a nominal trajectory.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

#[derive(Debug, Clone, PartialEq)]
pub struct TvlqrGains {
    /// `K_k` for `k = 0..T`, each `n_u × n_x`; the control law is `δu = −K_k δx`.
    pub k: Vec<DMatrix<f64>>,
    /// Cost-to-go matrices `P_0..=P_T`.
    pub p: Vec<DMatrix<f64>>,
}

impl TvlqrGains {
    pub fn horizon(&self) -> usize {
        self.k.len()
    }
}

/// Backward Riccati recursion with `P_T = Q_T`,
/// `K_k = (R + BᵀP B)⁻¹ BᵀP A` and `P_k = Q + AᵀP (A − B K_k)`.
pub fn tvlqr(
    a_seq: &[DMatrix<f64>],
    b_seq: &[DMatrix<f64>],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_terminal: &DMatrix<f64>,
) -> Result<TvlqrGains> {
    let horizon = a_seq.len();
    if b_seq.len() != horizon {
        return Err(Error::Dimension {
            context: "tvlqr B sequence",
            expected: horizon,
            actual: b_seq.len(),
        });
    }
    let n_x = q.nrows();
    let n_u = r.nrows();
    for (a, b) in a_seq.iter().zip(b_seq) {
        if a.shape() != (n_x, n_x) || b.shape() != (n_x, n_u) {
            return Err(Error::Config(format!(
                "tvlqr expects A {n_x}x{n_x} and B {n_x}x{n_u}, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }

    let mut p = vec![DMatrix::zeros(n_x, n_x); horizon + 1];
    let mut k = vec![DMatrix::zeros(n_u, n_x); horizon];
    p[horizon] = symmetrize(q_terminal);
    for step in (0..horizon).rev() {
        let (a, b) = (&a_seq[step], &b_seq[step]);
        let pb = &p[step + 1] * b;
        let gram = r + b.transpose() * &pb;
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("tvlqr: R + BᵀPB is not positive definite at k={step}")))?;
        let gain = chol.solve(&(pb.transpose() * a));
        let next = q + a.transpose() * &p[step + 1] * (a - b * &gain);
        p[step] = symmetrize(&next);
        k[step] = gain;
    }
    Ok(TvlqrGains { k, p })
}
