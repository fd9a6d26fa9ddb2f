//! Worst-case one-step deviation over an ellipsoidal uncertainty set.
//!
//! For a closed-loop deviation map `M = A + B·W` and the set
//! `{δ : δᵀ S δ <= 1}`, the worst-case weighted squared deviation
//!
//! ```text
//! d_max = max_{δᵀSδ <= 1} ‖M δ‖²_P = λ_max(S^{-1/2} Mᵀ P M S^{-1/2})
//! ```
//!
//! is attained at `δ_max = S^{-1/2} v` with `v` the top unit eigenvector.
//! When the top eigenvalue is simple, `d_max` is differentiable and its
//! gradient is the partial gradient of `δ_maxᵀ Mᵀ P M δ_max` with `δ_max`
//! held fixed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, jacobi_eigen, symmetrize};

/// Power-iteration cap.
pub const MAX_POWER_ITERATIONS: usize = 10_000;
/// Residual tolerance for the eigen solver.
pub const EIGEN_TOL: f64 = 1e-12;

/// Relative eigengap below which the maximizer is treated as non-unique.
pub fn degeneracy_threshold(lambda_max: f64) -> f64 {
    1e-8 * lambda_max.abs().max(1.0)
}

/// Diagonal positive-definite shape matrix of the set `{δ : δᵀ S δ <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidShape {
    diag: DVector<f64>,
}

impl EllipsoidShape {
    pub fn new(diag: DVector<f64>) -> Result<Self> {
        if let Some(i) = diag.iter().position(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Config(format!(
                "ellipsoid diagonal entry {i} must be positive, got {}",
                diag[i]
            )));
        }
        Ok(Self { diag })
    }

    pub fn from_slice(diag: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(diag))
    }

    pub fn identity(n: usize) -> Self {
        Self {
            diag: DVector::from_element(n, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn inv_sqrt(&self) -> DVector<f64> {
        self.diag.map(|d| 1.0 / d.sqrt())
    }

    /// `δᵀ S δ`.
    pub fn quadratic_form(&self, delta: &DVector<f64>) -> f64 {
        delta
            .iter()
            .zip(self.diag.iter())
            .map(|(d, s)| s * d * d)
            .sum()
    }
}

/// Symmetric positive-semidefinite weight `P` on the propagated deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationWeight {
    matrix: DMatrix<f64>,
}

impl DeviationWeight {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Config("deviation weight must be square".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("deviation weight has non-finite entries".into()));
        }
        if asymmetry(&matrix) > 1e-12 {
            return Err(Error::Config("deviation weight must be symmetric".into()));
        }
        let (values, _) = jacobi_eigen(&matrix);
        if values.iter().any(|l| *l < -1e-12) {
            return Err(Error::Config(
                "deviation weight must be positive semidefinite".into(),
            ));
        }
        Ok(Self {
            matrix: symmetrize(&matrix),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// Top eigenpair of a symmetric matrix plus the gap to the second eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct TopEigen {
    pub value: f64,
    pub vector: DVector<f64>,
    pub eigengap: f64,
}

/// `M = A + B·W`.
pub fn closed_loop_map(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n_x = a.nrows();
    let n_u = b.ncols();
    if !a.is_square() || b.nrows() != n_x || w.nrows() != n_u || w.ncols() != n_x {
        return Err(Error::Config(format!(
            "closed-loop shapes do not conform: A {}x{}, B {}x{}, W {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(a + b * w)
}

/// `S^{-1/2} Mᵀ P M S^{-1/2}`, symmetrized.
pub fn scaled_gram(m: &DMatrix<f64>, s: &EllipsoidShape, p: &DeviationWeight) -> Result<DMatrix<f64>> {
    let n = m.ncols();
    if s.dim() != n || p.matrix().nrows() != m.nrows() {
        return Err(Error::Config(format!(
            "scaled gram shapes do not conform: M {}x{}, S {}, P {}",
            m.nrows(),
            n,
            s.dim(),
            p.matrix().nrows()
        )));
    }
    let scaled = m * DMatrix::from_diagonal(&s.inv_sqrt());
    Ok(symmetrize(&(scaled.transpose() * p.matrix() * &scaled)))
}

fn start_vector(n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |i, _| 1.0 + 0.618_033_988_749_894_9 * i as f64);
    v.normalize()
}

enum PowerOutcome {
    Converged { value: f64, vector: DVector<f64> },
    Stalled,
}

/// Iterations between convergence-rate checkpoints.
const RATE_WINDOW: usize = 25;
/// Predicted iterations-to-tolerance beyond which the iteration counts as stalled.
const STALL_HORIZON: f64 = 1000.0;

/// Power iteration on `matrix + shift·I`; `shift` makes the spectrum nonnegative.
///
/// Stalls when the observed linear rate predicts more than [`STALL_HORIZON`]
/// further iterations, or when the cap is reached.
fn power_iterate(matrix: &DMatrix<f64>, start: DVector<f64>, shift: f64, tol: f64) -> PowerOutcome {
    let mut v = start;
    let mut checkpoint = f64::INFINITY;
    for iter in 0..MAX_POWER_ITERATIONS {
        let mv = matrix * &v;
        let lambda = v.dot(&mv);
        let residual = (&mv - &v * lambda).norm();
        let target = tol * lambda.abs().max(1.0);
        if residual <= target {
            return PowerOutcome::Converged { value: lambda, vector: v };
        }
        if iter % RATE_WINDOW == RATE_WINDOW - 1 {
            let rate = (residual / checkpoint).powf(1.0 / RATE_WINDOW as f64);
            if checkpoint.is_finite() && (rate >= 1.0 || (target / residual).ln() / rate.ln() > STALL_HORIZON) {
                return PowerOutcome::Stalled;
            }
            checkpoint = residual;
        }
        let w = mv + &v * shift;
        let norm = w.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return PowerOutcome::Stalled;
        }
        v = w / norm;
    }
    PowerOutcome::Stalled
}

fn gershgorin_lower(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| {
            let radius: f64 = (0..m.ncols()).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
            m[(i, i)] - radius
        })
        .fold(f64::INFINITY, f64::min)
}

fn from_jacobi(matrix: &DMatrix<f64>) -> TopEigen {
    let (values, vectors) = jacobi_eigen(matrix);
    let second = if values.len() > 1 { values[1] } else { f64::NEG_INFINITY };
    TopEigen {
        value: values[0],
        vector: vectors.column(0).into_owned(),
        eigengap: if second.is_finite() { (values[0] - second).max(0.0) } else { f64::INFINITY },
    }
}

/// Largest eigenvalue, its unit eigenvector and the eigengap `λ₁ − λ₂`.
///
/// Power iteration from a fixed start vector; falls back to cyclic Jacobi
/// when the iteration stalls. A 1×1 matrix reports an infinite eigengap.
pub fn max_eig_sym(matrix: &DMatrix<f64>, tol: f64) -> Result<TopEigen> {
    let n = matrix.nrows();
    if n == 0 || !matrix.is_square() {
        return Err(Error::Config("eigenproblem needs a nonempty square matrix".into()));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigenproblem matrix has non-finite entries".into()));
    }
    let scale = matrix.abs().max().max(1.0);
    if asymmetry(matrix) > 1e-10 * scale {
        return Err(Error::Config("eigenproblem matrix is not symmetric".into()));
    }
    let sym = symmetrize(matrix);
    if n == 1 {
        return Ok(TopEigen {
            value: sym[(0, 0)],
            vector: DVector::from_element(1, 1.0),
            eigengap: f64::INFINITY,
        });
    }

    let shift = (-gershgorin_lower(&sym)).max(0.0);
    let top = match power_iterate(&sym, start_vector(n), shift, tol) {
        PowerOutcome::Converged { value, vector } => {
            let max_diag = sym.diagonal().max();
            // λ_max >= every diagonal entry; a violation means we locked onto a lower eigenvector
            if value < max_diag - tol * value.abs().max(1.0) {
                None
            } else {
                Some((value, vector))
            }
        }
        PowerOutcome::Stalled => None,
    };
    let Some((value, vector)) = top else {
        return check_residual(&sym, from_jacobi(&sym), tol);
    };

    let deflated = &sym - &vector * vector.transpose() * value;
    let mut start = start_vector(n).map(|x| x * x + 0.1);
    start -= &vector * vector.dot(&start);
    let second = if start.norm() < 1e-12 {
        None
    } else {
        let start = start.normalize();
        let deflated_shift = (-gershgorin_lower(&deflated)).max(0.0);
        match power_iterate(&deflated, start, deflated_shift, tol) {
            PowerOutcome::Converged { value: second, .. } => Some(second),
            PowerOutcome::Stalled if deflated.abs().max() <= tol * scale => Some(0.0),
            PowerOutcome::Stalled => None,
        }
    };
    let result = match second {
        // the deflated spectrum is {0, λ₂, ..., λₙ}; for PSD input its top is λ₂
        Some(second) => TopEigen {
            value,
            vector,
            eigengap: (value - second).max(0.0),
        },
        None => {
            let mut jac = from_jacobi(&sym);
            jac.vector = vector;
            jac.value = value;
            jac
        }
    };
    check_residual(&sym, result, tol)
}

fn check_residual(sym: &DMatrix<f64>, top: TopEigen, tol: f64) -> Result<TopEigen> {
    let residual = (sym * &top.vector - &top.vector * top.value).norm();
    // Jacobi results are accurate to roundoff; allow a modest multiple of tol
    if residual > 1e3 * tol * top.value.abs().max(1.0) {
        return Err(Error::NoConvergence {
            iterations: MAX_POWER_ITERATIONS,
            residual,
        });
    }
    Ok(top)
}

/// Worst-case deviation at one knot together with its Danskin gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustTerm {
    pub d_max: f64,
    /// Maximizing deviation in original coordinates, `δᵀ S δ = 1`.
    pub delta_max: DVector<f64>,
    pub grad_w: DMatrix<f64>,
    pub grad_a: DMatrix<f64>,
    pub grad_b: DMatrix<f64>,
    pub eigengap: f64,
}

impl RobustTerm {
    pub fn is_degenerate(&self) -> bool {
        self.eigengap <= degeneracy_threshold(self.d_max)
    }
}

fn fix_sign(mut v: DVector<f64>) -> DVector<f64> {
    let scale = v.amax();
    if let Some(first) = v.iter().copied().find(|c| c.abs() > 1e-12 * scale) {
        if first < 0.0 {
            v = -v;
        }
    }
    v
}

/// `d_max = λ_max(S^{-1/2} Mᵀ P M S^{-1/2})` with `M = A + B·W`, its maximizer and gradients.
///
/// The gradient blocks are always filled from the computed maximizer; they
/// are only meaningful when [`RobustTerm::is_degenerate`] is false.
pub fn d_max_term(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    s: &EllipsoidShape,
    p: &DeviationWeight,
) -> Result<RobustTerm> {
    let m = closed_loop_map(a, b, w)?;
    let gram = scaled_gram(&m, s, p)?;
    let top = max_eig_sym(&gram, EIGEN_TOL)?;
    let delta_max = fix_sign(top.vector.component_mul(&s.inv_sqrt()));
    // envelope gradient with respect to M: 2 P M δ δᵀ
    let grad_m = p.matrix() * &m * &delta_max * delta_max.transpose() * 2.0;
    Ok(RobustTerm {
        d_max: top.value.max(0.0),
        grad_w: b.transpose() * &grad_m,
        grad_b: &grad_m * w.transpose(),
        grad_a: grad_m,
        delta_max,
        eigengap: top.eigengap,
    })
}

/// Danskin gradient blocks `(∇_A, ∇_B, ∇_W)` of `d_max`.
///
/// Fails with [`Error::Degenerate`] when the top eigenvalue is not simple.
pub fn grad_dmax(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    s: &EllipsoidShape,
    p: &DeviationWeight,
    term: &RobustTerm,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let threshold = degeneracy_threshold(term.d_max);
    if term.eigengap <= threshold {
        return Err(Error::Degenerate {
            eigengap: term.eigengap,
            threshold,
        });
    }
    let m = closed_loop_map(a, b, w)?;
    if term.delta_max.len() != m.ncols() || s.dim() != m.ncols() {
        return Err(Error::Dimension {
            context: "robust term",
            expected: m.ncols(),
            actual: term.delta_max.len(),
        });
    }
    let y = &term.delta_max;
    let grad_m = p.matrix() * &m * y * y.transpose() * 2.0;
    let grad_b = &grad_m * w.transpose();
    let grad_w = b.transpose() * &grad_m;
    Ok((grad_m, grad_b, grad_w))
}

/// Points on the boundary `δᵀ S δ = 1`, directions uniform on the unit sphere
/// before the `S^{-1/2}` scaling.
pub fn sample_ellipsoid_boundary(s: &EllipsoidShape, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_sqrt = s.inv_sqrt();
    let n = s.dim();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let dir = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let norm: f64 = dir.norm();
        if norm < 1e-12 {
            continue;
        }
        let point = (dir / norm).component_mul(&inv_sqrt);
        let q = s.quadratic_form(&point);
        out.push(point / q.sqrt());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;
    use rand::Rng;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_shape(rng: &mut ChaCha8Rng, n: usize) -> EllipsoidShape {
        EllipsoidShape::new(DVector::from_fn(n, |_, _| rng.gen_range(0.2..5.0))).unwrap()
    }

    /// Reference top eigenvalue from an independent dense solver.
    fn oracle_lambda_max(m: &DMatrix<f64>) -> (f64, f64) {
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        values.sort_by(|a, b| b.total_cmp(a));
        (values[0], values.get(1).copied().unwrap_or(f64::NEG_INFINITY))
    }

    #[test]
    fn closed_loop_map_examples() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(2, 1, &[0.0, 1.0]);
        assert_eq!(closed_loop_map(&a, &b, &DMatrix::zeros(1, 2)).unwrap(), a);
        let m = closed_loop_map(&DMatrix::identity(2, 2), &b, &mat(1, 2, &[-1.0, -2.0])).unwrap();
        assert_eq!(m, mat(2, 2, &[1.0, 0.0, -1.0, -1.0]));
        assert!(closed_loop_map(&a, &b, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn closed_loop_map_matches_entrywise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mat(&mut rng, 3, 3);
        let b = random_mat(&mut rng, 3, 2);
        let w = random_mat(&mut rng, 2, 3);
        let m = closed_loop_map(&a, &b, &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = a[(i, j)] + (0..2).map(|k| b[(i, k)] * w[(k, j)]).sum::<f64>();
                assert!((m[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scaled_gram_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let p = DeviationWeight::identity(2);
        let g = scaled_gram(&eye, &EllipsoidShape::identity(2), &p).unwrap();
        assert_eq!(g, eye);
        let g = scaled_gram(&eye, &EllipsoidShape::from_slice(&[4.0, 1.0]).unwrap(), &p).unwrap();
        assert!((g - mat(2, 2, &[0.25, 0.0, 0.0, 1.0])).abs().max() < 1e-15);
    }

    #[test]
    fn scaled_gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = random_mat(&mut rng, 3, 3);
            let s = random_shape(&mut rng, 3);
            let l = random_mat(&mut rng, 3, 3);
            let p = DeviationWeight::new(symmetrize(&(&l * l.transpose()))).unwrap();
            let g = scaled_gram(&m, &s, &p).unwrap();
            assert!(asymmetry(&g) <= 1e-12);
            let eig = nalgebra::SymmetricEigen::new(g);
            assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-12));
        }
    }

    #[test]
    fn invalid_shapes_and_weights() {
        assert!(EllipsoidShape::from_slice(&[1.0, 0.0]).is_err());
        assert!(EllipsoidShape::from_slice(&[1.0, -2.0]).is_err());
        assert!(DeviationWeight::new(mat(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(DeviationWeight::new(mat(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn max_eig_diagonal() {
        let top = max_eig_sym(&mat(2, 2, &[3.0, 0.0, 0.0, 1.0]), EIGEN_TOL).unwrap();
        assert!((top.value - 3.0).abs() < 1e-12);
        assert!((top.vector[0].abs() - 1.0).abs() < 1e-12 && top.vector[1].abs() < 1e-6);
        assert!((top.eigengap - 2.0).abs() < 1e-9);
    }

    #[test]
    fn max_eig_classic_two_by_two() {
        let top = max_eig_sym(&mat(2, 2, &[2.0, 1.0, 1.0, 2.0]), EIGEN_TOL).unwrap();
        assert!((top.value - 3.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((top.vector[0].abs() - s).abs() < 1e-9 && (top.vector[1].abs() - s).abs() < 1e-9);
        assert!(top.vector[0] * top.vector[1] > 0.0);
        assert!((top.eigengap - 2.0).abs() < 1e-9);
    }

    #[test]
    fn max_eig_random_psd_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = random_mat(&mut rng, 6, 6);
            let m = &g * g.transpose();
            let top = max_eig_sym(&m, EIGEN_TOL).unwrap();
            let (l1, l2) = oracle_lambda_max(&m);
            assert!((top.value - l1).abs() < 1e-10, "{} vs {l1}", top.value);
            assert!((top.vector.norm() - 1.0).abs() < 1e-12);
            let residual = (&m * &top.vector - &top.vector * top.value).norm();
            assert!(residual <= 1e3 * EIGEN_TOL * l1.max(1.0));
            assert!((top.eigengap - (l1 - l2)).abs() < 1e-8);
        }
    }

    #[test]
    fn max_eig_degenerate_reports_zero_gap() {
        let top = max_eig_sym(&DMatrix::identity(3, 3), EIGEN_TOL).unwrap();
        assert!((top.value - 1.0).abs() < 1e-12);
        assert!(top.eigengap <= degeneracy_threshold(1.0));
        // near-degenerate: power iteration stalls and Jacobi takes over
        let m = mat(2, 2, &[1.0, 0.0, 0.0, 1.0 - 1e-9]);
        let top = max_eig_sym(&m, EIGEN_TOL).unwrap();
        assert!((top.value - 1.0).abs() < 1e-12);
        assert!(top.eigengap < 1e-8);
    }

    #[test]
    fn max_eig_rejects_asymmetric() {
        assert!(max_eig_sym(&mat(2, 2, &[1.0, 1.0, 0.0, 1.0]), EIGEN_TOL).is_err());
    }

    #[test]
    fn max_eig_start_orthogonal_to_top_vector() {
        // the fixed start vector is orthogonal to the top eigenvector of this matrix
        let s = start_vector(2);
        let u = DVector::from_column_slice(&[-s[1], s[0]]);
        let m = &u * u.transpose() * 5.0 + &s * s.transpose();
        let top = max_eig_sym(&m, EIGEN_TOL).unwrap();
        assert!((top.value - 5.0).abs() < 1e-10, "{}", top.value);
    }

    #[test]
    fn d_max_identity_and_diagonal() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let s = EllipsoidShape::identity(2);
        let p = DeviationWeight::identity(2);
        let zero_b = DMatrix::zeros(2, 1);
        let term = d_max_term(&eye, &zero_b, &mat(1, 2, &[3.0, -1.0]), &s, &p).unwrap();
        assert!((term.d_max - 1.0).abs() < 1e-12);
        assert!((term.delta_max.norm() - 1.0).abs() < 1e-12);
        assert!(term.is_degenerate());

        let a = mat(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let term = d_max_term(&a, &zero_b, &DMatrix::zeros(1, 2), &s, &p).unwrap();
        assert!((term.d_max - 4.0).abs() < 1e-12);
        assert!((term.delta_max[0] - 1.0).abs() < 1e-9 && term.delta_max[1].abs() < 1e-6);
        assert!(!term.is_degenerate());
        assert!(term.grad_w.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn scalar_case_by_hand() {
        let (a, b, w) = (0.9, 0.3, -1.2);
        let term = d_max_term(
            &mat(1, 1, &[a]),
            &mat(1, 1, &[b]),
            &mat(1, 1, &[w]),
            &EllipsoidShape::identity(1),
            &DeviationWeight::identity(1),
        )
        .unwrap();
        let m = a + b * w;
        assert!((term.d_max - m * m).abs() < 1e-15);
        assert!((term.grad_w[(0, 0)] - 2.0 * b * m).abs() < 1e-15);
        assert!((term.grad_a[(0, 0)] - 2.0 * m).abs() < 1e-15);
        assert!((term.grad_b[(0, 0)] - 2.0 * m * w).abs() < 1e-15);
    }

    #[test]
    fn delta_max_lies_on_boundary_and_attains_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(2..5);
            let a = random_mat(&mut rng, n, n);
            let b = random_mat(&mut rng, n, 1);
            let w = random_mat(&mut rng, 1, n);
            let s = random_shape(&mut rng, n);
            let p = DeviationWeight::identity(n);
            let term = d_max_term(&a, &b, &w, &s, &p).unwrap();
            assert!((s.quadratic_form(&term.delta_max) - 1.0).abs() < 1e-9);
            let m = closed_loop_map(&a, &b, &w).unwrap();
            let md = &m * &term.delta_max;
            assert!((md.dot(&md) - term.d_max).abs() < 1e-9);
            let first = term.delta_max.iter().find(|c| c.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn boundary_sampling_never_beats_d_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let n = 2 + trial % 2;
            let a = random_mat(&mut rng, n, n);
            let b = random_mat(&mut rng, n, 1);
            let w = random_mat(&mut rng, 1, n);
            let s = random_shape(&mut rng, n);
            let p = DeviationWeight::identity(n);
            let term = d_max_term(&a, &b, &w, &s, &p).unwrap();
            let m = closed_loop_map(&a, &b, &w).unwrap();
            let best = sample_ellipsoid_boundary(&s, 10_000, trial as u64)
                .iter()
                .map(|d| (&m * d).norm_squared())
                .fold(0.0, f64::max);
            assert!(best <= term.d_max + 1e-9);
            assert!(best >= 0.99 * term.d_max, "{best} vs {}", term.d_max);
        }
    }

    fn fd_gradients(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        w: &DMatrix<f64>,
        s: &EllipsoidShape,
        p: &DeviationWeight,
        h: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let f = |a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>| {
            // d_max from the independent dense solver
            let m = a + b * w;
            let g = scaled_gram(&m, s, p).unwrap();
            oracle_lambda_max(&g).0
        };
        let perturb = |x: &DMatrix<f64>, i: usize, d: f64| {
            let mut y = x.clone();
            y[i] += d;
            y
        };
        let ga = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| {
            let i = r + c * a.nrows();
            (f(&perturb(a, i, h), b, w) - f(&perturb(a, i, -h), b, w)) / (2.0 * h)
        });
        let gb = DMatrix::from_fn(b.nrows(), b.ncols(), |r, c| {
            let i = r + c * b.nrows();
            (f(a, &perturb(b, i, h), w) - f(a, &perturb(b, i, -h), w)) / (2.0 * h)
        });
        let gw = DMatrix::from_fn(w.nrows(), w.ncols(), |r, c| {
            let i = r + c * w.nrows();
            (f(a, b, &perturb(w, i, h)) - f(a, b, &perturb(w, i, -h))) / (2.0 * h)
        });
        (ga, gb, gw)
    }

    #[test]
    fn danskin_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        while checked < 100 {
            let n_x = rng.gen_range(2..5);
            let n_u = rng.gen_range(1..3);
            let a = random_mat(&mut rng, n_x, n_x);
            let b = random_mat(&mut rng, n_x, n_u);
            let w = random_mat(&mut rng, n_u, n_x);
            let s = random_shape(&mut rng, n_x);
            let p = DeviationWeight::identity(n_x);
            let term = d_max_term(&a, &b, &w, &s, &p).unwrap();
            if term.eigengap <= 1e-6 {
                continue;
            }
            let (ga, gb, gw) = grad_dmax(&a, &b, &w, &s, &p, &term).unwrap();
            let (fa, fb, fw) = fd_gradients(&a, &b, &w, &s, &p, 1e-6);
            assert!(relative_error(ga.as_slice(), fa.as_slice()) < 1e-6);
            assert!(relative_error(gb.as_slice(), fb.as_slice()) < 1e-6);
            assert!(relative_error(gw.as_slice(), fw.as_slice()) < 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn degenerate_gradient_is_refused() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let b = mat(2, 1, &[0.0, 1.0]);
        let w = DMatrix::zeros(1, 2);
        let s = EllipsoidShape::identity(2);
        let p = DeviationWeight::identity(2);
        let term = d_max_term(&eye, &b, &w, &s, &p).unwrap();
        assert!(matches!(
            grad_dmax(&eye, &b, &w, &s, &p, &term),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn zero_actuation_gives_zero_gain_gradient() {
        let a = mat(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let b = DMatrix::zeros(2, 1);
        let w = mat(1, 2, &[0.5, -0.5]);
        let s = EllipsoidShape::from_slice(&[1.0, 5.5]).unwrap();
        let p = DeviationWeight::identity(2);
        let term = d_max_term(&a, &b, &w, &s, &p).unwrap();
        let (_, _, gw) = grad_dmax(&a, &b, &w, &s, &p, &term).unwrap();
        assert!(gw.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn ellipsoid_samples() {
        let s = EllipsoidShape::identity(3);
        for d in sample_ellipsoid_boundary(&s, 100, 1) {
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        let s = EllipsoidShape::from_slice(&[4.0, 1.0]).unwrap();
        for d in sample_ellipsoid_boundary(&s, 100, 2) {
            assert!((4.0 * d[0] * d[0] + d[1] * d[1] - 1.0).abs() < 1e-12);
        }
        let first = sample_ellipsoid_boundary(&s, 50, 9);
        let second = sample_ellipsoid_boundary(&s, 50, 9);
        let bits = |v: &Vec<DVector<f64>>| -> Vec<u64> {
            v.iter().flat_map(|d| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&first), bits(&second));
    }

    /// Crude nested search over W: coordinate sweeps of shrinking step size.
    fn minimize_over_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &EllipsoidShape) -> (DMatrix<f64>, f64) {
        let p = DeviationWeight::identity(a.nrows());
        let eval = |w: &DMatrix<f64>| d_max_term(a, b, w, s, &p).unwrap().d_max;
        let mut w = DMatrix::zeros(b.ncols(), a.nrows());
        let mut best = eval(&w);
        let mut step = 1.0;
        while step > 1e-4 {
            let mut improved = false;
            for i in 0..w.len() {
                for dir in [-1.0, 1.0] {
                    let mut trial = w.clone();
                    trial[i] += dir * step;
                    let value = eval(&trial);
                    if value < best {
                        best = value;
                        w = trial;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        (w, best)
    }

    #[test]
    fn optimizing_gain_never_worsens_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = rng.gen_range(2..4);
            let a = random_mat(&mut rng, n, n) * 1.5;
            let b = random_mat(&mut rng, n, 1);
            let s = random_shape(&mut rng, n);
            let p = DeviationWeight::identity(n);
            let open = d_max_term(&a, &b, &DMatrix::zeros(1, n), &s, &p).unwrap().d_max;
            let (_, best) = minimize_over_gain(&a, &b, &s);
            assert!(best <= open);
        }
    }

    proptest::proptest! {
        #[test]
        fn quadratic_homogeneity(c in 0.0..4.0f64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mat(&mut rng, 3, 3);
            let s = random_shape(&mut rng, 3);
            let p = DeviationWeight::identity(3);
            let zero_b = DMatrix::zeros(3, 1);
            let w = DMatrix::zeros(1, 3);
            let base = d_max_term(&m, &zero_b, &w, &s, &p).unwrap().d_max;
            let scaled = d_max_term(&(&m * c), &zero_b, &w, &s, &p).unwrap().d_max;
            proptest::prop_assert!((scaled - c * c * base).abs() <= 1e-9 * base.max(1.0) * c.max(1.0).powi(2));
        }
    }
}
