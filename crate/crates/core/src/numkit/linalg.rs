use super::{gemm, mismatch, norm, Matrix, NumError, NumResult, Transpose};

/// Systems whose 1-norm condition estimate exceeds this are refused.
const MAX_CONDITION: f64 = 1e13;
const RESIDUAL_TOL: f64 = 1e-10;

/// LU factorisation with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    lu: Matrix,
    perm: Vec<usize>,
    norm_one: f64,
}

impl LuFactors {
    pub fn new(a: &Matrix) -> NumResult<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(mismatch("LuFactors::new", format!("{}x{} is not square", n, a.cols())));
        }
        if !a.is_finite() {
            return Err(NumError::NonFinite("LuFactors::new"));
        }
        let norm_one = a.norm_one();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu.get(i, k).abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax == 0.0 {
                return Err(NumError::Singular {
                    condition: f64::INFINITY,
                });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let t = lu.get(k, j);
                    lu.set(k, j, lu.get(p, j));
                    lu.set(p, j, t);
                }
            }
            let pivot = lu.get(k, k);
            for i in k + 1..n {
                let f = lu.get(i, k) / pivot;
                lu.set(i, k, f);
                if f != 0.0 {
                    let (upper, lower) = lu.as_mut_slice().split_at_mut(i * n);
                    let src = &upper[k * n + k + 1..k * n + n];
                    let dst = &mut lower[k + 1..n];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d -= f * s);
                }
            }
        }
        Ok(Self {
            n,
            lu,
            perm,
            norm_one,
        })
    }

    pub fn solve(&self, b: &[f64]) -> NumResult<Vec<f64>> {
        if b.len() != self.n {
            return Err(mismatch("LuFactors::solve", format!("rhs {} for n = {}", b.len(), self.n)));
        }
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu.get(i, j) * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu.get(i, j) * x[j]).sum();
            x[i] = (x[i] - s) / self.lu.get(i, i);
        }
        Ok(x)
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transposed(&self, b: &[f64]) -> NumResult<Vec<f64>> {
        if b.len() != self.n {
            return Err(mismatch("LuFactors::solve_transposed", format!("rhs {}", b.len())));
        }
        let n = self.n;
        // Uᵀ w = b, then Lᵀ v = w, then x = Pᵀ v.
        let mut w = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu.get(j, i) * w[j]).sum();
            w[i] = (w[i] - s) / self.lu.get(i, i);
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu.get(j, i) * w[j]).sum();
            w[i] -= s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = w[k];
        }
        Ok(x)
    }

    /// Hager's estimate of the 1-norm condition number `‖A‖₁‖A⁻¹‖₁`.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let Ok(y) = self.solve(&x) else { return f64::INFINITY };
            est = y.iter().map(|v| v.abs()).sum::<f64>();
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let Ok(z) = self.solve_transposed(&xi) else { return f64::INFINITY };
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, v)| (j, v.abs()))
                .fold((0, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[jmax] = 1.0;
        }
        if !est.is_finite() {
            return f64::INFINITY;
        }
        est * self.norm_one
    }
}

fn residual(a: &Matrix, x: &[f64], b: &[f64]) -> NumResult<Vec<f64>> {
    let ax = a.matvec(x)?;
    Ok(b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect())
}

/// Solves `A x = b` by LU with one step of iterative refinement.
///
/// On success `‖Ax − b‖ ≤ 1e-10 (‖A‖_F ‖x‖ + ‖b‖)`; otherwise the system is
/// reported as singular with the condition estimate.
pub fn solve_dense(a: &Matrix, b: &[f64]) -> NumResult<Vec<f64>> {
    if a.rows() != b.len() {
        return Err(mismatch("solve_dense", format!("{} rows vs rhs {}", a.rows(), b.len())));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite("solve_dense rhs"));
    }
    let lu = LuFactors::new(a)?;
    let condition = lu.condition_estimate();
    if !(condition < MAX_CONDITION) {
        return Err(NumError::Singular { condition });
    }
    let mut x = lu.solve(b)?;
    let r = residual(a, &x, b)?;
    let dx = lu.solve(&r)?;
    x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
    let r = residual(a, &x, b)?;
    let bound = RESIDUAL_TOL * (a.frobenius_norm() * norm(&x) + norm(b));
    if !(norm(&r) <= bound) {
        return Err(NumError::Singular { condition });
    }
    Ok(x)
}

/// Cholesky factor `A = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> NumResult<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(mismatch("Cholesky::new", format!("{}x{} is not square", n, a.cols())));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let lj: f64 = l.row(j)[..j].iter().map(|v| v * v).sum();
            let d = a.get(j, j) - lj;
            if !(d > 0.0) {
                return Err(NumError::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                let s: f64 = l.row(i)[..j]
                    .iter()
                    .zip(&l.row(j)[..j])
                    .map(|(x, y)| x * y)
                    .sum();
                l.set(i, j, (a.get(i, j) - s) / djj);
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    /// Solves `L y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.l.rows();
        for i in 0..n {
            let row = self.l.row(i);
            let s: f64 = row[..i].iter().zip(&b[..i]).map(|(x, y)| x * y).sum();
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_in_place(&self, y: &mut [f64]) {
        let n = self.l.rows();
        for i in (0..n).rev() {
            y[i] /= self.l.get(i, i);
            let yi = y[i];
            for (k, yk) in y.iter_mut().enumerate().take(i) {
                *yk -= self.l.get(i, k) * yi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> NumResult<Vec<f64>> {
        if b.len() != self.l.rows() {
            return Err(mismatch("Cholesky::solve", format!("rhs {}", b.len())));
        }
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        Ok(x)
    }
}

/// Symmetric positive-definite block-tridiagonal matrix with equal square
/// blocks, factored by block Cholesky.
///
/// `diag[i]` is block `(i, i)` and `lower[i]` is block `(i + 1, i)`; the
/// upper blocks are the transposes.
#[derive(Clone, Debug)]
pub struct BlockTridiagonal {
    block: usize,
    chol: Vec<Cholesky>,
    // coupling[i] = lower[i] · L_i⁻ᵀ
    coupling: Vec<Matrix>,
}

impl BlockTridiagonal {
    pub fn factor(diag: &[Matrix], lower: &[Matrix]) -> NumResult<Self> {
        let nb = diag.len();
        if nb == 0 {
            return Err(NumError::InvalidArgument("block-tridiagonal system with no blocks".into()));
        }
        if lower.len() + 1 != nb {
            return Err(mismatch(
                "BlockTridiagonal::factor",
                format!("{} diagonal blocks need {} couplings, got {}", nb, nb - 1, lower.len()),
            ));
        }
        let n = diag[0].rows();
        for m in diag.iter().chain(lower) {
            if m.shape() != (n, n) {
                return Err(mismatch(
                    "BlockTridiagonal::factor",
                    format!("block {}x{} in a system of {n}x{n} blocks", m.rows(), m.cols()),
                ));
            }
        }
        let mut chol = Vec::with_capacity(nb);
        let mut coupling = Vec::with_capacity(nb - 1);
        chol.push(Cholesky::new(&diag[0])?);
        for i in 0..nb - 1 {
            let li = &chol[i];
            let mut c = lower[i].clone();
            for r in 0..n {
                li.forward_in_place(c.row_mut(r));
            }
            let mut schur = diag[i + 1].clone();
            gemm(-1.0, &c, Transpose::No, &c, Transpose::Yes, 1.0, &mut schur)?;
            chol.push(Cholesky::new(&schur)?);
            coupling.push(c);
        }
        Ok(Self {
            block: n,
            chol,
            coupling,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn n_blocks(&self) -> usize {
        self.chol.len()
    }

    /// Solves for one right-hand side given as concatenated blocks.
    pub fn solve(&self, b: &[f64]) -> NumResult<Vec<f64>> {
        let n = self.block;
        let nb = self.chol.len();
        if b.len() != n * nb {
            return Err(mismatch(
                "BlockTridiagonal::solve",
                format!("rhs {} for {nb} blocks of {n}", b.len()),
            ));
        }
        let mut y = b.to_vec();
        for i in 0..nb {
            if i > 0 {
                let (prev, cur) = y.split_at_mut(i * n);
                let yprev = &prev[(i - 1) * n..];
                let cy = self.coupling[i - 1].matvec(yprev)?;
                cur[..n].iter_mut().zip(&cy).for_each(|(a, b)| *a -= b);
            }
            self.chol[i].forward_in_place(&mut y[i * n..(i + 1) * n]);
        }
        for i in (0..nb).rev() {
            if i + 1 < nb {
                let (cur, next) = y.split_at_mut((i + 1) * n);
                let ctx = self.coupling[i].vecmat(&next[..n])?;
                cur[i * n..].iter_mut().zip(&ctx).for_each(|(a, b)| *a -= b);
            }
            self.chol[i].backward_in_place(&mut y[i * n..(i + 1) * n]);
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{gaussian_matrix, RngStream};

    #[test]
    fn identity_and_scaled_identity() {
        let b = vec![1.5, -2.0, 3.0];
        assert_eq!(solve_dense(&Matrix::identity(3), &b).unwrap(), b);
        let a = Matrix::identity(2).scaled(2.0);
        let x = solve_dense(&a, &[4.0, 6.0]).unwrap();
        assert_eq!(x, vec![2.0, 3.0]);
    }

    #[test]
    fn random_well_conditioned_system_meets_residual_bound() {
        let mut rng = RngStream::new(11);
        let mut a = gaussian_matrix(&mut rng, 50, 50, 1.0 / 50.0).unwrap();
        for i in 0..50 {
            a.set(i, i, a.get(i, i) + 3.0);
        }
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let x = solve_dense(&a, &b).unwrap();
        let r = residual(&a, &x, &b).unwrap();
        assert!(norm(&r) <= 1e-10 * (a.frobenius_norm() * norm(&x) + norm(&b)));
    }

    #[test]
    fn singular_matrix_reports_condition() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        match solve_dense(&a, &[1.0, 2.0]) {
            Err(NumError::Singular { condition }) => assert!(condition > 1e13),
            other => panic!("expected singular, got {other:?}"),
        }
        let z = Matrix::zeros(3, 3);
        assert!(matches!(solve_dense(&z, &[0.0; 3]), Err(NumError::Singular { .. })));
    }

    #[test]
    fn near_singular_is_refused() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0 + 1e-15]).unwrap();
        assert!(solve_dense(&a, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn condition_estimate_is_close_for_diagonal() {
        let a = Matrix::from_fn(4, 4, |i, j| if i == j { 10f64.powi(i as i32) } else { 0.0 });
        let lu = LuFactors::new(&a).unwrap();
        let c = lu.condition_estimate();
        assert!((c / 1000.0 - 1.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(Cholesky::new(&a), Err(NumError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn block_tridiagonal_matches_dense() {
        let mut rng = RngStream::new(5);
        let n = 4;
        let nb = 5;
        let lower: Vec<Matrix> = (0..nb - 1)
            .map(|_| gaussian_matrix(&mut rng, n, n, 0.2).unwrap())
            .collect();
        let diag: Vec<Matrix> = (0..nb)
            .map(|_| {
                let g = gaussian_matrix(&mut rng, n, n, 0.2).unwrap();
                let mut d = g.matmul(&g.transpose()).unwrap();
                for i in 0..n {
                    d.set(i, i, d.get(i, i) + 3.0);
                }
                d
            })
            .collect();
        let mut dense = Matrix::zeros(n * nb, n * nb);
        for b in 0..nb {
            for i in 0..n {
                for j in 0..n {
                    dense.set(b * n + i, b * n + j, diag[b].get(i, j));
                    if b + 1 < nb {
                        dense.set((b + 1) * n + i, b * n + j, lower[b].get(i, j));
                        dense.set(b * n + j, (b + 1) * n + i, lower[b].get(i, j));
                    }
                }
            }
        }
        let rhs: Vec<f64> = (0..n * nb).map(|i| (i as f64 * 0.7).cos()).collect();
        let x_dense = solve_dense(&dense, &rhs).unwrap();
        let x_block = BlockTridiagonal::factor(&diag, &lower).unwrap().solve(&rhs).unwrap();
        for (a, b) in x_dense.iter().zip(&x_block) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }
}
