// SPDX-License-Identifier: MIT OR Apache-2.0

//! Matrix products, cosine similarity, sample statistics and a cyclic Jacobi
//! eigensolver for symmetric matrices.

use super::Tensor;
use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

const EIG_TOL: f64 = 1e-12;
const EIG_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-9;

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a matrix"),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `c += a · b`, dispatching to a wider-vector build of the same kernel when
/// the CPU supports it. Both builds perform identical IEEE operations in the
/// same order (no fused multiply-add), so results are bitwise equal.
fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { gemm_rows_avx2(a, b, c, m, k, n) };
        return;
    }
    gemm_rows_kernel(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_rows_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_rows_kernel(a, b, c, m, k, n);
}

const MR: usize = 4;
const NR: usize = 8;

/// `c += a · b` with `c` starting at zero. Every output element is summed
/// over `k` in ascending order, whichever path computes it.
#[inline(always)]
fn gemm_rows_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let n_main = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < n_main {
            let mut acc = [[0.0f64; NR]; MR];
            for kk in 0..k {
                let br: &[f64; NR] = b[kk * n + j..kk * n + j + NR]
                    .try_into()
                    .expect("NR columns");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for (o, bv) in row.iter_mut().zip(br) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        i += MR;
    }
    // Remaining rows, and the trailing columns of the blocked rows.
    for r in 0..m {
        let cols = if r < i { n_main..n } else { 0..n };
        if cols.is_empty() {
            continue;
        }
        let ci = &mut c[r * n + cols.start..r * n + cols.end];
        for kk in 0..k {
            let av = a[r * k + kk];
            let br = &b[kk * n + cols.start..kk * n + cols.end];
            for (cv, &bv) in ci.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm_rows(a.data(), b.data(), &mut c, m, k, n);
    Tensor::from_vec(vec![m, n], c)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = as_matrix(a, "matmul_nt")?;
    let (_, k2) = as_matrix(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = as_matrix(a, "matmul_tn")?;
    let (k2, n) = as_matrix(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let at = a.transpose();
    let mut c = vec![0.0; m * n];
    gemm_rows(at.data(), b.data(), &mut c, m, k, n);
    Tensor::from_vec(vec![m, n], c)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two slices, 0.0 if either norm is below
/// [`COSINE_NORM_FLOOR`].
pub fn cosine_slices(p: &[f64], z: &[f64]) -> f64 {
    let np = dot(p, p).sqrt();
    let nz = dot(z, z).sqrt();
    if np < COSINE_NORM_FLOOR || nz < COSINE_NORM_FLOOR {
        return 0.0;
    }
    (dot(p, z) / (np * nz)).clamp(-1.0, 1.0)
}

pub fn cosine(p: &[f64], z: &[f64]) -> Result<f64> {
    if p.len() != z.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![p.len()],
            rhs: vec![z.len()],
        });
    }
    Ok(cosine_slices(p, z))
}

/// Result of [`sym_eig`]: eigenvalues in descending order and the matching
/// eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Tensor,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Rotations sweep the strict upper triangle row by row until every
/// off-diagonal entry is below `1e-12` in magnitude. Eigenvalues come back
/// sorted descending (stable, so ties keep their diagonal order) and each
/// eigenvector has its first nonzero component made non-negative.
pub fn sym_eig(m: &Tensor) -> Result<SymEig> {
    let (r, c) = as_matrix(m, "sym_eig")?;
    if r != c {
        return Err(Error::InvalidShape {
            shape: m.shape().to_vec(),
            reason: "sym_eig expects a square matrix".into(),
        });
    }
    let n = r;
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }

    let mut a: Vec<f64> = m.data().to_vec();
    // symmetrize exactly so rotations see one consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut v = Tensor::identity(n).into_data();

    let off_max = |a: &[f64]| {
        let mut mx: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                mx = mx.max(a[i * n + j].abs());
            }
        }
        mx
    };

    let mut sweeps = 0;
    while off_max(&a) >= EIG_TOL {
        if sweeps == EIG_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off_max(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        let first = (0..n)
            .map(|k| v[k * n + src])
            .find(|x| *x != 0.0)
            .unwrap_or(0.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.set(k, dst, sign * v[k * n + src]);
        }
    }
    Ok(SymEig {
        values,
        vectors,
        sweeps,
    })
}

fn need_rows(x: &Tensor, needed: usize) -> Result<(usize, usize)> {
    let (n, d) = as_matrix(x, "statistics")?;
    if n < needed {
        return Err(Error::TooFewSamples { needed, got: n });
    }
    Ok((n, d))
}

fn centered(x: &Tensor) -> (Vec<f64>, usize, usize) {
    let (n, d) = (x.rows(), x.cols());
    let mean = x.mean_rows();
    let mut c = x.data().to_vec();
    for i in 0..n {
        for j in 0..d {
            c[i * d + j] -= mean.data()[j];
        }
    }
    (c, n, d)
}

/// Sample covariance (divisor `N − 1`) of the columns of `x`. The upper
/// triangle is computed and mirrored, so the result is exactly symmetric.
pub fn covariance(x: &Tensor) -> Result<Tensor> {
    need_rows(x, 2)?;
    let (c, n, d) = centered(x);
    let mut out = Tensor::zeros(&[d, d]);
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for k in 0..n {
                s += c[k * d + i] * c[k * d + j];
            }
            let v = s / denom;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Pearson correlation of the columns of `x`. Zero-variance columns are
/// uncorrelated with everything (off-diagonal 0) and keep a unit diagonal.
pub fn pearson_corr(x: &Tensor) -> Result<Tensor> {
    let cov = covariance(x)?;
    let d = cov.rows();
    let sd: Vec<f64> = (0..d).map(|i| cov.get(i, i).max(0.0).sqrt()).collect();
    let mut out = Tensor::zeros(&[d, d]);
    for i in 0..d {
        out.set(i, i, 1.0);
        for j in (i + 1)..d {
            let v = if sd[i] > 0.0 && sd[j] > 0.0 {
                (cov.get(i, j) / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Solves `a · x = b` for symmetric positive-definite `a` via Cholesky.
/// `b` may hold several right-hand sides as columns.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = as_matrix(a, "solve_spd")?;
    let (bn, m) = as_matrix(b, "solve_spd")?;
    if n != n2 || bn != n {
        return Err(Error::ShapeMismatch {
            op: "solve_spd",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NotPositiveDefinite);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.clone();
    for col in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x.get(i, col);
            for k in 0..i {
                s -= l[i * n + k] * x.get(k, col);
            }
            x.set(i, col, s / l[i * n + i]);
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x.get(i, col);
            for k in (i + 1)..n {
                s -= l[k * n + i] * x.get(k, col);
            }
            x.set(i, col, s / l[i * n + i]);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let a = b.clone();
        let c = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let out = matmul(&a, &c).unwrap();
        assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = random(7, 5, 1);
        let b = random(9, 5, 2);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &b.transpose()).unwrap()) < 1e-14);
        let c = random(7, 3, 3);
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &c).unwrap()) < 1e-14);
    }

    #[test]
    fn matmul_associative() {
        let a = random(5, 6, 4);
        let b = random(6, 7, 5);
        let c = random(7, 3, 6);
        let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = l.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(l.max_abs_diff(&r) <= 1e-9 * scale);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&Tensor::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert_eq!(e.vectors, Tensor::identity(3));
        let d = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        let e = sym_eig(&d).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        for seed in 0..5 {
            let x = random(6, 6, 10 + seed);
            let m = x.add(&x.transpose()).unwrap();
            let e = sym_eig(&m).unwrap();
            let n = 6;
            let lam = Tensor::from_fn(n, n, |i, j| if i == j { e.values[i] } else { 0.0 });
            let rec = matmul(&matmul(&e.vectors, &lam).unwrap(), &e.vectors.transpose()).unwrap();
            assert!(rec.max_abs_diff(&m) < 1e-9);
            let vtv = matmul_tn(&e.vectors, &e.vectors).unwrap();
            assert!(vtv.max_abs_diff(&Tensor::identity(n)) < 1e-9);
            let trace: f64 = (0..n).map(|i| m.get(i, i)).sum();
            assert!((e.values.iter().sum::<f64>() - trace).abs() < 1e-9);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            for j in 0..n {
                let first = (0..n)
                    .map(|k| e.vectors.get(k, j))
                    .find(|v| *v != 0.0)
                    .unwrap();
                assert!(first >= 0.0);
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(covariance(&x).unwrap().data(), &[0.0; 4]);
        let x = Tensor::from_rows(&[vec![0.0], vec![2.0]]);
        assert_eq!(covariance(&x).unwrap().data(), &[2.0]);
        assert!(matches!(
            covariance(&Tensor::zeros(&[1, 3])),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let x = random(30, 5, 7);
        let (n, d) = (30, 5);
        let mut oracle = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mi: f64 = (0..n).map(|k| x.get(k, i)).sum::<f64>() / n as f64;
                let mj: f64 = (0..n).map(|k| x.get(k, j)).sum::<f64>() / n as f64;
                let s: f64 = (0..n)
                    .map(|k| (x.get(k, i) - mi) * (x.get(k, j) - mj))
                    .sum();
                oracle[i * d + j] = s / (n - 1) as f64;
            }
        }
        let cov = covariance(&x).unwrap();
        let o = Tensor::from_vec(vec![d, d], oracle).unwrap();
        assert!(cov.max_abs_diff(&o) < 1e-12);
        assert_eq!(cov, cov.transpose());
    }

    #[test]
    fn pearson_examples() {
        let mut rng = RngStream::new(3);
        let base: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let x = Tensor::from_fn(20, 3, |i, j| match j {
            0 => base[i],
            1 => base[i],
            _ => -base[i],
        });
        let c = pearson_corr(&x).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 2) + 1.0).abs() < 1e-12);
        assert_eq!(c, c.transpose());
        assert_eq!(
            (0..3).map(|i| c.get(i, i)).collect::<Vec<_>>(),
            vec![1.0; 3]
        );
    }

    #[test]
    fn pearson_zero_variance_column() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![4.0, 5.0]]);
        let c = pearson_corr(&x).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pearson_matches_direct_formula() {
        let x = random(50, 6, 9);
        let (n, d) = (50, 6);
        let c = pearson_corr(&x).unwrap();
        for i in 0..d {
            for j in 0..d {
                let xi: Vec<f64> = (0..n).map(|k| x.get(k, i)).collect();
                let xj: Vec<f64> = (0..n).map(|k| x.get(k, j)).collect();
                let mi = xi.iter().sum::<f64>() / n as f64;
                let mj = xj.iter().sum::<f64>() / n as f64;
                let sij: f64 = xi.iter().zip(&xj).map(|(a, b)| (a - mi) * (b - mj)).sum();
                let sii: f64 = xi.iter().map(|a| (a - mi).powi(2)).sum();
                let sjj: f64 = xj.iter().map(|b| (b - mj).powi(2)).sum();
                let oracle = sij / (sii.sqrt() * sjj.sqrt());
                assert!((c.get(i, j) - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_spd_recovers_solution() {
        let x = random(8, 4, 11);
        let a = matmul_tn(&x, &x)
            .unwrap()
            .add(&Tensor::identity(4))
            .unwrap();
        let truth = random(4, 2, 12);
        let b = matmul(&a, &truth).unwrap();
        let sol = solve_spd(&a, &b).unwrap();
        assert!(sol.max_abs_diff(&truth) < 1e-10);
        assert!(matches!(
            solve_spd(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 1])),
            Err(Error::NotPositiveDefinite)
        ));
    }
}
