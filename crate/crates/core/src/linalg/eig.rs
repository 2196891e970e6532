//! Eigendecomposition of small general real matrices.
//!
//! Householder reduction to Hessenberg form followed by the implicit
//! double-shift QR iteration with eigenvector back-substitution, the classic
//! EISPACK/JAMA pipeline. Complex conjugate pairs come out adjacent with the
//! positive-imaginary member first.

// Index-based loops mirror the reference algorithm; keep them literal.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};

use super::{Complex, ComplexMatrix, Matrix, EIG_MAX_SIZE};

/// Residual bound enforced on every returned pair: `|m w - lambda w| <=`
/// this times `|w|`.
const RESIDUAL_TOL: f64 = 1e-8;

/// Result of [`eig_general`]: `values[i]` with eigenvector `vectors.col(i)`.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<Complex>,
    pub vectors: ComplexMatrix,
}

/// Eigenvalues and eigenvectors of a general square matrix of order at most
/// [`EIG_MAX_SIZE`].
///
/// Defective inputs are not detected as such; the guarantee is the residual
/// check `|m w - lambda w| <= 1e-8 |w|`, verified before returning.
pub fn eig_general(m: &Matrix) -> Result<Eigen> {
    if m.rows() != m.cols() {
        return Err(Error::InvalidArgument(format!(
            "eig_general requires a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("eig_general on empty matrix".into()));
    }
    if n > EIG_MAX_SIZE {
        return Err(Error::InvalidArgument(format!(
            "eig_general supports order <= {EIG_MAX_SIZE}, got {n}"
        )));
    }

    let mut h: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];

    orthes(&mut h, &mut v);
    hqr2(&mut h, &mut v, &mut d, &mut e)?;

    // Assemble complex eigenpairs from the packed real representation.
    let mut values = Vec::with_capacity(n);
    let mut vectors = ComplexMatrix::zeros(n, n);
    let mut j = 0;
    while j < n {
        if e[j] == 0.0 {
            values.push(Complex::new(d[j], 0.0));
            for i in 0..n {
                vectors.set(i, j, Complex::new(v[i][j], 0.0));
            }
            j += 1;
        } else {
            // Conjugate pair: column j holds the real part, j+1 the
            // imaginary part of the positive-imaginary eigenvector.
            values.push(Complex::new(d[j], e[j]));
            values.push(Complex::new(d[j + 1], e[j + 1]));
            for i in 0..n {
                vectors.set(i, j, Complex::new(v[i][j], v[i][j + 1]));
                vectors.set(i, j + 1, Complex::new(v[i][j], -v[i][j + 1]));
            }
            j += 2;
        }
    }

    verify_residuals(m, &values, &vectors)?;
    Ok(Eigen { values, vectors })
}

fn verify_residuals(m: &Matrix, values: &[Complex], vectors: &ComplexMatrix) -> Result<()> {
    let n = m.rows();
    for (idx, &lambda) in values.iter().enumerate() {
        let w = vectors.col(idx);
        let wnorm = super::complex_norm(&w);
        if wnorm == 0.0 {
            return Err(Error::Numerical(format!(
                "eigenvector {idx} is zero"
            )));
        }
        let mut resid = 0.0f64;
        for i in 0..n {
            let mut acc = Complex::ZERO;
            for k in 0..n {
                acc = acc + w[k].scale(m.get(i, k));
            }
            let r = acc - lambda * w[i];
            resid += r.re * r.re + r.im * r.im;
        }
        let resid = resid.sqrt();
        let within_bound = resid <= RESIDUAL_TOL * wnorm; // false for NaN too
        if !within_bound {
            return Err(Error::Numerical(format!(
                "eigenpair {idx} residual {resid:.3e} exceeds {RESIDUAL_TOL:.1e} * |w|"
            )));
        }
    }
    Ok(())
}

/// Householder reduction of `h` to upper Hessenberg form, accumulating the
/// orthogonal transform into `v`.
fn orthes(h: &mut [Vec<f64>], v: &mut [Vec<f64>]) {
    let n = h.len();
    if n <= 2 {
        return;
    }
    let low = 0;
    let high = n - 1;
    let mut ort = vec![0.0; n];

    for m in low + 1..high {
        let mut scale = 0.0;
        for i in m..=high {
            scale += h[i][m - 1].abs();
        }
        if scale == 0.0 {
            continue;
        }
        let mut hsum = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i][m - 1] / scale;
            hsum += ort[i] * ort[i];
        }
        let mut g = hsum.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        let hval = hsum - ort[m] * g;
        ort[m] -= g;

        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[i][j];
            }
            f /= hval;
            for i in m..=high {
                h[i][j] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[i][j];
            }
            f /= hval;
            for j in m..=high {
                h[i][j] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[m][m - 1] = scale * g;
    }

    for m in (low + 1..high).rev() {
        if h[m][m - 1] == 0.0 {
            continue;
        }
        for i in m + 1..=high {
            ort[i] = h[i][m - 1];
        }
        for j in m..=high {
            let mut g = 0.0;
            for i in m..=high {
                g += ort[i] * v[i][j];
            }
            g = (g / ort[m]) / h[m][m - 1];
            for i in m..=high {
                v[i][j] += g * ort[i];
            }
        }
    }
}

/// QR iteration on the Hessenberg matrix plus eigenvector back-substitution.
///
/// On return `d`/`e` hold real/imaginary parts of the eigenvalues and `v` the
/// packed eigenvectors (real columns for real eigenvalues; real/imaginary
/// column pairs for complex pairs).
fn hqr2(h: &mut [Vec<f64>], v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let nn = h.len();
    let mut n = nn as isize - 1;
    let low = 0isize;
    let high = nn as isize - 1;
    let eps = f64::EPSILON / 2.0; // 2^-53, matching the reference constant
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut t, mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[i][j].abs();
        }
    }

    let mut iter = 0usize;
    let mut total_iter = 0usize;
    let max_total_iter = 30 * nn.max(1);
    while n >= low {
        let mut l = n;
        while l > low {
            s = h[(l - 1) as usize][(l - 1) as usize].abs() + h[l as usize][l as usize].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[l as usize][(l - 1) as usize].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One real root.
            let ni = n as usize;
            h[ni][ni] += exshift;
            d[ni] = h[ni][ni];
            e[ni] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // A 2x2 block: real or complex pair.
            let ni = n as usize;
            w = h[ni][ni - 1] * h[ni - 1][ni];
            p = (h[ni - 1][ni - 1] - h[ni][ni]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[ni][ni] += exshift;
            h[ni - 1][ni - 1] += exshift;
            x = h[ni][ni];

            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[ni - 1] = x + z;
                d[ni] = d[ni - 1];
                if z != 0.0 {
                    d[ni] = x - w / z;
                }
                e[ni - 1] = 0.0;
                e[ni] = 0.0;
                x = h[ni][ni - 1];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in ni - 1..nn {
                    z = h[ni - 1][j];
                    h[ni - 1][j] = q * z + p * h[ni][j];
                    h[ni][j] = q * h[ni][j] - p * z;
                }
                for i in 0..=ni {
                    z = h[i][ni - 1];
                    h[i][ni - 1] = q * z + p * h[i][ni];
                    h[i][ni] = q * h[i][ni] - p * z;
                }
                for i in low as usize..=high as usize {
                    z = v[i][ni - 1];
                    v[i][ni - 1] = q * z + p * v[i][ni];
                    v[i][ni] = q * v[i][ni] - p * z;
                }
            } else {
                d[ni - 1] = x + p;
                d[ni] = x + p;
                e[ni - 1] = z;
                e[ni] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            // No convergence yet: form shift and run a double QR step.
            let ni = n as usize;
            x = h[ni][ni];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[ni - 1][ni - 1];
                w = h[ni][ni - 1] * h[ni - 1][ni];
            }

            if iter == 10 {
                exshift += x;
                for i in low as usize..=ni {
                    h[i][i] -= x;
                }
                s = h[ni][ni - 1].abs() + h[ni - 1][ni - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low as usize..=ni {
                        h[i][i] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = 0.964;
                    w = 0.964;
                }
            }

            iter += 1;
            total_iter += 1;
            if total_iter > max_total_iter {
                return Err(Error::NonConvergence {
                    op: "hessenberg qr iteration",
                    iterations: max_total_iter,
                });
            }

            let mut m = n - 2;
            while m >= l {
                let mi = m as usize;
                z = h[mi][mi];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[mi + 1][mi] + h[mi][mi + 1];
                q = h[mi + 1][mi + 1] - z - r - s;
                r = h[mi + 2][mi + 1];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[mi][mi - 1].abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs()
                            * (h[mi - 1][mi - 1].abs() + z.abs() + h[mi + 1][mi + 1].abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in (m + 2)..=n {
                let ii = i as usize;
                h[ii][ii - 2] = 0.0;
                if i > m + 2 {
                    h[ii][ii - 3] = 0.0;
                }
            }

            for k in m..n {
                let ki = k as usize;
                let notlast = k != n - 1;
                if k != m {
                    p = h[ki][ki - 1];
                    q = h[ki + 1][ki - 1];
                    r = if notlast { h[ki + 2][ki - 1] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                if x == 0.0 {
                    break;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[ki][ki - 1] = -s * x;
                    } else if l != m {
                        h[ki][ki - 1] = -h[ki][ki - 1];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in ki..nn {
                        p = h[ki][j] + q * h[ki + 1][j];
                        if notlast {
                            p += r * h[ki + 2][j];
                            h[ki + 2][j] -= p * z;
                        }
                        h[ki][j] -= p * x;
                        h[ki + 1][j] -= p * y;
                    }
                    let upper = (n).min(k + 3) as usize;
                    for i in 0..=upper {
                        p = x * h[i][ki] + y * h[i][ki + 1];
                        if notlast {
                            p += z * h[i][ki + 2];
                            h[i][ki + 2] -= p * r;
                        }
                        h[i][ki] -= p;
                        h[i][ki + 1] -= p * q;
                    }
                    for i in low as usize..=high as usize {
                        p = x * v[i][ki] + y * v[i][ki + 1];
                        if notlast {
                            p += z * v[i][ki + 2];
                            v[i][ki + 2] -= p * r;
                        }
                        v[i][ki] -= p;
                        v[i][ki + 1] -= p * q;
                    }
                }
            }
        }
    }

    // Back-substitution for eigenvectors of the triangularized form.
    if norm == 0.0 {
        return Ok(());
    }
    for nb in (0..nn).rev() {
        p = d[nb];
        q = e[nb];

        if q == 0.0 {
            // Real eigenvector.
            let mut l = nb;
            h[nb][nb] = 1.0;
            for i in (0..nb).rev() {
                w = h[i][i] - p;
                r = 0.0;
                for j in l..=nb {
                    r += h[i][j] * h[j][nb];
                }
                if e[i] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        h[i][nb] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        x = h[i][i + 1];
                        y = h[i + 1][i];
                        q = (d[i] - p) * (d[i] - p) + e[i] * e[i];
                        t = (x * s - z * r) / q;
                        h[i][nb] = t;
                        h[i + 1][nb] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    t = h[i][nb].abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=nb {
                            h[j][nb] /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 && nb > 0 {
            // Complex eigenvector (stored in columns nb-1 and nb).
            let na = nb - 1;
            let mut l = na;

            if h[nb][na].abs() > h[na][nb].abs() {
                h[na][na] = q / h[nb][na];
                h[na][nb] = -(h[nb][nb] - p) / h[nb][na];
            } else {
                let c = Complex::new(0.0, -h[na][nb]) / Complex::new(h[na][na] - p, q);
                h[na][na] = c.re;
                h[na][nb] = c.im;
            }
            h[nb][na] = 0.0;
            h[nb][nb] = 1.0;
            if nb >= 2 {
                for i in (0..=nb - 2).rev() {
                    let mut ra = 0.0;
                    let mut sa = 0.0;
                    for j in l..=nb {
                        ra += h[i][j] * h[j][na];
                        sa += h[i][j] * h[j][nb];
                    }
                    w = h[i][i] - p;

                    if e[i] < 0.0 {
                        z = w;
                        r = ra;
                        s = sa;
                    } else {
                        l = i;
                        if e[i] == 0.0 {
                            let c = Complex::new(-ra, -sa) / Complex::new(w, q);
                            h[i][na] = c.re;
                            h[i][nb] = c.im;
                        } else {
                            x = h[i][i + 1];
                            y = h[i + 1][i];
                            let mut vr = (d[i] - p) * (d[i] - p) + e[i] * e[i] - q * q;
                            let vi = (d[i] - p) * 2.0 * q;
                            if vr == 0.0 && vi == 0.0 {
                                vr = eps
                                    * norm
                                    * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                            }
                            let c = Complex::new(
                                x * r - z * ra + q * sa,
                                x * s - z * sa - q * ra,
                            ) / Complex::new(vr, vi);
                            h[i][na] = c.re;
                            h[i][nb] = c.im;
                            if x.abs() > z.abs() + q.abs() {
                                h[i + 1][na] = (-ra - w * h[i][na] + q * h[i][nb]) / x;
                                h[i + 1][nb] = (-sa - w * h[i][nb] - q * h[i][na]) / x;
                            } else {
                                let c = Complex::new(-r - y * h[i][na], -s - y * h[i][nb])
                                    / Complex::new(z, q);
                                h[i + 1][na] = c.re;
                                h[i + 1][nb] = c.im;
                            }
                        }
                        t = h[i][na].abs().max(h[i][nb].abs());
                        if (eps * t) * t > 1.0 {
                            for j in i..=nb {
                                h[j][na] /= t;
                                h[j][nb] /= t;
                            }
                        }
                    }
                }
            }
        }
    }

    // Multiply by the accumulated Hessenberg transform.
    for j in (0..nn).rev() {
        for i in 0..nn {
            z = 0.0;
            for k in 0..=j {
                z += v[i][k] * h[k][j];
            }
            v[i][j] = z;
        }
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn sorted_moduli(values: &[Complex]) -> Vec<f64> {
        let mut m: Vec<f64> = values.iter().map(|z| z.abs()).collect();
        m.sort_by(|a, b| b.partial_cmp(a).unwrap());
        m
    }

    #[test]
    fn rotation_eigenvalues_are_unit_conjugates() {
        let theta = std::f64::consts::FRAC_PI_4;
        let m = Matrix::from_rows(&[
            vec![theta.cos(), -theta.sin()],
            vec![theta.sin(), theta.cos()],
        ])
        .unwrap();
        let eig = eig_general(&m).unwrap();
        assert_eq!(eig.values.len(), 2);
        let mut re: Vec<f64> = eig.values.iter().map(|z| z.re).collect();
        let mut im: Vec<f64> = eig.values.iter().map(|z| z.im.abs()).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        im.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for v in re {
            assert!((v - theta.cos()).abs() < 1e-12);
        }
        for v in im {
            assert!((v - theta.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_eigenvalues_pass_through() {
        let m = Matrix::from_rows(&[vec![0.9, 0.0], vec![0.0, 0.5]]).unwrap();
        let eig = eig_general(&m).unwrap();
        let mut re: Vec<f64> = eig.values.iter().map(|z| z.re).collect();
        re.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((re[0] - 0.9).abs() < 1e-14);
        assert!((re[1] - 0.5).abs() < 1e-14);
        assert!(eig.values.iter().all(|z| z.im == 0.0));
    }

    #[test]
    fn companion_double_root() {
        // z^2 - z + 0.25 has the double root 0.5. The residual bound is the
        // contract; eigenvector independence is not.
        let m = Matrix::from_rows(&[vec![1.0, -0.25], vec![1.0, 0.0]]).unwrap();
        let eig = eig_general(&m).unwrap();
        for z in &eig.values {
            assert!((z.re - 0.5).abs() < 1e-6, "re {}", z.re);
            assert!(z.im.abs() < 1e-6);
        }
    }

    #[test]
    fn one_by_one() {
        let m = Matrix::from_rows(&[vec![2.5]]).unwrap();
        let eig = eig_general(&m).unwrap();
        assert_eq!(eig.values.len(), 1);
        assert!((eig.values[0].re - 2.5).abs() < 1e-15);
    }

    #[test]
    fn random_diagonalizable_residuals_hold() {
        let mut rng = CounterRng::new(99);
        for size in [3usize, 8, 17, 33, 64] {
            // Well-conditioned P = I + 0.1 G, diagonal D in [-2, 2].
            let g = Matrix::from_fn(size, size, |_, _| 0.1 * rng.next_normal());
            let mut p = Matrix::identity(size);
            for i in 0..size {
                for j in 0..size {
                    p.set(i, j, p.get(i, j) + g.get(i, j));
                }
            }
            let dvals: Vec<f64> = (0..size).map(|_| rng.next_uniform() * 4.0 - 2.0).collect();
            let pinv = crate::linalg::pinv(&p, 1e-12).unwrap();
            let mut pd = p.clone();
            for i in 0..size {
                for j in 0..size {
                    pd.set(i, j, p.get(i, j) * dvals[j]);
                }
            }
            let m = pd.matmul(&pinv);
            // Residual verification happens inside eig_general.
            let eig = eig_general(&m).unwrap();
            let got = sorted_moduli(&eig.values);
            let mut want: Vec<f64> = dvals.iter().map(|v| v.abs()).collect();
            want.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6, "size {size}: modulus {g} vs {w}");
            }
        }
    }

    #[test]
    fn oversize_matrix_rejected() {
        let m = Matrix::zeros(EIG_MAX_SIZE + 1, EIG_MAX_SIZE + 1);
        assert!(matches!(
            eig_general(&m),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_square_rejected() {
        let m = Matrix::zeros(3, 4);
        assert!(matches!(eig_general(&m), Err(Error::InvalidArgument(_))));
    }
}
