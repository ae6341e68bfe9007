//! Small dense linear-algebra helpers that nalgebra does not ship directly.

use nalgebra::{DMatrix, DVector};

/// Padé coefficients for degrees 3, 5, 7, 9 and 13 together with the
/// corresponding 1-norm thresholds of the scaling-and-squaring method.
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
];
const THETA13: f64 = 5.371920351148152;

pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant (degree selected from the 1-norm, Higham 2005).
///
/// Returns `None` if the input has non-finite entries or the Padé
/// denominator is singular.
pub fn expm(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    assert!(a.is_square(), "expm requires a square matrix");
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(a);

    for &(m, theta) in THETA.iter() {
        if norm <= theta {
            let coeffs: &[f64] = match m {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let (u, v) = pade_low(a, coeffs, &ident);
            return pade_solve(&u, &v);
        }
    }

    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s);
    let b = &PADE13;
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    let mut r = pade_solve(&u, &v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Some(r)
}

fn pade_low(a: &DMatrix<f64>, c: &[f64], ident: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let a2 = a * a;
    let mut pow = ident.clone();
    let mut u_inner = ident * c[1];
    let mut v = ident * c[0];
    let mut k = 2;
    while k < c.len() {
        pow = &pow * &a2;
        v += &pow * c[k];
        if k + 1 < c.len() {
            u_inner += &pow * c[k + 1];
        }
        k += 2;
    }
    (a * u_inner, v)
}

fn pade_solve(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().is_some()
}

/// `xᵀ W x`
pub fn quad_form(w: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(w * x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(expm(&z).unwrap(), DMatrix::identity(4, 4));
    }

    #[test]
    fn expm_nilpotent_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&(a * 0.2)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(max_abs_diff(&e, &expected) < 1e-15);
    }

    #[test]
    fn expm_diagonal_matches_scalar_exp_across_degrees() {
        for scale in [1e-3, 0.1, 0.9, 2.0, 5.0, 40.0] {
            let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-scale, scale * 0.5, 0.0]));
            let e = expm(&a).unwrap();
            for i in 0..3 {
                let want = a[(i, i)].exp();
                assert!(((e[(i, i)] - want) / want).abs() < 1e-13, "scale {scale}");
            }
        }
    }

    #[test]
    fn expm_rotation_generator() {
        let t = 1.3;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = expm(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        assert!(max_abs_diff(&e, &expected) < 1e-14);
    }

    #[test]
    fn expm_rejects_nan() {
        let mut a = DMatrix::<f64>::zeros(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(expm(&a).is_none());
    }

    #[test]
    fn expm_preserves_block_zero_pattern() {
        let mut a = DMatrix::<f64>::zeros(4, 4);
        a[(0, 1)] = 3.0;
        a[(2, 3)] = -1.5;
        a[(3, 3)] = -7.0;
        a[(3, 2)] = 2.0;
        let e = expm(&(a * 0.7)).unwrap();
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (2, 1), (3, 0), (3, 1)] {
            assert_eq!(e[(i, j)], 0.0);
        }
    }
}
