//! Small dense linear algebra on square [`SeqTensor`]s: random orthogonal
//! matrices, LU with partial pivoting, inversion.

use super::{MathError, RngStream, SeqTensor};

/// `P · A = L · U` with unit-diagonal `L`. `perm[i]` is the row of `A` that
/// ended up in row `i`.
#[derive(Debug, Clone)]
pub struct LuFactors {
    pub perm: Vec<usize>,
    pub lower: SeqTensor,
    pub upper: SeqTensor,
}

fn check_square(op: &'static str, a: &SeqTensor) -> Result<usize, MathError> {
    if a.rows() != a.cols() {
        return Err(MathError::ShapeMismatch {
            op,
            left: a.shape(),
            right: (a.cols(), a.rows()),
        });
    }
    Ok(a.rows())
}

/// Haar-ish random orthogonal matrix via modified Gram-Schmidt on Gaussian
/// columns.
#[allow(clippy::needless_range_loop)]
pub fn random_orthogonal(n: usize, rng: &mut RngStream) -> SeqTensor {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(n)).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| cols[i][k] * cols[j][k]).sum();
                for k in 0..n {
                    cols[i][k] -= dot * cols[j][k];
                }
            }
            let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let mut out = SeqTensor::zeros(n, n);
            for (j, col) in cols.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    out.set(i, j, v);
                }
            }
            return out;
        }
    }
}

pub fn lu_decompose(a: &SeqTensor) -> Result<LuFactors, MathError> {
    let n = check_square("lu_decompose", a)?;
    let mut m = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut lower = SeqTensor::zeros(n, n);
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| m.get(i, k).abs().total_cmp(&m.get(j, k).abs()))
            .unwrap_or(k);
        if m.get(pivot, k).abs() < 1e-300 {
            return Err(MathError::Singular);
        }
        if pivot != k {
            for c in 0..n {
                let (x, y) = (m.get(k, c), m.get(pivot, c));
                m.set(k, c, y);
                m.set(pivot, c, x);
                let (x, y) = (lower.get(k, c), lower.get(pivot, c));
                lower.set(k, c, y);
                lower.set(pivot, c, x);
            }
            perm.swap(k, pivot);
        }
        for i in k + 1..n {
            let f = m.get(i, k) / m.get(k, k);
            lower.set(i, k, f);
            for c in k..n {
                m.set(i, c, m.get(i, c) - f * m.get(k, c));
            }
        }
    }
    for i in 0..n {
        lower.set(i, i, 1.0);
        for c in 0..i {
            m.set(i, c, 0.0);
        }
    }
    Ok(LuFactors {
        perm,
        lower,
        upper: m,
    })
}

/// Inverse via Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &SeqTensor) -> Result<SeqTensor, MathError> {
    let n = check_square("inverse", a)?;
    let mut m = a.clone();
    let mut inv = SeqTensor::zeros(n, n);
    for i in 0..n {
        inv.set(i, i, 1.0);
    }
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| m.get(i, k).abs().total_cmp(&m.get(j, k).abs()))
            .unwrap_or(k);
        if m.get(pivot, k).abs() < 1e-300 {
            return Err(MathError::Singular);
        }
        if pivot != k {
            for c in 0..n {
                let (x, y) = (m.get(k, c), m.get(pivot, c));
                m.set(k, c, y);
                m.set(pivot, c, x);
                let (x, y) = (inv.get(k, c), inv.get(pivot, c));
                inv.set(k, c, y);
                inv.set(pivot, c, x);
            }
        }
        let d = m.get(k, k);
        for c in 0..n {
            m.set(k, c, m.get(k, c) / d);
            inv.set(k, c, inv.get(k, c) / d);
        }
        for i in 0..n {
            if i != k {
                let f = m.get(i, k);
                if f != 0.0 {
                    for c in 0..n {
                        m.set(i, c, m.get(i, c) - f * m.get(k, c));
                        inv.set(i, c, inv.get(i, c) - f * inv.get(k, c));
                    }
                }
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> SeqTensor {
        let mut m = SeqTensor::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn orthogonal_times_transpose_is_identity() {
        let q = random_orthogonal(6, &mut RngStream::new(4));
        let qqt = q.matmul(&q.transpose()).unwrap();
        assert!(qqt.max_abs_diff(&identity(6)).unwrap() < 1e-12);
    }

    #[test]
    fn lu_reconstructs_permuted_matrix() {
        let mut rng = RngStream::new(8);
        let a = SeqTensor::new(5, 5, rng.normals(25)).unwrap();
        let lu = lu_decompose(&a).unwrap();
        let prod = lu.lower.matmul(&lu.upper).unwrap();
        for (i, &src) in lu.perm.iter().enumerate() {
            for c in 0..5 {
                assert!((prod.get(i, c) - a.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = RngStream::new(9);
        let a = SeqTensor::new(4, 4, rng.normals(16)).unwrap();
        let inv = inverse(&a).unwrap();
        assert!(a.matmul(&inv).unwrap().max_abs_diff(&identity(4)).unwrap() < 1e-10);
        assert_eq!(
            inverse(&SeqTensor::zeros(3, 3)).unwrap_err(),
            MathError::Singular
        );
    }
}
