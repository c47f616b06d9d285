use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use super::MathError;

/// Dense step-major matrix: `rows` steps by `cols` channels.
///
/// Used for latent sequences, observations, conditioning sequences and, inside
/// the autodiff engine, every intermediate value.
#[derive(Clone, PartialEq)]
pub struct SeqTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SeqTensor {
    /// Builds a tensor from step-major data. Rejects empty shapes, length
    /// mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MathError> {
        if rows == 0 || cols == 0 {
            return Err(MathError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(MathError::DataLength {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite {
                context: "SeqTensor::new",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "SeqTensor shape must be non-empty");
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MathError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(MathError::DataLength {
                expected: cols,
                actual: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// A single column.
    pub fn column(values: &[f64]) -> Result<Self, MathError> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(1, 1, vec![value])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Copy of `rows[start..end]`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, MathError> {
        if start >= end || end > self.rows {
            return Err(MathError::RowRange {
                start,
                end,
                rows: self.rows,
            });
        }
        Ok(Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &SeqTensor) -> Result<Self, MathError> {
        if self.cols != other.rows {
            return Err(MathError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            0.0,
        );
        Ok(Self::from_raw(self.rows, other.cols, out))
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&SeqTensor]) -> Result<Self, MathError> {
        let first = parts
            .first()
            .ok_or(MathError::EmptyShape { rows: 0, cols: 0 })?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.cols != cols {
                return Err(MathError::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_raw(data.len() / cols.max(1), cols, data))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &SeqTensor) -> Result<f64, MathError> {
        if self.shape() != other.shape() {
            return Err(MathError::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl fmt::Debug for SeqTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SeqTensor({}x{}) [", self.rows, self.cols)?;
        for (i, row) in self.iter_rows().enumerate().take(6) {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{:?}", &row[..row.len().min(6)])?;
        }
        if self.rows > 6 {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Wire form of a tensor: shape plus base64 of the little-endian `f64` bytes.
#[derive(Serialize, Deserialize)]
struct EncodedArray {
    rows: usize,
    cols: usize,
    data: String,
}

/// Base64 of the little-endian bytes of `values`.
pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!(
            "{} bytes is not a whole number of f64 values",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Serde adapter storing a `Vec<f64>` as base64 little-endian bytes.
pub mod serde_f64s {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&super::encode_f64s(values))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(deserializer)?;
        super::decode_f64s(&text).map_err(de::Error::custom)
    }
}

impl Serialize for SeqTensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        EncodedArray {
            rows: self.rows,
            cols: self.cols,
            data: encode_f64s(&self.data),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SeqTensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let enc = EncodedArray::deserialize(deserializer)?;
        let data = decode_f64s(&enc.data).map_err(de::Error::custom)?;
        SeqTensor::new(enc.rows, enc.cols, data).map_err(de::Error::custom)
    }
}

/// `out = a' · b' + beta · out` with `a'` = a or aᵀ and `b'` = b or bᵀ.
/// `m × k` times `k × n` after transposition; storage is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    out: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths are the exact products of the dimensions passed,
    // and the strides above address only elements inside those slices.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            SeqTensor::new(1, 2, vec![1.0, f64::NAN]),
            Err(MathError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            SeqTensor::new(0, 2, vec![]),
            Err(MathError::EmptyShape { .. })
        ));
        assert!(SeqTensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_and_transposed_gemm_agree() {
        let a = SeqTensor::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = SeqTensor::new(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);

        // aᵀ stored as a 3x2, used transposed
        let at = a.transpose();
        let mut out = vec![0.0; 4];
        gemm(2, 3, 2, at.data(), true, b.data(), false, &mut out, 0.0);
        assert_eq!(out, c.data());
        let bt = b.transpose();
        gemm(2, 3, 2, a.data(), false, bt.data(), true, &mut out, 0.0);
        assert_eq!(out, c.data());
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let t = SeqTensor::new(2, 2, vec![0.1, -1e-300, 3.5e10, -0.0]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: SeqTensor = serde_json::from_str(&json).unwrap();
        let bits = |t: &SeqTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t), bits(&back));
        assert!(serde_json::from_str::<SeqTensor>(r#"{"rows":1,"cols":2,"data":"AAAA"}"#).is_err());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = SeqTensor::zeros(2, 3);
        let err = a.matmul(&SeqTensor::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            MathError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }
}
