use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Strided view of a row-major operand for [`Element::gemm`].
#[derive(Clone, Copy, Debug)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Strides { row: cols, col: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols }
    }

    fn max_index(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row + (cols - 1) * self.col
    }
}

/// Floating-point scalar the tape can run on: `f32` for training, `f64` for checks.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` for `a: m x k`, `b: k x n`, `c: m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            for i in 0..m {
                for j in 0..n {
                    let idx = i * sc.row + j * sc.col;
                    c[idx] = if beta == Self::zero() { Self::zero() } else { beta * c[idx] };
                }
            }
            return;
        }
        assert!(sa.max_index(m, k) < a.len(), "gemm: lhs view out of bounds");
        assert!(sb.max_index(k, n) < b.len(), "gemm: rhs view out of bounds");
        assert!(sc.max_index(m, n) < c.len(), "gemm: output view out of bounds");
        // SAFETY: every index touched by the kernel is bounds-checked above.
        unsafe { Self::gemm_raw(m, k, n, alpha, a.as_ptr(), sa, b.as_ptr(), sb, beta, c.as_mut_ptr(), sc) }
    }

    /// # Safety
    /// All strided views must be in bounds of their allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        sa: Strides,
        b: *const Self,
        sb: Strides,
        beta: Self,
        c: *mut Self,
        sc: Strides,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn bits(self) -> u64;

    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        sa: Strides,
        b: *const f32,
        sb: Strides,
        beta: f32,
        c: *mut f32,
        sc: Strides,
    ) {
        matrixmultiply::sgemm(
            m, k, n, alpha, a, sa.row as isize, sa.col as isize, b, sb.row as isize,
            sb.col as isize, beta, c, sc.row as isize, sc.col as isize,
        )
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        sa: Strides,
        b: *const f64,
        sb: Strides,
        beta: f64,
        c: *mut f64,
        sc: Strides,
    ) {
        matrixmultiply::dgemm(
            m, k, n, alpha, a, sa.row as isize, sa.col as isize, b, sb.row as isize,
            sb.col as isize, beta, c, sc.row as isize, sc.col as isize,
        )
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
