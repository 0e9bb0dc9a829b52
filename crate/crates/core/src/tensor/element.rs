use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

/// Scalar types the tensor engine runs on. `f32` is the training type;
/// `f64` backs the checked-mode gradient tests.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// All pointer/stride combinations must stay inside their allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Element for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed strided matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` view of the front of `data`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major `rows x cols` view whose rows start `rs` elements apart.
    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize) -> Self {
        assert!(
            rows == 0 || data.len() >= (rows - 1) * rs + cols,
            "matrix view out of bounds"
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `C = A B + beta C` with `C` row-major `a.rows x b.cols`. Returns the
/// number of multiply-accumulates performed.
pub(crate) fn gemm<T: Element>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) -> u64 {
    let n = b.cols;
    gemm_ld(a, b, beta, c, n)
}

/// [`gemm`] into a `C` whose rows start `ldc` elements apart.
pub(crate) fn gemm_ld<T: Element>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    ldc: usize,
) -> u64 {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return 0;
    }
    assert!(
        ldc >= n && c.len() >= (m - 1) * ldc + n,
        "gemm output out of bounds"
    );
    if k == 0 {
        c.chunks_mut(ldc)
            .take(m)
            .for_each(|row| row[..n].iter_mut().for_each(|v| *v = *v * beta));
        return 0;
    }
    // SAFETY: bounds of every view were asserted at construction and the
    // output slice covers m rows of n elements, ldc apart.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
    (m * k * n) as u64
}
