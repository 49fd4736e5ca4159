use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a graph. Training runs in `f32`; finite-difference
/// checks run the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// lie inside the buffers behind the pointers.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 fits the element type")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("element converts to f64")
    }

    fn of_f32(x: f32) -> Self {
        Self::of(x as f64)
    }

    fn as_f32(self) -> f32 {
        self.to_f64().expect("element converts to f64") as f32
    }
}

impl Real for f32 {
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

impl Real for f64 {
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

/// A strided matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Dense row-major block inside a wider row-major buffer.
    pub fn block(offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs: row_stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Bounds-checked wrapper over [`Real::gemm_raw`]. `c` and the inputs are
/// distinct buffers so no aliasing is possible.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    c: &mut [T],
    cv: View,
    alpha: T,
    accumulate: bool,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(av.last_index() < a.len().max(1) || av.cols == 0);
    assert!(bv.last_index() < b.len().max(1) || bv.rows == 0);
    assert!(cv.last_index() < c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    if av.cols == 0 {
        if !accumulate {
            for i in 0..cv.rows {
                for j in 0..cv.cols {
                    c[cv.offset + i * cv.rs + j * cv.cs] = T::zero();
                }
            }
        }
        return;
    }
    // SAFETY: all reachable indices were bounds-checked above.
    unsafe {
        T::gemm_raw(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
