//! Strided single-precision GEMM over `matrixmultiply`, split across the
//! current rayon pool by output rows. Every output element is produced by
//! the same k-ordered accumulation regardless of the split, so results do
//! not depend on the worker count.

use rayon::prelude::*;

/// Operand view: base slice plus row/column strides.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset += offset;
        self
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

#[derive(Clone, Copy)]
struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// `C[m×n] = alpha·A[m×k]·B[k×n] + beta·C`, where C is addressed at
/// `c_offset` with strides `(rsc, csc)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: View<'_>,
    b: View<'_>,
    beta: f32,
    c: &mut [f32],
    c_offset: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = c_offset + (m - 1) * rsc + (n - 1) * csc;
    assert!(last < c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[c_offset + i * rsc + j * csc];
                *x = if beta == 0.0 { 0.0 } else { *x * beta };
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);

    let threads = rayon::current_num_threads();
    let work = m * k * n;
    let chunk = if threads > 1 && work > (1 << 18) && m >= 16 {
        (m / (threads * 4)).max(8)
    } else {
        m
    };
    let a_ptr = a.data.as_ptr() as usize;
    let b_ptr = unsafe { b.data.as_ptr().add(b.offset) } as usize;
    let c_ptr = SendPtr(unsafe { c.as_mut_ptr().add(c_offset) });
    let starts: Vec<usize> = (0..m).step_by(chunk).collect();
    let run = |r0: usize| {
        let rows = chunk.min(m - r0);
        let c_ptr = c_ptr;
        // SAFETY: bounds were checked above and chunks cover disjoint rows of C.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                alpha,
                (a_ptr as *const f32).add(a.offset + r0 * a.rs),
                a.rs as isize,
                a.cs as isize,
                b_ptr as *const f32,
                b.rs as isize,
                b.cs as isize,
                beta,
                c_ptr.0.add(r0 * rsc),
                rsc as isize,
                csc as isize,
            );
        }
    };
    if starts.len() == 1 {
        run(0);
    } else {
        starts.into_par_iter().for_each(run);
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f32>();
    for v in acc {
        s += v;
    }
    s
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
