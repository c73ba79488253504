//! Small dense kernels for mini-batch training.
//!
//! Batches hold at most a few dozen rows, where general GEMM libraries spend
//! most of their time packing. These register-tiled loops work directly on
//! row-major buffers. On x86-64 the best available instruction set is picked
//! once at runtime; results are bit-for-bit stable on a given machine.

use std::sync::OnceLock;

const MR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Isa {
    Generic,
    #[cfg(target_arch = "x86_64")]
    Avx2Fma,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
                return Isa::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Isa::Avx2Fma;
            }
        }
        Isa::Generic
    })
}

/// Strided read-only operand: element `(i, p)` lives at `i * row + p * col`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f64],
    pub row: usize,
    pub col: usize,
}

/// `C = A·B` where `A` is `m×k` (strided), `B` is `k×n` with row stride
/// `ldb` and `C` is `m×n` with row stride `ldc`. `C` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    n: usize,
    k: usize,
    a: Strided<'_>,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(n <= ldb || k <= 1, "matmul: ldb smaller than n");
    assert!(n <= ldc, "matmul: ldc smaller than n");
    assert!((m - 1) * ldc + n <= c.len(), "matmul: C out of bounds");
    if k > 0 {
        assert!((m - 1) * a.row + (k - 1) * a.col < a.data.len(), "matmul: A out of bounds");
        assert!((k - 1) * ldb + n <= b.len(), "matmul: B out of bounds");
    }
    match isa() {
        // SAFETY: the feature checks in `isa` guarantee the instructions exist,
        // and the asserts above bound every access made by `matmul_body`.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { matmul_avx512(m, n, k, a, b, ldb, c, ldc) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2Fma => unsafe { matmul_avx2(m, n, k, a, b, ldb, c, ldc) },
        Isa::Generic => matmul_body::<false, 16>(m, n, k, a, b, ldb, c, ldc),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn matmul_avx512(
    m: usize,
    n: usize,
    k: usize,
    a: Strided<'_>,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    matmul_body::<true, 32>(m, n, k, a, b, ldb, c, ldc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn matmul_avx2(
    m: usize,
    n: usize,
    k: usize,
    a: Strided<'_>,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    matmul_body::<true, 16>(m, n, k, a, b, ldb, c, ldc)
}

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, acc: f64) -> f64 {
    if FMA {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
/// Register tile is `MR × NR`; `NR` is chosen per instruction set.
fn matmul_body<const FMA: bool, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: Strided<'_>,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    let full_cols = n / NR * NR;
    let mut i0 = 0;
    while i0 + MR <= m {
        let mut j0 = 0;
        while j0 < full_cols {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                // SAFETY: `matmul` bounds-checks the corners of A and B.
                let brow: [f64; NR] = unsafe { *(b.as_ptr().add(p * ldb + j0) as *const [f64; NR]) };
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = unsafe { *a.data.get_unchecked((i0 + r) * a.row + p * a.col) };
                    for j in 0..NR {
                        acc_row[j] = madd::<FMA>(av, brow[j], acc_row[j]);
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let start = (i0 + r) * ldc + j0;
                c[start..start + NR].copy_from_slice(acc_row);
            }
            j0 += NR;
        }
        i0 += MR;
    }
    // leftover rows, full-width column tiles
    for i in i0..m {
        let mut j0 = 0;
        while j0 < full_cols {
            let mut acc = [0.0f64; NR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * ldb + j0..p * ldb + j0 + NR].try_into().unwrap();
                let av = a.data[i * a.row + p * a.col];
                for j in 0..NR {
                    acc[j] = madd::<FMA>(av, brow[j], acc[j]);
                }
            }
            c[i * ldc + j0..i * ldc + j0 + NR].copy_from_slice(&acc);
            j0 += NR;
        }
    }
    // leftover columns
    if full_cols < n {
        for i in 0..m {
            for j in full_cols..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc = madd::<FMA>(a.data[i * a.row + p * a.col], b[p * ldb + j], acc);
                }
                c[i * ldc + j] = acc;
            }
        }
    }
}

/// `dst[j * rows + i] = src[i * cols + j]`, in cache-sized blocks.
pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    const BLOCK: usize = 16;
    for i0 in (0..rows).step_by(BLOCK) {
        for j0 in (0..cols).step_by(BLOCK) {
            for i in i0..(i0 + BLOCK).min(rows) {
                for j in j0..(j0 + BLOCK).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}
