//! Value-level compute kernels shared by the tape ops and by the pure
//! (non-differentiated) entry points in `ssm`.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Minimum element count before a kernel bothers spawning rayon tasks.
const PAR_THRESHOLD: usize = 1 << 14;

/// `c[m,n] = a[m,k] · b[k,n]`, rows computed independently.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [S])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * br[j];
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// First-order linear recurrence `h_t = a_t ⊙ h_{t-1} + b_t` per column,
/// restarted at every segment start, evaluated with a Blelloch two-phase
/// tree over the associative operator
/// `(a1,b1) ∘ (a2,b2) = (a1·a2, a2·b1 + b2)`.
///
/// The tree always pads a segment to the next power of two with the identity
/// pair `(1, 0)`, so the combine order for prefix `t` depends only on `t` and
/// never on the segment length. Appending rows to a segment therefore leaves
/// every earlier output bit-identical, which the padded-subsequence path
/// relies on.
pub(crate) fn linear_scan<S: Scalar>(
    a: &[S],
    b: &[S],
    rows: usize,
    cols: usize,
    segments: &[usize],
) -> Vec<S> {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(b.len(), rows * cols);
    let mut out = vec![S::zero(); rows * cols];
    let bounds = segment_bounds(segments, rows);

    let scan_col = |k: usize| -> Vec<S> {
        let mut col = vec![S::zero(); rows];
        for &(s0, s1) in &bounds {
            scan_one_segment(a, b, cols, k, s0, s1, &mut col[s0..s1]);
        }
        col
    };
    let columns: Vec<Vec<S>> = if rows * cols >= PAR_THRESHOLD {
        (0..cols).into_par_iter().map(scan_col).collect()
    } else {
        (0..cols).map(scan_col).collect()
    };
    for (k, col) in columns.into_iter().enumerate() {
        for t in 0..rows {
            out[t * cols + k] = col[t];
        }
    }
    out
}

/// Scan one (segment, column) pair; writes `seg_out[i]` for `i in 0..s1-s0`.
fn scan_one_segment<S: Scalar>(
    a: &[S],
    b: &[S],
    cols: usize,
    k: usize,
    s0: usize,
    s1: usize,
    seg_out: &mut [S],
) {
    let len = s1 - s0;
    let m = len.next_power_of_two();
    let mut pa = vec![S::one(); m];
    let mut pb = vec![S::zero(); m];
    for i in 0..len {
        pa[i] = a[(s0 + i) * cols + k];
        pb[i] = b[(s0 + i) * cols + k];
    }
    // Up-sweep: aligned dyadic block sums.
    let mut gap = 1;
    while gap < m {
        let step = gap * 2;
        let mut i = step - 1;
        while i < m {
            let l = i - gap;
            let (la, lb) = (pa[l], pb[l]);
            let (ra, rb) = (pa[i], pb[i]);
            pa[i] = la * ra;
            pb[i] = ra * lb + rb;
            i += step;
        }
        gap = step;
    }
    // Down-sweep: exclusive prefixes.
    pa[m - 1] = S::one();
    pb[m - 1] = S::zero();
    let mut gap = m / 2;
    while gap >= 1 {
        let step = gap * 2;
        let mut i = step - 1;
        while i < m {
            let l = i - gap;
            let (la, lb) = (pa[l], pb[l]);
            pa[l] = pa[i];
            pb[l] = pb[i];
            let (qa, qb) = (pa[l], pb[l]);
            pa[i] = qa * la;
            pb[i] = la * qb + lb;
            i += step;
        }
        gap /= 2;
    }
    // Inclusive value with h0 = 0: combine(exclusive_t, elem_t).b.
    for i in 0..len {
        let ea = a[(s0 + i) * cols + k];
        let eb = b[(s0 + i) * cols + k];
        seg_out[i] = ea * pb[i] + eb;
    }
}

/// Depthwise causal 1-D convolution per column with zero left padding,
/// restarted at segment starts. `w` is `[cols, width]`, lag-major: `w[d, j]`
/// multiplies `x[t - j, d]`.
pub(crate) fn causal_conv1d<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: &[S],
    rows: usize,
    cols: usize,
    width: usize,
    segments: &[usize],
) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for &(s0, s1) in &segment_bounds(segments, rows) {
        for t in s0..s1 {
            let reach = (t - s0).min(width - 1);
            let o = &mut out[t * cols..(t + 1) * cols];
            for d in 0..cols {
                let mut acc = bias[d];
                for j in 0..=reach {
                    acc = acc + w[d * width + j] * x[(t - j) * cols + d];
                }
                o[d] = acc;
            }
        }
    }
    out
}

/// Per-segment (start, end) pairs from a sorted start list.
pub(crate) fn segment_bounds(segments: &[usize], rows: usize) -> Vec<(usize, usize)> {
    debug_assert!(!segments.is_empty() && segments[0] == 0);
    let mut out = Vec::with_capacity(segments.len());
    for (i, &s) in segments.iter().enumerate() {
        let e = if i + 1 < segments.len() { segments[i + 1] } else { rows };
        debug_assert!(s < e && e <= rows);
        out.push((s, e));
    }
    out
}

/// Group means: `out[g] = mean of rows r with seg[r] == g`; empty groups are 0.
pub(crate) fn segment_mean<S: Scalar>(
    x: &[S],
    seg: &[usize],
    n_out: usize,
    cols: usize,
) -> (Vec<S>, Vec<usize>) {
    let mut out = vec![S::zero(); n_out * cols];
    let mut counts = vec![0usize; n_out];
    for (r, &g) in seg.iter().enumerate() {
        counts[g] += 1;
        let row = &x[r * cols..(r + 1) * cols];
        let acc = &mut out[g * cols..(g + 1) * cols];
        for c in 0..cols {
            acc[c] = acc[c] + row[c];
        }
    }
    for g in 0..n_out {
        if counts[g] > 0 {
            let inv = S::one() / S::c(counts[g] as f64);
            for v in &mut out[g * cols..(g + 1) * cols] {
                *v = *v * inv;
            }
        }
    }
    (out, counts)
}

/// Group maxima with the winning row recorded per `(group, column)`.
/// Ties keep the first (lowest-index) row, which makes the reduction and its
/// gradient independent of thread schedule.
pub(crate) fn segment_max<S: Scalar>(
    x: &[S],
    seg: &[usize],
    n_out: usize,
    cols: usize,
) -> (Vec<S>, Vec<usize>) {
    let mut out = vec![S::zero(); n_out * cols];
    let mut arg = vec![usize::MAX; n_out * cols];
    for (r, &g) in seg.iter().enumerate() {
        let row = &x[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let slot = g * cols + c;
            if arg[slot] == usize::MAX || row[c] > out[slot] {
                out[slot] = row[c];
                arg[slot] = r;
            }
        }
    }
    for v in out.iter_mut().zip(arg.iter()) {
        if *v.1 == usize::MAX {
            *v.0 = S::zero();
        }
    }
    (out, arg)
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + x.neg().exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + x.neg().exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `φ(x) = (e^x − 1)/x`, the zero-order-hold input factor, with the series
/// branch `1 + x/2` below `|x| < 1e-8` so a zero (or denormal) state matrix
/// degenerates to the Euler rule instead of 0/0.
pub(crate) fn phi<S: Scalar>(x: S) -> S {
    if x.abs() < S::c(1e-8) {
        S::one() + x * S::c(0.5)
    } else {
        x.exp_m1() / x
    }
}

/// Derivative of [`phi`]. The closed form `(e^x(x−1)+1)/x²` cancels
/// catastrophically near zero, so a series is used below `|x| < 1e-3`.
pub(crate) fn phi_prime<S: Scalar>(x: S) -> S {
    if x.abs() < S::c(1e-3) {
        S::c(0.5) + x * (S::c(1.0 / 3.0) + x * (S::c(0.125) + x * S::c(1.0 / 30.0)))
    } else {
        (x.exp() * (x - S::one()) + S::one()) / (x * x)
    }
}
