//! Dense vector kernels. Storage is `f32`; accumulation is always `f64` so
//! scoring results do not depend on summation width, only on order.

/// Dot product of two `f32` slices accumulated in `f64`.
///
/// Four independent accumulator lanes keep the dependency chain short enough
/// for the 50K-candidate scoring budget on one core; the lanes are combined
/// in a fixed order so results are bit-stable.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] as f64 * b[j] as f64;
        acc[1] += a[j + 1] as f64 * b[j + 1] as f64;
        acc[2] += a[j + 2] as f64 * b[j + 2] as f64;
        acc[3] += a[j + 3] as f64 * b[j + 3] as f64;
    }
    for j in chunks * 4..a.len() {
        acc[0] += a[j] as f64 * b[j] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_norm64(v: &[f64]) -> f64 {
    dot64(v, v).sqrt()
}

/// Cosine similarity computed in `f64`. Zero vectors yield 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Normalizes in `f64` and narrows to `f32` storage. The result has unit
/// norm to within one `f32` rounding step per component.
pub fn normalize_to_f32(v: &[f64]) -> Vec<f32> {
    let n = l2_norm64(v);
    assert!(n > 0.0, "cannot normalize a zero vector");
    v.iter().map(|&x| (x / n) as f32).collect()
}

/// In-place `f64` normalization.
pub fn normalize64(v: &mut [f64]) {
    let n = l2_norm64(v);
    assert!(n > 0.0, "cannot normalize a zero vector");
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// Deterministic sum independent of chunking: pairwise (tree) reduction in
/// index order. Used for metric aggregation so thread-count changes in
/// per-query scoring never alter the reported means.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}
