//! Flat f32 compute kernels.
//!
//! Loops are written lane-split so the autovectorizer can keep them in SIMD
//! registers without reassociating float sums; every kernel has a fixed
//! accumulation order, so results are bit-identical across runs and thread
//! counts.

#![allow(clippy::needless_range_loop)] // lane-split loops index fixed-width accumulators

const LANES: usize = 16;

/// out[m,n] = a[m,k] · b[k,n]
pub fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        out_row.iter_mut().for_each(|o| *o = 0.0);
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m,p] = a[m,k] · b[p,k]ᵀ  (rows of b are the right-hand columns)
pub fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k,n] = a[m,k]ᵀ · b[m,n]
pub fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Lane-split dot product: SIMD-friendly with a fixed summation order.
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f32; LANES];
    let chunks = x.len() / LANES;
    for c in 0..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        let ys = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s = 0.0f32;
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..x.len() {
        s += x[i] * y[i];
    }
    s
}

/// Vectorizable exp for softmax logits. Classic range reduction
/// exp(x) = 2ⁿ·exp(r) with n = round(x·log₂e) and a degree-6 polynomial for
/// exp(r) on |r| ≤ ln2/2; relative error stays within ~1e-6. Inputs far below
/// the f32 exponent range flush to 0.
pub fn exp_approx(x: f32) -> f32 {
    if x < -87.0 {
        return 0.0;
    }
    exp_core(x)
}

/// Branchless body of [`exp_approx`]; callers guarantee finite input. Values
/// far below the f32 exponent range land on 2⁻¹²⁶-scaled results (≈0).
#[inline]
fn exp_core(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // Hi part is 355/512: only 9 significant bits, so n·LN2_HI is exact for
    // the |n| ≤ 127 range that matters here and the reduction loses nothing.
    #[allow(clippy::excessive_precision)] // exactly 355/512; every digit is load-bearing
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944e-4;
    // Round to nearest via the 1.5·2²³ magic constant; unlike f32::round this
    // lowers to plain vector add/sub.
    const MAGIC: f32 = 12_582_912.0;
    let x = x.clamp(-104.0, 88.0);
    let n = (x * LOG2E + MAGIC) - MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Horner polynomial for exp(r), coefficients 1/k!.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let bits = ((n as i32).wrapping_add(127).clamp(1, 254) as u32) << 23;
    p * f32::from_bits(bits)
}

/// Lane-split f64 accumulation of an f32 slice; fixed summation order.
pub fn sum_f64(x: &[f32]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = x.len() / LANES;
    for c in 0..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xs[l] as f64;
        }
    }
    let mut s = 0.0f64;
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..x.len() {
        s += x[i] as f64;
    }
    s
}

/// In-place row softmax with max-subtraction and a 64-bit row sum.
/// `inv_temp` multiplies the shifted logits before exponentiation.
pub fn softmax_row_inplace(row: &mut [f32], inv_temp: f32) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(v);
    }
    for v in row.iter_mut() {
        *v = exp_core((*v - max) * inv_temp);
    }
    let sum = sum_f64(row);
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let m = 5;
        let k = 19;
        let n = 7;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 13) as f32 - 6.0) * 0.25).collect();
        let mut naive = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    naive[i * n + j] += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
            }
        }

        let mut nn = vec![0.0f32; m * n];
        matmul_nn(&a, &b, &mut nn, m, k, n);

        let mut bt = vec![0.0f32; n * k]; // b transposed, rows = columns of b
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut nt = vec![0.0f32; m * n];
        matmul_nt(&a, &bt, &mut nt, m, k, n);

        let mut at = vec![0.0f32; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut tn = vec![0.0f32; m * n];
        matmul_tn(&at, &b, &mut tn, k, m, n);

        for i in 0..m * n {
            assert!((nn[i] as f64 - naive[i]).abs() < 1e-4, "nn[{i}]");
            assert!((nt[i] as f64 - naive[i]).abs() < 1e-4, "nt[{i}]");
            assert!((tn[i] as f64 - naive[i]).abs() < 1e-4, "tn[{i}]");
        }
    }

    #[test]
    fn exp_approx_matches_reference() {
        let mut worst = 0.0f64;
        let mut x = -30.0f64;
        while x <= 8.0 {
            let approx = exp_approx(x as f32) as f64;
            let exact = x.exp();
            let rel = ((approx - exact) / exact).abs();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 2e-6, "worst relative error {worst}");
        assert_eq!(exp_approx(0.0), 1.0);
        assert_eq!(exp_approx(-200.0), 0.0);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut row: Vec<f32> = (0..256).map(|i| ((i * 31 % 97) as f32) * 0.11 - 4.0).collect();
        softmax_row_inplace(&mut row, 1.0);
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
