//! Raw f32 numeric kernels shared by the autodiff graph and the inference
//! path. All buffers are row-major; accumulation stays in f32.

/// 3×3 stride-1 pad-1 cross-correlation. `x`: [cin,h,w], `w`: [cout,cin,3,3],
/// `b`: [cout], `out`: [cout,h,w] (overwritten).
pub fn conv2d_fwd(x: &[f32], wt: &[f32], b: &[f32], cin: usize, h: usize, w: usize, cout: usize, out: &mut [f32]) {
    let hw = h * w;
    debug_assert_eq!(x.len(), cin * hw);
    debug_assert_eq!(wt.len(), cout * cin * 9);
    debug_assert_eq!(out.len(), cout * hw);
    for co in 0..cout {
        let op = &mut out[co * hw..(co + 1) * hw];
        op.fill(b[co]);
        for ci in 0..cin {
            let xp = &x[ci * hw..(ci + 1) * hw];
            let wb = &wt[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for ky in 0..3usize {
                for oy in 0..h {
                    let sy = oy + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let xr = &xp[(sy - 1) * w..sy * w];
                    let or = &mut op[oy * w..(oy + 1) * w];
                    let (w0, w1, w2) = (wb[ky * 3], wb[ky * 3 + 1], wb[ky * 3 + 2]);
                    // Interior: all three taps in one pass.
                    for ox in 1..w.saturating_sub(1) {
                        or[ox] += w0 * xr[ox - 1] + w1 * xr[ox] + w2 * xr[ox + 1];
                    }
                    // Edge columns: out-of-image taps are zero padding.
                    if w >= 1 {
                        or[0] += w1 * xr[0];
                        if w >= 2 {
                            or[0] += w2 * xr[1];
                            or[w - 1] += w0 * xr[w - 2] + w1 * xr[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d_fwd` w.r.t. its input: full correlation of `dout` with
/// the kernel rotated 180° and channel roles swapped. `dx` is accumulated into.
pub fn conv2d_bwd_input(dout: &[f32], wt: &[f32], cin: usize, h: usize, w: usize, cout: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..cin {
        let dxp = &mut dx[ci * hw..(ci + 1) * hw];
        for co in 0..cout {
            let dop = &dout[co * hw..(co + 1) * hw];
            let wb = &wt[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for ky in 0..3usize {
                // dx[y] receives dout[y + 1 - ky] through tap (ky, kx).
                for iy in 0..h {
                    let sy = iy + 1;
                    if sy < ky || sy - ky >= h {
                        continue;
                    }
                    let dor = &dop[(sy - ky) * w..(sy - ky + 1) * w];
                    let dxr = &mut dxp[iy * w..(iy + 1) * w];
                    // Rotated taps: tap kx contributes dout[x + 1 - kx].
                    let (w0, w1, w2) = (wb[ky * 3], wb[ky * 3 + 1], wb[ky * 3 + 2]);
                    for ix in 1..w.saturating_sub(1) {
                        dxr[ix] += w2 * dor[ix - 1] + w1 * dor[ix] + w0 * dor[ix + 1];
                    }
                    if w >= 1 {
                        dxr[0] += w1 * dor[0];
                        if w >= 2 {
                            dxr[0] += w0 * dor[1];
                            dxr[w - 1] += w2 * dor[w - 2] + w1 * dor[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d_fwd` w.r.t. the kernel. `dw` is accumulated into.
pub fn conv2d_bwd_weight(dout: &[f32], x: &[f32], cin: usize, h: usize, w: usize, cout: usize, dw: &mut [f32]) {
    let hw = h * w;
    for co in 0..cout {
        let dop = &dout[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let xp = &x[ci * hw..(ci + 1) * hw];
            let wb = &mut dw[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for ky in 0..3usize {
                for oy in 0..h {
                    let sy = oy + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let xr = &xp[(sy - 1) * w..sy * w];
                    let dor = &dop[oy * w..(oy + 1) * w];
                    let (mut a0, mut a1, mut a2) = (0.0f32, 0.0f32, 0.0f32);
                    for ox in 1..w.saturating_sub(1) {
                        a0 += dor[ox] * xr[ox - 1];
                        a1 += dor[ox] * xr[ox];
                        a2 += dor[ox] * xr[ox + 1];
                    }
                    if w >= 1 {
                        a1 += dor[0] * xr[0];
                        if w >= 2 {
                            a2 += dor[0] * xr[1];
                            a0 += dor[w - 1] * xr[w - 2];
                            a1 += dor[w - 1] * xr[w - 1];
                        }
                    }
                    wb[ky * 3] += a0;
                    wb[ky * 3 + 1] += a1;
                    wb[ky * 3 + 2] += a2;
                }
            }
        }
    }
}

/// Gradient of `conv2d_fwd` w.r.t. the bias: per-channel sum of `dout`.
pub fn conv2d_bwd_bias(dout: &[f32], cout: usize, hw: usize, db: &mut [f32]) {
    for co in 0..cout {
        let mut s = 0.0f32;
        for v in &dout[co * hw..(co + 1) * hw] {
            s += v;
        }
        db[co] += s;
    }
}

/// 2×2 non-overlapping max pool. Returns per-output argmax as flat input
/// indices; ties go to the first occurrence in row-major block order.
pub fn maxpool2_fwd(x: &[f32], c: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * w + 2 * ox;
                let idx4 = [base, base + 1, base + w, base + w + 1];
                let mut best = idx4[0];
                let mut bv = xp[idx4[0]];
                for &i in &idx4[1..] {
                    if xp[i] > bv {
                        bv = xp[i];
                        best = i;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = bv;
                argmax[ch * oh * ow + oy * ow + ox] = (ch * h * w + best) as u32;
            }
        }
    }
}

/// C = A·B with A: [n,k], B: [k,m]. `out` is overwritten.
pub fn mm_nn(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    out.fill(0.0);
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * m..(p + 1) * m];
            let or = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                or[j] += av * br[j];
            }
        }
    }
}

/// C = A·Bᵀ with A: [n,k], B: [m,k]. `out` is overwritten.
pub fn mm_nt(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            out[i * m + j] = s;
        }
    }
}

/// C = Aᵀ·B with A: [k,n], B: [k,m]. `out` is overwritten.
pub fn mm_tn(a: &[f32], b: &[f32], k: usize, n: usize, m: usize, out: &mut [f32]) {
    out.fill(0.0);
    for p in 0..k {
        let ar = &a[p * n..(p + 1) * n];
        let br = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = ar[i];
            let or = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                or[j] += av * br[j];
            }
        }
    }
}

/// Row-wise softmax with max subtraction. `x`: [n,m], overwritten in `out`.
pub fn softmax_rows_fwd(x: &[f32], n: usize, m: usize, out: &mut [f32]) {
    for i in 0..n {
        let xr = &x[i * m..(i + 1) * m];
        let or = &mut out[i * m..(i + 1) * m];
        let mx = xr.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for j in 0..m {
            let e = (xr[j] - mx).exp();
            or[j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for v in or.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax backward: dx = s ⊙ (dy − ⟨dy, s⟩) per row.
pub fn softmax_rows_bwd(s: &[f32], dy: &[f32], n: usize, m: usize, dx: &mut [f32]) {
    for i in 0..n {
        let sr = &s[i * m..(i + 1) * m];
        let dyr = &dy[i * m..(i + 1) * m];
        let dot: f32 = sr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        let dxr = &mut dx[i * m..(i + 1) * m];
        for j in 0..m {
            dxr[j] += sr[j] * (dyr[j] - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent six-nested-loop convolution oracle.
    fn conv_oracle(x: &[f32], wt: &[f32], b: &[f32], cin: usize, h: usize, w: usize, cout: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; cout * h * w];
        for co in 0..cout {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + ky - 1;
                                let sx = xx + kx - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += x[ci * h * w + sy as usize * w + sx as usize]
                                        * wt[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize];
                                }
                            }
                        }
                    }
                    out[co * h * w + y as usize * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cin, h, w, cout) in &[(2usize, 4usize, 4usize, 3usize), (1, 5, 7, 2), (4, 6, 3, 1), (3, 1, 1, 2), (2, 2, 8, 4)] {
            let x: Vec<f32> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt: Vec<f32> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.0f32; cout * h * w];
            conv2d_fwd(&x, &wt, &b, cin, h, w, cout, &mut out);
            let want = conv_oracle(&x, &wt, &b, cin, h, w, cout);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-5, "conv2d deviates from oracle: {a} vs {e}");
            }
        }
    }

    #[test]
    fn matmul_variants_agree_with_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k, m) = (5usize, 8usize, 4usize);
        let a: Vec<f32> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0f32; n * m];
        mm_nn(&a, &b, n, k, m, &mut c);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * m + j];
                }
                assert!((c[i * m + j] - s).abs() < 1e-5);
            }
        }
        // A·Bᵀ and Aᵀ·B against the nn kernel with explicit transposes.
        let bt: Vec<f32> = {
            let mut t = vec![0.0f32; m * k];
            for p in 0..k {
                for j in 0..m {
                    t[j * k + p] = b[p * m + j];
                }
            }
            t
        };
        let mut c2 = vec![0.0f32; n * m];
        mm_nt(&a, &bt, n, k, m, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-6);
        }
        let at: Vec<f32> = {
            let mut t = vec![0.0f32; k * n];
            for i in 0..n {
                for p in 0..k {
                    t[p * n + i] = a[i * k + p];
                }
            }
            t
        };
        let mut c3 = vec![0.0f32; n * m];
        mm_tn(&at, &b, k, n, m, &mut c3);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_matches_per_block_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (4usize, 8usize, 8usize);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0f32; c * h * w / 4];
        let mut arg = vec![0u32; c * h * w / 4];
        maxpool2_fwd(&x, c, h, w, &mut out, &mut arg);
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut bv = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            bv = bv.max(x[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
                        }
                    }
                    let got = out[ch * (h / 2) * (w / 2) + oy * (w / 2) + ox];
                    assert_eq!(got, bv);
                }
            }
        }
    }

    #[test]
    fn maxpool_tie_routes_to_first_occurrence() {
        let x = vec![3.0f32, 3.0, 1.0, 3.0];
        let mut out = vec![0.0f32; 1];
        let mut arg = vec![0u32; 1];
        maxpool2_fwd(&x, 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 3.0);
        assert_eq!(arg[0], 0, "tie must route to the first row-major position");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, m) = (6usize, 11usize);
        let x: Vec<f32> = (0..n * m).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut s = vec![0.0f32; n * m];
        softmax_rows_fwd(&x, n, m, &mut s);
        for i in 0..n {
            let row_sum: f32 = s[i * m..(i + 1) * m].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
        let shifted: Vec<f32> = x.iter().map(|v| v + 7.5).collect();
        let mut s2 = vec![0.0f32; n * m];
        softmax_rows_fwd(&shifted, n, m, &mut s2);
        for (a, b) in s.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
