//! Hot numeric kernels behind the conv ops: im2col, col2im, and three
//! accumulating matmul variants. Loops are written so each output element
//! has a fixed accumulation order (determinism) while the innermost loop
//! stays contiguous for the autovectorizer.

use super::Elem;

/// C[m,n] += A[m,k] * B[k,n]
pub(crate) fn matmul_acc(a: &[Elem], b: &[Elem], c: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        // Four rows of B per sweep cuts traffic on c_row; the order of the
        // four partial products is fixed, so results stay deterministic.
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let a0 = a_row[p];
            let b0 = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a0 * b0[j];
            }
            p += 1;
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T  (dot-product kernel over the shared n axis)
pub(crate) fn matmul_nt_acc(a: &[Elem], b: &[Elem], c: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for q in 0..k {
            let b_row = &b[q * n..(q + 1) * n];
            c[i * k + q] += dot(a_row, b_row);
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (axpy kernel, contiguous in n)
pub(crate) fn matmul_tn_acc(a: &[Elem], b: &[Elem], c: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for q in 0..k {
            let av = a_row[q];
            let c_row = &mut c[q * n..(q + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// Fixed-order vectorizable dot product: eight independent lanes reduced in
/// a constant pattern at the end.
fn dot(a: &[Elem], b: &[Elem]) -> Elem {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0 as Elem; 8];
    let chunks = a.len() / 8;
    for ch in 0..chunks {
        let ao = &a[ch * 8..ch * 8 + 8];
        let bo = &b[ch * 8..ch * 8 + 8];
        for l in 0..8 {
            lanes[l] += ao[l] * bo[l];
        }
    }
    let mut tail = 0.0 as Elem;
    for idx in chunks * 8..a.len() {
        tail += a[idx] * b[idx];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Unpacks one `[c,h,w]` image into a column matrix `col[c*kh*kw, oh*ow]`
/// for stride/padding convolution. Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_into(
    input: &[Elem],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [Elem],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    col.iter_mut().for_each(|v| *v = 0.0);
    let pad = pad as isize;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let out_row = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // Contiguous run: ix = ox + kx - pad for ox in 0..ow.
                        let off = kx as isize - pad;
                        let ox_lo = (-off).max(0) as usize;
                        let ox_hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                        if ox_lo < ox_hi {
                            let src_lo = (ox_lo as isize + off) as usize;
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col_into`]: scatter-adds a column-matrix gradient back
/// onto the `[c,h,w]` input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    col: &[Elem],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    input_grad: &mut [Elem],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    debug_assert_eq!(input_grad.len(), c * h * w);
    let pad = pad as isize;
    for ci in 0..c {
        let plane = &mut input_grad[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let col_row = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}
