//! Pure array kernels behind the graph ops. Everything is f64, row-major,
//! single-threaded and iteration-order deterministic.

/// c = a (ta) . b (tb); a is logically [m,k], b [k,n], c [m,n] after
/// applying the transpose flags to the stored layouts.
pub fn matmul(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    // Stored layout of `a` is [m,k] when !ta, [k,m] when ta (same for b).
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid (no padding) 2D convolution with square stride.
/// x: [n, ci, h, w], k: [co, ci, kh, kw], bias: [co] -> [n, co, oh, ow].
pub fn conv2d(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out: &mut [f64],
) {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    debug_assert_eq!(out.len(), n * co * oh * ow);
    for b in 0..n {
        for o in 0..co {
            let kbase = o * ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        let xbase = ((b * ci + c) * h + oy * stride) * w + ox * stride;
                        let kcbase = kbase + c * kh * kw;
                        for ky in 0..kh {
                            let xrow = xbase + ky * w;
                            let krow = kcbase + ky * kw;
                            for kx in 0..kw {
                                acc += x[xrow + kx] * k[krow + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

/// Gradient of conv2d wrt its input: scatter gout through the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input(
    gout: &[f64],
    k: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    gx: &mut [f64],
) {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    debug_assert_eq!(gx.len(), n * ci * h * w);
    gx.iter_mut().for_each(|v| *v = 0.0);
    for b in 0..n {
        for o in 0..co {
            let kbase = o * ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[((b * co + o) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        let xbase = ((b * ci + c) * h + oy * stride) * w + ox * stride;
                        let kcbase = kbase + c * kh * kw;
                        for ky in 0..kh {
                            let xrow = xbase + ky * w;
                            let krow = kcbase + ky * kw;
                            for kx in 0..kw {
                                gx[xrow + kx] += g * k[krow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d wrt the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_kernel(
    gout: &[f64],
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    gk: &mut [f64],
) {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    debug_assert_eq!(gk.len(), co * ci * kh * kw);
    gk.iter_mut().for_each(|v| *v = 0.0);
    for b in 0..n {
        for o in 0..co {
            let kbase = o * ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[((b * co + o) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        let xbase = ((b * ci + c) * h + oy * stride) * w + ox * stride;
                        let kcbase = kbase + c * kh * kw;
                        for ky in 0..kh {
                            let xrow = xbase + ky * w;
                            let krow = kcbase + ky * kw;
                            for kx in 0..kw {
                                gk[krow + kx] += g * x[xrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The bilinear kernel weight max(0, 1 - |d|) and its sign term.
#[inline]
fn tent(d: f64) -> f64 {
    let a = 1.0 - d.abs();
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

/// Bilinear sampling of img [c,h,w] at source pixel coordinates (u[i], v[i])
/// (u along width, v along height), zero outside the extent. Taps only the
/// floor/floor+1 neighborhood, which carries the kernel's full support.
pub fn bilinear_sample(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    u: &[f64],
    v: &[f64],
    out: &mut [f64],
) {
    let npix = u.len();
    debug_assert_eq!(v.len(), npix);
    debug_assert_eq!(out.len(), c * npix);
    for i in 0..npix {
        let (ui, vi) = (u[i], v[i]);
        let x0 = ui.floor();
        let y0 = vi.floor();
        for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let (xs, ys) = (x0 + dx, y0 + dy);
            let wgt = tent(ui - xs) * tent(vi - ys);
            if wgt == 0.0 {
                continue;
            }
            if xs < 0.0 || ys < 0.0 || xs > (w - 1) as f64 || ys > (h - 1) as f64 {
                continue;
            }
            let (xi, yi) = (xs as usize, ys as usize);
            for ch in 0..c {
                out[ch * npix + i] += wgt * img[(ch * h + yi) * w + xi];
            }
        }
    }
}

/// Gradient of bilinear sampling wrt the image: scatter the tap weights.
pub fn bilinear_grad_image(
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    u: &[f64],
    v: &[f64],
    gimg: &mut [f64],
) {
    let npix = u.len();
    debug_assert_eq!(gimg.len(), c * h * w);
    gimg.iter_mut().for_each(|g| *g = 0.0);
    for i in 0..npix {
        let (ui, vi) = (u[i], v[i]);
        let x0 = ui.floor();
        let y0 = vi.floor();
        for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let (xs, ys) = (x0 + dx, y0 + dy);
            let wgt = tent(ui - xs) * tent(vi - ys);
            if wgt == 0.0 {
                continue;
            }
            if xs < 0.0 || ys < 0.0 || xs > (w - 1) as f64 || ys > (h - 1) as f64 {
                continue;
            }
            let (xi, yi) = (xs as usize, ys as usize);
            for ch in 0..c {
                gimg[(ch * h + yi) * w + xi] += wgt * gout[ch * npix + i];
            }
        }
    }
}

/// Gradients of bilinear sampling wrt the source coordinates. The tent
/// kernel's derivative is -sign(u - m) on its support (kink points are
/// measure zero; the positive branch is taken at |u - m| = 0).
#[allow(clippy::too_many_arguments)]
pub fn bilinear_grad_coords(
    gout: &[f64],
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    u: &[f64],
    v: &[f64],
    gu: &mut [f64],
    gv: &mut [f64],
) {
    let npix = u.len();
    for i in 0..npix {
        let (ui, vi) = (u[i], v[i]);
        let x0 = ui.floor();
        let y0 = vi.floor();
        let mut du = 0.0;
        let mut dv = 0.0;
        for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let (xs, ys) = (x0 + dx, y0 + dy);
            if xs < 0.0 || ys < 0.0 || xs > (w - 1) as f64 || ys > (h - 1) as f64 {
                continue;
            }
            let wx = tent(ui - xs);
            let wy = tent(vi - ys);
            // d tent(u - m) / du on the support.
            let dwx = if wx > 0.0 {
                if ui - xs >= 0.0 {
                    -1.0
                } else {
                    1.0
                }
            } else {
                0.0
            };
            let dwy = if wy > 0.0 {
                if vi - ys >= 0.0 {
                    -1.0
                } else {
                    1.0
                }
            } else {
                0.0
            };
            if wx == 0.0 && wy == 0.0 {
                continue;
            }
            let (xi, yi) = (xs as usize, ys as usize);
            for ch in 0..c {
                let pix = img[(ch * h + yi) * w + xi];
                let g = gout[ch * npix + i];
                du += g * pix * dwx * wy;
                dv += g * pix * wx * dwy;
            }
        }
        gu[i] = du;
        gv[i] = dv;
    }
}

/// Center-crop of [c,h,w] to [c,oh,ow] at the given offsets.
pub fn crop(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    debug_assert!(top + oh <= h && left + ow <= w);
    for ch in 0..c {
        for y in 0..oh {
            let src = (ch * h + top + y) * w + left;
            let dst = (ch * oh + y) * ow;
            out[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
        }
    }
}

/// Inverse of `crop`: place [c,oh,ow] into a zeroed [c,h,w] at the offsets.
pub fn pad_scatter(
    x: &[f64],
    c: usize,
    oh: usize,
    ow: usize,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for ch in 0..c {
        for y in 0..oh {
            let src = (ch * oh + y) * ow;
            let dst = (ch * h + top + y) * w + left;
            out[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![3.0, -1.0, 2.0, 0.5];
        let mut c = vec![0.0; 4];
        matmul(false, false, 2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_transpose_flags() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut c = vec![0.0; 4];
        // aT stored as [k,m] = a itself reinterpreted: aT.b with a stored [2,2]
        matmul(true, false, 2, 2, 2, &a, &b, &mut c);
        // aT = [[1,3],[2,4]]; aT.b = [[26,30],[38,44]]
        assert_eq!(c, vec![26.0, 30.0, 38.0, 44.0]);
        matmul(false, true, 2, 2, 2, &a, &b, &mut c);
        // bT = [[5,7],[6,8]]; a.bT = [[17,23],[39,53]]
        assert_eq!(c, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn bilinear_identity_is_exact() {
        let img: Vec<f64> = (0..16).map(|i| i as f64 * 0.3).collect();
        let mut u = vec![0.0; 16];
        let mut v = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                u[y * 4 + x] = x as f64;
                v[y * 4 + x] = y as f64;
            }
        }
        let mut out = vec![0.0; 16];
        bilinear_sample(&img, 1, 4, 4, &u, &v, &mut out);
        assert_eq!(out, img);
    }

    #[test]
    fn bilinear_midpoint() {
        // Two horizontal neighbors 0 and 1; sample exactly between them.
        let img = vec![0.0, 1.0, 0.0, 0.0];
        let mut out = vec![0.0];
        bilinear_sample(&img, 1, 2, 2, &[0.5], &[0.0], &mut out);
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn crop_pad_roundtrip() {
        let x: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let mut c1 = vec![0.0; 2 * 2 * 2];
        crop(&x, 2, 4, 4, 1, 1, 2, 2, &mut c1);
        let mut back = vec![0.0; 32];
        pad_scatter(&c1, 2, 2, 2, 1, 1, 4, 4, &mut back);
        let mut again = vec![0.0; 8];
        crop(&back, 2, 4, 4, 1, 1, 2, 2, &mut again);
        assert_eq!(c1, again);
    }
}
