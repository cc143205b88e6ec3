//! Numeric inner loops shared by the autodiff graph. All functions accumulate
//! into their output slice (callers zero-fill first) and iterate in a fixed
//! sequential order so results are bit-reproducible run to run.

/// Geometry of a 3D convolution with a cubic kernel. Channel-first layout:
/// input `[cin, d, h, w]`, weight `[cout, cin, k, k, k]`, output
/// `[cout, od, oh, ow]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3Spec {
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3Spec {
    pub fn out_dims(&self) -> (usize, usize, usize) {
        let f = |n: usize| {
            let span = n + 2 * self.pad - self.k;
            assert!(
                span.is_multiple_of(self.stride),
                "conv geometry not exact: dim {} k {} pad {} stride {}",
                n,
                self.k,
                self.pad,
                self.stride
            );
            span / self.stride + 1
        };
        (f(self.d), f(self.h), f(self.w))
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.d * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        let (od, oh, ow) = self.out_dims();
        self.cout * od * oh * ow
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k * self.k
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Output-coordinate range [lo, hi) for which `o*stride + k - pad` stays
/// inside [0, n).
#[inline]
fn valid_range(n: usize, o_max: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  =>  o >= ceil((pad - k) / stride)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad < n   =>  o <= floor((n - 1 + pad - k) / stride)
    let last = n + pad;
    if last <= k {
        return (0, 0);
    }
    let hi = ((last - 1 - k) / stride + 1).min(o_max);
    (lo.min(hi), hi)
}

pub fn conv3d(out: &mut [f64], x: &[f64], w: &[f64], spec: &Conv3Spec) {
    let (od, oh, ow) = spec.out_dims();
    let isz = spec.d * spec.h * spec.w;
    let osz = od * oh * ow;
    let (k, s, p) = (spec.k, spec.stride, spec.pad);
    for co in 0..spec.cout {
        let ob = co * osz;
        for ci in 0..spec.cin {
            let xb = ci * isz;
            for kz in 0..k {
                let (zlo, zhi) = valid_range(spec.d, od, kz, s, p);
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(spec.h, oh, ky, s, p);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(spec.w, ow, kx, s, p);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w[(((co * spec.cin + ci) * k + kz) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - p;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - p;
                                let orow = ob + (oz * oh + oy) * ow;
                                let irow = xb + (iz * spec.h + iy) * spec.w;
                                if s == 1 {
                                    let ix0 = xlo + kx - p;
                                    axpy(
                                        &mut out[orow + xlo..orow + xhi],
                                        wv,
                                        &x[irow + ix0..irow + ix0 + (xhi - xlo)],
                                    );
                                } else {
                                    for ox in xlo..xhi {
                                        out[orow + ox] += wv * x[irow + ox * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_grad_x(gx: &mut [f64], w: &[f64], gout: &[f64], spec: &Conv3Spec) {
    let (od, oh, ow) = spec.out_dims();
    let isz = spec.d * spec.h * spec.w;
    let osz = od * oh * ow;
    let (k, s, p) = (spec.k, spec.stride, spec.pad);
    for co in 0..spec.cout {
        let ob = co * osz;
        for ci in 0..spec.cin {
            let xb = ci * isz;
            for kz in 0..k {
                let (zlo, zhi) = valid_range(spec.d, od, kz, s, p);
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(spec.h, oh, ky, s, p);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(spec.w, ow, kx, s, p);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w[(((co * spec.cin + ci) * k + kz) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - p;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - p;
                                let orow = ob + (oz * oh + oy) * ow;
                                let irow = xb + (iz * spec.h + iy) * spec.w;
                                if s == 1 {
                                    let ix0 = xlo + kx - p;
                                    axpy(
                                        &mut gx[irow + ix0..irow + ix0 + (xhi - xlo)],
                                        wv,
                                        &gout[orow + xlo..orow + xhi],
                                    );
                                } else {
                                    for ox in xlo..xhi {
                                        gx[irow + ox * s + kx - p] += wv * gout[orow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_grad_w(gw: &mut [f64], x: &[f64], gout: &[f64], spec: &Conv3Spec) {
    let (od, oh, ow) = spec.out_dims();
    let isz = spec.d * spec.h * spec.w;
    let osz = od * oh * ow;
    let (k, s, p) = (spec.k, spec.stride, spec.pad);
    for co in 0..spec.cout {
        let ob = co * osz;
        for ci in 0..spec.cin {
            let xb = ci * isz;
            for kz in 0..k {
                let (zlo, zhi) = valid_range(spec.d, od, kz, s, p);
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(spec.h, oh, ky, s, p);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(spec.w, ow, kx, s, p);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - p;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - p;
                                let orow = ob + (oz * oh + oy) * ow;
                                let irow = xb + (iz * spec.h + iy) * spec.w;
                                if s == 1 {
                                    let ix0 = xlo + kx - p;
                                    acc += dot(
                                        &gout[orow + xlo..orow + xhi],
                                        &x[irow + ix0..irow + ix0 + (xhi - xlo)],
                                    );
                                } else {
                                    for ox in xlo..xhi {
                                        acc += gout[orow + ox] * x[irow + ox * s + kx - p];
                                    }
                                }
                            }
                        }
                        gw[(((co * spec.cin + ci) * k + kz) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Transposed convolution, kernel 2 stride 2 (the only configuration the
/// decoder uses). Weight layout `[cin, cout, 2, 2, 2]`; output is twice the
/// input in every spatial dimension.
#[allow(clippy::too_many_arguments)]
pub fn convt3d_k2s2(
    out: &mut [f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    wd: usize,
) {
    let isz = d * h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let osz = 2 * d * oh * ow;
    for ci in 0..cin {
        let xb = ci * isz;
        for co in 0..cout {
            let ob = co * osz;
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let wv = w[(((ci * cout + co) * 2 + kz) * 2 + ky) * 2 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for z in 0..d {
                            for y in 0..h {
                                let irow = xb + (z * h + y) * wd;
                                let orow = ob + ((2 * z + kz) * oh + 2 * y + ky) * ow + kx;
                                for xx in 0..wd {
                                    out[orow + 2 * xx] += wv * x[irow + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn convt3d_k2s2_grad_x(
    gx: &mut [f64],
    w: &[f64],
    gout: &[f64],
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    wd: usize,
) {
    let isz = d * h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let osz = 2 * d * oh * ow;
    for ci in 0..cin {
        let xb = ci * isz;
        for co in 0..cout {
            let ob = co * osz;
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let wv = w[(((ci * cout + co) * 2 + kz) * 2 + ky) * 2 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for z in 0..d {
                            for y in 0..h {
                                let irow = xb + (z * h + y) * wd;
                                let orow = ob + ((2 * z + kz) * oh + 2 * y + ky) * ow + kx;
                                for xx in 0..wd {
                                    gx[irow + xx] += wv * gout[orow + 2 * xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn convt3d_k2s2_grad_w(
    gw: &mut [f64],
    x: &[f64],
    gout: &[f64],
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    wd: usize,
) {
    let isz = d * h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let osz = 2 * d * oh * ow;
    for ci in 0..cin {
        let xb = ci * isz;
        for co in 0..cout {
            let ob = co * osz;
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let mut acc = 0.0;
                        for z in 0..d {
                            for y in 0..h {
                                let irow = xb + (z * h + y) * wd;
                                let orow = ob + ((2 * z + kz) * oh + 2 * y + ky) * ow + kx;
                                for xx in 0..wd {
                                    acc += x[irow + xx] * gout[orow + 2 * xx];
                                }
                            }
                        }
                        gw[(((ci * cout + co) * 2 + kz) * 2 + ky) * 2 + kx] += acc;
                    }
                }
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[k,n]
pub fn matmul(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(crow, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ (rows of b are dotted against rows of a)
pub fn matmul_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub fn matmul_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(&mut c[p * n..(p + 1) * n], av, brow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv3d_matches_reference_loop() {
        // 2 in / 2 out channels, 4x3x5 input, k3 pad1 stride1, checked against
        // an index-naive reference implementation.
        let spec = Conv3Spec { cin: 2, cout: 2, d: 4, h: 3, w: 5, k: 3, stride: 1, pad: 1 };
        let x: Vec<f64> = (0..spec.in_len()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let wts: Vec<f64> =
            (0..spec.weight_len()).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.75).collect();
        let mut got = vec![0.0; spec.out_len()];
        conv3d(&mut got, &x, &wts, &spec);

        let (od, oh, ow) = spec.out_dims();
        let mut want = vec![0.0; spec.out_len()];
        for co in 0..spec.cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..spec.cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iz = oz as isize + kz as isize - 1;
                                        let iy = oy as isize + ky as isize - 1;
                                        let ix = ox as isize + kx as isize - 1;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= spec.d as isize
                                            || iy >= spec.h as isize
                                            || ix >= spec.w as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * spec.d + iz as usize) * spec.h
                                            + iy as usize)
                                            * spec.w
                                            + ix as usize;
                                        let wi =
                                            (((co * spec.cin + ci) * 3 + kz) * 3 + ky) * 3 + kx;
                                        acc += x[xi] * wts[wi];
                                    }
                                }
                            }
                        }
                        want[(co * od + oz) * oh * ow + oy * ow + ox] = acc;
                    }
                }
            }
        }
        for (g, w_) in got.iter().zip(&want) {
            assert!((g - w_).abs() < 1e-12, "{g} vs {w_}");
        }
    }

    #[test]
    fn strided_conv_covers_patch_embed_geometry() {
        let spec = Conv3Spec { cin: 1, cout: 3, d: 4, h: 4, w: 4, k: 2, stride: 2, pad: 0 };
        assert_eq!(spec.out_dims(), (2, 2, 2));
        let x: Vec<f64> = (0..spec.in_len()).map(|i| i as f64).collect();
        let mut w = vec![0.0; spec.weight_len()];
        // channel 0: picks the (0,0,0) corner of each block
        w[0] = 1.0;
        let mut out = vec![0.0; spec.out_len()];
        conv3d(&mut out, &x, &w, &spec);
        // block corners: x[0], x[2], x[8], ...
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 2.0);
        assert_eq!(out[2], 8.0);
        assert_eq!(out[4], 32.0);
    }

    #[test]
    fn convt_k2s2_doubles_and_roundtrips_gradient() {
        let (cin, cout, d, h, wd) = (2usize, 3usize, 2usize, 2usize, 2usize);
        let x: Vec<f64> = (0..cin * d * h * wd).map(|i| (i as f64) * 0.5 - 1.0).collect();
        let w: Vec<f64> = (0..cin * cout * 8).map(|i| ((i * 7 % 5) as f64) * 0.1).collect();
        let mut out = vec![0.0; cout * 8 * d * h * wd];
        convt3d_k2s2(&mut out, &x, &w, cin, cout, d, h, wd);
        // spot value: out[co=0, z=1, y=0, x=0] gets x[ci,0,0,0]·w[ci,0,(1,0,0)]
        let oh = 2 * h;
        let ow = 2 * wd;
        let want: f64 = (0..cin)
            .map(|ci| x[ci * d * h * wd] * w[(ci * cout * 2 + 1) * 4])
            .sum();
        assert!((out[oh * ow] - want).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3usize, 4usize, 2usize);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.7 - 2.0).collect();
        let mut c = vec![0.0; m * n];
        matmul(&mut c, &a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a·bᵀ with b stored [n,k]
        let bt: Vec<f64> = {
            let mut t = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    t[j * k + p] = b[p * n + j];
                }
            }
            t
        };
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&mut c2, &a, &bt, m, k, n);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ·c wants shape [k,n]
        let mut c3 = vec![0.0; k * n];
        matmul_tn(&mut c3, &a, &c, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((c3[p * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
