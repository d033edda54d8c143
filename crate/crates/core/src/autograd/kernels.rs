//! Dense 2-D convolution kernels (NCHW) built on im2col + gemm.
//!
//! The three kernels form a closed family under differentiation:
//! `conv2d(x, w)`, its input adjoint `conv2d_transpose(g, w)` and its weight
//! adjoint `conv2d_weight(x, g)`.

use ndarray::{ArrayD, IxDyn};

use super::Scalar;

/// Geometry shared by a convolution and both of its adjoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    /// Spatial size of the convolution input.
    pub in_hw: (usize, usize),
    pub kernel: (usize, usize),
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let (h, w) = self.in_hw;
        let (kh, kw) = self.kernel;
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, geom: &ConvGeom, col: &mut [T]) {
    let (h, w) = geom.in_hw;
    let (kh, kw) = geom.kernel;
    let (ho, wo) = geom.out_hw();
    let s = geom.stride as isize;
    let p = geom.pad as isize;
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + i as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + j as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, geom: &ConvGeom, x: &mut [T]) {
    let (h, w) = geom.in_hw;
    let (kh, kw) = geom.kernel;
    let (ho, wo) = geom.out_hw();
    let s = geom.stride as isize;
    let p = geom.pad as isize;
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + i as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s + j as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4(a: &ArrayD<impl Clone>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// `x: [N, C, H, W]`, `w: [O, C, kh, kw]` -> `[N, O, Ho, Wo]`.
pub fn conv2d<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, geom: &ConvGeom) -> ArrayD<T> {
    let (n, c, h, wd) = dims4(x);
    let (o, wc, kh, kw) = dims4(w);
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert_eq!((h, wd), geom.in_hw);
    assert_eq!((kh, kw), geom.kernel);
    let (ho, wo) = geom.out_hw();
    let plane = ho * wo;
    let ckk = c * kh * kw;
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut out = vec![T::zero(); n * o * plane];
    let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for b in 0..n {
        let xb = &xs[b * c * h * wd..(b + 1) * c * h * wd];
        let ob = &mut out[b * o * plane..(b + 1) * o * plane];
        if geom.is_pointwise() {
            T::gemm(o, ckk, plane, ws, false, xb, false, ob, false);
        } else {
            im2col(xb, c, geom, &mut col);
            T::gemm(o, ckk, plane, ws, false, &col, false, ob, false);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, o, ho, wo]), out).unwrap()
}

/// Input adjoint of [`conv2d`]: `g: [N, O, Ho, Wo]`, `w: [O, C, kh, kw]`
/// -> `[N, C, H, W]` with `(H, W) = geom.in_hw`. Also serves as the forward
/// pass of a transposed convolution.
pub fn conv2d_transpose<T: Scalar>(g: &ArrayD<T>, w: &ArrayD<T>, geom: &ConvGeom) -> ArrayD<T> {
    let (n, o, ho, wo) = dims4(g);
    let (wo_ch, c, kh, kw) = dims4(w);
    assert_eq!(o, wo_ch, "conv2d_transpose channel mismatch");
    assert_eq!((ho, wo), geom.out_hw(), "conv2d_transpose geometry mismatch");
    assert_eq!((kh, kw), geom.kernel);
    let (h, wd) = geom.in_hw;
    let plane = ho * wo;
    let ckk = c * kh * kw;
    let g = g.as_standard_layout();
    let w = w.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut out = vec![T::zero(); n * c * h * wd];
    let mut col = vec![T::zero(); ckk * plane];
    for b in 0..n {
        let gb = &gs[b * o * plane..(b + 1) * o * plane];
        let xb = &mut out[b * c * h * wd..(b + 1) * c * h * wd];
        if geom.is_pointwise() {
            T::gemm(ckk, o, plane, ws, true, gb, false, xb, false);
        } else {
            T::gemm(ckk, o, plane, ws, true, gb, false, &mut col, false);
            col2im(&col, c, geom, xb);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), out).unwrap()
}

/// Weight adjoint of [`conv2d`]: `x: [N, C, H, W]`, `g: [N, O, Ho, Wo]`
/// -> `[O, C, kh, kw]`.
pub fn conv2d_weight<T: Scalar>(x: &ArrayD<T>, g: &ArrayD<T>, geom: &ConvGeom) -> ArrayD<T> {
    let (n, c, h, wd) = dims4(x);
    let (gn, o, ho, wo) = dims4(g);
    assert_eq!(n, gn, "conv2d_weight batch mismatch");
    assert_eq!((h, wd), geom.in_hw);
    assert_eq!((ho, wo), geom.out_hw());
    let (kh, kw) = geom.kernel;
    let plane = ho * wo;
    let ckk = c * kh * kw;
    let x = x.as_standard_layout();
    let g = g.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let mut out = vec![T::zero(); o * ckk];
    let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for b in 0..n {
        let xb = &xs[b * c * h * wd..(b + 1) * c * h * wd];
        let gb = &gs[b * o * plane..(b + 1) * o * plane];
        if geom.is_pointwise() {
            T::gemm(o, plane, ckk, gb, false, xb, true, &mut out, true);
        } else {
            im2col(xb, c, geom, &mut col);
            T::gemm(o, plane, ckk, gb, false, &col, true, &mut out, true);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[o, c, kh, kw]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    // Direct seven-loop convolution used as the reference.
    fn naive(x: &Array4<f64>, w: &Array4<f64>, s: usize, p: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let mut out = Array4::zeros((n, o, ho, wo));
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * s + i) as isize - p as isize;
                                    let ix = (ox * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w[[oc, ic, i, j]] * x[[b, ic, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[b, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn fill(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut state = seed;
        Array4::from_shape_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(s, p, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 4), (2, 0, 3)] {
            let x = fill((2, 3, 7, 6), 1);
            let w = fill((4, 3, k, k), 2);
            let geom = ConvGeom { stride: s, pad: p, in_hw: (7, 6), kernel: (k, k) };
            let got = conv2d(&x.clone().into_dyn(), &w.clone().into_dyn(), &geom);
            let want = naive(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> = <x, T(g, w)> = <w, W(x, g)>
        for &(s, p, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 4)] {
            let geom = ConvGeom { stride: s, pad: p, in_hw: (8, 8), kernel: (k, k) };
            let (ho, wo) = geom.out_hw();
            let x = fill((2, 3, 8, 8), 3).into_dyn();
            let w = fill((5, 3, k, k), 4).into_dyn();
            let g = fill((2, 5, ho, wo), 5).into_dyn();
            let y = conv2d(&x, &w, &geom);
            let lhs: f64 = (&y * &g).sum();
            let xt = conv2d_transpose(&g, &w, &geom);
            let mid: f64 = (&x * &xt).sum();
            let wt = conv2d_weight(&x, &g, &geom);
            let rhs: f64 = (&w * &wt).sum();
            assert!((lhs - mid).abs() < 1e-10, "{lhs} vs {mid}");
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }
}
