//! Raw loops behind the tape primitives. Everything is NCHW, row-major.

use crate::tensor::{gemm, Float};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.out_hw() * self.ckk()) as u64
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let ohw = g.out_hw();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let ohw = g.out_hw();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.out_hw();
    let mut out = vec![T::zero(); g.n * out_img];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.ckk() * g.out_hw()] };
    for b in 0..g.n {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_img..(b + 1) * out_img];
        gemm(g.cout, g.ckk(), g.out_hw(), weight, false, src, false, ob, false);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_exact_mut(g.out_hw()).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates whichever gradients are requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(x: &[T], weight: &[T], dy: &[T], g: &ConvGeom, mut dx: Option<&mut [T]>, mut dw: Option<&mut [T]>, mut db: Option<&mut [T]>) {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.out_hw();
    let ohw = g.out_hw();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.ckk() * ohw] };
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.ckk() * ohw }];
    for b in 0..g.n {
        let dyb = &dy[b * out_img..(b + 1) * out_img];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dyb.chunks_exact(ohw).enumerate() {
                let mut s = T::zero();
                for &v in chunk {
                    s += v;
                }
                db[co] += s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_img..(b + 1) * in_img];
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(g.cout, ohw, g.ckk(), dyb, false, src, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_img..(b + 1) * in_img];
            if g.is_pointwise() {
                gemm(g.ckk(), g.cout, ohw, weight, true, dyb, false, dxb, true);
            } else {
                gemm(g.ckk(), g.cout, ohw, weight, true, dyb, false, &mut dcols, false);
                col2im(&dcols, g, dxb);
            }
        }
    }
}

pub fn max_pool_forward<T: Float>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for nc in 0..n * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = plane[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pooling window covers at least one input");
                let o = nc * ho * wo + oy * wo + ox;
                out[o] = v;
                arg[o] = idx as u32;
            }
        }
    }
    (out, arg, ho, wo)
}

/// One region of interest, in input-image pixel coordinates (x1, y1, x2, y2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiRef {
    pub batch: usize,
    pub level: usize,
    pub bbox: [f64; 4],
}

/// Bilinear sample taps: (flat index, weight) for up to four neighbours.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let (y1, yy) = if y0 >= h - 1 {
        y0 = h - 1;
        (h - 1, y0 as f64)
    } else {
        (y0 + 1, y)
    };
    let (x1, xx) = if x0 >= w - 1 {
        x0 = w - 1;
        (w - 1, x0 as f64)
    } else {
        (x0 + 1, x)
    };
    let ly = yy - y0 as f64;
    let lx = xx - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([(y0 * w + x0, hy * hx), (y0 * w + x1, hy * lx), (y1 * w + x0, ly * hx), (y1 * w + x1, ly * lx)])
}

pub const ROI_SAMPLES: usize = 2;

/// Visits each (bin, tap, weight) for one roi on a single feature plane.
pub fn roi_taps(roi: &RoiRef, stride: usize, h: usize, w: usize, pooled: usize, mut f: impl FnMut(usize, usize, f64)) {
    let scale = 1.0 / stride as f64;
    let x1 = roi.bbox[0] * scale - 0.5;
    let y1 = roi.bbox[1] * scale - 0.5;
    let x2 = roi.bbox[2] * scale - 0.5;
    let y2 = roi.bbox[3] * scale - 0.5;
    let bin_w = (x2 - x1) / pooled as f64;
    let bin_h = (y2 - y1) / pooled as f64;
    let norm = 1.0 / (ROI_SAMPLES * ROI_SAMPLES) as f64;
    for py in 0..pooled {
        for px in 0..pooled {
            let bin = py * pooled + px;
            for iy in 0..ROI_SAMPLES {
                let y = y1 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / ROI_SAMPLES as f64;
                for ix in 0..ROI_SAMPLES {
                    let x = x1 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / ROI_SAMPLES as f64;
                    if let Some(taps) = bilinear_taps(y, x, h, w) {
                        for (idx, wt) in taps {
                            f(bin, idx, wt * norm);
                        }
                    }
                }
            }
        }
    }
}
