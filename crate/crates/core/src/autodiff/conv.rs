//! Volumetric convolution kernels on `[B, C, D, H, W]` buffers.

use super::tensor::gemm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(xs: &[usize], ws: &[usize], bs: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Shape(format!("conv3d input {xs:?} with weight {ws:?}")));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!("conv3d bias {bs:?} for {} filters", ws[0])));
        }
        if stride == 0 {
            return Err(Error::Shape("conv3d stride 0".into()));
        }
        let k = ws[2];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let span = xs[2 + a] + 2 * pad;
            if span < k {
                return Err(Error::Shape(format!("conv3d kernel {k} larger than padded input {xs:?}")));
            }
            out_dims[a] = (span - k) / stride + 1;
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            in_dims: [xs[2], xs[3], xs[4]],
            out_dims,
            k,
            stride,
            pad,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.out_dims;
        vec![self.batch, self.cout, d, h, w]
    }

    fn in_vol(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

/// Visits every (col index, input index) pair of the unfolded patch matrix;
/// padded taps report `None`.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, Option<usize>)) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (k, s, p) = (g.k as isize, g.stride as isize, g.pad as isize);
    let plane = od * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let cbase = ci * d * h * w;
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let rbase = row * plane;
                    for oz in 0..od {
                        let iz = oz as isize * s + kz - p;
                        let zok = iz >= 0 && iz < d as isize;
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky - p;
                            let ok = zok && iy >= 0 && iy < h as isize;
                            let obase = rbase + (oz * oh + oy) * ow;
                            let ibase = cbase + (iz.max(0) as usize * h + iy.max(0) as usize) * w;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx - p;
                                if ok && ix >= 0 && ix < w as isize {
                                    f(obase + ox, Some(ibase + ix as usize));
                                } else {
                                    f(obase + ox, None);
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    for_each_tap(g, |c, i| col[c] = i.map_or(0.0, |i| x[i]));
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    for_each_tap(g, |c, i| {
        if let Some(i) = i {
            dx[i] += col[c];
        }
    });
}

pub fn conv3d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, kr) = (g.in_vol(), g.out_vol(), g.col_rows());
    let mut out = vec![0.0; g.batch * g.cout * ov];
    let mut col = vec![0.0; kr * ov];
    for bi in 0..g.batch {
        let xb = &x[bi * g.cin * iv..(bi + 1) * g.cin * iv];
        let ob = &mut out[bi * g.cout * ov..(bi + 1) * g.cout * ov];
        for (co, chunk) in ob.chunks_mut(ov).enumerate() {
            chunk.fill(b[co]);
        }
        im2col(xb, g, &mut col);
        gemm(g.cout, kr, ov, w, false, &col, false, 1.0, ob);
    }
    out
}

/// Accumulates input, weight and bias gradients; the unfolded patch matrix
/// is rebuilt here rather than kept from the forward pass.
pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    mut gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (iv, ov, kr) = (g.in_vol(), g.out_vol(), g.col_rows());
    let mut col = vec![0.0; kr * ov];
    let mut dcol = vec![0.0; if gx.is_some() { kr * ov } else { 0 }];
    for bi in 0..g.batch {
        let xb = &x[bi * g.cin * iv..(bi + 1) * g.cin * iv];
        let gob = &gout[bi * g.cout * ov..(bi + 1) * g.cout * ov];
        for (co, chunk) in gob.chunks(ov).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        im2col(xb, g, &mut col);
        gemm(g.cout, ov, kr, gob, false, &col, true, 1.0, gw);
        if let Some(gx) = gx.as_deref_mut() {
            gemm(kr, g.cout, ov, w, true, gob, false, 0.0, &mut dcol);
            col2im(&dcol, g, &mut gx[bi * g.cin * iv..(bi + 1) * g.cin * iv]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
}

impl UpGeom {
    pub fn new(xs: &[usize], ws: &[usize], bs: &[usize]) -> Result<Self> {
        if xs.len() != 5 || ws != [xs[1], ws[1], 2, 2, 2] || bs != [ws[1]] {
            return Err(Error::Shape(format!(
                "transposed conv input {xs:?} weight {ws:?} bias {bs:?}"
            )));
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[1],
            in_dims: [xs[2], xs[3], xs[4]],
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.in_dims;
        vec![self.batch, self.cout, 2 * d, 2 * h, 2 * w]
    }
}

/// Maps (row of the `[Cout·8, P]` product, input voxel) to an output index.
#[inline]
fn for_each_up(g: &UpGeom, mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = g.in_dims;
    let p = d * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let ovol = 8 * p;
    for co in 0..g.cout {
        for t in 0..8 {
            let (kz, ky, kx) = (t >> 2, (t >> 1) & 1, t & 1);
            let row = co * 8 + t;
            for z in 0..d {
                for y in 0..h {
                    let obase = co * ovol + ((2 * z + kz) * oh + 2 * y + ky) * ow + kx;
                    let rbase = row * p + (z * h + y) * w;
                    for x in 0..w {
                        f(rbase + x, obase + 2 * x);
                    }
                }
            }
        }
    }
}

pub fn conv_transpose3d_forward(x: &[f64], w: &[f64], b: &[f64], g: &UpGeom) -> Vec<f64> {
    let p: usize = g.in_dims.iter().product();
    let rows = g.cout * 8;
    let mut y = vec![0.0; rows * p];
    let mut out = vec![0.0; g.batch * g.cout * 8 * p];
    for bi in 0..g.batch {
        let xb = &x[bi * g.cin * p..(bi + 1) * g.cin * p];
        gemm(rows, g.cin, p, w, true, xb, false, 0.0, &mut y);
        let ob = &mut out[bi * rows * p..(bi + 1) * rows * p];
        for_each_up(g, |r, o| ob[o] = y[r]);
        for (co, chunk) in ob.chunks_mut(8 * p).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

pub fn conv_transpose3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &UpGeom,
    mut gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let p: usize = g.in_dims.iter().product();
    let rows = g.cout * 8;
    let mut dy = vec![0.0; rows * p];
    for bi in 0..g.batch {
        let gob = &gout[bi * rows * p..(bi + 1) * rows * p];
        for (co, chunk) in gob.chunks(8 * p).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        for_each_up(g, |r, o| dy[r] = gob[o]);
        let xb = &x[bi * g.cin * p..(bi + 1) * g.cin * p];
        gemm(g.cin, p, rows, xb, false, &dy, true, 1.0, gw);
        if let Some(gx) = gx.as_deref_mut() {
            let gxb = &mut gx[bi * g.cin * p..(bi + 1) * g.cin * p];
            gemm(g.cin, rows, p, w, false, &dy, false, 1.0, gxb);
        }
    }
}

/// 2x2x2 max pooling; returns the pooled values and the flat source index
/// of each maximum (first maximum wins on ties).
pub fn maxpool3d_forward(x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (bc, d, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let n = bc * od * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..bc {
        let base = c * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = base;
                    for t in 0..8 {
                        let i = base + ((2 * z + (t >> 2)) * h + 2 * y + ((t >> 1) & 1)) * w + 2 * xo + (t & 1);
                        if x[i] > best || t == 0 {
                            best = x[i];
                            bi = i;
                        }
                    }
                    out.push(best);
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [d, h, wd] = g.in_dims;
        let [od, oh, ow] = g.out_dims;
        let k = g.k;
        let mut out = vec![0.0; g.batch * g.cout * od * oh * ow];
        for bi in 0..g.batch {
            for co in 0..g.cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..g.cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= wd {
                                                continue;
                                            }
                                            let xi = (((bi * g.cin + ci) * d + iz) * h + iy) * wd + ix;
                                            let wi = (((co * g.cin + ci) * k + kz) * k + ky) * k + kx;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((bi * g.cout + co) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn wave(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let xs = [2, 3, 5, 4, 6];
            let ws = [4, 3, k, k, k];
            let g = ConvGeom::new(&xs, &ws, &[4], stride, pad).unwrap();
            let x = wave(xs.iter().product(), 0.3);
            let w = wave(ws.iter().product(), 0.7);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv3d_forward(&x, &w, &b, &g);
            let slow = naive_conv(&x, &w, &b, &g);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_dims_follow_stride_and_padding() {
        let g = ConvGeom::new(&[1, 2, 16, 16, 16], &[8, 2, 3, 3, 3], &[8], 2, 1).unwrap();
        assert_eq!(g.out_shape(), vec![1, 8, 8, 8, 8]);
        assert!(ConvGeom::new(&[1, 2, 4, 4, 4], &[8, 3, 3, 3, 3], &[8], 1, 1).is_err());
    }

    #[test]
    fn transposed_conv_places_each_tap() {
        // one input voxel, identity-like weights: output block equals weights
        let g = UpGeom::new(&[1, 1, 1, 1, 1], &[1, 2, 2, 2, 2], &[2]).unwrap();
        let w: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = conv_transpose3d_forward(&[2.0], &w, &[0.5, -0.5], &g);
        assert_eq!(out.len(), 16);
        for co in 0..2 {
            for t in 0..8 {
                assert_eq!(out[co * 8 + t], 2.0 * w[co * 8 + t] + if co == 0 { 0.5 } else { -0.5 });
            }
        }
    }

    #[test]
    fn maxpool_picks_block_maximum() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64).collect();
        let (out, arg) = maxpool3d_forward(&x, &[1, 1, 4, 4, 4]);
        assert_eq!(out.len(), 8);
        for (o, a) in out.iter().zip(&arg) {
            assert_eq!(x[*a], *o);
        }
        let (z, y, xx) = (0, 0, 0);
        let block: Vec<f64> = (0..8)
            .map(|t| x[((2 * z + (t >> 2)) * 4 + 2 * y + ((t >> 1) & 1)) * 4 + 2 * xx + (t & 1)])
            .collect();
        assert_eq!(out[0], block.iter().cloned().fold(f64::MIN, f64::max));
    }
}
