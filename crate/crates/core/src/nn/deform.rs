//! Deformable convolution: every kernel tap samples the input at its regular
//! grid position displaced by a learned per-pixel `(Δy, Δx)`, using bilinear
//! interpolation with zeros outside the image.
//!
//! Offset channel layout for group `g` and tap `t = ki·k + kj`:
//! `2·(g·k² + t)` holds Δy and `2·(g·k² + t) + 1` holds Δx.

use super::conv::{apply_weights, check_conv_shapes, weight_backward, ConvGeometry};
use crate::error::{Error, Result};
use crate::graph::Op;
use crate::real::Real;
use crate::tensor::Tensor;

/// Bilinear corner set for one fractional sampling position.
#[derive(Clone, Copy, Debug)]
struct Corners<T> {
    /// Flat indices of the four corners (y0x0, y0x1, y1x0, y1x1), `None` outside.
    idx: [Option<usize>; 4],
    ly: T,
    lx: T,
}

impl<T: Real> Corners<T> {
    fn new(sy: T, sx: T, h: usize, w: usize) -> Self {
        let fy = sy.floor();
        let fx = sx.floor();
        let ly = sy - fy;
        let lx = sx - fx;
        let y0 = fy.to_isize().unwrap_or(isize::MIN / 2);
        let x0 = fx.to_isize().unwrap_or(isize::MIN / 2);
        let at = |y: isize, x: isize| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then(|| y as usize * w + x as usize)
        };
        Corners {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            ly,
            lx,
        }
    }

    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.ly) * (one - self.lx),
            (one - self.ly) * self.lx,
            self.ly * (one - self.lx),
            self.ly * self.lx,
        ]
    }

    fn fetch(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }

    fn sample(&self, plane: &[T]) -> T {
        let v = self.fetch(plane);
        let wts = self.weights();
        wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3]
    }
}

/// Bilinear sample of a single `h×w` plane at fractional `(y, x)`, zero outside.
pub fn bilinear_sample<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Corners::new(y, x, h, w).sample(plane)
}

#[derive(Clone, Copy, Debug)]
struct DeformGeometry {
    conv: ConvGeometry,
    groups: usize,
}

impl DeformGeometry {
    fn channels_per_group(&self) -> usize {
        self.conv.c_in / self.groups
    }

    fn taps(&self) -> usize {
        self.conv.kernel * self.conv.kernel
    }
}

fn check_shapes<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    groups: usize,
) -> Result<DeformGeometry> {
    let conv = check_conv_shapes(x, w, b)?;
    if groups == 0 || conv.c_in % groups != 0 {
        return Err(Error::Dimension(format!(
            "{} input channels not divisible into {groups} deformable groups",
            conv.c_in
        )));
    }
    let (on, oc, oh, ow) = offsets.dims4()?;
    let expected = 2 * conv.kernel * conv.kernel * groups;
    if (on, oc, oh, ow) != (conv.batch, expected, conv.height, conv.width) {
        return Err(Error::Dimension(format!(
            "offset field must be {}×{expected}×{}×{}, got {:?}",
            conv.batch,
            conv.height,
            conv.width,
            offsets.shape()
        )));
    }
    Ok(DeformGeometry { conv, groups })
}

/// Visits every (group, tap, pixel) sampling position of one batch element.
fn for_each_sample<T: Real>(
    offsets: &[T],
    g: &DeformGeometry,
    mut visit: impl FnMut(usize, usize, usize, Corners<T>),
) {
    let k = g.conv.kernel;
    let pad = g.conv.pad() as isize;
    let (h, w) = (g.conv.height, g.conv.width);
    let hw = g.conv.pixels();
    for grp in 0..g.groups {
        for t in 0..g.taps() {
            let (ki, kj) = ((t / k) as isize - pad, (t % k) as isize - pad);
            let ch = 2 * (grp * g.taps() + t);
            let dy_plane = &offsets[ch * hw..(ch + 1) * hw];
            let dx_plane = &offsets[(ch + 1) * hw..(ch + 2) * hw];
            for p in 0..hw {
                let py = (p / w) as isize + ki;
                let px = (p % w) as isize + kj;
                let sy = T::from_isize(py).unwrap() + dy_plane[p];
                let sx = T::from_isize(px).unwrap() + dx_plane[p];
                visit(grp, t, p, Corners::new(sy, sx, h, w));
            }
        }
    }
}

fn deform_columns<T: Real>(x: &[T], offsets: &[T], g: &DeformGeometry) -> Vec<T> {
    let hw = g.conv.pixels();
    let taps = g.taps();
    let cpg = g.channels_per_group();
    let mut cols = vec![T::zero(); g.conv.col_rows() * hw];
    for_each_sample(offsets, g, |grp, t, p, corners| {
        let wts = corners.weights();
        for c in grp * cpg..(grp + 1) * cpg {
            let v = corners.fetch(&x[c * hw..(c + 1) * hw]);
            cols[(c * taps + t) * hw + p] =
                wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3];
        }
    });
    cols
}

/// Deformable convolution. Inputs: `x, offsets, weight, bias`.
pub struct DeformConv2d {
    pub groups: usize,
}

impl<T: Real> Op<T> for DeformConv2d {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [x, off, w, b] = inputs else {
            return Err(Error::Dimension(
                "deform_conv2d takes (x, offsets, weight, bias)".into(),
            ));
        };
        let g = check_shapes(x, off, w, b, self.groups)?;
        if !off.all_finite() {
            return Err(Error::NonFinite("deformable offsets".into()));
        }
        let c = &g.conv;
        let mut out = Tensor::zeros(&[c.batch, c.c_out, c.height, c.width]);
        for n in 0..c.batch {
            let cols = deform_columns(x.batch(n), off.batch(n), &g);
            apply_weights(&cols, w.data(), b.data(), c, out.batch_mut(n));
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, off, w, b) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let g = check_shapes(x, off, w, b, self.groups)?;
        let hw = g.conv.pixels();
        let taps = g.taps();
        let cpg = g.channels_per_group();
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut doff = needs[1].then(|| Tensor::zeros(off.shape()));
        let mut dw = needs[2].then(|| Tensor::zeros(w.shape()));
        let mut db = needs[3].then(|| Tensor::zeros(b.shape()));
        let need_cols = needs[0] || needs[1];
        for n in 0..g.conv.batch {
            let xb = x.batch(n);
            let cols = deform_columns(xb, off.batch(n), &g);
            let dcols = weight_backward(
                &cols,
                w.data(),
                grad.batch(n),
                &g.conv,
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
                need_cols,
            );
            let Some(dcols) = dcols else { continue };
            let mut dxb = dx.as_mut().map(|t| t.batch_mut(n));
            let mut doffb = doff.as_mut().map(|t| t.batch_mut(n));
            let one = T::one();
            for_each_sample(off.batch(n), &g, |grp, t, p, corners| {
                let wts = corners.weights();
                let (mut gy, mut gx) = (T::zero(), T::zero());
                for c in grp * cpg..(grp + 1) * cpg {
                    let gc = dcols[(c * taps + t) * hw + p];
                    if let Some(dxb) = dxb.as_deref_mut() {
                        let plane = &mut dxb[c * hw..(c + 1) * hw];
                        for (corner, wt) in corners.idx.iter().zip(wts) {
                            if let Some(i) = corner {
                                plane[*i] += wt * gc;
                            }
                        }
                    }
                    if doffb.is_some() {
                        let v = corners.fetch(&xb[c * hw..(c + 1) * hw]);
                        let d_dy = (one - corners.lx) * (v[2] - v[0]) + corners.lx * (v[3] - v[1]);
                        let d_dx = (one - corners.ly) * (v[1] - v[0]) + corners.ly * (v[3] - v[2]);
                        gy += gc * d_dy;
                        gx += gc * d_dx;
                    }
                }
                if let Some(doffb) = doffb.as_deref_mut() {
                    let ch = 2 * (grp * taps + t);
                    doffb[ch * hw + p] += gy;
                    doffb[(ch + 1) * hw + p] += gx;
                }
            });
        }
        Ok(vec![dx, doff, dw, db])
    }
}
