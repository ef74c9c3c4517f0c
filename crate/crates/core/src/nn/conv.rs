use crate::error::{Error, Result};
use crate::graph::Op;
use crate::real::{Layout, Real};
use crate::tensor::Tensor;

/// Kernel geometry shared by the regular and deformable convolutions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

pub(crate) fn check_conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<ConvGeometry> {
    let (n, c_in, h, wd) = x.dims4()?;
    let (c_out, w_in, kh, kw) = w.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Dimension(format!(
            "kernel must be square with odd size, got {kh}×{kw}"
        )));
    }
    if w_in != c_in {
        return Err(Error::Dimension(format!(
            "weight expects {w_in} input channels, input has {c_in}"
        )));
    }
    if b.len() != c_out {
        return Err(Error::shape(&[c_out], b.shape()));
    }
    Ok(ConvGeometry {
        batch: n,
        c_in,
        c_out,
        height: h,
        width: wd,
        kernel: kh,
    })
}

/// Unfolds one batch element into `(C_in·k²) × (H·W)` columns with zero padding.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad() as isize);
    let hw = g.pixels();
    for c in 0..g.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (x_out, v) in out_row.iter_mut().enumerate() {
                        let sx = x_out as isize + dx;
                        *v = if sx < 0 || sx >= w {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad() as isize);
    let hw = g.pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dxo = kj as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let col_row = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (x_out, &v) in col_row.iter().enumerate() {
                        let sx = x_out as isize + dxo;
                        if sx >= 0 && sx < w {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out_b = W · cols + bias` for one batch element.
pub(crate) fn apply_weights<T: Real>(
    cols: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeometry,
    out: &mut [T],
) {
    let hw = g.pixels();
    for (o, &bv) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
    }
    T::gemm(
        g.c_out,
        g.col_rows(),
        hw,
        weight,
        Layout::Normal,
        cols,
        Layout::Normal,
        out,
        true,
    );
}

/// Accumulates weight and bias gradients and returns column gradients.
pub(crate) fn weight_backward<T: Real>(
    cols: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    need_cols: bool,
) -> Option<Vec<T>> {
    let hw = g.pixels();
    if let Some(dw) = dweight {
        T::gemm(
            g.c_out,
            hw,
            g.col_rows(),
            grad_out,
            Layout::Normal,
            cols,
            Layout::Transposed,
            dw,
            true,
        );
    }
    if let Some(db) = dbias {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += grad_out[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
    }
    need_cols.then(|| {
        let mut dcols = vec![T::zero(); g.col_rows() * hw];
        T::gemm(
            g.col_rows(),
            g.c_out,
            hw,
            weight,
            Layout::Transposed,
            grad_out,
            Layout::Normal,
            &mut dcols,
            false,
        );
        dcols
    })
}

/// Stride-1 convolution with "same" zero padding. Inputs: `x, weight, bias`.
#[derive(Default)]
pub struct Conv2d;

impl Conv2d {
    fn columns<'a, T: Real>(x: &'a [T], g: &ConvGeometry) -> std::borrow::Cow<'a, [T]> {
        if g.kernel == 1 {
            std::borrow::Cow::Borrowed(x)
        } else {
            let mut cols = vec![T::zero(); g.col_rows() * g.pixels()];
            im2col(x, g, &mut cols);
            std::borrow::Cow::Owned(cols)
        }
    }
}

impl<T: Real> Op<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [x, w, b] = inputs else {
            return Err(Error::Dimension("conv2d takes (x, weight, bias)".into()));
        };
        let g = check_conv_shapes(x, w, b)?;
        let mut out = Tensor::zeros(&[g.batch, g.c_out, g.height, g.width]);
        for n in 0..g.batch {
            let cols = Self::columns(x.batch(n), &g);
            apply_weights(&cols, w.data(), b.data(), &g, out.batch_mut(n));
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
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let g = check_conv_shapes(x, w, b)?;
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut db = needs[2].then(|| Tensor::zeros(b.shape()));
        for n in 0..g.batch {
            let cols = Self::columns(x.batch(n), &g);
            let dcols = weight_backward(
                &cols,
                w.data(),
                grad.batch(n),
                &g,
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
                needs[0],
            );
            if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols) {
                if g.kernel == 1 {
                    for (a, v) in dx.batch_mut(n).iter_mut().zip(dcols) {
                        *a += v;
                    }
                } else {
                    col2im(&dcols, &g, dx.batch_mut(n));
                }
            }
        }
        Ok(vec![dx, dw, db])
    }
}
