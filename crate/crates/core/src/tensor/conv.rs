//! Convolution operations on `(C, H, W)` maps, im2col + GEMM backed.

use super::{GradFn, Scalar, Tensor};
use ndarray::{Array2, Array3, ArrayD, ArrayView3, Ix1, Ix3, Ix4};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn out_size(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.padding - span) / self.stride + 1
    }
}

fn im2col<F: Scalar>(x: &ArrayView3<F>, spec: &ConvSpec) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let mut cols = Array2::<F>::zeros((cin * k * k, ho * wo));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("contiguous row");
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out_slice[base + ox] = x[(ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column matrix back into input layout (adjoint of im2col).
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
) -> Array3<F> {
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let mut x = Array3::<F>::zeros((cin, h, w));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = cols.row(row);
                let col_slice = col_row.as_slice().expect("contiguous row");
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ci, iy as usize, ix as usize)] =
                                x[(ci, iy as usize, ix as usize)] + col_slice[base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

struct Conv2dGrad {
    spec: ConvSpec,
}

impl<F: Scalar> GradFn<F> for Conv2dGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let x = p[0].value().view().into_dimensionality::<Ix3>().unwrap();
        let w = p[1].value().view().into_dimensionality::<Ix4>().unwrap();
        let (cin, h, width) = x.dim();
        let (cout, _, k, _) = w.dim();
        let (ho, wo) = (self.spec.out_size(h), self.spec.out_size(width));
        let g2 = g
            .view()
            .into_shape_with_order((cout, ho * wo))
            .expect("grad contiguous");

        let gx = if p[0].requires_grad() {
            let wmat = w
                .into_shape_with_order((cout, cin * k * k))
                .expect("weight contiguous");
            let cols_grad = wmat.t().dot(&g2);
            Some(col2im(&cols_grad, cin, h, width, &self.spec).into_dyn())
        } else {
            None
        };
        let gw = if p[1].requires_grad() {
            // im2col is recomputed rather than cached to keep graph memory low.
            let cols = im2col(&x, &self.spec);
            let gw = g2.dot(&cols.t());
            Some(
                gw.into_shape_with_order((cout, cin, k, k))
                    .expect("grad weight shape")
                    .into_dyn(),
            )
        } else {
            None
        };
        let gb = if p[2].requires_grad() {
            Some(g2.sum_axis(ndarray::Axis(1)).into_dyn())
        } else {
            None
        };
        vec![gx, gw, gb]
    }
}

/// 2-D convolution: input `(Cin, H, W)`, weight `(Cout, Cin, K, K)`, bias `(Cout,)`.
pub fn conv2d<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    spec: ConvSpec,
) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("x (C,H,W)");
    let wv = w
        .value()
        .view()
        .into_dimensionality::<Ix4>()
        .expect("w (Cout,Cin,K,K)");
    let bv = b.value().view().into_dimensionality::<Ix1>().expect("b (Cout,)");
    let (cin, h, width) = xv.dim();
    let (cout, wcin, k, k2) = wv.dim();
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert_eq!(k, k2, "conv2d: kernel must be square");
    assert_eq!(k, spec.kernel, "conv2d: kernel/spec mismatch");
    assert_eq!(bv.len(), cout, "conv2d: bias length");

    let (ho, wo) = (spec.out_size(h), spec.out_size(width));
    let cols = im2col(&xv, &spec);
    let wmat = wv
        .into_shape_with_order((cout, cin * k * k))
        .expect("weight contiguous");
    let mut out = wmat.dot(&cols);
    for (mut row, &bias) in out.rows_mut().into_iter().zip(bv.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let value = out
        .into_shape_with_order((cout, ho, wo))
        .expect("output shape")
        .into_dyn();
    Tensor::from_op(
        value,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(Conv2dGrad { spec }),
    )
}

struct ConvTranspose2Grad;

impl<F: Scalar> GradFn<F> for ConvTranspose2Grad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let x = p[0].value().view().into_dimensionality::<Ix3>().unwrap();
        let w = p[1].value().view().into_dimensionality::<Ix4>().unwrap();
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (cin, h, width) = x.dim();
        let (_, cout, _, _) = w.dim();

        let gx = if p[0].requires_grad() {
            let mut gx = Array3::<F>::zeros((cin, h, width));
            for ci in 0..cin {
                for co in 0..cout {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let wv = w[(ci, co, ky, kx)];
                            for i in 0..h {
                                for j in 0..width {
                                    gx[(ci, i, j)] =
                                        gx[(ci, i, j)] + g3[(co, 2 * i + ky, 2 * j + kx)] * wv;
                                }
                            }
                        }
                    }
                }
            }
            Some(gx.into_dyn())
        } else {
            None
        };
        let gw = if p[1].requires_grad() {
            let mut gw = ArrayD::<F>::zeros(p[1].value().raw_dim());
            for ci in 0..cin {
                for co in 0..cout {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let mut acc = F::zero();
                            for i in 0..h {
                                for j in 0..width {
                                    acc = acc + x[(ci, i, j)] * g3[(co, 2 * i + ky, 2 * j + kx)];
                                }
                            }
                            gw[[ci, co, ky, kx]] = acc;
                        }
                    }
                }
            }
            Some(gw)
        } else {
            None
        };
        let gb = if p[2].requires_grad() {
            let mut gb = ndarray::Array1::<F>::zeros(cout);
            for co in 0..cout {
                gb[co] = g3.index_axis(ndarray::Axis(0), co).sum();
            }
            Some(gb.into_dyn())
        } else {
            None
        };
        vec![gx, gw, gb]
    }
}

/// Transposed convolution with kernel 2, stride 2: exact 2x upsampling.
/// Weight layout `(Cin, Cout, 2, 2)`.
pub fn conv_transpose2d_k2s2<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("x (C,H,W)");
    let wv = w
        .value()
        .view()
        .into_dimensionality::<Ix4>()
        .expect("w (Cin,Cout,2,2)");
    let bv = b.value().view().into_dimensionality::<Ix1>().expect("b (Cout,)");
    let (cin, h, width) = xv.dim();
    let (wcin, cout, k, k2) = wv.dim();
    assert_eq!(cin, wcin, "conv_transpose: channel mismatch");
    assert_eq!((k, k2), (2, 2), "conv_transpose: kernel must be 2x2");
    assert_eq!(bv.len(), cout);

    let mut out = Array3::<F>::zeros((cout, 2 * h, 2 * width));
    for co in 0..cout {
        out.index_axis_mut(ndarray::Axis(0), co).fill(bv[co]);
    }
    for ci in 0..cin {
        for co in 0..cout {
            for ky in 0..2 {
                for kx in 0..2 {
                    let wv = wv[(ci, co, ky, kx)];
                    for i in 0..h {
                        for j in 0..width {
                            out[(co, 2 * i + ky, 2 * j + kx)] =
                                out[(co, 2 * i + ky, 2 * j + kx)] + xv[(ci, i, j)] * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(ConvTranspose2Grad),
    )
}

struct DepthwiseConv3Grad;

impl<F: Scalar> GradFn<F> for DepthwiseConv3Grad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let x = p[0].value().view().into_dimensionality::<Ix3>().unwrap();
        let w = p[1].value().view().into_dimensionality::<Ix3>().unwrap();
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, width) = x.dim();

        let gx = if p[0].requires_grad() {
            let mut gx = Array3::<F>::zeros((c, h, width));
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = w[(ci, ky, kx)];
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..width {
                                let ix = ox as isize + kx as isize - 1;
                                if ix >= 0 && ix < width as isize {
                                    gx[(ci, iy as usize, ix as usize)] =
                                        gx[(ci, iy as usize, ix as usize)] + g3[(ci, oy, ox)] * wv;
                                }
                            }
                        }
                    }
                }
            }
            Some(gx.into_dyn())
        } else {
            None
        };
        let gw = if p[1].requires_grad() {
            let mut gw = Array3::<F>::zeros((c, 3, 3));
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = F::zero();
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..width {
                                let ix = ox as isize + kx as isize - 1;
                                if ix >= 0 && ix < width as isize {
                                    acc = acc + x[(ci, iy as usize, ix as usize)] * g3[(ci, oy, ox)];
                                }
                            }
                        }
                        gw[(ci, ky, kx)] = acc;
                    }
                }
            }
            Some(gw.into_dyn())
        } else {
            None
        };
        let gb = if p[2].requires_grad() {
            let mut gb = ndarray::Array1::<F>::zeros(c);
            for ci in 0..c {
                gb[ci] = g3.index_axis(ndarray::Axis(0), ci).sum();
            }
            Some(gb.into_dyn())
        } else {
            None
        };
        vec![gx, gw, gb]
    }
}

/// Depthwise 3x3 convolution, padding 1. Weight `(C, 3, 3)`, bias `(C,)`.
pub fn depthwise_conv3x3<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("x (C,H,W)");
    let wv = w.value().view().into_dimensionality::<Ix3>().expect("w (C,3,3)");
    let bv = b.value().view().into_dimensionality::<Ix1>().expect("b (C,)");
    let (c, h, width) = xv.dim();
    assert_eq!(wv.dim(), (c, 3, 3), "depthwise: weight shape");
    assert_eq!(bv.len(), c);

    let mut out = Array3::<F>::zeros((c, h, width));
    for ci in 0..c {
        for oy in 0..h {
            for ox in 0..width {
                let mut acc = bv[ci];
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = ox as isize + kx as isize - 1;
                        if ix >= 0 && ix < width as isize {
                            acc = acc + xv[(ci, iy as usize, ix as usize)] * wv[(ci, ky, kx)];
                        }
                    }
                }
                out[(ci, oy, ox)] = acc;
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(DepthwiseConv3Grad),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3 as A3, Array4};

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with unit weight reproduces the input.
        let x = Tensor::leaf(A3::from_shape_fn((2, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f64).into_dyn());
        let mut w = Array4::<f64>::zeros((2, 2, 1, 1));
        w[(0, 0, 0, 0)] = 1.0;
        w[(1, 1, 0, 0)] = 1.0;
        let w = Tensor::leaf(w.into_dyn());
        let b = Tensor::leaf(Array1::<f64>::zeros(2).into_dyn());
        let y = conv2d(&x, &w, &b, ConvSpec { kernel: 1, stride: 1, dilation: 1, padding: 0 });
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv2d_stride2_halves() {
        let x = Tensor::constant(A3::<f64>::zeros((3, 8, 8)).into_dyn());
        let w = Tensor::constant(Array4::<f64>::zeros((5, 3, 3, 3)).into_dyn());
        let b = Tensor::constant(Array1::<f64>::zeros(5).into_dyn());
        let y = conv2d(&x, &w, &b, ConvSpec { kernel: 3, stride: 2, dilation: 1, padding: 1 });
        assert_eq!(y.shape(), &[5, 4, 4]);
    }

    #[test]
    fn dilated_padding_preserves_size() {
        for d in [1usize, 2, 4, 8] {
            let x = Tensor::constant(A3::<f64>::zeros((1, 16, 16)).into_dyn());
            let w = Tensor::constant(Array4::<f64>::zeros((1, 1, 3, 3)).into_dyn());
            let b = Tensor::constant(Array1::<f64>::zeros(1).into_dyn());
            let y = conv2d(&x, &w, &b, ConvSpec { kernel: 3, stride: 1, dilation: d, padding: d });
            assert_eq!(y.shape(), &[1, 16, 16], "dilation {d}");
        }
    }

    #[test]
    fn transpose_conv_doubles() {
        let x = Tensor::constant(A3::<f64>::ones((2, 4, 4)).into_dyn());
        let w = Tensor::constant(Array4::<f64>::ones((2, 3, 2, 2)).into_dyn());
        let b = Tensor::constant(Array1::<f64>::zeros(3).into_dyn());
        let y = conv_transpose2d_k2s2(&x, &w, &b);
        assert_eq!(y.shape(), &[3, 8, 8]);
        // each output pixel gets exactly one tap per input channel
        assert!(y.value().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }
}
