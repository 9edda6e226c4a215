//! Bilinear resampling of `(C, H, W)` maps (half-pixel center convention).

use super::{sc, GradFn, Scalar, Tensor};
use ndarray::{Array2, Array3, ArrayD, Ix3};

/// Per output row/column: the two source indices and the interpolation weight.
fn axis_taps<F: Scalar>(n_src: usize, n_dst: usize) -> Vec<(usize, usize, F)> {
    let scale = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let clamped = center.clamp(0.0, (n_src - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, sc::<F>(clamped - i0 as f64))
        })
        .collect()
}

pub(crate) fn bilinear_resize_array<F: Scalar>(
    x: &ndarray::ArrayView3<F>,
    out_h: usize,
    out_w: usize,
) -> Array3<F> {
    let (c, h, w) = x.dim();
    let ty = axis_taps::<F>(h, out_h);
    let tx = axis_taps::<F>(w, out_w);
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let one = F::one();
                let top = x[(ci, y0, x0)] * (one - fx) + x[(ci, y0, x1)] * fx;
                let bot = x[(ci, y1, x0)] * (one - fx) + x[(ci, y1, x1)] * fx;
                out[(ci, oy, ox)] = top * (one - fy) + bot * fy;
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel map given as `(H, W)`.
pub fn bilinear_resize_2d<F: Scalar>(x: &Array2<F>, out_h: usize, out_w: usize) -> Array2<F> {
    let (h, w) = x.dim();
    let v = x.view().into_shape_with_order((1, h, w)).expect("contiguous");
    bilinear_resize_array(&v, out_h, out_w)
        .into_shape_with_order((out_h, out_w))
        .expect("reshape")
}

struct BilinearGrad {
    out_h: usize,
    out_w: usize,
}

impl<F: Scalar> GradFn<F> for BilinearGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let x = p[0].value().view().into_dimensionality::<Ix3>().unwrap();
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x.dim();
        let ty = axis_taps::<F>(h, self.out_h);
        let tx = axis_taps::<F>(w, self.out_w);
        let mut gx = Array3::<F>::zeros((c, h, w));
        let one = F::one();
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g3[(ci, oy, ox)];
                    gx[(ci, y0, x0)] = gx[(ci, y0, x0)] + gv * (one - fy) * (one - fx);
                    gx[(ci, y0, x1)] = gx[(ci, y0, x1)] + gv * (one - fy) * fx;
                    gx[(ci, y1, x0)] = gx[(ci, y1, x0)] + gv * fy * (one - fx);
                    gx[(ci, y1, x1)] = gx[(ci, y1, x1)] + gv * fy * fx;
                }
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

pub fn bilinear_resize<F: Scalar>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("x (C,H,W)");
    let value = bilinear_resize_array(&xv, out_h, out_w).into_dyn();
    Tensor::from_op(value, vec![x.clone()], Box::new(BilinearGrad { out_h, out_w }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3 as A3;

    #[test]
    fn constants_are_preserved() {
        let x = Tensor::constant(A3::from_elem((2, 7, 5), 0.37f64).into_dyn());
        let y = bilinear_resize(&x, 3, 9);
        assert!(y.value().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn identity_when_same_size() {
        let x = Tensor::constant(A3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64).into_dyn());
        let y = bilinear_resize(&x, 4, 4);
        assert_eq!(y.value(), x.value());
    }
}
