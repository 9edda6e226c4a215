//! Layer normalization over the channel axis, per spatial location.

use super::{sc, GradFn, Scalar, Tensor};
use ndarray::{Array3, ArrayD, Ix1, Ix3};

struct LayerNormGrad<F> {
    eps: F,
}

impl<F: Scalar> GradFn<F> for LayerNormGrad<F> {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let x = p[0].value().view().into_dimensionality::<Ix3>().unwrap();
        let gamma = p[1].value().view().into_dimensionality::<Ix1>().unwrap();
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x.dim();
        let cf = sc::<F>(c as f64);

        let need_x = p[0].requires_grad();
        let need_g = p[1].requires_grad();
        let need_b = p[2].requires_grad();
        let mut gx = Array3::<F>::zeros((c, h, w));
        let mut gg = ndarray::Array1::<F>::zeros(c);
        let mut gb = ndarray::Array1::<F>::zeros(c);

        for i in 0..h {
            for j in 0..w {
                let mut mean = F::zero();
                for ci in 0..c {
                    mean = mean + x[(ci, i, j)];
                }
                mean = mean / cf;
                let mut var = F::zero();
                for ci in 0..c {
                    let d = x[(ci, i, j)] - mean;
                    var = var + d * d;
                }
                var = var / cf;
                let inv_std = (var + self.eps).sqrt().recip();

                // means of gamma*g and gamma*g*xhat over channels
                let mut m1 = F::zero();
                let mut m2 = F::zero();
                for ci in 0..c {
                    let xhat = (x[(ci, i, j)] - mean) * inv_std;
                    let gh = g3[(ci, i, j)] * gamma[ci];
                    m1 = m1 + gh;
                    m2 = m2 + gh * xhat;
                    if need_g {
                        gg[ci] = gg[ci] + g3[(ci, i, j)] * xhat;
                    }
                    if need_b {
                        gb[ci] = gb[ci] + g3[(ci, i, j)];
                    }
                }
                m1 = m1 / cf;
                m2 = m2 / cf;
                if need_x {
                    for ci in 0..c {
                        let xhat = (x[(ci, i, j)] - mean) * inv_std;
                        let gh = g3[(ci, i, j)] * gamma[ci];
                        gx[(ci, i, j)] = inv_std * (gh - m1 - xhat * m2);
                    }
                }
            }
        }
        vec![
            need_x.then(|| gx.into_dyn()),
            need_g.then(|| gg.into_dyn()),
            need_b.then(|| gb.into_dyn()),
        ]
    }
}

/// Normalize each spatial location over its channel vector, then apply the
/// per-channel affine `gamma * xhat + beta`. Variance is the biased estimate.
pub fn layer_norm_channels<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("x (C,H,W)");
    let gv = gamma.value().view().into_dimensionality::<Ix1>().expect("gamma (C,)");
    let bv = beta.value().view().into_dimensionality::<Ix1>().expect("beta (C,)");
    let (c, h, w) = xv.dim();
    assert_eq!(gv.len(), c, "layer_norm: gamma length");
    assert_eq!(bv.len(), c, "layer_norm: beta length");
    let cf = sc::<F>(c as f64);

    let mut out = Array3::<F>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut mean = F::zero();
            for ci in 0..c {
                mean = mean + xv[(ci, i, j)];
            }
            mean = mean / cf;
            let mut var = F::zero();
            for ci in 0..c {
                let d = xv[(ci, i, j)] - mean;
                var = var + d * d;
            }
            var = var / cf;
            let inv_std = (var + eps).sqrt().recip();
            for ci in 0..c {
                out[(ci, i, j)] = (xv[(ci, i, j)] - mean) * inv_std * gv[ci] + bv[ci];
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(LayerNormGrad { eps }),
    )
}
