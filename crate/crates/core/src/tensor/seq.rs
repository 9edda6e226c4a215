//! Sequence operations: positionwise linear maps, the selective-scan
//! recurrence, and the four-direction unfold/refold used by SS2D.

use super::{GradFn, Scalar, Tensor};
use ndarray::{Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};

struct LinearSeqGrad {
    has_bias: bool,
}

impl<F: Scalar> GradFn<F> for LinearSeqGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let x = p[0].value().view().into_dimensionality::<Ix2>().unwrap();
        let w = p[1].value().view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let gx = p[0].requires_grad().then(|| g2.dot(&w).into_dyn());
        let gw = p[1].requires_grad().then(|| g2.t().dot(&x).into_dyn());
        let mut grads = vec![gx, gw];
        if self.has_bias {
            grads.push(p[2].requires_grad().then(|| g2.sum_axis(Axis(0)).into_dyn()));
        }
        grads
    }
}

/// `y = x W^T (+ b)` with `x: (L, Din)`, `w: (Dout, Din)`, `b: (Dout,)`.
pub fn linear_seq<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix2>().expect("x (L,Din)");
    let wv = w.value().view().into_dimensionality::<Ix2>().expect("w (Dout,Din)");
    assert_eq!(xv.dim().1, wv.dim().1, "linear_seq: inner dim mismatch");
    let mut out = xv.dot(&wv.t());
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        let bv = b.value().view().into_dimensionality::<Ix1>().expect("b (Dout,)");
        assert_eq!(bv.len(), wv.dim().0, "linear_seq: bias length");
        out += &bv;
        parents.push(b.clone());
    }
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(LinearSeqGrad { has_bias: b.is_some() }),
    )
}

/// Grid coordinates of sequence position `l` for scan direction `dir`.
///
/// Directions: 0 row-major left-to-right, 1 column-major top-to-bottom,
/// 2 the exact reversal of 0, 3 the exact reversal of 1.
#[inline]
pub(crate) fn scan_coords(dir: usize, l: usize, h: usize, w: usize) -> (usize, usize) {
    match dir {
        0 => (l / w, l % w),
        1 => (l % h, l / h),
        2 => {
            let m = h * w - 1 - l;
            (m / w, m % w)
        }
        3 => {
            let m = h * w - 1 - l;
            (m % h, m / h)
        }
        _ => unreachable!("scan direction out of range"),
    }
}

struct CrossScanGrad {
    dir: usize,
}

impl<F: Scalar> GradFn<F> for CrossScanGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let (c, h, w) = p[0]
            .value()
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .dim();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut gx = Array3::<F>::zeros((c, h, w));
        for l in 0..h * w {
            let (y, x) = scan_coords(self.dir, l, h, w);
            for ci in 0..c {
                gx[(ci, y, x)] = g2[(l, ci)];
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

/// Unfold a `(C, H, W)` map into the `(H*W, C)` sequence of one scan direction.
pub fn cross_scan_dir<F: Scalar>(x: &Tensor<F>, dir: usize) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("x (C,H,W)");
    let (c, h, w) = xv.dim();
    let mut out = Array2::<F>::zeros((h * w, c));
    for l in 0..h * w {
        let (y, xx) = scan_coords(dir, l, h, w);
        for ci in 0..c {
            out[(l, ci)] = xv[(ci, y, xx)];
        }
    }
    Tensor::from_op(out.into_dyn(), vec![x.clone()], Box::new(CrossScanGrad { dir }))
}

struct CrossMergeGrad {
    h: usize,
    w: usize,
}

impl<F: Scalar> GradFn<F> for CrossMergeGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let c = g3.dim().0;
        (0..4)
            .map(|dir| {
                p[dir].requires_grad().then(|| {
                    let mut gs = Array2::<F>::zeros((self.h * self.w, c));
                    for l in 0..self.h * self.w {
                        let (y, x) = scan_coords(dir, l, self.h, self.w);
                        for ci in 0..c {
                            gs[(l, ci)] = g3[(ci, y, x)];
                        }
                    }
                    gs.into_dyn()
                })
            })
            .collect()
    }
}

/// Refold four direction sequences back to `(C, H, W)` and sum them.
pub fn cross_merge4<F: Scalar>(seqs: &[Tensor<F>; 4], h: usize, w: usize) -> Tensor<F> {
    let c = seqs[0].shape()[1];
    for s in seqs.iter() {
        assert_eq!(s.shape(), &[h * w, c], "cross_merge4: sequence shape");
    }
    let mut out = Array3::<F>::zeros((c, h, w));
    for (dir, s) in seqs.iter().enumerate() {
        let sv = s.value().view().into_dimensionality::<Ix2>().unwrap();
        for l in 0..h * w {
            let (y, x) = scan_coords(dir, l, h, w);
            for ci in 0..c {
                out[(ci, y, x)] = out[(ci, y, x)] + sv[(l, ci)];
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        seqs.to_vec(),
        Box::new(CrossMergeGrad { h, w }),
    )
}

/// Forward selective-scan kernel shared by the graph op and the public API.
///
/// `u, delta: (L, D)`, `b, c: (L, N)`, `a: (D, N)`. When `store` is set the
/// per-step states and discrete transition factors are returned for the
/// adjoint pass.
pub(crate) fn scan_kernel<F: Scalar>(
    u: &ndarray::ArrayView2<F>,
    delta: &ndarray::ArrayView2<F>,
    b: &ndarray::ArrayView2<F>,
    c: &ndarray::ArrayView2<F>,
    a: &ndarray::ArrayView2<F>,
    store: bool,
) -> (Array2<F>, Option<(Array3<F>, Array3<F>)>) {
    let (l_len, d_dim) = u.dim();
    let n = a.dim().1;
    let u = u.as_standard_layout();
    let u_s = u.as_slice().expect("standard layout");
    let delta = delta.as_standard_layout();
    let delta_s = delta.as_slice().expect("standard layout");
    let b = b.as_standard_layout();
    let b_s = b.as_slice().expect("standard layout");
    let c = c.as_standard_layout();
    let c_s = c.as_slice().expect("standard layout");
    let a = a.as_standard_layout();
    let a_s = a.as_slice().expect("standard layout");

    let mut state = vec![F::zero(); d_dim * n];
    let mut y = Array2::<F>::zeros((l_len, d_dim));
    let y_s = y.as_slice_mut().expect("standard layout");
    let mut stored = store.then(|| {
        (
            Array3::<F>::zeros((l_len, d_dim, n)),
            Array3::<F>::zeros((l_len, d_dim, n)),
        )
    });
    let (mut xs_s, mut abars_s) = match &mut stored {
        Some((xs, abars)) => (
            Some(xs.as_slice_mut().expect("standard layout")),
            Some(abars.as_slice_mut().expect("standard layout")),
        ),
        None => (None, None),
    };

    for l in 0..l_len {
        let b_l = &b_s[l * n..(l + 1) * n];
        let c_l = &c_s[l * n..(l + 1) * n];
        let u_l = &u_s[l * d_dim..(l + 1) * d_dim];
        let delta_l = &delta_s[l * d_dim..(l + 1) * d_dim];
        let y_l = &mut y_s[l * d_dim..(l + 1) * d_dim];
        for d in 0..d_dim {
            let dt = delta_l[d];
            let dt_u = dt * u_l[d];
            let a_d = &a_s[d * n..(d + 1) * n];
            let x_d = &mut state[d * n..(d + 1) * n];
            let mut acc = F::zero();
            match (&mut xs_s, &mut abars_s) {
                (Some(xs), Some(abars)) => {
                    let base = (l * d_dim + d) * n;
                    let xs_ld = &mut xs[base..base + n];
                    let abars_ld = &mut abars[base..base + n];
                    for i in 0..n {
                        let abar = (dt * a_d[i]).exp();
                        let xv = abar * x_d[i] + dt_u * b_l[i];
                        x_d[i] = xv;
                        acc = acc + c_l[i] * xv;
                        xs_ld[i] = xv;
                        abars_ld[i] = abar;
                    }
                }
                _ => {
                    for i in 0..n {
                        let xv = (dt * a_d[i]).exp() * x_d[i] + dt_u * b_l[i];
                        x_d[i] = xv;
                        acc = acc + c_l[i] * xv;
                    }
                }
            }
            y_l[d] = acc;
        }
    }
    (y, stored)
}

struct ScanGrad<F: Scalar> {
    states: Array3<F>,
    abars: Array3<F>,
}

impl<F: Scalar> GradFn<F> for ScanGrad<F> {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let u = p[0].value().view().into_dimensionality::<Ix2>().unwrap();
        let delta = p[1].value().view().into_dimensionality::<Ix2>().unwrap();
        let b = p[2].value().view().into_dimensionality::<Ix2>().unwrap();
        let c = p[3].value().view().into_dimensionality::<Ix2>().unwrap();
        let a = p[4].value().view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let (l_len, d_dim) = u.dim();
        let n = a.dim().1;

        let u_sl = u.as_standard_layout();
        let u_s = u_sl.as_slice().unwrap();
        let delta_sl = delta.as_standard_layout();
        let delta_s = delta_sl.as_slice().unwrap();
        let b_sl = b.as_standard_layout();
        let b_s = b_sl.as_slice().unwrap();
        let c_sl = c.as_standard_layout();
        let c_s = c_sl.as_slice().unwrap();
        let a_sl = a.as_standard_layout();
        let a_s = a_sl.as_slice().unwrap();
        let g_sl = g2.as_standard_layout();
        let g_s = g_sl.as_slice().unwrap();
        let xs_s = self.states.as_slice().unwrap();
        let abars_s = self.abars.as_slice().unwrap();

        let mut gu = Array2::<F>::zeros((l_len, d_dim));
        let gu_s = gu.as_slice_mut().unwrap();
        let mut gdelta = Array2::<F>::zeros((l_len, d_dim));
        let gdelta_s = gdelta.as_slice_mut().unwrap();
        let mut gb = Array2::<F>::zeros((l_len, n));
        let gb_all = gb.as_slice_mut().unwrap();
        let mut gc = Array2::<F>::zeros((l_len, n));
        let gc_all = gc.as_slice_mut().unwrap();
        let mut ga = Array2::<F>::zeros((d_dim, n));
        let ga_s = ga.as_slice_mut().unwrap();
        // lambda[d*n + i] carries dL/dx_{l+1} ⊙ abar_{l+1} entering step l.
        let mut lambda = vec![F::zero(); d_dim * n];

        for l in (0..l_len).rev() {
            let b_l = &b_s[l * n..(l + 1) * n];
            let c_l = &c_s[l * n..(l + 1) * n];
            let gb_l = &mut gb_all[l * n..(l + 1) * n];
            let gc_l = &mut gc_all[l * n..(l + 1) * n];
            for d in 0..d_dim {
                let gl = g_s[l * d_dim + d];
                let dt = delta_s[l * d_dim + d];
                let ud = u_s[l * d_dim + d];
                let dt_u = dt * ud;
                let a_d = &a_s[d * n..(d + 1) * n];
                let ga_d = &mut ga_s[d * n..(d + 1) * n];
                let lam = &mut lambda[d * n..(d + 1) * n];
                let base = (l * d_dim + d) * n;
                let xs_ld = &xs_s[base..base + n];
                let abars_ld = &abars_s[base..base + n];
                let xs_prev = if l > 0 {
                    let prev = base - d_dim * n;
                    Some(&xs_s[prev..prev + n])
                } else {
                    None
                };
                let mut gu_acc = F::zero();
                let mut gdt_acc = F::zero();
                for i in 0..n {
                    let x_l = xs_ld[i];
                    let abar = abars_ld[i];
                    let x_prev = match xs_prev {
                        Some(prev) => prev[i],
                        None => F::zero(),
                    };
                    let lam_i = lam[i] + gl * c_l[i];
                    gc_l[i] = gc_l[i] + gl * x_l;
                    let decay = lam_i * abar * x_prev;
                    ga_d[i] = ga_d[i] + decay * dt;
                    gdt_acc = gdt_acc + a_d[i] * decay + lam_i * b_l[i] * ud;
                    gb_l[i] = gb_l[i] + lam_i * dt_u;
                    gu_acc = gu_acc + lam_i * dt * b_l[i];
                    lam[i] = lam_i * abar;
                }
                gu_s[l * d_dim + d] = gu_acc;
                gdelta_s[l * d_dim + d] = gdt_acc;
            }
        }
        vec![
            p[0].requires_grad().then(|| gu.into_dyn()),
            p[1].requires_grad().then(|| gdelta.into_dyn()),
            p[2].requires_grad().then(|| gb.into_dyn()),
            p[3].requires_grad().then(|| gc.into_dyn()),
            p[4].requires_grad().then(|| ga.into_dyn()),
        ]
    }
}

/// Differentiable selective scan on already-projected inputs.
///
/// `u, delta: (L, D)`, `b, c: (L, N)`, `a: (D, N)`; `delta` must be positive
/// and `a` negative (callers enforce this by construction: softplus and
/// `-exp` respectively).
pub fn selective_scan_op<F: Scalar>(
    u: &Tensor<F>,
    delta: &Tensor<F>,
    b: &Tensor<F>,
    c: &Tensor<F>,
    a: &Tensor<F>,
) -> Tensor<F> {
    let uv = u.value().view().into_dimensionality::<Ix2>().expect("u (L,D)");
    let dv = delta.value().view().into_dimensionality::<Ix2>().expect("delta (L,D)");
    let bv = b.value().view().into_dimensionality::<Ix2>().expect("b (L,N)");
    let cv = c.value().view().into_dimensionality::<Ix2>().expect("c (L,N)");
    let av = a.value().view().into_dimensionality::<Ix2>().expect("a (D,N)");
    assert_eq!(uv.dim(), dv.dim(), "scan: delta shape");
    assert_eq!(bv.dim(), cv.dim(), "scan: b/c shape");
    assert_eq!(bv.dim().0, uv.dim().0, "scan: sequence length");
    assert_eq!(av.dim(), (uv.dim().1, bv.dim().1), "scan: a shape");

    let needs_tape = u.requires_grad()
        || delta.requires_grad()
        || b.requires_grad()
        || c.requires_grad()
        || a.requires_grad();
    let (y, stored) = scan_kernel(&uv, &dv, &bv, &cv, &av, needs_tape);
    match stored {
        Some((states, abars)) => Tensor::from_op(
            y.into_dyn(),
            vec![u.clone(), delta.clone(), b.clone(), c.clone(), a.clone()],
            Box::new(ScanGrad { states, abars }),
        ),
        None => Tensor::constant(y.into_dyn()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cross_scan_2x2_orderings() {
        let f = arr2(&[[1.0f64, 2.0], [3.0, 4.0]])
            .into_shape_with_order((1, 2, 2))
            .unwrap();
        let x = Tensor::constant(f.into_dyn());
        let expect = [
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 3.0, 2.0, 4.0],
            vec![4.0, 3.0, 2.0, 1.0],
            vec![4.0, 2.0, 3.0, 1.0],
        ];
        for dir in 0..4 {
            let s = cross_scan_dir(&x, dir);
            let got: Vec<f64> = s.value().iter().copied().collect();
            assert_eq!(got, expect[dir], "direction {dir}");
        }
    }

    #[test]
    fn merge_of_scan_is_4x() {
        let f = ndarray::Array3::from_shape_fn((3, 4, 5), |(c, i, j)| (c * 100 + i * 10 + j) as f64);
        let x = Tensor::constant(f.clone().into_dyn());
        let seqs = [
            cross_scan_dir(&x, 0),
            cross_scan_dir(&x, 1),
            cross_scan_dir(&x, 2),
            cross_scan_dir(&x, 3),
        ];
        let merged = cross_merge4(&seqs, 4, 5);
        let expect = f.mapv(|v| 4.0 * v);
        assert_eq!(merged.value(), &expect.into_dyn());
    }

    #[test]
    fn scalar_scan_hand_unrolled() {
        // D=N=1, abar=0.5, bbar=1, c=1, u=(1,1) -> y=(1, 1.5)
        let u = Tensor::constant(arr2(&[[1.0f64], [1.0]]).into_dyn());
        let ln2 = std::f64::consts::LN_2;
        let delta = Tensor::constant(arr2(&[[ln2], [ln2]]).into_dyn());
        let b = Tensor::constant(arr2(&[[1.0 / ln2], [1.0 / ln2]]).into_dyn());
        let c = Tensor::constant(arr2(&[[1.0], [1.0]]).into_dyn());
        let a = Tensor::constant(arr2(&[[-1.0]]).into_dyn());
        let y = selective_scan_op(&u, &delta, &b, &c, &a);
        let yv = y.value();
        assert!((yv[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((yv[[1, 0]] - 1.5).abs() < 1e-12);
    }
}
