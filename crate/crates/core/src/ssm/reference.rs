//! Naive step-by-step oracle for the selective scan and SS2D.
//!
//! Deliberately shares no code with the production path: projections,
//! discretization and the recurrence are all written out longhand here so
//! equivalence tests compare two independent derivations.

use super::SsmParams;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use ndarray::{Array2, Array3};

fn softplus<F: Scalar>(x: F) -> F {
    let cap = crate::tensor::sc::<F>(30.0);
    if x > cap {
        x
    } else if x < -cap {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

/// Per-step scalar-loop selective scan, materializing every intermediate.
pub fn selective_scan_naive<F: Scalar>(u: &Array2<F>, p: &SsmParams<F>) -> Result<Array2<F>> {
    let (l_len, d_dim) = u.dim();
    if d_dim != p.dim() {
        return Err(Error::Shape(format!(
            "sequence has {d_dim} channels, params expect {}",
            p.dim()
        )));
    }
    let n = p.state_dim();

    // Projections, one output element at a time.
    let mut delta = Array2::<F>::zeros((l_len, d_dim));
    let mut b = Array2::<F>::zeros((l_len, n));
    let mut c = Array2::<F>::zeros((l_len, n));
    for l in 0..l_len {
        for d_out in 0..d_dim {
            let mut acc = p.delta_b[d_out];
            for d_in in 0..d_dim {
                acc = acc + p.delta_w[(d_out, d_in)] * u[(l, d_in)];
            }
            delta[(l, d_out)] = softplus(acc);
        }
        for i in 0..n {
            let mut bb = F::zero();
            let mut cc = F::zero();
            for d_in in 0..d_dim {
                bb = bb + p.b_w[(i, d_in)] * u[(l, d_in)];
                cc = cc + p.c_w[(i, d_in)] * u[(l, d_in)];
            }
            b[(l, i)] = bb;
            c[(l, i)] = cc;
        }
    }

    // Discretize, then unroll the recurrence from x_0 = 0.
    let mut a_bar = Array3::<F>::zeros((l_len, d_dim, n));
    let mut b_bar = Array3::<F>::zeros((l_len, d_dim, n));
    for l in 0..l_len {
        for d in 0..d_dim {
            for i in 0..n {
                a_bar[(l, d, i)] = (delta[(l, d)] * p.a[(d, i)]).exp();
                b_bar[(l, d, i)] = delta[(l, d)] * b[(l, i)];
            }
        }
    }
    let mut x = Array2::<F>::zeros((d_dim, n));
    let mut y = Array2::<F>::zeros((l_len, d_dim));
    for l in 0..l_len {
        for d in 0..d_dim {
            let mut acc = F::zero();
            for i in 0..n {
                x[(d, i)] = a_bar[(l, d, i)] * x[(d, i)] + b_bar[(l, d, i)] * u[(l, d)];
                acc = acc + c[(l, i)] * x[(d, i)];
            }
            y[(l, d)] = acc;
        }
    }
    Ok(y)
}

/// SS2D oracle: enumerate the four orders explicitly, scan each with the
/// naive recurrence, refold by inverse lookup and sum.
pub fn ss2d_naive<F: Scalar>(f: &Array3<F>, params: &[SsmParams<F>; 4]) -> Result<Array3<F>> {
    let (c, h, w) = f.dim();
    let mut order: [Vec<(usize, usize)>; 4] = [vec![], vec![], vec![], vec![]];
    for i in 0..h {
        for j in 0..w {
            order[0].push((i, j));
        }
    }
    for j in 0..w {
        for i in 0..h {
            order[1].push((i, j));
        }
    }
    order[2] = order[0].iter().rev().copied().collect();
    order[3] = order[1].iter().rev().copied().collect();

    let mut out = Array3::<F>::zeros((c, h, w));
    for dir in 0..4 {
        let mut seq = Array2::<F>::zeros((h * w, c));
        for (l, &(i, j)) in order[dir].iter().enumerate() {
            for ci in 0..c {
                seq[(l, ci)] = f[(ci, i, j)];
            }
        }
        let y = selective_scan_naive(&seq, &params[dir])?;
        for (l, &(i, j)) in order[dir].iter().enumerate() {
            for ci in 0..c {
                out[(ci, i, j)] = out[(ci, i, j)] + y[(l, ci)];
            }
        }
    }
    Ok(out)
}
