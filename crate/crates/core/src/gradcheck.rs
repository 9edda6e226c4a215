//! Central finite-difference gradient checking.
//!
//! Used by the test suites to compare analytic gradients from the autodiff
//! engine against numerical derivatives of a scalar loss.

use crate::params::{Bindings, ParamStore};
use crate::tensor::{Scalar, Tensor};
use ndarray::ArrayD;

/// Central differences of `loss` with respect to each array in `inputs`,
/// one perturbed element at a time.
pub fn finite_diff_grads<F, L>(mut loss: L, inputs: &[ArrayD<F>], h: f64) -> Vec<ArrayD<F>>
where
    F: Scalar,
    L: FnMut(&[ArrayD<F>]) -> F,
{
    let hf = crate::tensor::sc::<F>(h);
    let two_h = crate::tensor::sc::<F>(2.0 * h);
    let mut work: Vec<ArrayD<F>> = inputs.iter().map(|a| a.as_standard_layout().to_owned()).collect();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = ArrayD::<F>::zeros(work[k].raw_dim());
        let n = work[k].len();
        for idx in 0..n {
            let slot = work[k].as_slice_mut().expect("standard layout");
            let orig = slot[idx];
            slot[idx] = orig + hf;
            let up = loss(&work);
            work[k].as_slice_mut().expect("standard layout")[idx] = orig - hf;
            let down = loss(&work);
            work[k].as_slice_mut().expect("standard layout")[idx] = orig;
            grad.as_slice_mut().expect("standard layout")[idx] = (up - down) / two_h;
        }
        grads.push(grad);
    }
    grads
}

/// Largest elementwise relative error between two gradient sets.
///
/// `rel = |a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero pairs
/// from dominating.
pub fn max_rel_error<F: Scalar>(analytic: &[ArrayD<F>], numeric: &[ArrayD<F>], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let av = av.to_f64().unwrap();
            let nv = nv.to_f64().unwrap();
            let denom = av.abs().max(nv.abs()).max(floor);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Per-array relative error `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`, maximized
/// over arrays. This is the usual gradient-check metric: element-wise ratios
/// on near-zero partials only measure truncation noise of the stencil.
pub fn max_norm_rel_error<F: Scalar>(
    analytic: &[ArrayD<F>],
    numeric: &[ArrayD<F>],
    floor: f64,
) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let mut na = 0.0f64;
        let mut nn = 0.0f64;
        let mut nd = 0.0f64;
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let av = av.to_f64().unwrap();
            let nv = nv.to_f64().unwrap();
            na += av * av;
            nn += nv * nv;
            nd += (av - nv) * (av - nv);
        }
        let denom = na.sqrt().max(nn.sqrt()).max(floor);
        worst = worst.max(nd.sqrt() / denom);
    }
    worst
}

/// Result of [`check_block`]: both error metrics over parameters and input.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// Worst element-wise relative error.
    pub max_elem_rel: f64,
    /// Worst per-array gradient-norm relative error.
    pub max_norm_rel: f64,
}

/// Compare analytic and central-difference gradients of
/// `sum(forward(x)^2)` with respect to every stored parameter and the input.
///
/// `forward` must be a pure function of the bindings and the input tensor.
pub fn check_block<F, Fwd>(
    ps: &mut ParamStore<F>,
    input: &ArrayD<F>,
    h: f64,
    floor: f64,
    forward: Fwd,
) -> GradCheckReport
where
    F: Scalar,
    Fwd: Fn(&Bindings<F>, &Tensor<F>) -> Tensor<F>,
{
    let ids: Vec<_> = ps.ids().collect();

    // Analytic gradients from one taped pass.
    let bn = ps.bind(true);
    let x = Tensor::leaf(input.clone());
    let loss = forward(&bn, &x).sum_sq();
    let mut grads = loss.backward();
    let mut analytic = bn.collect_grads(&mut grads, ps);
    analytic.push(
        grads
            .take(&x)
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim())),
    );

    // Numerical gradients via central differences over the same arrays.
    let mut arrays: Vec<ArrayD<F>> = ids.iter().map(|&id| ps.value(id).clone()).collect();
    arrays.push(input.clone());
    let numeric = finite_diff_grads(
        |arrs| {
            for (&id, a) in ids.iter().zip(arrs) {
                *ps.value_mut(id) = a.clone();
            }
            let x = Tensor::constant(arrs.last().expect("input present").clone());
            forward(&ps.bind(false), &x).sum_sq().scalar_value()
        },
        &arrays,
        h,
    );
    // Restore original parameters.
    for (&id, a) in ids.iter().zip(&arrays) {
        *ps.value_mut(id) = a.clone();
    }
    GradCheckReport {
        max_elem_rel: max_rel_error(&analytic, &numeric, floor),
        max_norm_rel: max_norm_rel_error(&analytic, &numeric, floor),
    }
}

/// Result of [`check_block_filtered`].
#[derive(Clone, Copy, Debug)]
pub struct FilteredGradCheck {
    /// Worst element-wise relative error over stencil-convergent coordinates.
    pub max_elem_rel: f64,
    /// Fraction of coordinates whose stencil converged under step halving.
    pub trusted_fraction: f64,
}

/// [`check_block`] with a convergence-certified reference.
///
/// Layer norm over thin channel vectors and LeakyReLU have sharp or kinked
/// regions; a central-difference stencil that straddles one does not
/// estimate the derivative at the point, so it cannot serve as a reference
/// there. Each coordinate's stencil is certified by step halving: the `h`
/// and `h/2` estimates must agree to `fd_agree_tol` for the coordinate to
/// enter the comparison. The analytic comparison itself runs at step `h`.
pub fn check_block_filtered<F, Fwd>(
    ps: &mut ParamStore<F>,
    input: &ArrayD<F>,
    h: f64,
    fd_agree_tol: f64,
    floor: f64,
    forward: Fwd,
) -> FilteredGradCheck
where
    F: Scalar,
    Fwd: Fn(&Bindings<F>, &Tensor<F>) -> Tensor<F>,
{
    let ids: Vec<_> = ps.ids().collect();
    let originals: Vec<ArrayD<F>> = ids.iter().map(|&id| ps.value(id).clone()).collect();
    let mut arrays = originals.clone();
    arrays.push(input.clone());

    let numeric_h = finite_diff_grads(|arrs| eval_loss(ps, &ids, arrs, &forward), &arrays, h);
    let numeric_h2 =
        finite_diff_grads(|arrs| eval_loss(ps, &ids, arrs, &forward), &arrays, h / 2.0);
    for (&id, a) in ids.iter().zip(&originals) {
        *ps.value_mut(id) = a.clone();
    }

    let bn = ps.bind(true);
    let x = Tensor::leaf(input.clone());
    let loss = forward(&bn, &x).sum_sq();
    let mut grads = loss.backward();
    let mut analytic = bn.collect_grads(&mut grads, ps);
    analytic.push(
        grads
            .take(&x)
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim())),
    );

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(floor);
    let mut total = 0usize;
    let mut trusted = 0usize;
    let mut worst = 0.0f64;
    for k in 0..analytic.len() {
        for ((&av, &nh), &nh2) in analytic[k]
            .iter()
            .zip(numeric_h[k].iter())
            .zip(numeric_h2[k].iter())
        {
            total += 1;
            let (av, nh, nh2) = (
                av.to_f64().unwrap(),
                nh.to_f64().unwrap(),
                nh2.to_f64().unwrap(),
            );
            if rel(nh, nh2) <= fd_agree_tol {
                trusted += 1;
                worst = worst.max(rel(av, nh));
            }
        }
    }
    FilteredGradCheck {
        max_elem_rel: worst,
        trusted_fraction: trusted as f64 / total.max(1) as f64,
    }
}

fn eval_loss<F, Fwd>(
    ps: &mut ParamStore<F>,
    ids: &[crate::params::ParamId],
    arrs: &[ArrayD<F>],
    forward: &Fwd,
) -> F
where
    F: Scalar,
    Fwd: Fn(&Bindings<F>, &Tensor<F>) -> Tensor<F>,
{
    for (&id, a) in ids.iter().zip(arrs) {
        *ps.value_mut(id) = a.clone();
    }
    let x = Tensor::constant(arrs.last().expect("input present").clone());
    forward(&ps.bind(false), &x).sum_sq().scalar_value()
}
