//! Pointwise operations, activations, concatenation and reductions.

use super::{sc, GradFn, Scalar, Tensor};
use ndarray::{ArrayD, Axis, IxDyn, Slice};

struct AddGrad;

impl<F: Scalar> GradFn<F> for AddGrad {
    fn backward(&self, g: &ArrayD<F>, _p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let value = a.value() + b.value();
    Tensor::from_op(value, vec![a.clone(), b.clone()], Box::new(AddGrad))
}

struct MulGrad;

impl<F: Scalar> GradFn<F> for MulGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let ga = if p[0].requires_grad() {
            Some(g * p[1].value())
        } else {
            None
        };
        let gb = if p[1].requires_grad() {
            Some(g * p[0].value())
        } else {
            None
        };
        vec![ga, gb]
    }
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let value = a.value() * b.value();
    Tensor::from_op(value, vec![a.clone(), b.clone()], Box::new(MulGrad))
}

/// Multiply a `(C, H, W)` feature map by an `(H, W)` gain, broadcast over
/// channels. The gain is typically a detached uncertainty map.
pub fn mul_channel_broadcast<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>) -> Tensor<F> {
    let xs = x.shape();
    assert_eq!(xs.len(), 3, "mul_channel_broadcast: feature must be (C,H,W)");
    assert_eq!(&xs[1..], gain.shape(), "mul_channel_broadcast: gain shape");
    let mut value = x.value().clone();
    for mut chan in value.axis_iter_mut(Axis(0)) {
        chan *= &gain.value().view();
    }
    Tensor::from_op(
        value,
        vec![x.clone(), gain.clone()],
        Box::new(MulChanBroadcastGrad),
    )
}

struct MulChanBroadcastGrad;

impl<F: Scalar> GradFn<F> for MulChanBroadcastGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let gx = if p[0].requires_grad() {
            let mut gx = g.clone();
            for mut chan in gx.axis_iter_mut(Axis(0)) {
                chan *= &p[1].value().view();
            }
            Some(gx)
        } else {
            None
        };
        let gu = if p[1].requires_grad() {
            let mut gu = ArrayD::zeros(p[1].value().raw_dim());
            for (gc, xc) in g.axis_iter(Axis(0)).zip(p[0].value().axis_iter(Axis(0))) {
                gu += &(&gc * &xc);
            }
            Some(gu)
        } else {
            None
        };
        vec![gx, gu]
    }
}

struct ScaleGrad<F> {
    factor: F,
}

impl<F: Scalar> GradFn<F> for ScaleGrad<F> {
    fn backward(&self, g: &ArrayD<F>, _p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        vec![Some(g.mapv(|v| v * self.factor))]
    }
}

struct SumAllGrad;

impl<F: Scalar> GradFn<F> for SumAllGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let gv = g[IxDyn(&[])];
        vec![Some(ArrayD::from_elem(p[0].value().raw_dim(), gv))]
    }
}

struct SumSqGrad;

impl<F: Scalar> GradFn<F> for SumSqGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let gv = g[IxDyn(&[])];
        vec![Some(p[0].value().mapv(|x| sc::<F>(2.0) * x * gv))]
    }
}

macro_rules! unary_grad {
    ($name:ident, $df:expr) => {
        struct $name<F> {
            _marker: std::marker::PhantomData<F>,
        }
        impl<F: Scalar> GradFn<F> for $name<F> {
            fn backward(
                &self,
                g: &ArrayD<F>,
                p: &[Tensor<F>],
                o: &ArrayD<F>,
            ) -> Vec<Option<ArrayD<F>>> {
                let df: fn(F, F) -> F = $df;
                let mut out = ArrayD::zeros(g.raw_dim());
                ndarray::Zip::from(&mut out)
                    .and(g)
                    .and(p[0].value())
                    .and(o)
                    .for_each(|out, &g, &x, &y| *out = g * df(x, y));
                vec![Some(out)]
            }
        }
    };
}

unary_grad!(ExpGrad, |_x, y| y);
unary_grad!(SigmoidGrad, |_x, y| y * (F::one() - y));
unary_grad!(SoftplusGrad, |x, _y| sigmoid_scalar(x));
unary_grad!(SiluGrad, |x, _y| {
    let s = sigmoid_scalar(x);
    s * (F::one() + x * (F::one() - s))
});

struct NegGrad;

impl<F: Scalar> GradFn<F> for NegGrad {
    fn backward(&self, g: &ArrayD<F>, _p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        vec![Some(g.mapv(|v| -v))]
    }
}

struct LeakyReluGrad<F> {
    slope: F,
}

impl<F: Scalar> GradFn<F> for LeakyReluGrad<F> {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let slope = self.slope;
        let mut out = g.clone();
        ndarray::Zip::from(&mut out).and(p[0].value()).for_each(|out, &x| {
            if x <= F::zero() {
                *out = *out * slope;
            }
        });
        vec![Some(out)]
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Split on sign to avoid overflow in exp.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar<F: Scalar>(x: F) -> F {
    let cap = sc::<F>(30.0);
    if x > cap {
        x
    } else if x < -cap {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn scale(&self, factor: F) -> Tensor<F> {
        let value = self.value().mapv(|v| v * factor);
        Tensor::from_op(value, vec![self.clone()], Box::new(ScaleGrad { factor }))
    }

    pub fn neg(&self) -> Tensor<F> {
        let value = self.value().mapv(|v| -v);
        Tensor::from_op(value, vec![self.clone()], Box::new(NegGrad))
    }

    pub fn exp(&self) -> Tensor<F> {
        let value = self.value().mapv(F::exp);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(ExpGrad { _marker: std::marker::PhantomData }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let value = self.value().mapv(sigmoid_scalar);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(SigmoidGrad { _marker: std::marker::PhantomData }),
        )
    }

    pub fn silu(&self) -> Tensor<F> {
        let value = self.value().mapv(|x| x * sigmoid_scalar(x));
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(SiluGrad { _marker: std::marker::PhantomData }),
        )
    }

    pub fn softplus(&self) -> Tensor<F> {
        let value = self.value().mapv(softplus_scalar);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(SoftplusGrad { _marker: std::marker::PhantomData }),
        )
    }

    pub fn leaky_relu(&self, slope: F) -> Tensor<F> {
        let value = self
            .value()
            .mapv(|x| if x > F::zero() { x } else { x * slope });
        Tensor::from_op(value, vec![self.clone()], Box::new(LeakyReluGrad { slope }))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::from_op(value, vec![self.clone()], Box::new(SumAllGrad))
    }

    /// Sum of squared elements; handy loss for gradient checks.
    pub fn sum_sq(&self) -> Tensor<F> {
        let s = self.value().iter().map(|&v| v * v).sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        Tensor::from_op(value, vec![self.clone()], Box::new(SumSqGrad))
    }
}

struct ConcatGrad {
    sizes: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for ConcatGrad {
    fn backward(&self, g: &ArrayD<F>, p: &[Tensor<F>], _o: &ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        let mut out = Vec::with_capacity(p.len());
        let mut start = 0isize;
        for (i, &sz) in self.sizes.iter().enumerate() {
            let end = start + sz as isize;
            if p[i].requires_grad() {
                let piece = g
                    .slice_axis(Axis(0), Slice::new(start, Some(end), 1))
                    .to_owned();
                out.push(Some(piece));
            } else {
                out.push(None);
            }
            start = end;
        }
        out
    }
}

/// Concatenate `(C_i, H, W)` maps along the channel axis.
pub fn concat_channels<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    assert!(!parts.is_empty(), "concat_channels: empty input");
    let hw = &parts[0].shape()[1..];
    let mut sizes = Vec::with_capacity(parts.len());
    for p in parts {
        assert_eq!(&p.shape()[1..], hw, "concat_channels: spatial mismatch");
        sizes.push(p.shape()[0]);
    }
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = ndarray::concatenate(Axis(0), &views).expect("concat shapes");
    Tensor::from_op(value, parts.to_vec(), Box::new(ConcatGrad { sizes }))
}
