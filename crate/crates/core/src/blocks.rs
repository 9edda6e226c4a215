//! Network building blocks: residual conv block, gated Mamba block with
//! SS2D, the dual-scale Mamba block, and the CNN-SSM hybrid perception
//! block (HPB) that forms one encoder stage.

use crate::error::{Error, Result};
use crate::params::{kaiming, ones, zeros, Bindings, ParamId, ParamStore};
use crate::tensor::{
    concat_channels, conv2d, conv_transpose2d_k2s2, cross_merge4, cross_scan_dir,
    depthwise_conv3x3, layer_norm_channels, linear_seq, sc, selective_scan_op, ConvSpec, Scalar,
    Tensor,
};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LN_EPS: f64 = 1e-5;
/// Mamba-block inner expansion factor.
pub const EXPANSION: usize = 2;
const DT_MIN: f64 = 0.03;
const DT_MAX: f64 = 0.1;

/// Dual-scale Mamba configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DsVariant {
    /// Branches concatenated before one shared Mamba block.
    Fused,
    /// Each branch through its own Mamba block, fused afterwards.
    Separate,
}

#[derive(Clone, Copy, Debug)]
pub struct DsMambaConfig {
    pub channels: usize,
    pub dilations: (usize, usize, usize),
    pub variant: DsVariant,
}

impl DsMambaConfig {
    pub fn validate(&self) -> Result<()> {
        let (d1, d2, d3) = self.dilations;
        if d1 == 0 || d1 > d2 || d2 > d3 {
            return Err(Error::InvalidParameter(format!(
                "dilations must satisfy 1 <= d1 <= d2 <= d3, got ({d1},{d2},{d3})"
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidParameter("channels must be positive".into()));
        }
        Ok(())
    }
}

pub struct Conv2dM {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2dM {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = ps.add(
            format!("{prefix}.w"),
            kaiming(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let b = ps.add(format!("{prefix}.b"), zeros(&[out_ch]));
        Conv2dM {
            w,
            b,
            spec: ConvSpec { kernel, stride, dilation, padding },
            in_ch,
            out_ch,
        }
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Tensor<F> {
        conv2d(x, &bn.get(self.w), &bn.get(self.b), self.spec)
    }
}

pub struct TransConvM {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl TransConvM {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let w = ps.add(
            format!("{prefix}.w"),
            kaiming(rng, &[in_ch, out_ch, 2, 2], in_ch * 4),
        );
        let b = ps.add(format!("{prefix}.b"), zeros(&[out_ch]));
        TransConvM { w, b, in_ch, out_ch }
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Tensor<F> {
        conv_transpose2d_k2s2(x, &bn.get(self.w), &bn.get(self.b))
    }
}

pub struct LayerNormM {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub ch: usize,
}

impl LayerNormM {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, prefix: &str, ch: usize) -> Self {
        let gamma = ps.add(format!("{prefix}.gamma"), ones(&[ch]));
        let beta = ps.add(format!("{prefix}.beta"), zeros(&[ch]));
        LayerNormM { gamma, beta, ch }
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Tensor<F> {
        layer_norm_channels(x, &bn.get(self.gamma), &bn.get(self.beta), sc(LN_EPS))
    }
}

pub struct DwConvM {
    pub w: ParamId,
    pub b: ParamId,
    pub ch: usize,
}

impl DwConvM {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        ch: usize,
    ) -> Self {
        let w = ps.add(format!("{prefix}.w"), kaiming(rng, &[ch, 3, 3], 9));
        let b = ps.add(format!("{prefix}.b"), zeros(&[ch]));
        DwConvM { w, b, ch }
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Tensor<F> {
        depthwise_conv3x3(x, &bn.get(self.w), &bn.get(self.b))
    }
}

/// Residual conv block: `x + LeakyReLU(LN(Conv3x3(x)))`.
pub struct ResBlock {
    pub conv: Conv2dM,
    pub ln: LayerNormM,
    pub ch: usize,
}

impl ResBlock {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        ch: usize,
    ) -> Self {
        let conv = Conv2dM::new(ps, rng, &format!("{prefix}.conv"), ch, ch, 3, 1, 1, 1);
        let ln = LayerNormM::new(ps, &format!("{prefix}.ln"), ch);
        ResBlock { conv, ln, ch }
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.shape()[0] != self.ch {
            return Err(Error::Shape(format!(
                "res_block expects {} channels, got {}",
                self.ch,
                x.shape()[0]
            )));
        }
        let f = self.conv.forward(bn, x);
        let f = self.ln.forward(bn, &f);
        let f = f.leaky_relu(sc(LEAKY_SLOPE));
        Ok(crate::tensor::add(x, &f))
    }
}

/// One S6 head: per-direction selective-scan parameters.
///
/// `A` is stored as `a_log` with `A = -exp(a_log)`, which keeps the state
/// matrix strictly negative under any gradient update.
pub struct S6Head {
    pub a_log: ParamId,
    pub delta_w: ParamId,
    pub delta_b: ParamId,
    pub b_w: ParamId,
    pub c_w: ParamId,
    pub dim: usize,
    pub state_dim: usize,
}

impl S6Head {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        state_dim: usize,
    ) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        // A[d,n] = -(n+1)  =>  a_log[d,n] = ln(n+1)
        let a_log = Array2::<F>::from_shape_fn((dim, state_dim), |(_, n)| {
            sc::<F>(((n + 1) as f64).ln())
        });
        let a_log = ps.add(format!("{prefix}.a_log"), a_log.into_dyn());
        let proj_std = (1.0 / dim as f64).sqrt();
        let delta_w = Array2::<F>::from_shape_fn((dim, dim), |_| {
            let z: f64 = StandardNormal.sample(rng);
            sc::<F>(z * 0.01 * proj_std)
        });
        let delta_w = ps.add(format!("{prefix}.delta_w"), delta_w.into_dyn());
        let mut delta_b = Array1::<F>::zeros(dim);
        for v in delta_b.iter_mut() {
            let dt = rng.random_range(DT_MIN.ln()..DT_MAX.ln()).exp();
            *v = sc::<F>((dt.exp() - 1.0).ln()); // softplus(bias) == dt
        }
        let delta_b = ps.add(format!("{prefix}.delta_b"), delta_b.into_dyn());
        let mut proj = |name: &str| {
            let w = Array2::<F>::from_shape_fn((state_dim, dim), |_| {
                let z: f64 = StandardNormal.sample(rng);
                sc::<F>(z * proj_std)
            });
            ps.add(format!("{prefix}.{name}"), w.into_dyn())
        };
        let b_w = proj("b_w");
        let c_w = proj("c_w");
        S6Head { a_log, delta_w, delta_b, b_w, c_w, dim, state_dim }
    }

    /// Scan one `(L, D)` sequence through this head.
    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, u: &Tensor<F>) -> Tensor<F> {
        let delta = linear_seq(u, &bn.get(self.delta_w), Some(&bn.get(self.delta_b))).softplus();
        let b = linear_seq(u, &bn.get(self.b_w), None);
        let c = linear_seq(u, &bn.get(self.c_w), None);
        let a = bn.get(self.a_log).exp().neg();
        selective_scan_op(u, &delta, &b, &c, &a)
    }

    /// Snapshot as array-level scan parameters (for oracle comparisons).
    pub fn to_ssm_params<F: Scalar>(&self, ps: &ParamStore<F>) -> crate::ssm::SsmParams<F> {
        let get2 = |id: ParamId| {
            ps.value(id)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        crate::ssm::SsmParams {
            a: get2(self.a_log).mapv(|v| -v.exp()),
            delta_w: get2(self.delta_w),
            delta_b: ps
                .value(self.delta_b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
            b_w: get2(self.b_w),
            c_w: get2(self.c_w),
        }
    }
}

/// SS2D: cross-scan, one independent S6 head per direction, cross-merge.
pub struct Ss2dM {
    pub heads: [S6Head; 4],
    pub dim: usize,
}

impl Ss2dM {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        state_dim: usize,
    ) -> Self {
        let heads = [0, 1, 2, 3]
            .map(|d| S6Head::new(ps, rng, &format!("{prefix}.dir{d}"), dim, state_dim));
        Ss2dM { heads, dim }
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Tensor<F> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let scanned = [0, 1, 2, 3].map(|dir| {
            let seq = cross_scan_dir(x, dir);
            self.heads[dir].forward(bn, &seq)
        });
        cross_merge4(&scanned, h, w)
    }
}

/// Gated Mamba block:
/// `LinearOut( LN(SS2D(SiLU(DWConv(LinearMain(LN(x)))))) ⊙ SiLU(LinearGate(LN(x))) )`.
pub struct MambaBlock {
    pub ln_in: LayerNormM,
    pub main: Conv2dM, // 1x1, C -> E
    pub gate: Conv2dM, // 1x1, C -> E
    pub dw: DwConvM,
    pub ss2d: Ss2dM,
    pub ln_post: LayerNormM,
    pub out: Conv2dM, // 1x1, E -> C
    pub ch: usize,
}

impl MambaBlock {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        ch: usize,
        state_dim: usize,
    ) -> Self {
        let e = EXPANSION * ch;
        let ln_in = LayerNormM::new(ps, &format!("{prefix}.ln_in"), ch);
        let main = Conv2dM::new(ps, rng, &format!("{prefix}.main"), ch, e, 1, 1, 1, 0);
        let gate = Conv2dM::new(ps, rng, &format!("{prefix}.gate"), ch, e, 1, 1, 1, 0);
        let dw = DwConvM::new(ps, rng, &format!("{prefix}.dw"), e);
        let ss2d = Ss2dM::new(ps, rng, &format!("{prefix}.ss2d"), e, state_dim);
        let ln_post = LayerNormM::new(ps, &format!("{prefix}.ln_post"), e);
        let out = Conv2dM::new(ps, rng, &format!("{prefix}.out"), e, ch, 1, 1, 1, 0);
        MambaBlock { ln_in, main, gate, dw, ss2d, ln_post, out, ch }
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.shape()[0] != self.ch {
            return Err(Error::Shape(format!(
                "mamba_block expects {} channels, got {}",
                self.ch,
                x.shape()[0]
            )));
        }
        let h = self.ln_in.forward(bn, x);
        let m = self.dw.forward(bn, &self.main.forward(bn, &h)).silu();
        let m = self.ss2d.forward(bn, &m);
        let m = self.ln_post.forward(bn, &m);
        let g = self.gate.forward(bn, &h).silu();
        Ok(self.out.forward(bn, &crate::tensor::mul(&m, &g)))
    }
}

/// Dual-scale Mamba block (fused by default, separate per-branch variant for
/// the ablation).
pub struct DsMamba {
    pub cfg: DsMambaConfig,
    pub dil_convs: [Conv2dM; 3],
    pub reduce: Conv2dM, // 1x1, 3C -> C
    pub body: DsMambaBody,
    pub out: Conv2dM, // 1x1, 2C -> C
}

pub enum DsMambaBody {
    Fused(MambaBlock),                 // on 2C channels
    Separate(MambaBlock, MambaBlock),  // on C channels each
}

impl DsMamba {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        cfg: DsMambaConfig,
        state_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let dils = [cfg.dilations.0, cfg.dilations.1, cfg.dilations.2];
        let dil_convs = [0, 1, 2].map(|i| {
            Conv2dM::new(
                ps,
                rng,
                &format!("{prefix}.dil{i}"),
                c,
                c,
                3,
                1,
                dils[i],
                dils[i],
            )
        });
        let reduce = Conv2dM::new(ps, rng, &format!("{prefix}.reduce"), 3 * c, c, 1, 1, 1, 0);
        let body = match cfg.variant {
            DsVariant::Fused => DsMambaBody::Fused(MambaBlock::new(
                ps,
                rng,
                &format!("{prefix}.mamba"),
                2 * c,
                state_dim,
            )),
            DsVariant::Separate => DsMambaBody::Separate(
                MambaBlock::new(ps, rng, &format!("{prefix}.mamba_small"), c, state_dim),
                MambaBlock::new(ps, rng, &format!("{prefix}.mamba_large"), c, state_dim),
            ),
        };
        let out = Conv2dM::new(ps, rng, &format!("{prefix}.out"), 2 * c, c, 1, 1, 1, 0);
        Ok(DsMamba { cfg, dil_convs, reduce, body, out })
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let c = self.cfg.channels;
        if x.shape()[0] != c {
            return Err(Error::Shape(format!(
                "dual_scale_mamba expects {c} channels, got {}",
                x.shape()[0]
            )));
        }
        let small = x.clone();
        let branches: Vec<_> = self.dil_convs.iter().map(|cv| cv.forward(bn, x)).collect();
        let large = self.reduce.forward(bn, &concat_channels(&branches));
        let fused = match &self.body {
            DsMambaBody::Fused(mamba) => {
                mamba.forward(bn, &concat_channels(&[small, large]))?
            }
            DsMambaBody::Separate(m_small, m_large) => {
                let ys = m_small.forward(bn, &small)?;
                let yl = m_large.forward(bn, &large)?;
                concat_channels(&[ys, yl])
            }
        };
        Ok(crate::tensor::add(x, &self.out.forward(bn, &fused)))
    }
}

/// CNN-SSM hybrid perception block: two residual conv blocks, then DS-Mamba.
pub struct Hpb {
    pub res1: ResBlock,
    pub res2: ResBlock,
    pub ds: DsMamba,
}

impl Hpb {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        cfg: DsMambaConfig,
        state_dim: usize,
    ) -> Result<Self> {
        let res1 = ResBlock::new(ps, rng, &format!("{prefix}.res1"), cfg.channels);
        let res2 = ResBlock::new(ps, rng, &format!("{prefix}.res2"), cfg.channels);
        let ds = DsMamba::new(ps, rng, &format!("{prefix}.ds"), cfg, state_dim)?;
        Ok(Hpb { res1, res2, ds })
    }

    pub fn forward<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let f = self.res1.forward(bn, x)?;
        let f = self.res2.forward(bn, &f)?;
        self.ds.forward(bn, &f)
    }
}
