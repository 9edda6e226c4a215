//! The two-stage segmentation network: HPB encoder with strided
//! downsampling, residual decoder with skip connections and deep-supervision
//! heads, decoder-feature aggregation, uncertainty modulation and the
//! refinement decoder.

use crate::blocks::{Conv2dM, DsMambaConfig, Hpb, ResBlock, TransConvM};
use crate::config::{ModelConfig, ThresholdConfig};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::refine::{self, StagePipelineOutput};
use crate::tensor::{
    bilinear_resize, bilinear_resize_2d, concat_channels, mul_channel_broadcast, sc, Scalar,
    Tensor,
};
use ndarray::{Array2, Array3, Ix3};
use rand::Rng;

struct EncLevel {
    hpb: Hpb,
    down: Conv2dM,
}

struct DecLevel {
    up: TransConvM,
    res1: ResBlock,
    res2: ResBlock,
}

/// One decoder tower; the stage-two refiner instantiates a second one with
/// the same architecture and independent parameters.
struct DecoderStack {
    /// Levels ordered deepest first (level `L` .. level `1`).
    levels: Vec<DecLevel>,
}

impl DecoderStack {
    fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let l_max = cfg.levels;
        let mut levels = Vec::with_capacity(l_max);
        for l in (1..=l_max).rev() {
            let in_ch = if l == l_max { cfg.channels(l) } else { 2 * cfg.channels(l) };
            let skip_ch = cfg.channels(l - 1);
            let up = TransConvM::new(ps, rng, &format!("{prefix}.l{l}.up"), in_ch, skip_ch);
            let res1 = ResBlock::new(ps, rng, &format!("{prefix}.l{l}.res1"), 2 * skip_ch);
            let res2 = ResBlock::new(ps, rng, &format!("{prefix}.l{l}.res2"), 2 * skip_ch);
            levels.push(DecLevel { up, res1, res2 });
        }
        DecoderStack { levels }
    }

    /// Returns `F_dec^1 .. F_dec^L` (finest first).
    fn forward<F: Scalar>(
        &self,
        bn: &Bindings<F>,
        bottleneck: &Tensor<F>,
        skips: &[Tensor<F>],
    ) -> Result<Vec<Tensor<F>>> {
        let l_max = self.levels.len();
        if skips.len() != l_max {
            return Err(Error::Shape(format!(
                "decoder expects {l_max} skip levels, got {}",
                skips.len()
            )));
        }
        let mut f = bottleneck.clone();
        let mut out = Vec::with_capacity(l_max);
        for (i, level) in self.levels.iter().enumerate() {
            let l = l_max - i; // spec level index
            let up = level.up.forward(bn, &f);
            let skip = &skips[l - 1];
            if up.shape()[1..] != skip.shape()[1..] {
                return Err(Error::Shape(format!(
                    "upsampled feature {:?} does not match skip {:?} at level {l}",
                    up.shape(),
                    skip.shape()
                )));
            }
            let cat = concat_channels(&[up, skip.clone()]);
            f = level.res2.forward(bn, &level.res1.forward(bn, &cat)?)?;
            out.push(f.clone());
        }
        out.reverse();
        Ok(out)
    }
}

/// Feature pyramid produced by the encoder: per-level pre-downsampling HPB
/// outputs (skips) and the bottleneck.
pub struct FeaturePyramid<F: Scalar> {
    pub skips: Vec<Tensor<F>>,
    pub bottleneck: Tensor<F>,
}

/// Stage-one outputs: coarse probability map, per-level auxiliary maps and
/// decoder features.
pub struct StageOneOutput<F: Scalar> {
    pub p_c: Tensor<F>,
    pub aux: Vec<Tensor<F>>,
    pub f_dec: Vec<Tensor<F>>,
}

/// Outputs needed to assemble the training loss.
pub struct TwoStageOutput<F: Scalar> {
    pub stage_one: StageOneOutput<F>,
    pub p_r: Tensor<F>,
    /// Uncertainty map used for modulation (detached).
    pub u: Array2<F>,
}

pub struct CloudMambaNet {
    pub cfg: ModelConfig,
    init_conv: Conv2dM,
    enc: Vec<EncLevel>,
    decoder: DecoderStack,
    aux_heads: Vec<Conv2dM>,
    coarse_head: Conv2dM,
    agg: Conv2dM,
    refiner: DecoderStack,
    refine_head: Conv2dM,
}

impl CloudMambaNet {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let init_conv = Conv2dM::new(ps, rng, "init_conv", cfg.in_bands, cfg.channels(0), 3, 1, 1, 1);
        let mut enc = Vec::with_capacity(cfg.levels);
        for l in 1..=cfg.levels {
            let ch = cfg.channels(l - 1);
            let hpb = Hpb::new(
                ps,
                rng,
                &format!("enc.l{l}.hpb"),
                DsMambaConfig { channels: ch, dilations: cfg.dilations, variant: cfg.variant },
                cfg.state_dim,
            )?;
            let down = Conv2dM::new(
                ps,
                rng,
                &format!("enc.l{l}.down"),
                ch,
                cfg.channels(l),
                3,
                2,
                1,
                1,
            );
            enc.push(EncLevel { hpb, down });
        }
        let decoder = DecoderStack::new(ps, rng, "dec", cfg);
        let aux_heads = (1..=cfg.levels)
            .map(|l| {
                Conv2dM::new(ps, rng, &format!("aux_head.l{l}"), 2 * cfg.channels(l - 1), 1, 1, 1, 1, 0)
            })
            .collect();
        let coarse_head = Conv2dM::new(ps, rng, "coarse_head", 2 * cfg.channels(0), 1, 1, 1, 1, 0);
        let agg_in: usize = (1..=cfg.levels).map(|l| 2 * cfg.channels(l - 1)).sum();
        let agg = Conv2dM::new(ps, rng, "agg", agg_in, cfg.channels(cfg.levels), 1, 1, 1, 0);
        let refiner = DecoderStack::new(ps, rng, "ref", cfg);
        let refine_head = Conv2dM::new(ps, rng, "refine_head", 2 * cfg.channels(0), 1, 1, 1, 1, 0);
        Ok(CloudMambaNet {
            cfg: cfg.clone(),
            init_conv,
            enc,
            decoder,
            aux_heads,
            coarse_head,
            agg,
            refiner,
            refine_head,
        })
    }

    /// Build a freshly initialized network with its parameter store.
    pub fn init<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<F>, Self)> {
        use rand::SeedableRng;
        let mut ps = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let net = CloudMambaNet::new(&mut ps, &mut rng, cfg)?;
        Ok((ps, net))
    }

    fn check_input<F: Scalar>(&self, x: &Tensor<F>) -> Result<()> {
        let sh = x.shape();
        if sh.len() != 3 || sh[0] != self.cfg.in_bands {
            return Err(Error::Shape(format!(
                "input must be ({}, H, W), got {:?}",
                self.cfg.in_bands, sh
            )));
        }
        let mult = self.cfg.required_multiple();
        if sh[1] % mult != 0 || sh[2] % mult != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^levels = {mult}",
                sh[1], sh[2]
            )));
        }
        Ok(())
    }

    /// Encoder: initial conv, then HPB + strided downsampling per level.
    pub fn encode<F: Scalar>(&self, bn: &Bindings<F>, x: &Tensor<F>) -> Result<FeaturePyramid<F>> {
        self.check_input(x)?;
        let mut f = self.init_conv.forward(bn, x);
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for level in &self.enc {
            let s = level.hpb.forward(bn, &f)?;
            f = level.down.forward(bn, &s);
            skips.push(s);
        }
        Ok(FeaturePyramid { skips, bottleneck: f })
    }

    /// Stage-one decoder with deep-supervision heads.
    pub fn decode<F: Scalar>(
        &self,
        bn: &Bindings<F>,
        pyramid: &FeaturePyramid<F>,
    ) -> Result<StageOneOutput<F>> {
        let f_dec = self
            .decoder
            .forward(bn, &pyramid.bottleneck, &pyramid.skips)?;
        let p_c = self.coarse_head.forward(bn, &f_dec[0]).sigmoid();
        let aux = f_dec
            .iter()
            .zip(&self.aux_heads)
            .map(|(f, head)| head.forward(bn, f).sigmoid())
            .collect();
        Ok(StageOneOutput { p_c, aux, f_dec })
    }

    /// Bilinearly shrink every decoder feature to the bottleneck resolution,
    /// concatenate and remap to the bottleneck channel count.
    pub fn aggregate_decoder_features<F: Scalar>(
        &self,
        bn: &Bindings<F>,
        f_dec: &[Tensor<F>],
    ) -> Result<Tensor<F>> {
        if f_dec.is_empty() {
            return Err(Error::Shape("no decoder features to aggregate".into()));
        }
        let deepest = &f_dec[f_dec.len() - 1];
        let (h, w) = (deepest.shape()[1] / 2, deepest.shape()[2] / 2);
        let resized: Vec<_> = f_dec.iter().map(|f| bilinear_resize(f, h, w)).collect();
        Ok(self.agg.forward(bn, &concat_channels(&resized)))
    }

    /// Stage-two decoder over uncertainty-modulated features.
    pub fn refine<F: Scalar>(
        &self,
        bn: &Bindings<F>,
        f_agg_mod: &Tensor<F>,
        skips_mod: &[Tensor<F>],
    ) -> Result<Tensor<F>> {
        let f_ref = self.refiner.forward(bn, f_agg_mod, skips_mod)?;
        Ok(self.refine_head.forward(bn, &f_ref[0]).sigmoid())
    }

    /// Full two-stage forward. The uncertainty map acts as a constant gain:
    /// gradients do not flow through it back into the coarse head.
    pub fn forward_two_stage<F: Scalar>(
        &self,
        bn: &Bindings<F>,
        x: &Tensor<F>,
    ) -> Result<TwoStageOutput<F>> {
        let pyramid = self.encode(bn, x)?;
        let stage_one = self.decode(bn, &pyramid)?;
        let f_agg = self.aggregate_decoder_features(bn, &stage_one.f_dec)?;

        let p_c_map = map_2d(stage_one.p_c.value().view());
        let u = refine::uncertainty_map(&p_c_map)?;

        let mut skips_mod = Vec::with_capacity(pyramid.skips.len());
        for s in &pyramid.skips {
            let (h, w) = (s.shape()[1], s.shape()[2]);
            let u_l = bilinear_resize_2d(&u, h, w);
            let gain = Tensor::constant(u_l.into_dyn());
            skips_mod.push(mul_channel_broadcast(s, &gain));
        }
        let (h_b, w_b) = (f_agg.shape()[1], f_agg.shape()[2]);
        let u_b = bilinear_resize_2d(&u, h_b, w_b);
        let f_agg_mod = mul_channel_broadcast(&f_agg, &Tensor::constant(u_b.into_dyn()));

        let p_r = self.refine(bn, &f_agg_mod, &skips_mod)?;
        Ok(TwoStageOutput { stage_one, p_r, u })
    }

    /// Stage one only (coarse probability map), tape-free when bound
    /// non-trainable.
    pub fn forward_coarse<F: Scalar>(
        &self,
        bn: &Bindings<F>,
        x: &Tensor<F>,
    ) -> Result<StageOneOutput<F>> {
        let pyramid = self.encode(bn, x)?;
        self.decode(bn, &pyramid)
    }

    /// Inference: the full pipeline bundle for one `(C_in, H, W)` input.
    pub fn forward_full<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array3<F>,
        thr: &ThresholdConfig,
    ) -> Result<StagePipelineOutput<F>> {
        thr.validate()?;
        let bn = ps.bind(false);
        let out = self.forward_two_stage(&bn, &Tensor::constant(x.clone().into_dyn()))?;
        let p_c = map_2d(out.stage_one.p_c.value().view());
        let p_r = map_2d(out.p_r.value().view());
        let u = out.u;
        let m = refine::acceptance_mask(&u, sc(thr.gamma));
        let y_c = refine::binarize(&p_c, sc(thr.tau_c));
        let y_r = refine::binarize(&p_r, sc(thr.tau_r));
        let y = refine::fuse_masks(&m, &y_c, &y_r)?;
        Ok(StagePipelineOutput { p_c, u, m, p_r, y_c, y_r, y })
    }

    /// Inference over a batch; each sample is an independent forward pass,
    /// evaluated in parallel and returned in input order.
    pub fn forward_full_batch<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        xs: &[Array3<F>],
        thr: &ThresholdConfig,
    ) -> Result<Vec<StagePipelineOutput<F>>> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.forward_full(ps, x, thr)).collect()
    }
}

/// View a `(1, H, W)` head output as an `(H, W)` map.
pub fn map_2d<F: Scalar>(v: ndarray::ArrayViewD<'_, F>) -> Array2<F> {
    let v3 = v.into_dimensionality::<Ix3>().expect("(1,H,W) map");
    debug_assert_eq!(v3.dim().0, 1);
    let (_, h, w) = v3.dim();
    v3.into_shape_with_order((h, w)).expect("contiguous").to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn desk_cfg() -> ModelConfig {
        ModelConfig { levels: 3, base_channels: 4, state_dim: 4, ..ModelConfig::default() }
    }

    fn rand_input<F: Scalar>(c: usize, h: usize, w: usize, seed: u64) -> Array3<F> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| sc::<F>(rng.random_range(0.0..1.0)))
    }

    #[test]
    fn encoder_resolutions_and_bottleneck() {
        let cfg = desk_cfg();
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 0).unwrap();
        let bn = ps.bind(false);
        let x = Tensor::constant(rand_input::<f32>(4, 64, 64, 1).into_dyn());
        let pyr = net.encode(&bn, &x).unwrap();
        assert_eq!(pyr.skips[0].shape(), &[4, 64, 64]);
        assert_eq!(pyr.skips[1].shape(), &[8, 32, 32]);
        assert_eq!(pyr.skips[2].shape(), &[16, 16, 16]);
        assert_eq!(pyr.bottleneck.shape(), &[32, 8, 8]);
    }

    #[test]
    fn single_level_network() {
        let cfg = ModelConfig { levels: 1, base_channels: 4, state_dim: 4, ..ModelConfig::default() };
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 0).unwrap();
        let bn = ps.bind(false);
        let x = Tensor::constant(rand_input::<f32>(4, 8, 8, 2).into_dyn());
        let out = net.forward_coarse(&bn, &x).unwrap();
        assert_eq!(out.p_c.shape(), &[1, 8, 8]);
        assert_eq!(out.aux.len(), 1);
    }

    #[test]
    fn indivisible_input_names_required_multiple() {
        let cfg = desk_cfg();
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 0).unwrap();
        let bn = ps.bind(false);
        let x = Tensor::constant(rand_input::<f32>(4, 60, 64, 3).into_dyn());
        match net.encode(&bn, &x) {
            Err(Error::Config(msg)) => assert!(msg.contains("8"), "{msg}"),
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error"),
        }
    }

    #[test]
    fn aux_resolutions_follow_levels() {
        let cfg = desk_cfg();
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 0).unwrap();
        let bn = ps.bind(false);
        let x = Tensor::constant(rand_input::<f32>(4, 64, 64, 4).into_dyn());
        let out = net.forward_coarse(&bn, &x).unwrap();
        assert_eq!(out.p_c.shape(), &[1, 64, 64]);
        assert_eq!(out.aux[0].shape(), &[1, 64, 64]);
        assert_eq!(out.aux[1].shape(), &[1, 32, 32]);
        assert_eq!(out.aux[2].shape(), &[1, 16, 16]);
    }

    #[test]
    fn probability_range_and_zero_head() {
        let cfg = desk_cfg();
        let (mut ps, net) = CloudMambaNet::init::<f32>(&cfg, 0).unwrap();
        // zero the coarse head -> sigmoid(0) = 0.5 everywhere
        ps.value_mut(net.coarse_head.w).fill(0.0);
        ps.value_mut(net.coarse_head.b).fill(0.0);
        let bn = ps.bind(false);
        let x = Tensor::constant(rand_input::<f32>(4, 32, 32, 5).into_dyn());
        let out = net.forward_coarse(&bn, &x).unwrap();
        assert!(out.p_c.value().iter().all(|&v| v == 0.5));
        for a in &out.aux {
            assert!(a.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn full_pipeline_shapes_and_fusion_identity() {
        let cfg = desk_cfg();
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 7).unwrap();
        let x = rand_input::<f32>(4, 32, 32, 8);
        let out = net
            .forward_full(&ps, &x, &ThresholdConfig::default())
            .unwrap();
        assert_eq!(out.p_c.dim(), (32, 32));
        assert_eq!(out.p_r.dim(), (32, 32));
        // wherever M = 1 the fused mask equals the coarse mask
        for ((&m, &y), &yc) in out.m.iter().zip(out.y.iter()).zip(out.y_c.iter()) {
            if m == 1 {
                assert_eq!(y, yc);
            }
        }
    }

    #[test]
    fn batch_equals_loop_exactly() {
        let cfg = desk_cfg();
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 9).unwrap();
        let thr = ThresholdConfig::default();
        let xs: Vec<_> = (0..3).map(|i| rand_input::<f32>(4, 16, 16, 100 + i)).collect();
        let batch = net.forward_full_batch(&ps, &xs, &thr).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            let single = net.forward_full(&ps, x, &thr).unwrap();
            assert_eq!(single.p_c, b.p_c);
            assert_eq!(single.y, b.y);
        }
    }

    #[test]
    fn deterministic_forward() {
        let cfg = desk_cfg();
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 10).unwrap();
        let x = rand_input::<f32>(4, 16, 16, 11);
        let thr = ThresholdConfig::default();
        let a = net.forward_full(&ps, &x, &thr).unwrap();
        let b = net.forward_full(&ps, &x, &thr).unwrap();
        assert_eq!(a.p_c, b.p_c);
        assert_eq!(a.p_r, b.p_r);
    }

    #[test]
    fn refiner_parameters_independent_of_decoder() {
        let cfg = desk_cfg();
        let (mut ps, net) = CloudMambaNet::init::<f32>(&cfg, 12).unwrap();
        let x = rand_input::<f32>(4, 16, 16, 13);
        let thr = ThresholdConfig::default();
        let before = net.forward_full(&ps, &x, &thr).unwrap();
        // perturb a refiner parameter: coarse output must be untouched
        let refiner_id = ps
            .ids()
            .find(|&id| ps.name(id).starts_with("ref."))
            .unwrap();
        ps.value_mut(refiner_id).mapv_inplace(|v| v + 0.1);
        let after = net.forward_full(&ps, &x, &thr).unwrap();
        assert_eq!(before.p_c, after.p_c);
        assert_ne!(before.p_r, after.p_r);
    }

    #[test]
    fn aggregation_channel_accounting() {
        let cfg = desk_cfg();
        let (ps, net) = CloudMambaNet::init::<f32>(&cfg, 14).unwrap();
        let bn = ps.bind(false);
        let x = Tensor::constant(rand_input::<f32>(4, 64, 64, 15).into_dyn());
        let pyr = net.encode(&bn, &x).unwrap();
        let s1 = net.decode(&bn, &pyr).unwrap();
        // dec channels: 2*(4+8+16) = 56 concat -> bottleneck channels 32 at 8x8
        let agg = net.aggregate_decoder_features(&bn, &s1.f_dec).unwrap();
        assert_eq!(agg.shape(), &[32, 8, 8]);
    }
}
