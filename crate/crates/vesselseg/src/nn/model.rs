//! The single-decoder segmentation network and the dual-decoder network
//! with layerwise feature fusion.
//!
//! Both share the encoder layout: `levels` downsampling blocks (two 3x3x3
//! convolutions, each followed by ReLU and GroupNorm, then 2x2x2 max
//! pooling) and a bottleneck block. Decoders mirror the encoder with
//! nearest-neighbor upsampling and encoder skip concatenations. In the
//! dual-decoder network every decoder level ends in a fusion unit per task
//! that concatenates the same-resolution features of both decoders and
//! mixes them with a 1x1x1 convolution, ReLU and GroupNorm; the fused maps
//! feed the next level, so both decoders run at inference.

use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    concat_channels, conv1_fwd, conv3_fwd, group_norm_fwd, maxpool_fwd, relu_fwd, split_channels,
    upsample2_fwd, Feat, GnCache,
};
use super::{ParamGroup, ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::loss::SigmaState;
use crate::rng::rng_from;

const GN_EPS: f64 = 1e-5;

/// Network architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    Ynet,
}

/// How the noise scales of the multi-task loss are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Learned,
    Fixed,
}

/// Initialization of the fusion (1x1x1 mixing) convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NddrInit {
    /// Own-task channels weighted 0.9, other-task 0.1 (default).
    ScaledPassthrough,
    /// Own-task identity, other-task zero; isolates the decoders exactly.
    IdentityPassthrough,
    Random,
}

/// Architecture description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub seg_classes: usize,
    pub base_width: usize,
    /// Number of downsampling blocks in the encoder.
    pub levels: usize,
    pub groupnorm_groups: usize,
    pub nddr_enabled: bool,
    pub nddr_init: NddrInit,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            seg_classes: 2,
            base_width: 32,
            levels: 3,
            groupnorm_groups: 8,
            nddr_enabled: true,
            nddr_init: NddrInit::ScaledPassthrough,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.seg_classes != 2 {
            return Err(Error::Config(
                "binary segmentation is encoded as 2 classes; seg_classes must be 2".into(),
            ));
        }
        if self.groupnorm_groups == 0 || self.base_width % self.groupnorm_groups != 0 {
            return Err(Error::Config(format!(
                "base_width {} must be divisible by groupnorm_groups {}",
                self.base_width, self.groupnorm_groups
            )));
        }
        Ok(())
    }

    /// Spatial divisibility required by the pooling pyramid.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

// ---- layer descriptors ---------------------------------------------------

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct GnLayer {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

/// conv -> ReLU -> GroupNorm
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: ConvLayer,
    gn: GnLayer,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    unit1: ConvUnit,
    unit2: ConvUnit,
}

/// Fusion unit: concat(own, other) -> 1x1x1 conv -> ReLU -> GroupNorm.
#[derive(Debug, Clone)]
struct NddrUnit {
    conv: ConvLayer,
    gn: GnLayer,
}

#[derive(Debug, Clone)]
struct Topo {
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    dec_seg: Vec<ConvBlock>,
    head_seg: ConvLayer,
    dec_trans: Vec<ConvBlock>,
    head_trans: Option<ConvLayer>,
    nddr_seg: Vec<NddrUnit>,
    nddr_trans: Vec<NddrUnit>,
    sigma: Option<(ParamId, ParamId)>,
}

// ---- caches ----------------------------------------------------------------

struct UnitCache<F: Scalar> {
    input: Feat<F>,
    relu_mask: Vec<bool>,
    gn: GnCache<F>,
}

struct BlockCache<F: Scalar> {
    u1: UnitCache<F>,
    u2: UnitCache<F>,
}

struct NddrCache<F: Scalar> {
    input: Feat<F>,
    relu_mask: Vec<bool>,
    gn: GnCache<F>,
}

struct LevelCache<F: Scalar> {
    block_seg: Option<BlockCache<F>>,
    block_trans: Option<BlockCache<F>>,
    nddr_seg: Option<NddrCache<F>>,
    nddr_trans: Option<NddrCache<F>>,
}

/// Everything the backward pass needs from one training forward.
pub struct NetCache<F: Scalar> {
    enc_blocks: Vec<BlockCache<F>>,
    pool_idx: Vec<Vec<u8>>,
    pool_in_dims: Vec<(usize, usize, usize, usize)>,
    bottleneck: Option<BlockCache<F>>,
    levels: Vec<LevelCache<F>>,
    head_seg_input: Option<Feat<F>>,
    head_trans_input: Option<Feat<F>>,
}

/// Network outputs: segmentation logits, plus the translated image for the
/// dual-decoder architecture.
pub struct Outputs<F: Scalar> {
    pub logits: Feat<F>,
    pub translation: Option<Feat<F>>,
}

/// Scalar counts of the parameter decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub decoder_seg: usize,
    pub decoder_trans: usize,
    pub nddr: usize,
    pub heads: usize,
    pub sigmas: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder_seg + self.decoder_trans + self.nddr + self.heads + self.sigmas
    }
}

/// A built network: configuration, parameters and layer wiring.
pub struct Model<F: Scalar> {
    pub config: NetConfig,
    pub arch: Arch,
    pub sigma_mode: SigmaMode,
    pub params: ParamStore<F>,
    topo: Topo,
    /// Fixed noise scales; `None` in learned mode where they live in params.
    fixed_sigma: Option<(f64, f64)>,
    /// Seed the parameters were initialized from (checkpoint provenance).
    pub init_seed: u64,
}

// ---- construction ----------------------------------------------------------

struct Builder<'a, F: Scalar> {
    store: &'a mut ParamStore<F>,
    rng: rand_chacha::ChaCha8Rng,
    groups: usize,
}

impl<F: Scalar> Builder<'_, F> {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> ArrayD<F> {
        let dist = Normal::new(0.0f64, std).expect("positive std");
        let mut arr = ArrayD::zeros(shape);
        for v in arr.iter_mut() {
            *v = F::from_f64(dist.sample(&mut self.rng));
        }
        arr
    }

    fn conv3(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize) -> ConvLayer {
        let fan_in = (cin * 27) as f64;
        let w = self.normal(vec![cout, cin * 27], (2.0 / fan_in).sqrt());
        let w = self.store.add(format!("{name}/weight"), group, w);
        let b = self
            .store
            .add(format!("{name}/bias"), group, ArrayD::zeros(vec![cout]));
        ConvLayer { w, b }
    }

    fn conv1(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize) -> ConvLayer {
        let w = self.normal(vec![cout, cin], (1.0 / cin as f64).sqrt());
        let w = self.store.add(format!("{name}/weight"), group, w);
        let b = self
            .store
            .add(format!("{name}/bias"), group, ArrayD::zeros(vec![cout]));
        ConvLayer { w, b }
    }

    fn gn(&mut self, name: &str, group: ParamGroup, channels: usize) -> GnLayer {
        let gamma =
            self.store
                .add(format!("{name}/gamma"), group, ArrayD::ones(vec![channels]));
        let beta = self
            .store
            .add(format!("{name}/beta"), group, ArrayD::zeros(vec![channels]));
        GnLayer {
            gamma,
            beta,
            groups: self.groups,
        }
    }

    fn block(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize) -> ConvBlock {
        let conv1 = self.conv3(&format!("{name}/conv1"), group, cin, cout);
        let gn1 = self.gn(&format!("{name}/gn1"), group, cout);
        let conv2 = self.conv3(&format!("{name}/conv2"), group, cout, cout);
        let gn2 = self.gn(&format!("{name}/gn2"), group, cout);
        ConvBlock {
            unit1: ConvUnit {
                conv: conv1,
                gn: gn1,
            },
            unit2: ConvUnit {
                conv: conv2,
                gn: gn2,
            },
        }
    }

    fn nddr(&mut self, name: &str, group: ParamGroup, channels: usize, init: NddrInit) -> NddrUnit {
        let w = match init {
            NddrInit::Random => self.normal(
                vec![channels, 2 * channels],
                (1.0 / (2 * channels) as f64).sqrt(),
            ),
            NddrInit::IdentityPassthrough | NddrInit::ScaledPassthrough => {
                let (own, other) = if init == NddrInit::IdentityPassthrough {
                    (1.0, 0.0)
                } else {
                    (0.9, 0.1)
                };
                let mut w = ArrayD::zeros(vec![channels, 2 * channels]);
                for i in 0..channels {
                    w[[i, i]] = F::from_f64(own);
                    w[[i, channels + i]] = F::from_f64(other);
                }
                w
            }
        };
        let w = self.store.add(format!("{name}/conv/weight"), group, w);
        let b = self.store.add(
            format!("{name}/conv/bias"),
            group,
            ArrayD::zeros(vec![channels]),
        );
        let gn = self.gn(&format!("{name}/gn"), group, channels);
        NddrUnit {
            conv: ConvLayer { w, b },
            gn,
        }
    }
}

fn build_encoder<F: Scalar>(b: &mut Builder<F>, cfg: &NetConfig) -> (Vec<ConvBlock>, ConvBlock) {
    let mut enc = Vec::with_capacity(cfg.levels);
    let mut cin = cfg.in_channels;
    for level in 0..cfg.levels {
        let cout = cfg.width(level);
        enc.push(b.block(
            &format!("encoder/block{level}"),
            ParamGroup::Encoder,
            cin,
            cout,
        ));
        cin = cout;
    }
    let bottleneck = b.block(
        "encoder/bottleneck",
        ParamGroup::Encoder,
        cin,
        cfg.width(cfg.levels),
    );
    (enc, bottleneck)
}

/// Input/output channel widths of decoder block `step` (0 = deepest).
fn decoder_dims(cfg: &NetConfig, step: usize) -> (usize, usize) {
    let up_channels = cfg.width(cfg.levels - step);
    let skip_channels = cfg.width(cfg.levels - 1 - step);
    (up_channels + skip_channels, skip_channels)
}

/// Build the single-decoder segmentation network.
pub fn build_unet<F: Scalar>(cfg: &NetConfig, seed: u64) -> Result<Model<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: rng_from(seed, &[0x6e6574]),
        groups: cfg.groupnorm_groups,
    };
    let (enc, bottleneck) = build_encoder(&mut b, cfg);
    let dec_seg = build_decoder(&mut b, cfg, "decoder_seg", ParamGroup::DecoderSeg);
    let head_seg = b.conv1("head_seg", ParamGroup::HeadSeg, cfg.base_width, cfg.seg_classes);
    Ok(Model {
        config: cfg.clone(),
        arch: Arch::Unet,
        sigma_mode: SigmaMode::Learned,
        params: store,
        topo: Topo {
            enc,
            bottleneck,
            dec_seg,
            head_seg,
            dec_trans: Vec::new(),
            head_trans: None,
            nddr_seg: Vec::new(),
            nddr_trans: Vec::new(),
            sigma: None,
        },
        fixed_sigma: None,
        init_seed: seed,
    })
}

fn build_decoder<F: Scalar>(
    b: &mut Builder<F>,
    cfg: &NetConfig,
    prefix: &str,
    group: ParamGroup,
) -> Vec<ConvBlock> {
    (0..cfg.levels)
        .map(|step| {
            let (cin, cout) = decoder_dims(cfg, step);
            b.block(&format!("{prefix}/block{step}"), group, cin, cout)
        })
        .collect()
}

/// Build the dual-decoder network with layerwise fusion. In learned sigma
/// mode the two noise scales join the parameter store as trainable scalars;
/// fixed mode stores them as plain constants instead.
pub fn build_ynet<F: Scalar>(
    cfg: &NetConfig,
    sigma_mode: SigmaMode,
    fixed_sigma: Option<(f64, f64)>,
    seed: u64,
) -> Result<Model<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: rng_from(seed, &[0x6e6574]),
        groups: cfg.groupnorm_groups,
    };
    let (enc, bottleneck) = build_encoder(&mut b, cfg);
    let dec_seg = build_decoder(&mut b, cfg, "decoder_seg", ParamGroup::DecoderSeg);
    let dec_trans = build_decoder(&mut b, cfg, "decoder_trans", ParamGroup::DecoderTrans);
    let (nddr_seg, nddr_trans) = if cfg.nddr_enabled {
        let mut ns = Vec::new();
        let mut nt = Vec::new();
        for step in 0..cfg.levels {
            let (_, cout) = decoder_dims(cfg, step);
            ns.push(b.nddr(
                &format!("nddr_seg/level{step}"),
                ParamGroup::NddrSeg,
                cout,
                cfg.nddr_init,
            ));
            nt.push(b.nddr(
                &format!("nddr_trans/level{step}"),
                ParamGroup::NddrTrans,
                cout,
                cfg.nddr_init,
            ));
        }
        (ns, nt)
    } else {
        (Vec::new(), Vec::new())
    };
    let head_seg = b.conv1("head_seg", ParamGroup::HeadSeg, cfg.base_width, cfg.seg_classes);
    let head_trans = b.conv1("head_trans", ParamGroup::HeadTrans, cfg.base_width, 1);
    let sigma = match sigma_mode {
        SigmaMode::Learned => {
            let s_s = b
                .store
                .add("sigma/s_s", ParamGroup::Sigma, ArrayD::zeros(vec![1]));
            let s_t = b
                .store
                .add("sigma/s_t", ParamGroup::Sigma, ArrayD::zeros(vec![1]));
            Some((s_s, s_t))
        }
        SigmaMode::Fixed => None,
    };
    let fixed = match sigma_mode {
        SigmaMode::Fixed => {
            let (s, t) = fixed_sigma.unwrap_or((1.0, 1.0));
            if s <= 0.0 || t <= 0.0 {
                return Err(Error::Config("fixed sigmas must be positive".into()));
            }
            Some((s, t))
        }
        SigmaMode::Learned => None,
    };
    Ok(Model {
        config: cfg.clone(),
        arch: Arch::Ynet,
        sigma_mode,
        params: store,
        topo: Topo {
            enc,
            bottleneck,
            dec_seg,
            head_seg,
            dec_trans,
            head_trans: Some(head_trans),
            nddr_seg,
            nddr_trans,
            sigma,
        },
        fixed_sigma: fixed,
        init_seed: seed,
    })
}

// ---- forward ---------------------------------------------------------------

impl<F: Scalar> Model<F> {
    fn w2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.params
            .value(id)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("weight is 2-d")
    }

    fn v1(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.params
            .value(id)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter is 1-d")
    }

    /// Current noise-scale state, reading learned values out of the store.
    pub fn sigma_state(&self) -> SigmaState {
        match self.sigma_mode {
            SigmaMode::Fixed => {
                let (sigma_s, sigma_t) = self.fixed_sigma.unwrap_or((1.0, 1.0));
                SigmaState::Fixed { sigma_s, sigma_t }
            }
            SigmaMode::Learned => match self.topo.sigma {
                Some((s_s, s_t)) => SigmaState::Learned {
                    s_s: self.params.value(s_s)[0].as_f64(),
                    s_t: self.params.value(s_t)[0].as_f64(),
                },
                None => SigmaState::learned_default(),
            },
        }
    }

    pub fn sigma_param_ids(&self) -> Option<(ParamId, ParamId)> {
        self.topo.sigma
    }

    pub fn fixed_sigma(&self) -> Option<(f64, f64)> {
        self.fixed_sigma
    }

    pub fn set_fixed_sigma(&mut self, sigma_s: f64, sigma_t: f64) -> Result<()> {
        if self.sigma_mode != SigmaMode::Fixed {
            return Err(Error::Config(
                "set_fixed_sigma only applies to fixed-sigma models".into(),
            ));
        }
        if sigma_s <= 0.0 || sigma_t <= 0.0 {
            return Err(Error::Config("fixed sigmas must be positive".into()));
        }
        self.fixed_sigma = Some((sigma_s, sigma_t));
        Ok(())
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_scalars()
    }

    pub fn decompose_parameters(&self) -> ParamBreakdown {
        let c = |g: ParamGroup| self.params.count_scalars_in(g);
        ParamBreakdown {
            encoder: c(ParamGroup::Encoder),
            decoder_seg: c(ParamGroup::DecoderSeg),
            decoder_trans: c(ParamGroup::DecoderTrans),
            nddr: c(ParamGroup::NddrSeg) + c(ParamGroup::NddrTrans),
            heads: c(ParamGroup::HeadSeg) + c(ParamGroup::HeadTrans),
            sigmas: c(ParamGroup::Sigma),
        }
    }

    pub fn validate_input(&self, patch: &Feat<F>) -> Result<()> {
        let (c, nx, ny, nz) = patch.dim();
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if nx % m != 0 || ny % m != 0 || nz % m != 0 || nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims ({nx}, {ny}, {nz}) not divisible by {m}"
            )));
        }
        Ok(())
    }

    fn unit_fwd(
        &self,
        unit: &ConvUnit,
        x: &Feat<F>,
        want_cache: bool,
    ) -> (Feat<F>, Option<UnitCache<F>>) {
        let y = conv3_fwd(x, self.w2(unit.conv.w), self.v1(unit.conv.b));
        let (r, mask) = relu_fwd(&y);
        let (g, gn_cache) = group_norm_fwd(
            &r,
            self.v1(unit.gn.gamma),
            self.v1(unit.gn.beta),
            unit.gn.groups,
            GN_EPS,
        );
        let cache = want_cache.then(|| UnitCache {
            input: x.clone(),
            relu_mask: mask,
            gn: gn_cache,
        });
        (g, cache)
    }

    fn block_fwd(
        &self,
        block: &ConvBlock,
        x: &Feat<F>,
        want_cache: bool,
    ) -> (Feat<F>, Option<BlockCache<F>>) {
        let (h, c1) = self.unit_fwd(&block.unit1, x, want_cache);
        let (y, c2) = self.unit_fwd(&block.unit2, &h, want_cache);
        let cache = want_cache.then(|| BlockCache {
            u1: c1.unwrap(),
            u2: c2.unwrap(),
        });
        (y, cache)
    }

    fn nddr_fwd(
        &self,
        unit: &NddrUnit,
        own: &Feat<F>,
        other: &Feat<F>,
        want_cache: bool,
    ) -> (Feat<F>, Option<NddrCache<F>>) {
        let cat = concat_channels(own, other);
        let y = conv1_fwd(&cat, self.w2(unit.conv.w), self.v1(unit.conv.b));
        let (r, mask) = relu_fwd(&y);
        let (g, gn_cache) = group_norm_fwd(
            &r,
            self.v1(unit.gn.gamma),
            self.v1(unit.gn.beta),
            unit.gn.groups,
            GN_EPS,
        );
        let cache = want_cache.then(|| NddrCache {
            input: cat,
            relu_mask: mask,
            gn: gn_cache,
        });
        (g, cache)
    }

    fn forward_inner(&self, patch: &Feat<F>, want_cache: bool) -> (Outputs<F>, NetCache<F>) {
        let levels = self.config.levels;
        let mut cache = NetCache {
            enc_blocks: Vec::new(),
            pool_idx: Vec::new(),
            pool_in_dims: Vec::new(),
            bottleneck: None,
            levels: Vec::new(),
            head_seg_input: None,
            head_trans_input: None,
        };

        let mut skips: Vec<Feat<F>> = Vec::with_capacity(levels);
        let mut h = patch.clone();
        for block in &self.topo.enc {
            let (e, bc) = self.block_fwd(block, &h, want_cache);
            if let Some(bc) = bc {
                cache.enc_blocks.push(bc);
            }
            cache.pool_in_dims.push(e.dim());
            let (p, idx) = maxpool_fwd(&e);
            cache.pool_idx.push(idx);
            skips.push(e);
            h = p;
        }
        let (bottleneck, bc) = self.block_fwd(&self.topo.bottleneck, &h, want_cache);
        cache.bottleneck = bc;

        let is_ynet = self.arch == Arch::Ynet;
        let mut d_seg = bottleneck.clone();
        let mut d_trans = if is_ynet {
            bottleneck
        } else {
            Feat::zeros((0, 0, 0, 0))
        };

        for step in 0..levels {
            let skip = &skips[levels - 1 - step];
            let mut level_cache = LevelCache {
                block_seg: None,
                block_trans: None,
                nddr_seg: None,
                nddr_trans: None,
            };

            let u_seg = upsample2_fwd(&d_seg);
            let cat_seg = concat_channels(&u_seg, skip);
            let (f_seg, bc) = self.block_fwd(&self.topo.dec_seg[step], &cat_seg, want_cache);
            level_cache.block_seg = bc;

            if is_ynet {
                let u_trans = upsample2_fwd(&d_trans);
                let cat_trans = concat_channels(&u_trans, skip);
                let (f_trans, bc) =
                    self.block_fwd(&self.topo.dec_trans[step], &cat_trans, want_cache);
                level_cache.block_trans = bc;

                if self.config.nddr_enabled {
                    let (s, nc_s) =
                        self.nddr_fwd(&self.topo.nddr_seg[step], &f_seg, &f_trans, want_cache);
                    let (t, nc_t) =
                        self.nddr_fwd(&self.topo.nddr_trans[step], &f_trans, &f_seg, want_cache);
                    level_cache.nddr_seg = nc_s;
                    level_cache.nddr_trans = nc_t;
                    d_seg = s;
                    d_trans = t;
                } else {
                    d_seg = f_seg;
                    d_trans = f_trans;
                }
            } else {
                d_seg = f_seg;
            }
            cache.levels.push(level_cache);
        }

        let logits = conv1_fwd(
            &d_seg,
            self.w2(self.topo.head_seg.w),
            self.v1(self.topo.head_seg.b),
        );
        if want_cache {
            cache.head_seg_input = Some(d_seg);
        }
        let translation = if is_ynet {
            let head = self.topo.head_trans.as_ref().unwrap();
            let t = conv1_fwd(&d_trans, self.w2(head.w), self.v1(head.b));
            if want_cache {
                cache.head_trans_input = Some(d_trans);
            }
            Some(t)
        } else {
            None
        };

        (
            Outputs {
                logits,
                translation,
            },
            cache,
        )
    }

    /// Inference forward pass: deterministic, no caches retained.
    pub fn forward(&self, patch: &Feat<F>) -> Result<Outputs<F>> {
        self.validate_input(patch)?;
        Ok(self.forward_inner(patch, false).0)
    }

    /// Training forward pass retaining intermediate state for [`Model::backward`].
    pub fn forward_train(&self, patch: &Feat<F>) -> Result<(Outputs<F>, NetCache<F>)> {
        self.validate_input(patch)?;
        Ok(self.forward_inner(patch, true))
    }
}

// ---- backward --------------------------------------------------------------

fn conv3_bwd_into<F: Scalar>(
    params: &mut ParamStore<F>,
    layer: &ConvLayer,
    x: &Feat<F>,
    dy: &Feat<F>,
    need_dx: bool,
) -> Option<Feat<F>> {
    let (w, dw, db) = params.split_value_grads(layer.w, layer.b);
    let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
    let dw2 = dw.view_mut().into_dimensionality::<Ix2>().unwrap();
    let db1 = db.view_mut().into_dimensionality::<Ix1>().unwrap();
    super::ops::conv3_bwd(x, w2, dy, dw2, db1, need_dx)
}

fn conv1_bwd_into<F: Scalar>(
    params: &mut ParamStore<F>,
    layer: &ConvLayer,
    x: &Feat<F>,
    dy: &Feat<F>,
    need_dx: bool,
) -> Option<Feat<F>> {
    let (w, dw, db) = params.split_value_grads(layer.w, layer.b);
    let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
    let dw2 = dw.view_mut().into_dimensionality::<Ix2>().unwrap();
    let db1 = db.view_mut().into_dimensionality::<Ix1>().unwrap();
    super::ops::conv1_bwd(x, w2, dy, dw2, db1, need_dx)
}

fn gn_bwd_into<F: Scalar>(
    params: &mut ParamStore<F>,
    layer: &GnLayer,
    dy: &Feat<F>,
    cache: &GnCache<F>,
) -> Feat<F> {
    let (gamma, dgamma, dbeta) = params.split_value_grads(layer.gamma, layer.beta);
    let g1 = gamma.view().into_dimensionality::<Ix1>().unwrap();
    let dg1 = dgamma.view_mut().into_dimensionality::<Ix1>().unwrap();
    let db1 = dbeta.view_mut().into_dimensionality::<Ix1>().unwrap();
    super::ops::group_norm_bwd(dy, cache, g1, dg1, db1, layer.groups)
}

impl<F: Scalar> Model<F> {
    fn unit_bwd(
        &mut self,
        unit: &ConvUnit,
        cache: &UnitCache<F>,
        dy: &Feat<F>,
        need_dx: bool,
    ) -> Option<Feat<F>> {
        let mut dr = gn_bwd_into(&mut self.params, &unit.gn, dy, &cache.gn);
        super::ops::relu_bwd_inplace(&mut dr, &cache.relu_mask);
        conv3_bwd_into(&mut self.params, &unit.conv, &cache.input, &dr, need_dx)
    }

    fn block_bwd(
        &mut self,
        block: &ConvBlock,
        cache: &BlockCache<F>,
        dy: &Feat<F>,
        need_dx: bool,
    ) -> Option<Feat<F>> {
        let dh = self
            .unit_bwd(&block.unit2, &cache.u2, dy, true)
            .expect("inner unit always needs dx");
        self.unit_bwd(&block.unit1, &cache.u1, &dh, need_dx)
    }

    /// Gradient through a fusion unit; returns `(d_own, d_other)`.
    fn nddr_bwd(
        &mut self,
        unit: &NddrUnit,
        cache: &NddrCache<F>,
        dy: &Feat<F>,
    ) -> (Feat<F>, Feat<F>) {
        let mut dr = gn_bwd_into(&mut self.params, &unit.gn, dy, &cache.gn);
        super::ops::relu_bwd_inplace(&mut dr, &cache.relu_mask);
        let dcat = conv1_bwd_into(&mut self.params, &unit.conv, &cache.input, &dr, true)
            .expect("fusion unit needs input grad");
        let own_channels = cache.input.dim().0 / 2;
        split_channels(&dcat, own_channels)
    }

    /// Accumulate parameter gradients for one training step.
    ///
    /// `d_logits` / `d_translation` are loss gradients w.r.t. the network
    /// outputs, already scaled by any task weights. With `detach_seg` set
    /// (the pair-step rule) gradient flow into the segmentation decoder, its
    /// fusion units, and the segmentation head is cut: their parameters
    /// receive no gradient and the translation branch treats segmentation
    /// features as constants, while the shared encoder still trains through
    /// the translation path.
    pub fn backward(
        &mut self,
        cache: &NetCache<F>,
        d_logits: Option<&Feat<F>>,
        d_translation: Option<&Feat<F>>,
        detach_seg: bool,
    ) {
        let levels = self.config.levels;
        let is_ynet = self.arch == Arch::Ynet;
        let topo = self.topo.clone();

        let mut g_seg: Option<Feat<F>> = match (d_logits, detach_seg) {
            (Some(dl), false) => {
                let input = cache.head_seg_input.as_ref().expect("trained forward");
                conv1_bwd_into(&mut self.params, &topo.head_seg, input, dl, true)
            }
            _ => None,
        };
        let mut g_trans: Option<Feat<F>> = match (d_translation, topo.head_trans.as_ref()) {
            (Some(dt), Some(head)) => {
                let input = cache.head_trans_input.as_ref().expect("trained forward");
                conv1_bwd_into(&mut self.params, head, input, dt, true)
            }
            _ => None,
        };

        let mut skip_grads: Vec<Option<Feat<F>>> = (0..levels).map(|_| None).collect();

        for step in (0..levels).rev() {
            let level_cache = &cache.levels[step];
            let skip_index = levels - 1 - step;

            // Unfuse: gradients w.r.t. the raw decoder block outputs.
            let (df_seg, df_trans): (Option<Feat<F>>, Option<Feat<F>>) =
                if is_ynet && self.config.nddr_enabled {
                    let mut df_seg: Option<Feat<F>> = None;
                    let mut df_trans: Option<Feat<F>> = None;
                    if let Some(g) = g_seg.take() {
                        let (own, other) = self.nddr_bwd(
                            &topo.nddr_seg[step],
                            level_cache.nddr_seg.as_ref().unwrap(),
                            &g,
                        );
                        df_seg = Some(own);
                        df_trans = Some(other);
                    }
                    if let Some(g) = g_trans.take() {
                        let (own, other) = self.nddr_bwd(
                            &topo.nddr_trans[step],
                            level_cache.nddr_trans.as_ref().unwrap(),
                            &g,
                        );
                        df_trans = Some(match df_trans {
                            Some(acc) => acc + &own,
                            None => own,
                        });
                        if !detach_seg {
                            df_seg = Some(match df_seg {
                                Some(acc) => acc + &other,
                                None => other,
                            });
                        }
                    }
                    (df_seg, df_trans)
                } else {
                    (g_seg.take(), g_trans.take())
                };

            if let Some(df) = df_seg {
                debug_assert!(!detach_seg, "segmentation branch is frozen on pair steps");
                let dcat = self
                    .block_bwd(
                        &topo.dec_seg[step],
                        level_cache.block_seg.as_ref().unwrap(),
                        &df,
                        true,
                    )
                    .unwrap();
                let skip_channels = self.config.width(levels - 1 - step);
                let up_channels = dcat.dim().0 - skip_channels;
                let (du, dskip) = split_channels(&dcat, up_channels);
                accumulate(&mut skip_grads[skip_index], dskip);
                g_seg = Some(super::ops::upsample2_bwd(&du));
            }
            if let Some(df) = df_trans {
                let dcat = self
                    .block_bwd(
                        &topo.dec_trans[step],
                        level_cache.block_trans.as_ref().unwrap(),
                        &df,
                        true,
                    )
                    .unwrap();
                let skip_channels = self.config.width(levels - 1 - step);
                let up_channels = dcat.dim().0 - skip_channels;
                let (du, dskip) = split_channels(&dcat, up_channels);
                accumulate(&mut skip_grads[skip_index], dskip);
                g_trans = Some(super::ops::upsample2_bwd(&du));
            }
        }

        // Both decoders start from the bottleneck; their entry gradients sum.
        let d_bottleneck = match (g_seg, g_trans) {
            (Some(a), Some(b)) => Some(a + &b),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        let Some(d_bottleneck) = d_bottleneck else {
            return;
        };

        let mut g = self
            .block_bwd(
                &topo.bottleneck,
                cache.bottleneck.as_ref().unwrap(),
                &d_bottleneck,
                true,
            )
            .unwrap();
        for level in (0..levels).rev() {
            let mut de =
                super::ops::maxpool_bwd(&g, &cache.pool_idx[level], cache.pool_in_dims[level]);
            if let Some(sg) = &skip_grads[level] {
                de = de + sg;
            }
            let need_dx = level > 0;
            let dx = self.block_bwd(&topo.enc[level], &cache.enc_blocks[level], &de, need_dx);
            if let Some(dx) = dx {
                g = dx;
            }
        }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Feat<F>>, g: Feat<F>) {
    match slot {
        Some(acc) => *acc = &*acc + &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{
        cross_entropy_with_grad, mse_with_grad, mtl_loss, mtl_loss_sigma_grad,
    };
    use crate::rng::rng_from;
    use ndarray::Array3;
    use rand::Rng;

    fn small_cfg() -> NetConfig {
        NetConfig {
            base_width: 4,
            groupnorm_groups: 2,
            levels: 2,
            ..NetConfig::default()
        }
    }

    #[test]
    fn unet_forward_shape() {
        let cfg = small_cfg();
        let m = build_unet::<f32>(&cfg, 7).unwrap();
        let x = Feat::<f32>::from_elem((1, 8, 8, 4), 0.3);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.logits.dim(), (2, 8, 8, 4));
        assert!(out.translation.is_none());
    }

    #[test]
    fn ynet_forward_shapes() {
        let cfg = small_cfg();
        let m = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 7).unwrap();
        let x = Feat::<f32>::from_elem((1, 8, 4, 4), 0.3);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.logits.dim(), (2, 8, 4, 4));
        assert_eq!(out.translation.unwrap().dim(), (1, 8, 4, 4));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = NetConfig {
            base_width: 4,
            groupnorm_groups: 2,
            levels: 3,
            ..NetConfig::default()
        };
        let m = build_unet::<f32>(&cfg, 1).unwrap();
        let x = Feat::<f32>::zeros((1, 50, 64, 32));
        assert!(matches!(m.forward(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_levels_rejected() {
        let cfg = NetConfig {
            levels: 0,
            ..NetConfig::default()
        };
        assert!(build_unet::<f32>(&cfg, 1).is_err());
    }

    #[test]
    fn builds_are_deterministic() {
        let cfg = small_cfg();
        let a = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 42).unwrap();
        let b = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 42).unwrap();
        assert_eq!(a.count_parameters(), b.count_parameters());
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let x = Feat::<f32>::from_shape_fn((1, 8, 8, 8), |(_, i, j, k)| {
            ((i * 31 + j * 7 + k) as f32).sin()
        });
        let o1 = a.forward(&x).unwrap();
        let o2 = a.forward(&x).unwrap();
        assert_eq!(o1.logits, o2.logits);
    }

    #[test]
    fn learned_sigma_adds_exactly_two_scalars() {
        let cfg = small_cfg();
        let learned = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 3).unwrap();
        let fixed = build_ynet::<f32>(&cfg, SigmaMode::Fixed, Some((1.0, 1.0)), 3).unwrap();
        assert_eq!(
            learned.count_parameters(),
            fixed.count_parameters() + 2
        );
        assert_eq!(learned.decompose_parameters().sigmas, 2);
        assert_eq!(fixed.decompose_parameters().sigmas, 0);
    }

    #[test]
    fn ynet_equals_unet_plus_auxiliary_branch() {
        let cfg = small_cfg();
        let unet = build_unet::<f32>(&cfg, 5).unwrap();
        let ynet = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 5).unwrap();
        let d = ynet.decompose_parameters();
        assert_eq!(d.total(), ynet.count_parameters());
        let du = unet.decompose_parameters();
        assert_eq!(du.decoder_trans, 0);
        assert_eq!(du.nddr, 0);
        assert_eq!(du.sigmas, 0);

        // Shared parts have identical sizes, so the difference is exactly
        // the translation decoder + fusion units + translation head + sigmas.
        assert_eq!(d.encoder, du.encoder);
        assert_eq!(d.decoder_seg, du.decoder_seg);
        let head_trans = d.heads - du.heads;
        assert_eq!(
            ynet.count_parameters() - unet.count_parameters(),
            d.decoder_trans + d.nddr + head_trans + d.sigmas
        );

        let ratio = ynet.count_parameters() as f64 / unet.count_parameters() as f64;
        assert!((1.2..2.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn identity_passthrough_nddr_weights() {
        let cfg = NetConfig {
            nddr_init: NddrInit::IdentityPassthrough,
            ..small_cfg()
        };
        let m = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 1).unwrap();
        let id = m.params.find("nddr_seg/level0/conv/weight").unwrap();
        let w = m.params.value(id);
        let c = w.shape()[0];
        for i in 0..c {
            for j in 0..2 * c {
                let expect = if j == i { 1.0 } else { 0.0 };
                assert_eq!(w[[i, j]], expect);
            }
        }
        let bid = m.params.find("nddr_seg/level0/conv/bias").unwrap();
        assert!(m.params.value(bid).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_heads_give_zero_outputs() {
        let cfg = small_cfg();
        let mut m = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 9).unwrap();
        for name in ["head_seg/weight", "head_seg/bias", "head_trans/weight", "head_trans/bias"] {
            let id = m.params.find(name).unwrap();
            m.params.param_mut(id).value.fill(0.0);
        }
        let x = Feat::<f32>::from_shape_fn((1, 4, 4, 4), |(_, i, j, k)| {
            ((i + 2 * j + 3 * k) as f32).cos()
        });
        let out = m.forward(&x).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
        assert!(out.translation.unwrap().iter().all(|&v| v == 0.0));
    }

    /// With pure-identity fusion weights the segmentation output must be
    /// bitwise invariant to arbitrary perturbation of the translation branch,
    /// and vice versa.
    #[test]
    fn nddr_isolation_invariant() {
        let cfg = NetConfig {
            nddr_init: NddrInit::IdentityPassthrough,
            ..small_cfg()
        };
        let mut m = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 11).unwrap();
        let x = Feat::<f32>::from_shape_fn((1, 8, 8, 4), |(_, i, j, k)| {
            ((i * 3 + j * 5 + k * 7) as f32 * 0.1).sin()
        });
        let before = m.forward(&x).unwrap();

        let mut rng = rng_from(123, &[]);
        let ids: Vec<_> = m
            .params
            .iter()
            .filter(|(_, p)| {
                matches!(
                    p.group,
                    ParamGroup::DecoderTrans | ParamGroup::HeadTrans
                )
            })
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            for v in m.params.param_mut(id).value.iter_mut() {
                *v += rng.gen_range(-0.5..0.5f32);
            }
        }
        let after = m.forward(&x).unwrap();
        assert_eq!(before.logits, after.logits, "seg output must not move");
        assert_ne!(
            before.translation.unwrap(),
            after.translation.unwrap(),
            "translation output should move"
        );

        // And the mirror direction: perturb the segmentation branch.
        let mut m2 = build_ynet::<f32>(&cfg, SigmaMode::Learned, None, 11).unwrap();
        let before = m2.forward(&x).unwrap();
        let ids: Vec<_> = m2
            .params
            .iter()
            .filter(|(_, p)| matches!(p.group, ParamGroup::DecoderSeg | ParamGroup::HeadSeg))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            for v in m2.params.param_mut(id).value.iter_mut() {
                *v += rng.gen_range(-0.5..0.5f32);
            }
        }
        let after = m2.forward(&x).unwrap();
        assert_eq!(
            before.translation.unwrap(),
            after.translation.unwrap(),
            "translation output must not move"
        );
    }

    /// Full-model gradient check on a tiny dual-decoder network: the
    /// multi-task loss gradient of every parameter (including the learned
    /// noise scales) matches central finite differences in f64.
    #[test]
    fn full_model_gradient_matches_fd() {
        let cfg = NetConfig {
            base_width: 2,
            groupnorm_groups: 1,
            levels: 1,
            nddr_init: NddrInit::Random,
            ..NetConfig::default()
        };
        let mut m = build_ynet::<f64>(&cfg, SigmaMode::Learned, None, 21).unwrap();
        let mut rng = rng_from(22, &[]);
        let x = Feat::<f64>::from_shape_fn((1, 2, 2, 4), |_| rng.gen_range(-1.0..1.0));
        let label = Array3::from_shape_fn((2, 2, 4), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let target = Array3::from_shape_fn((2, 2, 4), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |m: &Model<f64>| -> f64 {
            let out = m.forward(&x).unwrap();
            let l_s = crate::loss::cross_entropy(&out.logits, &label).unwrap();
            let l_t = crate::loss::mse(out.translation.as_ref().unwrap(), &target).unwrap();
            mtl_loss(l_s, l_t, &m.sigma_state())
        };

        // Analytic gradients.
        m.params.zero_grads();
        let (out, cache) = m.forward_train(&x).unwrap();
        let (l_s, d_logits) = cross_entropy_with_grad(&out.logits, &label).unwrap();
        let (l_t, d_trans) =
            mse_with_grad(out.translation.as_ref().unwrap(), &target).unwrap();
        let sigma = m.sigma_state();
        let d_logits = d_logits.mapv(|v| v * sigma.weight_s());
        let d_trans = d_trans.mapv(|v| v * sigma.weight_t());
        m.backward(&cache, Some(&d_logits), Some(&d_trans), false);
        let (gs, gt) = mtl_loss_sigma_grad(l_s, l_t, &sigma);
        let (sid_s, sid_t) = m.sigma_param_ids().unwrap();
        m.params.param_mut(sid_s).grad[0] += gs;
        m.params.param_mut(sid_t).grad[0] += gt;

        // Finite differences over every scalar parameter.
        let h = 1e-5;
        let n_params = m.params.len();
        let mut checked = 0usize;
        for pi in 0..n_params {
            let id = ParamId(pi);
            let len = m.params.value(id).len();
            for k in 0..len {
                let orig = m.params.param(id).value.as_slice().unwrap()[k];
                m.params.param_mut(id).value.as_slice_mut().unwrap()[k] = orig + h;
                let plus = loss_of(&m);
                m.params.param_mut(id).value.as_slice_mut().unwrap()[k] = orig - h;
                let minus = loss_of(&m);
                m.params.param_mut(id).value.as_slice_mut().unwrap()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = m.params.param(id).grad.as_slice().unwrap()[k];
                let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-3,
                    "{}[{k}]: analytic {analytic} vs numeric {numeric}",
                    m.params.param(id).name
                );
                checked += 1;
            }
        }
        assert!(checked > 500, "checked {checked} parameters");
    }

    /// Pair-step gradients with identity fusion: the detach is vacuous, so
    /// the translation-loss gradient of the trainable branch must match
    /// plain finite differences, and the frozen branch gets exactly zero.
    #[test]
    fn pair_step_gradient_matches_fd_with_identity_fusion() {
        let cfg = NetConfig {
            base_width: 2,
            groupnorm_groups: 1,
            levels: 1,
            nddr_init: NddrInit::IdentityPassthrough,
            ..NetConfig::default()
        };
        let mut m = build_ynet::<f64>(&cfg, SigmaMode::Learned, None, 31).unwrap();
        let mut rng = rng_from(32, &[]);
        let x = Feat::<f64>::from_shape_fn((1, 2, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let target = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |m: &Model<f64>| -> f64 {
            let out = m.forward(&x).unwrap();
            crate::loss::mse(out.translation.as_ref().unwrap(), &target).unwrap()
        };

        m.params.zero_grads();
        let (out, cache) = m.forward_train(&x).unwrap();
        let (_, d_trans) = mse_with_grad(out.translation.as_ref().unwrap(), &target).unwrap();
        m.backward(&cache, None, Some(&d_trans), true);

        let h = 1e-5;
        for pi in 0..m.params.len() {
            let id = ParamId(pi);
            let group = m.params.param(id).group;
            let frozen = !group.trained_on_pair_step();
            for k in 0..m.params.value(id).len() {
                let analytic = m.params.param(id).grad.as_slice().unwrap()[k];
                if frozen {
                    assert_eq!(
                        analytic, 0.0,
                        "frozen {} must have zero grad",
                        m.params.param(id).name
                    );
                    continue;
                }
                let orig = m.params.param(id).value.as_slice().unwrap()[k];
                m.params.param_mut(id).value.as_slice_mut().unwrap()[k] = orig + h;
                let plus = loss_of(&m);
                m.params.param_mut(id).value.as_slice_mut().unwrap()[k] = orig - h;
                let minus = loss_of(&m);
                m.params.param_mut(id).value.as_slice_mut().unwrap()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-3,
                    "{}[{k}]: analytic {analytic} vs numeric {numeric}",
                    m.params.param(id).name
                );
            }
        }
    }
}
