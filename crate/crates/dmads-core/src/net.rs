//! Full network assembly: two encoder paths, attention blocks on skips and
//! bottlenecks, two fusion stages per path, deep-supervision taps, and the
//! final fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Frfb, Lfa, Mscfa};
use crate::encoder::{Encoder, EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::kv::{fnv1a64, parse_kv_lines};
use crate::nn::{Binder, Conv2dLayer, ParameterStore};
use crate::tensor::{ConvSpec, Element, UpsampleMode, Var};

/// Which encoder's skip features feed the second decoder path.
///
/// The network description wires the first encoder's skips into both paths;
/// `Symmetric` (the default) gives each path its own skips instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipWiring {
    Symmetric,
    AsWritten,
}

impl SkipWiring {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipWiring::Symmetric => "symmetric",
            SkipWiring::AsWritten => "as_written",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "symmetric" => Some(SkipWiring::Symmetric),
            "as_written" => Some(SkipWiring::AsWritten),
            _ => None,
        }
    }
}

/// Pixel loss applied to the final map and every deep-supervision tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    SoftIou,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::SoftIou => "soft_iou",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bce" => Some(LossKind::Bce),
            "soft_iou" => Some(LossKind::SoftIou),
            _ => None,
        }
    }
}

/// Architecture and training hyperparameters, including the ablation toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub stage_channels: [usize; 3],
    pub width_multiplier: f64,
    pub patch_ratios: [usize; 4],
    pub skip_wiring: SkipWiring,
    /// Ablation a: drop the multi-scale attention blocks entirely.
    pub disable_mscfa: bool,
    /// Ablation b: replace each fusion block with upsample + 1x1 + add.
    pub disable_frfb: bool,
    /// Ablation c: replace the local-attention block with one 3x3 conv.
    pub disable_lfa: bool,
    /// Ablation d: no companion outputs or companion losses.
    pub disable_deep_supervision: bool,
    /// Ablation e: both paths use the shallow (R18) backbone.
    pub single_backbone_r18: bool,
    /// Companion-loss weight in the total loss.
    pub theta: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 256,
            image_channels: 3,
            stage_channels: [64, 128, 256],
            width_multiplier: 1.0,
            patch_ratios: [4, 8, 16, 32],
            skip_wiring: SkipWiring::Symmetric,
            disable_mscfa: false,
            disable_frfb: false,
            disable_lfa: false,
            disable_deep_supervision: false,
            single_backbone_r18: false,
            theta: 0.5,
            loss_kind: LossKind::SoftIou,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidConfig {
            op: "model config",
            reason,
        };
        if self.image_size % 4 != 0 || self.image_size < 16 {
            return Err(fail(format!(
                "image_size {} must be divisible by 4 and >= 16",
                self.image_size
            )));
        }
        if self.image_channels == 0 {
            return Err(fail("image_channels must be >= 1".into()));
        }
        let [c1, c2, c3] = self.stage_channels;
        if c2 != 2 * c1 || c3 != 4 * c1 || c1 < 4 || c1 % 4 != 0 {
            return Err(fail(format!(
                "stage_channels {c1},{c2},{c3} must double per stage from a multiple of 4"
            )));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(fail(format!(
                "width_multiplier {} must be a positive finite number",
                self.width_multiplier
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(fail(format!("theta {} must lie in [0, 1]", self.theta)));
        }
        if self.patch_ratios.iter().any(|&p| p == 0) {
            return Err(fail("patch ratios must be >= 1".into()));
        }
        Ok(())
    }

    /// Stage widths after the width multiplier: the first stage is scaled and
    /// rounded up to a multiple of 4 (so the gates divide evenly), the other
    /// two keep the doubling schedule.
    pub fn channels(&self) -> [usize; 3] {
        let scaled = (self.stage_channels[0] as f64 * self.width_multiplier).round() as usize;
        let c1 = scaled.max(1).div_ceil(4) * 4;
        [c1, 2 * c1, 4 * c1]
    }

    /// Bottleneck feature size: two stride-2 transitions below the input.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.image_size / 4, self.image_size / 4)
    }

    /// Patch ratios clamped to the bottleneck extent so the default set works
    /// at any input size.
    pub fn effective_patch_ratios(&self) -> [usize; 4] {
        let min_side = self.bottleneck_hw().0.min(self.bottleneck_hw().1);
        self.patch_ratios.map(|p| p.min(min_side))
    }

    pub fn encoder_variants(&self) -> [EncoderVariant; 2] {
        if self.single_backbone_r18 {
            [EncoderVariant::R18, EncoderVariant::R18]
        } else {
            [EncoderVariant::R18, EncoderVariant::R34]
        }
    }

    /// Canonical `key=value` form: fixed key order, one line per key. This is
    /// the text the checkpoint stores and digests.
    pub fn canonical_string(&self) -> String {
        let [c1, c2, c3] = self.stage_channels;
        let [p0, p1, p2, p3] = self.patch_ratios;
        format!(
            "image_size={}\nimage_channels={}\nstage_channels={c1},{c2},{c3}\n\
             width_multiplier={}\npatch_ratios={p0},{p1},{p2},{p3}\nskip_wiring={}\n\
             disable_mscfa={}\ndisable_frfb={}\ndisable_lfa={}\n\
             disable_deep_supervision={}\nsingle_backbone_r18={}\n\
             theta={}\nloss={}\nseed={}\n",
            self.image_size,
            self.image_channels,
            self.width_multiplier,
            self.skip_wiring.as_str(),
            self.disable_mscfa,
            self.disable_frfb,
            self.disable_lfa,
            self.disable_deep_supervision,
            self.single_backbone_r18,
            self.theta,
            self.loss_kind.as_str(),
            self.seed,
        )
    }

    /// Parse the canonical form back. Unknown or missing keys are errors.
    pub fn from_canonical(text: &str) -> std::result::Result<Self, String> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (key, value) in parse_kv_lines(text)? {
            seen.push(key.clone());
            apply_model_key(&mut cfg, &key, &value)?;
        }
        for required in MODEL_KEYS {
            if !seen.iter().any(|k| k == required) {
                return Err(format!("missing key '{required}'"));
            }
        }
        Ok(cfg)
    }

    /// FNV-1a digest of the canonical form; checkpoints refuse to load into a
    /// different architecture.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }
}

pub const MODEL_KEYS: [&str; 14] = [
    "image_size",
    "image_channels",
    "stage_channels",
    "width_multiplier",
    "patch_ratios",
    "skip_wiring",
    "disable_mscfa",
    "disable_frfb",
    "disable_lfa",
    "disable_deep_supervision",
    "single_backbone_r18",
    "theta",
    "loss",
    "seed",
];

/// Apply one `key=value` pair onto a config; shared with the CLI run config.
pub fn apply_model_key(
    cfg: &mut ModelConfig,
    key: &str,
    value: &str,
) -> std::result::Result<(), String> {
    let bad = |what: &str| format!("invalid {what} '{value}'");
    match key {
        "image_size" => cfg.image_size = value.parse().map_err(|_| bad("image_size"))?,
        "image_channels" => {
            cfg.image_channels = value.parse().map_err(|_| bad("image_channels"))?
        }
        "stage_channels" => {
            let parts: Vec<usize> = value
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("stage_channels"))?;
            let [c1, c2, c3]: [usize; 3] =
                parts.try_into().map_err(|_| bad("stage_channels"))?;
            cfg.stage_channels = [c1, c2, c3];
        }
        "width_multiplier" => {
            cfg.width_multiplier = value.parse().map_err(|_| bad("width_multiplier"))?
        }
        "patch_ratios" => {
            let parts: Vec<usize> = value
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("patch_ratios"))?;
            cfg.patch_ratios = parts.try_into().map_err(|_| bad("patch_ratios"))?;
        }
        "skip_wiring" => {
            cfg.skip_wiring = SkipWiring::parse(value).ok_or_else(|| bad("skip_wiring"))?
        }
        "disable_mscfa" => cfg.disable_mscfa = parse_bool(value).ok_or_else(|| bad(key))?,
        "disable_frfb" => cfg.disable_frfb = parse_bool(value).ok_or_else(|| bad(key))?,
        "disable_lfa" => cfg.disable_lfa = parse_bool(value).ok_or_else(|| bad(key))?,
        "disable_deep_supervision" => {
            cfg.disable_deep_supervision = parse_bool(value).ok_or_else(|| bad(key))?
        }
        "single_backbone_r18" => {
            cfg.single_backbone_r18 = parse_bool(value).ok_or_else(|| bad(key))?
        }
        "theta" => cfg.theta = value.parse().map_err(|_| bad("theta"))?,
        "loss" => cfg.loss_kind = LossKind::parse(value).ok_or_else(|| bad("loss"))?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

pub fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

/// One forward pass worth of outputs: final logits plus the six companion
/// logit maps (two bottleneck taps and two fusion stages per path), all at
/// input resolution. `deep_maps` is empty when deep supervision is disabled.
pub struct ForwardOutput {
    pub final_map: Var,
    pub deep_maps: Vec<Var>,
    /// Pre-fusion decoder output of each path (full resolution, C1 channels).
    pub decoder_outputs: [Var; 2],
}

/// 1x1 projection to one channel plus bilinear growth back to input size.
struct DeepHead {
    conv: Conv2dLayer,
    doublings: usize,
}

impl DeepHead {
    fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        doublings: usize,
    ) -> Self {
        DeepHead {
            conv: Conv2dLayer::init(store, rng, name, ConvSpec::new(channels, 1, (1, 1))),
            doublings,
        }
    }

    fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let mut y = self.conv.forward(b, x)?;
        for _ in 0..self.doublings {
            y = g.upsample2x(y, UpsampleMode::Bilinear)?;
        }
        Ok(y)
    }
}

enum BottleneckBlock {
    Lfa(Lfa),
    /// Ablation c replacement.
    Conv(Conv2dLayer),
}

enum FusionStage {
    Frfb(Frfb),
    /// Ablation b replacement: channel-matching 1x1 after upsampling, then
    /// plain addition with the skip feature.
    Reduce(Conv2dLayer),
}

impl FusionStage {
    fn forward<T: Element>(&self, b: &Binder<T>, low: Var, deep: Var) -> Result<Var> {
        match self {
            FusionStage::Frfb(f) => f.forward(b, low, deep),
            FusionStage::Reduce(conv) => {
                let g = b.graph();
                let up = g.upsample2x(deep, UpsampleMode::Bilinear)?;
                g.add(low, conv.forward(b, up)?)
            }
        }
    }

    fn param_count(&self) -> u64 {
        match self {
            FusionStage::Frfb(f) => f.param_count(),
            FusionStage::Reduce(conv) => conv.param_count(),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            FusionStage::Frfb(f) => f.macs(h, w),
            FusionStage::Reduce(conv) => conv.macs(h, w),
        }
    }
}

struct PathModules {
    encoder: Encoder,
    /// Attention on [lay1, lay2, lay3]; entries are absent when the block is
    /// ablated or when this path borrows the other path's skips.
    mscfa: [Option<Mscfa>; 3],
    bottleneck: BottleneckBlock,
    stages: [FusionStage; 2],
    heads: Option<[DeepHead; 3]>,
}

/// Skip features and bottleneck of one encoder path after attention.
struct PathFeatures {
    skips: [Var; 2],
    bottleneck: Var,
}

/// The assembled network. Module structure is fixed at init from the config;
/// parameters live in the store created alongside it.
pub struct DmadsNet {
    pub cfg: ModelConfig,
    paths: [PathModules; 2],
    fusion_mix: Conv2dLayer,
    fusion_out: Conv2dLayer,
}

impl DmadsNet {
    /// Build the network and its deterministically initialized parameters.
    pub fn init<T: Element>(cfg: &ModelConfig) -> Result<(Self, ParameterStore<T>)> {
        Self::init_with_variants(cfg, cfg.encoder_variants())
    }

    /// As [`DmadsNet::init`] but with explicit encoder variants per path
    /// (used by structural tests that mirror the two paths).
    pub fn init_with_variants<T: Element>(
        cfg: &ModelConfig,
        variants: [EncoderVariant; 2],
    ) -> Result<(Self, ParameterStore<T>)> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let [c1, c2, c3] = cfg.channels();
        let (bh, bw) = cfg.bottleneck_hw();

        let mut paths = Vec::with_capacity(2);
        for (i, variant) in variants.into_iter().enumerate() {
            let pfx = format!("p{}", i + 1);
            let encoder = Encoder::init(
                &mut store,
                &mut rng,
                &format!("{pfx}.enc"),
                EncoderConfig {
                    variant,
                    stage_channels: [c1, c2, c3],
                    image_channels: cfg.image_channels,
                },
            );

            // The second path only carries its own skip attention when the
            // wiring is symmetric; under the as-written wiring it reuses the
            // first path's processed skips.
            let own_skips = i == 0 || cfg.skip_wiring == SkipWiring::Symmetric;
            let mk_mscfa = |store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, lay: usize, ch| {
                (!cfg.disable_mscfa && (lay == 2 || own_skips))
                    .then(|| Mscfa::init(store, rng, &format!("{pfx}.mscfa{}", lay + 1), ch))
            };
            let mscfa = [
                mk_mscfa(&mut store, &mut rng, 0, c1),
                mk_mscfa(&mut store, &mut rng, 1, c2),
                mk_mscfa(&mut store, &mut rng, 2, c3),
            ];

            let bottleneck = if cfg.disable_lfa {
                BottleneckBlock::Conv(Conv2dLayer::init(
                    &mut store,
                    &mut rng,
                    &format!("{pfx}.lfa_conv"),
                    ConvSpec::same(c3, c3, 3, 1),
                ))
            } else {
                BottleneckBlock::Lfa(Lfa::init(
                    &mut store,
                    &mut rng,
                    &format!("{pfx}.lfa"),
                    c3,
                    cfg.effective_patch_ratios(),
                    (bh, bw),
                )?)
            };

            let mk_stage = |store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, s: usize, ch| {
                if cfg.disable_frfb {
                    Ok(FusionStage::Reduce(Conv2dLayer::init(
                        store,
                        rng,
                        &format!("{pfx}.up{}", s + 1),
                        ConvSpec::new(2 * ch, ch, (1, 1)),
                    )))
                } else {
                    Frfb::init(store, rng, &format!("{pfx}.frfb{}", s + 1), ch)
                        .map(FusionStage::Frfb)
                }
            };
            let stages = [
                mk_stage(&mut store, &mut rng, 0, c2)?,
                mk_stage(&mut store, &mut rng, 1, c1)?,
            ];

            let heads = (!cfg.disable_deep_supervision).then(|| {
                [
                    DeepHead::init(&mut store, &mut rng, &format!("{pfx}.head_bn"), c3, 2),
                    DeepHead::init(&mut store, &mut rng, &format!("{pfx}.head_s1"), c2, 1),
                    DeepHead::init(&mut store, &mut rng, &format!("{pfx}.head_s2"), c1, 0),
                ]
            });

            paths.push(PathModules {
                encoder,
                mscfa,
                bottleneck,
                stages,
                heads,
            });
        }

        let fusion_mix = Conv2dLayer::init(
            &mut store,
            &mut rng,
            "fusion.mix",
            ConvSpec::new(2 * c1, c1, (1, 1)),
        );
        let fusion_out =
            Conv2dLayer::init(&mut store, &mut rng, "fusion.out", ConvSpec::new(c1, 1, (1, 1)));

        let paths: [PathModules; 2] = match paths.try_into() {
            Ok(p) => p,
            Err(_) => unreachable!("exactly two paths are built"),
        };
        Ok((
            DmadsNet {
                cfg: cfg.clone(),
                paths,
                fusion_mix,
                fusion_out,
            },
            store,
        ))
    }

    fn path_features<T: Element>(
        &self,
        b: &Binder<T>,
        path: &PathModules,
        image: Var,
    ) -> Result<PathFeatures> {
        let [lay1, lay2, lay3] = path.encoder.forward(b, image)?;
        let process = |m: &Option<Mscfa>, x: Var| -> Result<Var> {
            match m {
                Some(block) => block.forward(b, x),
                None => Ok(x),
            }
        };
        Ok(PathFeatures {
            skips: [process(&path.mscfa[0], lay1)?, process(&path.mscfa[1], lay2)?],
            bottleneck: process(&path.mscfa[2], lay3)?,
        })
    }

    /// Run the whole network. The image must match the configured size.
    pub fn forward<T: Element>(&self, b: &Binder<T>, image: Var) -> Result<ForwardOutput> {
        let shape = b.graph().shape(image);
        if shape.h != self.cfg.image_size || shape.w != self.cfg.image_size {
            return Err(Error::DimMismatch {
                op: "forward",
                dimension: "image size",
                expected: self.cfg.image_size,
                got: shape.h.max(shape.w),
            });
        }

        let feats = [
            self.path_features(b, &self.paths[0], image)?,
            self.path_features(b, &self.paths[1], image)?,
        ];

        let mut decoder_outputs = Vec::with_capacity(2);
        // taps[path] = [bottleneck, stage1, stage2]
        let mut taps: Vec<Vec<Var>> = vec![Vec::new(), Vec::new()];
        for (i, path) in self.paths.iter().enumerate() {
            // Skip source per wiring: the as-written variant reads the first
            // path's skips on both paths.
            let src = match self.cfg.skip_wiring {
                SkipWiring::Symmetric => i,
                SkipWiring::AsWritten => 0,
            };
            if let Some(heads) = &path.heads {
                taps[i].push(heads[0].forward(b, feats[i].bottleneck)?);
            }
            let mut out = match &path.bottleneck {
                BottleneckBlock::Lfa(lfa) => lfa.forward(b, feats[i].bottleneck)?,
                BottleneckBlock::Conv(conv) => conv.forward(b, feats[i].bottleneck)?,
            };
            for (s, stage) in path.stages.iter().enumerate() {
                let low = feats[src].skips[1 - s]; // stage 1 fuses lay2, stage 2 lay1
                out = stage.forward(b, low, out)?;
                if let Some(heads) = &path.heads {
                    taps[i].push(heads[s + 1].forward(b, out)?);
                }
            }
            decoder_outputs.push(out);
        }

        let final_map = self.fusion(b, decoder_outputs[0], decoder_outputs[1])?;

        // Companion order mirrors the loss accumulation: both bottleneck taps
        // first, then the two fusion stages, alternating path 1 / path 2.
        let mut deep_maps = Vec::new();
        if self.paths[0].heads.is_some() {
            for s in 0..3 {
                deep_maps.push(taps[0][s]);
                deep_maps.push(taps[1][s]);
            }
        }

        Ok(ForwardOutput {
            final_map,
            deep_maps,
            decoder_outputs: [decoder_outputs[0], decoder_outputs[1]],
        })
    }

    /// Fusion head: channel concat, relu(1x1) mix, then 1x1 to one-channel
    /// logits. Sigmoid is applied only at loss/inference time.
    pub fn fusion<T: Element>(&self, b: &Binder<T>, out1: Var, out2: Var) -> Result<Var> {
        let g = b.graph();
        let cat = g.concat_channels(out1, out2)?;
        let mixed = g.relu(self.fusion_mix.forward(b, cat)?)?;
        self.fusion_out.forward(b, mixed)
    }

    /// Analytic parameter count; equals the store's element total.
    pub fn param_count(&self) -> u64 {
        let mut total = self.fusion_mix.param_count() + self.fusion_out.param_count();
        for path in &self.paths {
            total += path.encoder.param_count();
            total += path
                .mscfa
                .iter()
                .flatten()
                .map(|m| m.param_count())
                .sum::<u64>();
            total += match &path.bottleneck {
                BottleneckBlock::Lfa(lfa) => lfa.param_count(),
                BottleneckBlock::Conv(conv) => conv.param_count(),
            };
            total += path.stages.iter().map(|s| s.param_count()).sum::<u64>();
            if let Some(heads) = &path.heads {
                total += heads.iter().map(|h| h.conv.param_count()).sum::<u64>();
            }
        }
        total
    }

    /// Analytic multiply-accumulate estimate for one `N=1` forward pass at
    /// the configured image size (convolutions and gating matrices).
    pub fn estimate_macs(&self) -> u64 {
        let s = self.cfg.image_size;
        let (s2, s4) = (s / 2, s / 4);
        let mut total = self.fusion_mix.macs(s, s) + self.fusion_out.macs(s, s);
        for path in &self.paths {
            total += path.encoder.macs(s, s);
            let sizes = [(s, s), (s2, s2), (s4, s4)];
            for (m, (h, w)) in path.mscfa.iter().zip(sizes) {
                if let Some(m) = m {
                    total += m.macs(h, w);
                }
            }
            total += match &path.bottleneck {
                BottleneckBlock::Lfa(lfa) => lfa.macs(s4, s4),
                BottleneckBlock::Conv(conv) => conv.macs(s4, s4),
            };
            total += path.stages[0].macs(s2, s2) + path.stages[1].macs(s, s);
            if let Some(heads) = &path.heads {
                total += heads[0].conv.macs(s4, s4)
                    + heads[1].conv.macs(s2, s2)
                    + heads[2].conv.macs(s, s);
            }
        }
        total
    }
}
