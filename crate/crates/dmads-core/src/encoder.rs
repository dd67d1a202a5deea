//! Pooling-free truncated ResNet-style encoders.
//!
//! Each encoder keeps three residual stages with a light 3x3 stem; the 7x7
//! stem, all pooling, stage 4 and the classifier head are dropped. Spatial
//! size is halved only by stride-2 convolutions at the stage transitions, so
//! the three emitted feature maps sit at full, half and quarter resolution.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2dLayer, ParameterStore, ResidualBlock};
use crate::tensor::{ConvSpec, Element, Var};

/// Backbone depth. `R34` stacks more residual blocks per stage than `R18`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    R18,
    R34,
}

impl EncoderVariant {
    pub fn blocks_per_stage(self) -> [usize; 3] {
        match self {
            EncoderVariant::R18 => [2, 2, 2],
            EncoderVariant::R34 => [3, 4, 6],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EncoderVariant::R18 => "r18",
            EncoderVariant::R34 => "r34",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub stage_channels: [usize; 3],
    pub image_channels: usize,
}

/// Stride-2 residual transition (ResNet-B style): the main path downsamples
/// with a 3x3 stride-2 conv, the skip with a 1x1 stride-2 projection.
struct DownsampleBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    project: Conv2dLayer,
}

impl DownsampleBlock {
    fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        DownsampleBlock {
            conv1: Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.c1"),
                ConvSpec::same(in_ch, out_ch, 3, 1).with_stride(2),
            ),
            conv2: Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.c2"),
                ConvSpec::same(out_ch, out_ch, 3, 1),
            ),
            project: Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.proj"),
                ConvSpec::new(in_ch, out_ch, (1, 1)).with_stride(2),
            ),
        }
    }

    fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let main = g.relu(self.conv1.forward(b, x)?)?;
        let main = self.conv2.forward(b, main)?;
        let skip = self.project.forward(b, x)?;
        g.relu(g.add(main, skip)?)
    }

    fn param_count(&self) -> u64 {
        self.conv1.param_count() + self.conv2.param_count() + self.project.param_count()
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        // conv1 and project read the full-resolution input; conv2 runs at the
        // halved resolution.
        self.conv1.macs(h, w) + self.project.macs(h, w) + self.conv2.macs(h / 2, w / 2)
    }
}

enum Stage {
    First(Vec<ResidualBlock>),
    Down {
        transition: DownsampleBlock,
        blocks: Vec<ResidualBlock>,
    },
}

/// Three-stage encoder emitting `[lay1, lay2, lay3]` at `H`, `H/2`, `H/4`.
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: Conv2dLayer,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: EncoderConfig,
    ) -> Self {
        let [c1, c2, c3] = cfg.stage_channels;
        let blocks = cfg.variant.blocks_per_stage();
        let stem = Conv2dLayer::init(
            store,
            rng,
            &format!("{name}.stem"),
            ConvSpec::same(cfg.image_channels, c1, 3, 1),
        );

        let mut stages = Vec::with_capacity(3);
        let stage1 = (0..blocks[0])
            .map(|i| ResidualBlock::init(store, rng, &format!("{name}.s1.b{i}"), c1))
            .collect();
        stages.push(Stage::First(stage1));

        for (s, (in_ch, out_ch, count)) in
            [(c1, c2, blocks[1]), (c2, c3, blocks[2])].into_iter().enumerate()
        {
            let label = format!("{name}.s{}", s + 2);
            let transition = DownsampleBlock::init(store, rng, &format!("{label}.b0"), in_ch, out_ch);
            let rest = (1..count)
                .map(|i| ResidualBlock::init(store, rng, &format!("{label}.b{i}"), out_ch))
                .collect();
            stages.push(Stage::Down {
                transition,
                blocks: rest,
            });
        }
        Encoder { cfg, stem, stages }
    }

    /// Validate the spatial contract before any compute: both extents must be
    /// divisible by 4 (two stride-2 transitions) and at least 16.
    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h % 4 != 0 || w % 4 != 0 || h < 16 || w < 16 {
            return Err(Error::InvalidConfig {
                op: "encoder",
                reason: format!("input spatial size {h}x{w} must be divisible by 4 and >= 16"),
            });
        }
        Ok(())
    }

    /// Run the three stages, returning the per-stage feature maps.
    pub fn forward<T: Element>(&self, b: &Binder<T>, image: Var) -> Result<[Var; 3]> {
        let g = b.graph();
        let shape = g.shape(image);
        Self::check_input(shape.h, shape.w)?;
        if shape.c != self.cfg.image_channels {
            return Err(Error::DimMismatch {
                op: "encoder",
                dimension: "image channels",
                expected: self.cfg.image_channels,
                got: shape.c,
            });
        }

        let mut x = g.relu(self.stem.forward(b, image)?)?;
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            match stage {
                Stage::First(blocks) => {
                    for blk in blocks {
                        x = blk.forward(b, x)?;
                    }
                }
                Stage::Down { transition, blocks } => {
                    x = transition.forward(b, x)?;
                    for blk in blocks {
                        x = blk.forward(b, x)?;
                    }
                }
            }
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2]])
    }

    pub fn param_count(&self) -> u64 {
        let mut total = self.stem.param_count();
        for stage in &self.stages {
            match stage {
                Stage::First(blocks) => total += blocks.iter().map(|b| b.param_count()).sum::<u64>(),
                Stage::Down { transition, blocks } => {
                    total += transition.param_count()
                        + blocks.iter().map(|b| b.param_count()).sum::<u64>();
                }
            }
        }
        total
    }

    /// Analytic multiply-accumulate count for one image of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = self.stem.macs(h, w);
        let (mut ch, mut cw) = (h, w);
        for stage in &self.stages {
            match stage {
                Stage::First(blocks) => {
                    total += blocks.iter().map(|b| b.macs(ch, cw)).sum::<u64>();
                }
                Stage::Down { transition, blocks } => {
                    total += transition.macs(ch, cw);
                    ch /= 2;
                    cw /= 2;
                    total += blocks.iter().map(|b| b.macs(ch, cw)).sum::<u64>();
                }
            }
        }
        total
    }
}
