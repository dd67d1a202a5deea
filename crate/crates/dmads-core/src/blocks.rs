//! The three attention/fusion blocks of the network.
//!
//! - [`Mscfa`]: three parallel paths of stacked residual blocks feeding 3x3
//!   convolutions at dilation rates 4/2/1, fused pairwise by 1x1 convolutions
//!   and added back onto the input.
//! - [`Lfa`]: squeeze-excite channel gating followed by four patch-wise
//!   convolution branches at different patch sizes, fused by a 1x1 conv.
//! - [`Frfb`]: decoder fusion multiplying a gated low-level channel vector,
//!   the low + deep sum, and a squeeze-excite rescaled deep tensor.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2dLayer, Esa, ParameterStore, ResidualBlock, SeGate};
use crate::tensor::{ConvSpec, Element, UpsampleMode, Var};

/// Multi-scale convolutional feature attention. Shape preserving.
pub struct Mscfa {
    res4: Vec<ResidualBlock>,
    res2: Vec<ResidualBlock>,
    res1: ResidualBlock,
    dil4: Conv2dLayer,
    dil2: Conv2dLayer,
    dil1: Conv2dLayer,
    fuse12: Conv2dLayer,
    fuse123: Conv2dLayer,
    out: Conv2dLayer,
    pub channels: usize,
}

impl Mscfa {
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let c = channels;
        Mscfa {
            res4: (0..3)
                .map(|i| ResidualBlock::init(store, rng, &format!("{name}.res4.{i}"), c))
                .collect(),
            res2: (0..2)
                .map(|i| ResidualBlock::init(store, rng, &format!("{name}.res2.{i}"), c))
                .collect(),
            res1: ResidualBlock::init(store, rng, &format!("{name}.res1"), c),
            dil4: Conv2dLayer::init(store, rng, &format!("{name}.dil4"), ConvSpec::same(c, c, 3, 4)),
            dil2: Conv2dLayer::init(store, rng, &format!("{name}.dil2"), ConvSpec::same(c, c, 3, 2)),
            dil1: Conv2dLayer::init(store, rng, &format!("{name}.dil1"), ConvSpec::same(c, c, 3, 1)),
            fuse12: Conv2dLayer::init(store, rng, &format!("{name}.fuse12"), ConvSpec::new(2 * c, c, (1, 1))),
            fuse123: Conv2dLayer::init(store, rng, &format!("{name}.fuse123"), ConvSpec::new(2 * c, c, (1, 1))),
            out: Conv2dLayer::init(store, rng, &format!("{name}.out"), ConvSpec::new(c, c, (1, 1))),
            channels,
        }
    }

    /// `Out = In + relu(f1x1(Out_123))` where the three paths run residual
    /// stacks of depth 3/2/1 into dilated convs of rate 4/2/1 and are fused
    /// by nested concat + 1x1 + relu.
    pub fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let shape = g.shape(x);
        if shape.h < 2 || shape.w < 2 {
            return Err(Error::InvalidConfig {
                op: "mscfa",
                reason: format!("spatial size {}x{} must be at least 2x2", shape.h, shape.w),
            });
        }

        let mut t4 = x;
        for blk in &self.res4 {
            t4 = blk.forward(b, t4)?;
        }
        let out1 = self.dil4.forward(b, t4)?;

        let mut t2 = x;
        for blk in &self.res2 {
            t2 = blk.forward(b, t2)?;
        }
        let out2 = self.dil2.forward(b, t2)?;

        let out3 = self.dil1.forward(b, self.res1.forward(b, x)?)?;

        let mix = g.relu(self.fuse12.forward(b, g.concat_channels(out1, out2)?)?)?;
        let mix = g.relu(self.fuse123.forward(b, g.concat_channels(mix, out3)?)?)?;
        g.add(x, g.relu(self.out.forward(b, mix)?)?)
    }

    pub fn param_count(&self) -> u64 {
        self.res4.iter().map(|r| r.param_count()).sum::<u64>()
            + self.res2.iter().map(|r| r.param_count()).sum::<u64>()
            + self.res1.param_count()
            + self.dil4.param_count()
            + self.dil2.param_count()
            + self.dil1.param_count()
            + self.fuse12.param_count()
            + self.fuse123.param_count()
            + self.out.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.res4.iter().map(|r| r.macs(h, w)).sum::<u64>()
            + self.res2.iter().map(|r| r.macs(h, w)).sum::<u64>()
            + self.res1.macs(h, w)
            + self.dil4.macs(h, w)
            + self.dil2.macs(h, w)
            + self.dil1.macs(h, w)
            + self.fuse12.macs(h, w)
            + self.fuse123.macs(h, w)
            + self.out.macs(h, w)
    }
}

struct LfaBranch {
    ratio: usize,
    conv3: Conv2dLayer,
    conv1: Conv2dLayer,
}

impl LfaBranch {
    /// Patch-local processing: tiles are stacked on the batch axis so the
    /// shared 3x3 kernel (pad 1) cannot see across patch borders, then the
    /// plane is reassembled and passed through relu(1x1).
    fn forward<T: Element>(&self, b: &Binder<T>, o: Var) -> Result<Var> {
        let g = b.graph();
        let orig = g.shape(o);
        let tiles = g.space_to_patches(o, self.ratio)?;
        let tiles = self.conv3.forward(b, tiles)?;
        let plane = g.patches_to_space(tiles, self.ratio, orig)?;
        g.relu(self.conv1.forward(b, plane)?)
    }
}

/// Local feature attention over the bottleneck features.
pub struct Lfa {
    se: SeGate,
    branches: Vec<LfaBranch>,
    fuse: Conv2dLayer,
    pub channels: usize,
}

impl Lfa {
    /// `ratios` must contain exactly four entries, each no larger than the
    /// feature map the block will run on (`feature_hw`).
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        ratios: [usize; 4],
        feature_hw: (usize, usize),
    ) -> Result<Self> {
        let min_side = feature_hw.0.min(feature_hw.1);
        for &p in &ratios {
            if p == 0 || p > min_side {
                return Err(Error::InvalidConfig {
                    op: "lfa",
                    reason: format!(
                        "patch ratio {p} invalid for a {}x{} feature map",
                        feature_hw.0, feature_hw.1
                    ),
                });
            }
        }
        let c = channels;
        let se = SeGate::init(store, rng, &format!("{name}.se"), c)?;
        let branches = ratios
            .iter()
            .enumerate()
            .map(|(i, &ratio)| LfaBranch {
                ratio,
                conv3: Conv2dLayer::init(store, rng, &format!("{name}.p{i}.c3"), ConvSpec::same(c, c, 3, 1)),
                conv1: Conv2dLayer::init(store, rng, &format!("{name}.p{i}.c1"), ConvSpec::new(c, c, (1, 1))),
            })
            .collect();
        let fuse = Conv2dLayer::init(store, rng, &format!("{name}.fuse"), ConvSpec::new(4 * c, c, (1, 1)));
        Ok(Lfa {
            se,
            branches,
            fuse,
            channels,
        })
    }

    /// Run a single patch branch on an already-gated feature map (the piece
    /// between the channel gate and the four-way fusion).
    pub fn branch_forward<T: Element>(&self, b: &Binder<T>, gated: Var, index: usize) -> Result<Var> {
        self.branches[index].forward(b, gated)
    }

    /// Patch ratio of branch `index`.
    pub fn branch_ratio(&self, index: usize) -> usize {
        self.branches[index].ratio
    }

    pub fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let shape = g.shape(x);
        let max_ratio = self.branches.iter().map(|br| br.ratio).max().unwrap_or(1);
        if shape.h < max_ratio || shape.w < max_ratio {
            return Err(Error::InvalidConfig {
                op: "lfa",
                reason: format!(
                    "feature map {}x{} smaller than the largest patch ratio {max_ratio}",
                    shape.h, shape.w
                ),
            });
        }
        let (gated, _weights) = self.se.forward(b, x)?;
        let outs: Vec<Var> = self
            .branches
            .iter()
            .map(|br| br.forward(b, gated))
            .collect::<Result<_>>()?;
        let cat = g.concat_channels(
            g.concat_channels(outs[0], outs[1])?,
            g.concat_channels(outs[2], outs[3])?,
        )?;
        g.relu(self.fuse.forward(b, cat)?)
    }

    pub fn param_count(&self) -> u64 {
        self.se.param_count()
            + self
                .branches
                .iter()
                .map(|br| br.conv3.param_count() + br.conv1.param_count())
                .sum::<u64>()
            + self.fuse.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        // A padded tile grid has ceil(h/p)*ceil(w/p) tiles of p*p pixels.
        let branch_macs: u64 = self
            .branches
            .iter()
            .map(|br| {
                let tiles = h.div_ceil(br.ratio) * w.div_ceil(br.ratio);
                tiles as u64 * br.conv3.macs(br.ratio, br.ratio) + br.conv1.macs(h, w)
            })
            .sum();
        self.se.macs() + branch_macs + self.fuse.macs(h, w)
    }
}

/// Feature refinement and fusion between a skip feature (`low`, `C` channels)
/// and the deeper decoder state (`deep`, `2C` channels at half resolution).
pub struct Frfb {
    res: ResidualBlock,
    esa: Esa,
    low_gate: SeGate,
    reduce: Conv2dLayer,
    deep_se: SeGate,
    pub channels: usize,
}

impl Frfb {
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let c = channels;
        Ok(Frfb {
            res: ResidualBlock::init(store, rng, &format!("{name}.res"), c),
            esa: Esa::init(store, rng, &format!("{name}.esa"), c)?,
            low_gate: SeGate::init(store, rng, &format!("{name}.gate"), c)?,
            reduce: Conv2dLayer::init(store, rng, &format!("{name}.reduce"), ConvSpec::new(2 * c, c, (1, 1))),
            deep_se: SeGate::init(store, rng, &format!("{name}.se"), c)?,
            channels,
        })
    }

    fn check_shapes<T: Element>(&self, b: &Binder<T>, low: Var, deep: Var) -> Result<()> {
        let g = b.graph();
        let (ls, ds) = (g.shape(low), g.shape(deep));
        if ls.c != self.channels {
            return Err(Error::DimMismatch {
                op: "frfb low input",
                dimension: "channels",
                expected: self.channels,
                got: ls.c,
            });
        }
        if ds.c != 2 * ls.c {
            return Err(Error::DimMismatch {
                op: "frfb deep input",
                dimension: "channels",
                expected: 2 * ls.c,
                got: ds.c,
            });
        }
        if ds.h * 2 != ls.h || ds.w * 2 != ls.w {
            return Err(Error::ShapeMismatch {
                op: "frfb deep input",
                lhs: format!("{}x{} (half of low {}x{})", ls.h / 2, ls.w / 2, ls.h, ls.w),
                rhs: format!("{}x{}", ds.h, ds.w),
            });
        }
        if ls.n != ds.n {
            return Err(Error::DimMismatch {
                op: "frfb deep input",
                dimension: "batch",
                expected: ls.n,
                got: ds.n,
            });
        }
        Ok(())
    }

    /// `Out = broadcast(Low1) * (low + deep') * Deep2` with
    /// `deep' = relu(f1x1(upsample2x(deep)))`,
    /// `Low1 = gate(gap(esa(res(low))))` and `Deep2 = se(deep')`.
    pub fn forward<T: Element>(&self, b: &Binder<T>, low: Var, deep: Var) -> Result<Var> {
        self.check_shapes(b, low, deep)?;
        let g = b.graph();

        let deep_up = g.upsample2x(deep, UpsampleMode::Bilinear)?;
        let deep_r = g.relu(self.reduce.forward(b, deep_up)?)?;

        let refined = self.esa.forward(b, self.res.forward(b, low)?)?;
        let low1 = self.low_gate.gate_vector(b, refined)?;

        let fu = g.add(low, deep_r)?;
        let (deep2, _) = self.deep_se.forward(b, deep_r)?;
        g.mul(g.channel_scale(fu, low1)?, deep2)
    }

    pub fn param_count(&self) -> u64 {
        self.res.param_count()
            + self.esa.param_count()
            + self.low_gate.param_count()
            + self.reduce.param_count()
            + self.deep_se.param_count()
    }

    /// MAC count given the `low` input spatial size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.res.macs(h, w)
            + self.esa.macs(h, w)
            + self.low_gate.macs()
            + self.reduce.macs(h, w)
            + self.deep_se.macs()
    }
}
