//! Parameter storage, deterministic initialization and the reusable layers
//! the network is composed from.
//!
//! Parameters live in a flat, ordered [`ParameterStore`] keyed by dotted path
//! names (`"p1.enc.stem.w"`). Layer structs own their parameter names and
//! specs; at forward time a [`Binder`] leases store entries into the current
//! graph as gradient-tracked leaves, and maps gradients back to names after
//! the backward pass.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Element, Gradients, Graph, Shape, Tensor, UpsampleMode, Var};

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Default)]
pub struct ParameterStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Element> std::fmt::Debug for ParameterStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ParameterStore({} entries, {} elements)",
            self.entries.len(),
            self.total_elements()
        )
    }
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParameter {
            name: name.to_string(),
        })
    }

    /// Replace a value, keeping the original shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter {
                name: name.to_string(),
            })?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter set",
                lhs: slot.shape().to_string(),
                rhs: tensor.shape().to_string(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable element count.
    pub fn total_elements(&self) -> u64 {
        self.entries.values().map(|t| t.shape().numel() as u64).sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Zero every entry in place; used by tests exercising the zero-parameter
    /// identities of the attention blocks.
    pub fn zero_all(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }
}

/// Kernel init: uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, drawn in f64
/// so the stream of values is identical regardless of the store's precision.
pub fn fan_in_uniform<T: Element>(rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Leases parameters from a store into one graph, remembering name -> Var so
/// gradients can be routed back to the optimizer by name.
pub struct Binder<'g, 's, T: Element> {
    graph: &'g Graph<T>,
    store: &'s ParameterStore<T>,
    bound: RefCell<IndexMap<String, Var>>,
}

impl<'g, 's, T: Element> Binder<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParameterStore<T>) -> Self {
        Binder {
            graph,
            store,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Graph leaf for a named parameter (bound at most once per graph).
    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let tensor = self.store.get(name)?.clone();
        let var = self.graph.param(tensor);
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Pre-register an existing graph var under a parameter name. Gradient
    /// checks use this to route layer parameters to externally created
    /// leaves; the store value for that name is then never read.
    pub fn bind(&self, name: &str, var: Var) {
        self.bound.borrow_mut().insert(name.to_string(), var);
    }

    /// Gradients keyed by parameter name after a backward pass.
    pub fn gradients(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// A convolution with its parameters registered in the store.
#[derive(Clone)]
pub struct Conv2dLayer {
    weight: String,
    bias: Option<String>,
    pub spec: ConvSpec,
}

impl Conv2dLayer {
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: ConvSpec,
    ) -> Self {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let weight = format!("{name}.w");
        store.insert(&weight, fan_in_uniform(rng, spec.weight_shape(), fan_in));
        let bias = spec.bias.then(|| {
            let bias = format!("{name}.b");
            store.insert(&bias, Tensor::zeros(Shape::new(spec.out_channels, 1, 1, 1)));
            bias
        });
        Conv2dLayer { weight, bias, spec }
    }

    pub fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let w = b.var(&self.weight)?;
        let bias = match &self.bias {
            Some(name) => Some(b.var(name)?),
            None => None,
        };
        b.graph().conv2d(x, w, bias, &self.spec)
    }

    pub fn param_count(&self) -> u64 {
        self.spec.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.spec.macs(h, w)
    }
}

/// Two 3x3 convolutions with a skip connection:
/// `y = relu(conv(relu(conv(x))) + x)`. Channel and spatial size preserving.
#[derive(Clone)]
pub struct ResidualBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let spec = ConvSpec::same(channels, channels, 3, 1);
        ResidualBlock {
            conv1: Conv2dLayer::init(store, rng, &format!("{name}.c1"), spec),
            conv2: Conv2dLayer::init(store, rng, &format!("{name}.c2"), spec),
            channels,
        }
    }

    pub fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let h = g.relu(self.conv1.forward(b, x)?)?;
        let h = self.conv2.forward(b, h)?;
        g.relu(g.add(h, x)?)
    }

    pub fn param_count(&self) -> u64 {
        self.conv1.param_count() + self.conv2.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w) + self.conv2.macs(h, w)
    }
}

/// Squeeze-excite channel gate with reduction ratio 2:
/// squeeze by global average, gate through `W2 . relu(W1 . z)` and a sigmoid,
/// then rescale the input per channel.
#[derive(Clone)]
pub struct SeGate {
    reduce: Conv2dLayer,
    expand: Conv2dLayer,
    pub channels: usize,
}

impl SeGate {
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::InvalidConfig {
                op: "se_gate",
                reason: format!("channel count {channels} must be even (reduction ratio 2)"),
            });
        }
        // The gating matrices are stored as 1x1 kernels; on a N x C x 1 x 1
        // squeeze vector a 1x1 convolution is exactly the matrix product.
        let reduce = ConvSpec::new(channels, channels / 2, (1, 1));
        let expand = ConvSpec::new(channels / 2, channels, (1, 1));
        Ok(SeGate {
            reduce: Conv2dLayer::init(store, rng, &format!("{name}.w1"), reduce),
            expand: Conv2dLayer::init(store, rng, &format!("{name}.w2"), expand),
            channels,
        })
    }

    /// Just the gating chain: `sigmoid(W2 . relu(W1 . gap(x)))`, a per-channel
    /// vector of shape `N x C x 1 x 1`.
    pub fn gate_vector<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let z = g.global_avg_pool(x)?;
        let h = g.relu(self.reduce.forward(b, z)?)?;
        g.sigmoid(self.expand.forward(b, h)?)
    }

    /// Returns `(rescaled input, per-channel weights in (0,1))`.
    pub fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<(Var, Var)> {
        let g = b.graph();
        let s = self.gate_vector(b, x)?;
        let scaled = g.channel_scale(x, s)?;
        Ok((scaled, s))
    }

    pub fn param_count(&self) -> u64 {
        self.reduce.param_count() + self.expand.param_count()
    }

    pub fn macs(&self) -> u64 {
        self.reduce.macs(1, 1) + self.expand.macs(1, 1)
    }
}

/// Spatial attention: reduce channels 4x, aggregate with a stride-2 conv,
/// refine, upsample back, restore channels, and gate the input through a
/// sigmoid mask.
#[derive(Clone)]
pub struct Esa {
    reduce: Conv2dLayer,
    down: Conv2dLayer,
    refine1: Conv2dLayer,
    refine2: Conv2dLayer,
    restore: Conv2dLayer,
    pub channels: usize,
}

impl Esa {
    pub fn init<T: Element>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::InvalidConfig {
                op: "esa",
                reason: format!("channel count {channels} must be divisible by 4"),
            });
        }
        let mid = channels / 4;
        Ok(Esa {
            reduce: Conv2dLayer::init(store, rng, &format!("{name}.reduce"), ConvSpec::new(channels, mid, (1, 1))),
            down: Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.down"),
                ConvSpec::same(mid, mid, 3, 1).with_stride(2),
            ),
            refine1: Conv2dLayer::init(store, rng, &format!("{name}.ref1"), ConvSpec::same(mid, mid, 3, 1)),
            refine2: Conv2dLayer::init(store, rng, &format!("{name}.ref2"), ConvSpec::same(mid, mid, 3, 1)),
            restore: Conv2dLayer::init(store, rng, &format!("{name}.restore"), ConvSpec::new(mid, channels, (1, 1))),
            channels,
        })
    }

    pub fn forward<T: Element>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let shape = g.shape(x);
        if shape.h < 4 || shape.w < 4 || shape.h % 2 != 0 || shape.w % 2 != 0 {
            return Err(Error::InvalidConfig {
                op: "esa",
                reason: format!(
                    "spatial size {}x{} must be even and at least 4 for the stride-2 path",
                    shape.h, shape.w
                ),
            });
        }
        let t = self.reduce.forward(b, x)?;
        let t = self.down.forward(b, t)?;
        let t = self.refine1.forward(b, t)?;
        let t = self.refine2.forward(b, t)?;
        let t = g.upsample2x(t, UpsampleMode::Bilinear)?;
        let mask = g.sigmoid(self.restore.forward(b, t)?)?;
        g.mul(x, mask)
    }

    pub fn param_count(&self) -> u64 {
        self.reduce.param_count()
            + self.down.param_count()
            + self.refine1.param_count()
            + self.refine2.param_count()
            + self.restore.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (dh, dw) = (h / 2, w / 2);
        self.reduce.macs(h, w)
            + self.down.macs(h, w)
            + self.refine1.macs(dh, dw)
            + self.refine2.macs(dh, dw)
            + self.restore.macs(h, w)
    }
}
