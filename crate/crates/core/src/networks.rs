//! Network builders and forward evaluation.
//!
//! Two families cover every job in the crate:
//!
//! - the *skip* encoder-decoder used by the photography tasks: blocks of
//!   four convolutions (the second at stride 2) with per-channel
//!   normalisation and ReLU, a x2 upsample closing each block, and the
//!   pre-downsample feature concatenated back onto the decoder path;
//! - the *input-convex* fully connected family for the 2-D experiment,
//!   where a label proposal is injected into every layer and the hidden
//!   path weights can be constrained nonnegative.
//!
//! `build_small_net` is the plain conv-relu stack used by the
//! adversarial purification defense.
//!
//! Parameters live in a [`ParamSet`]: an ordered name -> tensor map plus
//! named groups that the regularizers and projection steps refer to.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Value};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    fn apply(&self, v: &Value) -> Value {
        match self {
            Activation::Linear => v.clone(),
            Activation::Relu => v.relu(),
            Activation::LeakyRelu(s) => v.leaky_relu(*s),
            Activation::Sigmoid => v.sigmoid(),
        }
    }
}

/// One encoder-decoder block of the skip network.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub normalize: bool,
    pub skip: bool,
}

/// One convolution of the plain stack.
#[derive(Debug, Clone)]
pub struct PlainLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub enum Layout {
    Skip { blocks: Vec<BlockSpec>, sr_factor: Option<usize> },
    Plain { layers: Vec<PlainLayerSpec> },
    Ficnn { in_dim: usize, hidden: Vec<usize>, partial: bool },
}

/// Declarative architecture; immutable and shareable between jobs.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub layout: Layout,
}

/// Group name holding every weight tensor (biases excluded).
pub const GROUP_ALL_WEIGHTS: &str = "all_weights";
/// Default regularization group: all blocks above the first.
pub const GROUP_REG_DEFAULT: &str = "reg_default";
/// Hidden-path weights of the input-convex family.
pub const GROUP_ICNN: &str = "icnn";

/// Default channel width of the skip network.
pub const SKIP_DEFAULT_CHANNELS: usize = 32;

/// Skip encoder-decoder with `n_blocks` blocks of four convolutions.
/// With `sr_factor`, a final upsample expands the output resolution.
pub fn build_skip_net(
    n_blocks: usize,
    channels: usize,
    in_ch: usize,
    out_ch: usize,
    sr_factor: Option<usize>,
) -> NetworkSpec {
    assert!(n_blocks >= 1, "build_skip_net needs n_blocks >= 1, got {n_blocks}");
    assert!(channels >= 4, "build_skip_net needs channels >= 4, got {channels}");
    if let Some(s) = sr_factor {
        assert!(s >= 2, "sr_factor must be >= 2, got {s}");
    }
    let blocks = (0..n_blocks)
        .map(|_| BlockSpec {
            channels,
            kernel: 3,
            activation: Activation::Relu,
            normalize: true,
            skip: true,
        })
        .collect();
    NetworkSpec { in_ch, out_ch, layout: Layout::Skip { blocks, sr_factor } }
}

/// Plain conv-relu stack at stride 1, resolution preserving. The final
/// convolution maps back to the image channels without an activation.
pub fn build_small_net(n_conv: usize, channels: usize, in_ch: usize, out_ch: usize) -> NetworkSpec {
    assert!(n_conv >= 1, "build_small_net needs n_conv >= 1, got {n_conv}");
    let mut layers = Vec::with_capacity(n_conv);
    for i in 0..n_conv {
        let last = i + 1 == n_conv;
        layers.push(PlainLayerSpec {
            out_channels: if last { out_ch } else { channels },
            kernel: 3,
            activation: if last { Activation::Linear } else { Activation::Relu },
        });
    }
    NetworkSpec { in_ch, out_ch, layout: Layout::Plain { layers } }
}

/// Input-convex scorer over a (data, proposal) pair. The forward input
/// is the concatenation [x; y] with y a single trailing coordinate that
/// every layer receives again. `partial` adds an unconstrained side path
/// over x for extra expressive power.
pub fn build_ficnn(in_dim: usize, hidden: Vec<usize>, partial: bool) -> NetworkSpec {
    assert!(!hidden.is_empty(), "build_ficnn needs at least one hidden layer");
    NetworkSpec {
        in_ch: in_dim + 1,
        out_ch: 1,
        layout: Layout::Ficnn { in_dim, hidden, partial },
    }
}

/// Shape of one parameter tensor.
enum ParamShape {
    Conv { co: usize, ci: usize, k: usize },
    Mat { rows: usize, cols: usize },
    Vec(usize),
}

/// Canonical (name, shape, is_weight, group) enumeration of a spec.
fn enumerate_params(spec: &NetworkSpec) -> Vec<(String, ParamShape, bool, Option<String>)> {
    let mut out = Vec::new();
    match &spec.layout {
        Layout::Skip { blocks, .. } => {
            let mut ch = spec.in_ch;
            for (bi, b) in blocks.iter().enumerate() {
                for ci in 0..4 {
                    let cin = if ci == 0 { ch } else { b.channels };
                    out.push((
                        format!("b{bi}.c{ci}.w"),
                        ParamShape::Conv { co: b.channels, ci: cin, k: b.kernel },
                        true,
                        Some(format!("block{bi}")),
                    ));
                    out.push((format!("b{bi}.c{ci}.b"), ParamShape::Vec(b.channels), false, None));
                }
                ch = if b.skip { 2 * b.channels } else { b.channels };
            }
            out.push((
                "proj.w".to_string(),
                ParamShape::Conv { co: spec.out_ch, ci: ch, k: 1 },
                true,
                Some("proj".to_string()),
            ));
            out.push(("proj.b".to_string(), ParamShape::Vec(spec.out_ch), false, None));
        }
        Layout::Plain { layers } => {
            let mut ch = spec.in_ch;
            for (i, l) in layers.iter().enumerate() {
                out.push((
                    format!("c{i}.w"),
                    ParamShape::Conv { co: l.out_channels, ci: ch, k: l.kernel },
                    true,
                    Some(format!("layer{i}")),
                ));
                out.push((format!("c{i}.b"), ParamShape::Vec(l.out_channels), false, None));
                ch = l.out_channels;
            }
        }
        Layout::Ficnn { in_dim, hidden, partial } => {
            let mut prev = *in_dim;
            for (i, &hd) in hidden.iter().enumerate() {
                out.push((
                    format!("l{i}.wz"),
                    ParamShape::Mat { rows: hd, cols: prev },
                    true,
                    Some(GROUP_ICNN.to_string()),
                ));
                out.push((
                    format!("l{i}.wy"),
                    ParamShape::Mat { rows: hd, cols: 1 },
                    true,
                    None,
                ));
                out.push((format!("l{i}.b"), ParamShape::Vec(hd), false, None));
                if *partial {
                    let ucols = if i == 0 { *in_dim } else { hidden[i - 1] };
                    out.push((
                        format!("u{i}.w"),
                        ParamShape::Mat { rows: hd, cols: ucols },
                        true,
                        None,
                    ));
                    out.push((format!("u{i}.b"), ParamShape::Vec(hd), false, None));
                    out.push((
                        format!("l{i}.wu"),
                        ParamShape::Mat { rows: hd, cols: hd },
                        true,
                        None,
                    ));
                }
                prev = hd;
            }
            out.push((
                "out.w".to_string(),
                ParamShape::Mat { rows: 1, cols: prev },
                true,
                Some(GROUP_ICNN.to_string()),
            ));
            if *partial {
                out.push((
                    "out.uw".to_string(),
                    ParamShape::Mat { rows: 1, cols: *hidden.last().unwrap() },
                    true,
                    None,
                ));
            }
            out.push(("out.b".to_string(), ParamShape::Vec(1), false, None));
        }
    }
    out
}

/// Ordered parameter store with named subsets for partial
/// regularization and projection.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
    groups: IndexMap<String, Vec<String>>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn group(&self, name: &str) -> &[String] {
        self.groups
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter group {name:?}"))
            .as_slice()
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn group_names(&self) -> impl Iterator<Item = &String> {
        self.groups.keys()
    }

    /// Clamp every entry of the group to max(., 0) elementwise.
    pub fn project_nonnegative(&mut self, group: &str) {
        let members: Vec<String> = self.group(group).to_vec();
        for name in members {
            for v in self.get_mut(&name).data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    /// l1 norm of the negative parts over a group (diagnostic).
    pub fn negative_mass(&self, group: &str) -> f64 {
        self.group(group)
            .iter()
            .map(|n| {
                self.entries[n]
                    .data()
                    .iter()
                    .map(|&v| (-v).max(0.0))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Register every parameter on a tape. Names in `trainable` become
    /// gradient-tracked leaves; everything else is a constant.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let map = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { map }
    }

    pub fn bind_all(&self, tape: &Tape) -> BoundParams {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen(&self, tape: &Tape) -> BoundParams {
        self.bind(tape, |_| false)
    }
}

/// Tape handles for one bound ParamSet.
pub struct BoundParams {
    map: IndexMap<String, Value>,
}

impl BoundParams {
    pub fn value(&self, name: &str) -> &Value {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown bound parameter {name:?}"))
    }

    /// Gradients accumulated by the last backward pass, keyed by name.
    /// Parameters bound as constants are absent.
    pub fn grads(&self) -> IndexMap<String, Tensor> {
        self.map
            .iter()
            .filter_map(|(n, v)| v.grad().map(|g| (n.clone(), g)))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.map.iter()
    }
}

/// He fan-in normal init for weights, zeros for biases; deterministic
/// per seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamSet {
    let mut rng = rng::stream(seed, "init_params");
    let mut entries = IndexMap::new();
    let mut groups: IndexMap<String, Vec<String>> = IndexMap::new();
    let mut all_weights = Vec::new();
    for (name, shape, is_weight, group) in enumerate_params(spec) {
        let t = match shape {
            ParamShape::Conv { co, ci, k } => {
                let std = (2.0 / (ci * k * k) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                Tensor::from_fn(vec![co, ci, k, k], |_| normal.sample(&mut rng))
            }
            ParamShape::Mat { rows, cols } => {
                let std = (2.0 / cols as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                Tensor::from_fn(vec![rows, cols], |_| normal.sample(&mut rng))
            }
            ParamShape::Vec(n) => Tensor::zeros(vec![n]),
        };
        if is_weight {
            all_weights.push(name.clone());
            if let Some(g) = group {
                groups.entry(g).or_default().push(name.clone());
            }
        }
        entries.insert(name, t);
    }
    groups.insert(GROUP_ALL_WEIGHTS.to_string(), all_weights);
    // regularize everything above the first block / layer
    let reg = match &spec.layout {
        Layout::Skip { blocks, .. } => {
            let mut v = Vec::new();
            for bi in 1..blocks.len() {
                v.extend(groups[&format!("block{bi}")].clone());
            }
            v.extend(groups["proj"].clone());
            v
        }
        Layout::Plain { layers } => {
            let mut v = Vec::new();
            for i in 1..layers.len() {
                v.extend(groups[&format!("layer{i}")].clone());
            }
            v
        }
        Layout::Ficnn { .. } => groups[GROUP_ICNN].clone(),
    };
    groups.insert(GROUP_REG_DEFAULT.to_string(), reg);
    ParamSet { entries, groups }
}

/// Uniform random input on [0, 0.1], the conventional seed tensor for
/// generator-style use.
pub fn random_input(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, "random_input");
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..0.1))
}

fn conv_block_layer(
    x: &Value,
    params: &BoundParams,
    name: &str,
    stride: usize,
    kernel: usize,
    normalize: bool,
    activation: Activation,
    eps: f64,
) -> Value {
    let pad = (kernel - 1) / 2;
    let mut v = x
        .conv2d(params.value(&format!("{name}.w")), stride, pad)
        .bias_add(params.value(&format!("{name}.b")));
    if normalize {
        v = v.instance_norm(eps);
    }
    activation.apply(&v)
}

/// Normalisation epsilon used inside network forward passes.
pub const NORM_EPS: f64 = 1e-6;

/// Forward pass; output stays on the input's tape and is differentiable
/// with respect to every bound parameter and the input.
pub fn forward(spec: &NetworkSpec, params: &BoundParams, input: &Value) -> Value {
    forward_impl(spec, params, input, &mut None)
}

/// Forward pass that also reports named intermediate activations.
pub fn forward_trace(
    spec: &NetworkSpec,
    params: &BoundParams,
    input: &Value,
) -> (Value, Vec<(String, Value)>) {
    let mut trace = Some(Vec::new());
    let out = forward_impl(spec, params, input, &mut trace);
    (out, trace.unwrap())
}

fn note(trace: &mut Option<Vec<(String, Value)>>, name: String, v: &Value) {
    if let Some(t) = trace.as_mut() {
        t.push((name, v.clone()));
    }
}

fn forward_impl(
    spec: &NetworkSpec,
    params: &BoundParams,
    input: &Value,
    trace: &mut Option<Vec<(String, Value)>>,
) -> Value {
    match &spec.layout {
        Layout::Skip { blocks, sr_factor } => {
            let in_shape = input.shape();
            assert!(
                in_shape.len() == 3 && in_shape[0] == spec.in_ch,
                "skip net expects [{},H,W] input, got {:?}",
                spec.in_ch,
                in_shape
            );
            assert!(
                in_shape[1] >= 3 && in_shape[2] >= 3,
                "skip net input {}x{} too small for stride-2 blocks",
                in_shape[1],
                in_shape[2]
            );
            let mut x = input.clone();
            for (bi, b) in blocks.iter().enumerate() {
                let h1 = conv_block_layer(
                    &x,
                    params,
                    &format!("b{bi}.c0"),
                    1,
                    b.kernel,
                    b.normalize,
                    b.activation,
                    NORM_EPS,
                );
                let h2 = conv_block_layer(
                    &h1,
                    params,
                    &format!("b{bi}.c1"),
                    2,
                    b.kernel,
                    b.normalize,
                    b.activation,
                    NORM_EPS,
                );
                let h3 = conv_block_layer(
                    &h2,
                    params,
                    &format!("b{bi}.c2"),
                    1,
                    b.kernel,
                    b.normalize,
                    b.activation,
                    NORM_EPS,
                );
                let h4 = conv_block_layer(
                    &h3,
                    params,
                    &format!("b{bi}.c3"),
                    1,
                    b.kernel,
                    b.normalize,
                    b.activation,
                    NORM_EPS,
                );
                let hs = h1.shape();
                let mut up = h4.upsample_bilinear(2);
                let us = up.shape();
                if us[1] != hs[1] || us[2] != hs[2] {
                    up = up.crop_hw(hs[1], hs[2]);
                }
                x = if b.skip { h1.concat_channels(&up) } else { up };
                note(trace, format!("b{bi}"), &x);
            }
            if let Some(s) = sr_factor {
                if *s >= 2 {
                    x = x.upsample_bilinear(*s);
                    note(trace, "sr_upsample".to_string(), &x);
                }
            }
            let out = x
                .conv2d(params.value("proj.w"), 1, 0)
                .bias_add(params.value("proj.b"));
            note(trace, "proj".to_string(), &out);
            out
        }
        Layout::Plain { layers } => {
            let in_shape = input.shape();
            assert!(
                in_shape.len() == 3 && in_shape[0] == spec.in_ch,
                "plain net expects [{},H,W] input, got {:?}",
                spec.in_ch,
                in_shape
            );
            let mut x = input.clone();
            for (i, l) in layers.iter().enumerate() {
                let pad = (l.kernel - 1) / 2;
                x = x
                    .conv2d(params.value(&format!("c{i}.w")), 1, pad)
                    .bias_add(params.value(&format!("c{i}.b")));
                x = l.activation.apply(&x);
                note(trace, format!("c{i}"), &x);
            }
            x
        }
        Layout::Ficnn { in_dim, hidden, partial } => {
            let in_shape = input.shape();
            assert!(
                in_shape == [in_dim + 1],
                "ficnn expects [{}] input ([x; proposal]), got {:?}",
                in_dim + 1,
                in_shape
            );
            let x = input.slice1d(0, *in_dim);
            let y = input.slice1d(*in_dim, 1);
            let mut z: Option<Value> = None;
            let mut u: Option<Value> = None;
            for (i, _) in hidden.iter().enumerate() {
                if *partial {
                    let uin = u.as_ref().unwrap_or(&x);
                    let unew = params
                        .value(&format!("u{i}.w"))
                        .matvec(uin)
                        .add(params.value(&format!("u{i}.b")))
                        .relu();
                    u = Some(unew);
                }
                let zin = z.as_ref().unwrap_or(&x);
                let mut pre = params
                    .value(&format!("l{i}.wz"))
                    .matvec(zin)
                    .add(&params.value(&format!("l{i}.wy")).matvec(&y))
                    .add(params.value(&format!("l{i}.b")));
                if *partial {
                    pre = pre.add(&params.value(&format!("l{i}.wu")).matvec(u.as_ref().unwrap()));
                }
                let znew = pre.relu();
                note(trace, format!("l{i}"), &znew);
                z = Some(znew);
            }
            let mut score = params
                .value("out.w")
                .matvec(z.as_ref().unwrap())
                .add(params.value("out.b"));
            if *partial {
                score = score.add(&params.value("out.uw").matvec(u.as_ref().unwrap()));
            }
            note(trace, "out".to_string(), &score);
            score
        }
    }
}

/// Human-readable key=value description, written into run records.
pub fn describe(spec: &NetworkSpec) -> String {
    let mut s = String::new();
    match &spec.layout {
        Layout::Skip { blocks, sr_factor } => {
            s.push_str("kind=skip\n");
            s.push_str(&format!("blocks={}\n", blocks.len()));
            s.push_str(&format!("channels={}\n", blocks.first().map(|b| b.channels).unwrap_or(0)));
            s.push_str(&format!("sr_factor={}\n", sr_factor.map_or(0, |f| f)));
        }
        Layout::Plain { layers } => {
            s.push_str("kind=plain\n");
            s.push_str(&format!("layers={}\n", layers.len()));
            s.push_str(&format!(
                "channels={}\n",
                layers.first().map(|l| l.out_channels).unwrap_or(0)
            ));
        }
        Layout::Ficnn { in_dim, hidden, partial } => {
            s.push_str("kind=ficnn\n");
            s.push_str(&format!("in_dim={in_dim}\n"));
            s.push_str(&format!(
                "hidden={}\n",
                hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
            ));
            s.push_str(&format!("partial={partial}\n"));
        }
    }
    s.push_str(&format!("in_ch={}\n", spec.in_ch));
    s.push_str(&format!("out_ch={}\n", spec.out_ch));
    s
}
