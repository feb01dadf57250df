//! Model assembly: a temporal-collapse frontend feeding a compact U-Net,
//! runnable either on the autodiff graph (training) or directly on tensors
//! (inference, with intermediates freed as soon as they are unused).

use crate::error::{Error, Result};
use crate::graph::{concat_forward, permute_data, softmax_forward, Graph, NodeId};
use crate::mask::MaskBatch;
use crate::nn::{
    conv2d_fwd, conv3d_fwd, maxpool2d_fwd, tconv2d_fwd, xavier_uniform, ConvSpec, ParamSet,
};
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Position of the frame a single-image model reads from a time series.
/// Sequences are ordered by acquisition date; this one is the sharp
/// late-season frame the annotations were drawn on.
pub const REFERENCE_TIME_INDEX: usize = 2;

/// Two 3D convolutions that collapse a short image sequence into one feature
/// map. Temporal kernel extents are fixed at 3 then 2 with no temporal
/// padding, so `time_steps` must shrink to exactly one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessorSpec {
    pub time_steps: usize,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
}

impl Default for ProcessorSpec {
    fn default() -> Self {
        ProcessorSpec {
            time_steps: 4,
            in_channels: 3,
            mid_channels: 32,
            out_channels: 64,
            leaky_slope: 0.01,
        }
    }
}

impl ProcessorSpec {
    pub fn conv1_spec(&self) -> ConvSpec {
        ConvSpec::c3(self.in_channels, self.mid_channels, (3, 3, 3), (0, 1, 1))
    }

    pub fn conv2_spec(&self) -> ConvSpec {
        ConvSpec::c3(self.mid_channels, self.out_channels, (2, 3, 3), (0, 1, 1))
    }

    pub fn param_count(&self) -> usize {
        self.conv1_spec().param_count() + self.conv2_spec().param_count()
    }

    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            problems.push("processor channel counts must be positive".into());
        }
        if !self.leaky_slope.is_finite() || !(0.0..1.0).contains(&self.leaky_slope) {
            problems.push(format!(
                "processor leaky_slope {} must be in [0, 1)",
                self.leaky_slope
            ));
        }
        // kernel extents 3 then 2, unpadded: T -> T-2 -> T-3
        if self.time_steps != 4 {
            problems.push(format!(
                "processor with time_steps {} does not collapse to a single step (want 4)",
                self.time_steps
            ));
        }
    }
}

/// Compact U-Net: `depth` encoder levels of two 3x3 convs + 2x2 maxpool,
/// a bottleneck, transposed-conv upsampling with skip concatenation, and a
/// 1x1 classification head. Channels double per level from `base_channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyUNetSpec {
    pub in_channels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub num_classes: usize,
}

fn default_base_channels() -> usize {
    16
}

fn default_depth() -> usize {
    3
}

impl TinyUNetSpec {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        TinyUNetSpec {
            in_channels,
            base_channels: default_base_channels(),
            depth: default_depth(),
            num_classes,
        }
    }

    /// Input H and W must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.in_channels == 0 {
            problems.push("unet in_channels must be positive".into());
        }
        if self.base_channels == 0 {
            problems.push("unet base_channels must be positive".into());
        }
        if !(1..=6).contains(&self.depth) {
            problems.push(format!("unet depth {} must be in 1..=6", self.depth));
        }
        if !(2..=254).contains(&self.num_classes) {
            problems.push(format!(
                "unet num_classes {} must be in 2..=254",
                self.num_classes
            ));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One RGB frame into the U-Net.
    SingleImage,
    /// A frame sequence through the temporal collapse, then the U-Net.
    TimeSeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processor: Option<ProcessorSpec>,
    pub unet: TinyUNetSpec,
}

impl ModelSpec {
    pub fn single_image(unet: TinyUNetSpec) -> Self {
        ModelSpec {
            mode: Mode::SingleImage,
            processor: None,
            unet,
        }
    }

    pub fn time_series(processor: ProcessorSpec, unet: TinyUNetSpec) -> Self {
        ModelSpec {
            mode: Mode::TimeSeries,
            processor: Some(processor),
            unet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.unet.validate(&mut problems);
        match (self.mode, &self.processor) {
            (Mode::TimeSeries, Some(p)) => {
                p.validate(&mut problems);
                if p.out_channels != self.unet.in_channels {
                    problems.push(format!(
                        "processor emits {} channels but unet expects {}",
                        p.out_channels, self.unet.in_channels
                    ));
                }
            }
            (Mode::TimeSeries, None) => {
                problems.push("time_series mode needs a processor".into())
            }
            (Mode::SingleImage, Some(_)) => {
                problems.push("single_image mode must not define a processor".into())
            }
            (Mode::SingleImage, None) => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        visit_params(self, &mut |_, shape, _| {
            total += shape.iter().product::<usize>();
        });
        total
    }
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
}

fn visit_conv(name: &str, cs: &ConvSpec, f: &mut impl FnMut(String, Vec<usize>, Init)) {
    let k: usize = cs.kernel.iter().product();
    f(
        format!("{name}.weight"),
        cs.weight_shape(),
        Init::Xavier {
            fan_in: cs.in_channels * k,
            fan_out: cs.out_channels * k,
        },
    );
    f(format!("{name}.bias"), cs.bias_shape(), Init::Zero);
}

/// Enumerates every parameter in execution order. Checkpoint layout and
/// optimizer state follow this order exactly.
fn visit_params(spec: &ModelSpec, f: &mut impl FnMut(String, Vec<usize>, Init)) {
    if let (Mode::TimeSeries, Some(p)) = (spec.mode, &spec.processor) {
        visit_conv("processor.conv1", &p.conv1_spec(), f);
        visit_conv("processor.conv2", &p.conv2_spec(), f);
    }
    let u = &spec.unet;
    let ch = |i: usize| u.base_channels << i;
    let mut cin = u.in_channels;
    for i in 0..u.depth {
        visit_conv(
            &format!("unet.enc{i}.conv1"),
            &ConvSpec::c2(cin, ch(i), (3, 3), (1, 1)),
            f,
        );
        visit_conv(
            &format!("unet.enc{i}.conv2"),
            &ConvSpec::c2(ch(i), ch(i), (3, 3), (1, 1)),
            f,
        );
        cin = ch(i);
    }
    visit_conv(
        "unet.bottleneck.conv1",
        &ConvSpec::c2(ch(u.depth - 1), ch(u.depth), (3, 3), (1, 1)),
        f,
    );
    visit_conv(
        "unet.bottleneck.conv2",
        &ConvSpec::c2(ch(u.depth), ch(u.depth), (3, 3), (1, 1)),
        f,
    );
    for i in (0..u.depth).rev() {
        let (hi, lo) = (ch(i + 1), ch(i));
        f(
            format!("unet.dec{i}.up.weight"),
            vec![lo, hi, 2, 2],
            Init::Xavier {
                fan_in: hi * 4,
                fan_out: lo * 4,
            },
        );
        f(format!("unet.dec{i}.up.bias"), vec![lo], Init::Zero);
        visit_conv(
            &format!("unet.dec{i}.conv1"),
            &ConvSpec::c2(2 * lo, lo, (3, 3), (1, 1)),
            f,
        );
        visit_conv(
            &format!("unet.dec{i}.conv2"),
            &ConvSpec::c2(lo, lo, (3, 3), (1, 1)),
            f,
        );
    }
    visit_conv(
        "unet.head",
        &ConvSpec::c2(ch(0), u.num_classes, (1, 1), (0, 0)),
        f,
    );
}

#[derive(Clone, Debug)]
pub struct Model<E: Element> {
    pub spec: ModelSpec,
    pub params: ParamSet<E>,
}

/// Builds a model with Xavier-uniform weights and zero biases, drawn from a
/// single seeded stream in parameter order.
pub fn build_model<E: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<E>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut failed = None;
    visit_params(spec, &mut |name, shape, init| {
        let t = match init {
            Init::Xavier { fan_in, fan_out } => xavier_uniform(&shape, fan_in, fan_out, &mut rng),
            Init::Zero => Tensor::zeros(&shape),
        };
        if let Err(e) = params.insert(&name, t) {
            failed.get_or_insert(e);
        }
    });
    match failed {
        Some(e) => Err(e),
        None => Ok(Model {
            spec: spec.clone(),
            params,
        }),
    }
}

impl<E: Element> Model<E> {
    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }
}

/// One forward-pass backend. `GraphExec` records onto an autodiff graph;
/// `EvalExec` computes tensors directly and drops intermediates as their
/// last reference goes away.
pub trait Executor<E: Element> {
    type H: Clone;
    fn input(&mut self, x: Tensor<E>) -> Self::H;
    fn param(&mut self, index: usize) -> Self::H;
    fn shape(&self, h: &Self::H) -> Vec<usize>;
    fn conv2d(&mut self, x: &Self::H, w: &Self::H, b: &Self::H, spec: &ConvSpec) -> Result<Self::H>;
    fn conv3d(&mut self, x: &Self::H, w: &Self::H, b: &Self::H, spec: &ConvSpec) -> Result<Self::H>;
    fn tconv2d(&mut self, x: &Self::H, w: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn maxpool2d(&mut self, x: &Self::H) -> Result<Self::H>;
    fn relu(&mut self, x: &Self::H) -> Self::H;
    fn leaky_relu(&mut self, x: &Self::H, slope: f64) -> Self::H;
    fn concat_c(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn permute(&mut self, x: &Self::H, perm: &[usize]) -> Result<Self::H>;
    fn reshape(&mut self, x: &Self::H, shape: &[usize]) -> Result<Self::H>;
}

pub struct GraphExec<'g, E: Element> {
    pub graph: &'g mut Graph<E>,
    param_ids: Vec<NodeId>,
}

impl<'g, E: Element> GraphExec<'g, E> {
    /// Registers every parameter as a graph leaf up front, index-aligned
    /// with the param set.
    pub fn new(graph: &'g mut Graph<E>, params: &ParamSet<E>) -> Self {
        let param_ids = (0..params.len())
            .map(|i| graph.leaf(params.entry(i).1.clone()))
            .collect();
        GraphExec { graph, param_ids }
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.param_ids
    }
}

impl<E: Element> Executor<E> for GraphExec<'_, E> {
    type H = NodeId;

    fn input(&mut self, x: Tensor<E>) -> NodeId {
        self.graph.constant(x)
    }

    fn param(&mut self, index: usize) -> NodeId {
        self.param_ids[index]
    }

    fn shape(&self, h: &NodeId) -> Vec<usize> {
        self.graph.value(*h).shape().to_vec()
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId, spec: &ConvSpec) -> Result<NodeId> {
        crate::nn::conv2d(self.graph, *x, *w, *b, spec)
    }

    fn conv3d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId, spec: &ConvSpec) -> Result<NodeId> {
        crate::nn::conv3d(self.graph, *x, *w, *b, spec)
    }

    fn tconv2d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> Result<NodeId> {
        crate::nn::tconv2d(self.graph, *x, *w, *b)
    }

    fn maxpool2d(&mut self, x: &NodeId) -> Result<NodeId> {
        crate::nn::maxpool2d(self.graph, *x)
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        self.graph.relu(*x)
    }

    fn leaky_relu(&mut self, x: &NodeId, slope: f64) -> NodeId {
        self.graph.leaky_relu(*x, slope)
    }

    fn concat_c(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.concat(*a, *b, 1)
    }

    fn permute(&mut self, x: &NodeId, perm: &[usize]) -> Result<NodeId> {
        self.graph.permute(*x, perm)
    }

    fn reshape(&mut self, x: &NodeId, shape: &[usize]) -> Result<NodeId> {
        self.graph.reshape(*x, shape)
    }
}

pub struct EvalExec<E: Element> {
    params: Vec<Rc<Tensor<E>>>,
}

impl<E: Element> EvalExec<E> {
    pub fn new(params: &ParamSet<E>) -> Self {
        EvalExec {
            params: (0..params.len())
                .map(|i| Rc::new(params.entry(i).1.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    pub fn unwrap(h: Rc<Tensor<E>>) -> Tensor<E> {
        Rc::try_unwrap(h).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl<E: Element> Executor<E> for EvalExec<E> {
    type H = Rc<Tensor<E>>;

    fn input(&mut self, x: Tensor<E>) -> Self::H {
        Rc::new(x)
    }

    fn param(&mut self, index: usize) -> Self::H {
        Rc::clone(&self.params[index])
    }

    fn shape(&self, h: &Self::H) -> Vec<usize> {
        h.shape().to_vec()
    }

    fn conv2d(&mut self, x: &Self::H, w: &Self::H, b: &Self::H, spec: &ConvSpec) -> Result<Self::H> {
        conv2d_fwd(x, w, b, spec).map(Rc::new)
    }

    fn conv3d(&mut self, x: &Self::H, w: &Self::H, b: &Self::H, spec: &ConvSpec) -> Result<Self::H> {
        conv3d_fwd(x, w, b, spec).map(Rc::new)
    }

    fn tconv2d(&mut self, x: &Self::H, w: &Self::H, b: &Self::H) -> Result<Self::H> {
        tconv2d_fwd(x, w, b).map(Rc::new)
    }

    fn maxpool2d(&mut self, x: &Self::H) -> Result<Self::H> {
        maxpool2d_fwd(x).map(|(t, _)| Rc::new(t))
    }

    fn relu(&mut self, x: &Self::H) -> Self::H {
        let data = x
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        Rc::new(Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape"))
    }

    fn leaky_relu(&mut self, x: &Self::H, slope: f64) -> Self::H {
        let s = E::from_f64(slope);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { s * v })
            .collect();
        Rc::new(Tensor::new(x.shape().to_vec(), data).expect("leaky_relu preserves shape"))
    }

    fn concat_c(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        concat_forward(a, b, 1).map(Rc::new)
    }

    fn permute(&mut self, x: &Self::H, perm: &[usize]) -> Result<Self::H> {
        let r = x.rank();
        let mut seen = vec![false; r];
        let ok = perm.len() == r
            && perm
                .iter()
                .all(|&p| p < r && !std::mem::replace(&mut seen[p], true));
        if !ok {
            return Err(Error::BadShape {
                op: "permute",
                shape: x.shape().to_vec(),
                reason: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        Ok(Rc::new(permute_data(x, perm)))
    }

    fn reshape(&mut self, x: &Self::H, shape: &[usize]) -> Result<Self::H> {
        x.reshaped(shape).map(Rc::new)
    }
}

impl<E: Element> Model<E> {
    fn p<X: Executor<E>>(&self, ex: &mut X, name: &str) -> Result<X::H> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("model parameter {name} is missing")))?;
        Ok(ex.param(i))
    }

    fn check_input(&self, s: &[usize]) -> Result<()> {
        let div = self.spec.unet.spatial_divisor();
        let hw = match self.spec.mode {
            Mode::SingleImage => {
                let c = self.spec.unet.in_channels;
                if s.len() != 4 || s[1] != c {
                    return Err(Error::BadShape {
                        op: "model_input",
                        shape: s.to_vec(),
                        reason: format!("single_image wants (N, {c}, H, W)"),
                    });
                }
                (s[2], s[3])
            }
            Mode::TimeSeries => {
                let p = self.spec.processor.as_ref().ok_or_else(|| {
                    Error::invalid("time_series model has no processor spec")
                })?;
                if s.len() != 5 || s[1] != p.time_steps || s[2] != p.in_channels {
                    return Err(Error::BadShape {
                        op: "model_input",
                        shape: s.to_vec(),
                        reason: format!(
                            "time_series wants (N, {}, {}, H, W)",
                            p.time_steps, p.in_channels
                        ),
                    });
                }
                (s[3], s[4])
            }
        };
        if hw.0 % div != 0 || hw.1 % div != 0 {
            return Err(Error::BadShape {
                op: "model_input",
                shape: s.to_vec(),
                reason: format!(
                    "spatial extent {}x{} must be divisible by {div}",
                    hw.0, hw.1
                ),
            });
        }
        Ok(())
    }

    /// Runs the full forward pass on any executor, returning per-class
    /// logits shaped (N, num_classes, H, W).
    pub fn logits<X: Executor<E>>(&self, ex: &mut X, input: Tensor<E>) -> Result<X::H> {
        self.check_input(input.shape())?;
        let mut h = ex.input(input);
        if self.spec.mode == Mode::TimeSeries {
            h = self.processor_forward(ex, h)?;
        }
        self.unet_forward(ex, h)
    }

    fn processor_forward<X: Executor<E>>(&self, ex: &mut X, x: X::H) -> Result<X::H> {
        let p = self.spec.processor.as_ref().expect("checked by caller");
        // (N, T, C, H, W) -> (N, C, T, H, W)
        let x = ex
            .permute(&x, &[0, 2, 1, 3, 4])
            .map_err(Error::in_layer("processor"))?;
        let w = self.p(ex, "processor.conv1.weight")?;
        let b = self.p(ex, "processor.conv1.bias")?;
        let h = ex
            .conv3d(&x, &w, &b, &p.conv1_spec())
            .map_err(Error::in_layer("processor.conv1"))?;
        let h = ex.leaky_relu(&h, p.leaky_slope);
        let w = self.p(ex, "processor.conv2.weight")?;
        let b = self.p(ex, "processor.conv2.bias")?;
        let h = ex
            .conv3d(&h, &w, &b, &p.conv2_spec())
            .map_err(Error::in_layer("processor.conv2"))?;
        let h = ex.leaky_relu(&h, p.leaky_slope);
        let s = ex.shape(&h);
        debug_assert_eq!(s[2], 1, "temporal extent must be collapsed here");
        ex.reshape(&h, &[s[0], s[1], s[3], s[4]])
            .map_err(Error::in_layer("processor"))
    }

    fn conv_block<X: Executor<E>>(
        &self,
        ex: &mut X,
        x: X::H,
        path: &str,
        cin: usize,
        cout: usize,
    ) -> Result<X::H> {
        let w = self.p(ex, &format!("{path}.conv1.weight"))?;
        let b = self.p(ex, &format!("{path}.conv1.bias"))?;
        let h = ex
            .conv2d(&x, &w, &b, &ConvSpec::c2(cin, cout, (3, 3), (1, 1)))
            .map_err(Error::in_layer(format!("{path}.conv1")))?;
        let h = ex.relu(&h);
        let w = self.p(ex, &format!("{path}.conv2.weight"))?;
        let b = self.p(ex, &format!("{path}.conv2.bias"))?;
        let h = ex
            .conv2d(&h, &w, &b, &ConvSpec::c2(cout, cout, (3, 3), (1, 1)))
            .map_err(Error::in_layer(format!("{path}.conv2")))?;
        Ok(ex.relu(&h))
    }

    fn unet_forward<X: Executor<E>>(&self, ex: &mut X, x0: X::H) -> Result<X::H> {
        let u = &self.spec.unet;
        let ch = |i: usize| u.base_channels << i;
        let mut skips = Vec::with_capacity(u.depth);
        let mut h = x0;
        let mut cin = u.in_channels;
        for i in 0..u.depth {
            h = self.conv_block(ex, h, &format!("unet.enc{i}"), cin, ch(i))?;
            skips.push(h.clone());
            h = ex
                .maxpool2d(&h)
                .map_err(Error::in_layer(format!("unet.enc{i}.pool")))?;
            cin = ch(i);
        }
        h = self.conv_block(ex, h, "unet.bottleneck", ch(u.depth - 1), ch(u.depth))?;
        for i in (0..u.depth).rev() {
            let path = format!("unet.dec{i}");
            let w = self.p(ex, &format!("{path}.up.weight"))?;
            let b = self.p(ex, &format!("{path}.up.bias"))?;
            h = ex
                .tconv2d(&h, &w, &b)
                .map_err(Error::in_layer(format!("{path}.up")))?;
            let skip = skips.pop().expect("one skip per level");
            h = ex.concat_c(&skip, &h).map_err(Error::in_layer(path.clone()))?;
            h = self.conv_block(ex, h, &path, 2 * ch(i), ch(i))?;
        }
        let w = self.p(ex, "unet.head.weight")?;
        let b = self.p(ex, "unet.head.bias")?;
        ex.conv2d(
            &h,
            &w,
            &b,
            &ConvSpec::c2(ch(0), u.num_classes, (1, 1), (0, 0)),
        )
        .map_err(Error::in_layer("unet.head"))
    }

    /// Inference logits without building a graph.
    pub fn predict_logits(&self, input: Tensor<E>) -> Result<Tensor<E>> {
        let mut ex = EvalExec::new(&self.params);
        let h = self.logits(&mut ex, input)?;
        Ok(EvalExec::unwrap(h))
    }

    /// Inference class probabilities, softmax over the channel axis.
    pub fn predict_probs(&self, input: Tensor<E>) -> Result<Tensor<E>> {
        Ok(softmax_forward(&self.predict_logits(input)?, 1))
    }

    /// Hard per-pixel prediction; ties pick the lowest class id.
    pub fn predict_mask(&self, input: Tensor<E>) -> Result<MaskBatch> {
        argmax_channels(&self.predict_logits(input)?)
    }
}

/// Per-pixel argmax over the channel axis of (N, C, H, W); ties pick the
/// lowest channel.
pub fn argmax_channels<E: Element>(t: &Tensor<E>) -> Result<MaskBatch> {
    if t.rank() != 4 || t.shape()[1] > 255 {
        return Err(Error::BadShape {
            op: "argmax_channels",
            shape: t.shape().to_vec(),
            reason: "want (N, C, H, W) with C <= 255".into(),
        });
    }
    let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let hw = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for px in 0..hw {
            let mut best = 0usize;
            let mut bv = d[b * c * hw + px];
            for cc in 1..c {
                let v = d[(b * c + cc) * hw + px];
                if v > bv {
                    bv = v;
                    best = cc;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(MaskBatch {
        n,
        h,
        w,
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradCheckConfig};

    fn tiny_ts_spec() -> ModelSpec {
        ModelSpec::time_series(
            ProcessorSpec {
                mid_channels: 4,
                out_channels: 8,
                ..Default::default()
            },
            TinyUNetSpec {
                in_channels: 8,
                base_channels: 4,
                depth: 2,
                num_classes: 3,
            },
        )
    }

    #[test]
    fn default_processor_param_count() {
        let p = ProcessorSpec::default();
        assert_eq!(p.conv1_spec().param_count(), 2624);
        assert_eq!(p.conv2_spec().param_count(), 36928);
        assert_eq!(p.param_count(), 39552);
    }

    #[test]
    fn built_params_match_spec_count_and_order() {
        let spec = tiny_ts_spec();
        let m: Model<f32> = build_model(&spec, 0).unwrap();
        assert_eq!(m.params.total_params(), spec.param_count());
        let names: Vec<&str> = m.params.names().collect();
        assert_eq!(names[0], "processor.conv1.weight");
        assert_eq!(names[1], "processor.conv1.bias");
        assert_eq!(names[2], "processor.conv2.weight");
        assert_eq!(names[3], "processor.conv2.bias");
        assert_eq!(names[4], "unet.enc0.conv1.weight");
        assert_eq!(*names.last().unwrap(), "unet.head.bias");
        // decoder runs deepest level first
        let d1 = names.iter().position(|n| n.starts_with("unet.dec1")).unwrap();
        let d0 = names.iter().position(|n| n.starts_with("unet.dec0")).unwrap();
        assert!(d1 < d0);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let spec = tiny_ts_spec();
        let a: Model<f32> = build_model(&spec, 7).unwrap();
        let b: Model<f32> = build_model(&spec, 7).unwrap();
        let c: Model<f32> = build_model(&spec, 8).unwrap();
        for i in 0..a.params.len() {
            assert_eq!(a.params.entry(i).1.data(), b.params.entry(i).1.data());
        }
        assert_ne!(
            a.params.get("unet.head.weight").unwrap().data(),
            c.params.get("unet.head.weight").unwrap().data()
        );
    }

    #[test]
    fn time_series_logits_shape() {
        let m: Model<f32> = build_model(&tiny_ts_spec(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(&[2, 4, 3, 8, 8], 0.0, 1.0, &mut rng);
        let y = m.predict_logits(x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn single_image_logits_shape() {
        let spec = ModelSpec::single_image(TinyUNetSpec {
            in_channels: 3,
            base_channels: 4,
            depth: 2,
            num_classes: 5,
        });
        let m: Model<f32> = build_model(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(&[1, 3, 12, 8], 0.0, 1.0, &mut rng);
        let y = m.predict_logits(x).unwrap();
        assert_eq!(y.shape(), &[1, 5, 12, 8]);
    }

    #[test]
    fn wrong_time_extent_is_rejected() {
        let m: Model<f32> = build_model(&tiny_ts_spec(), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 3, 8, 8]);
        let msg = m.predict_logits(x).unwrap_err().to_string();
        assert!(msg.contains("time_series wants"), "{msg}");
    }

    #[test]
    fn indivisible_spatial_extent_is_rejected() {
        let m: Model<f32> = build_model(&tiny_ts_spec(), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 4, 3, 10, 8]);
        let msg = m.predict_logits(x).unwrap_err().to_string();
        assert!(msg.contains("divisible"), "{msg}");
    }

    #[test]
    fn spec_validation_reports_mode_mismatches() {
        let mut spec = tiny_ts_spec();
        spec.processor = None;
        assert!(spec.validate().is_err());
        let mut spec = tiny_ts_spec();
        spec.mode = Mode::SingleImage;
        assert!(spec.validate().is_err());
        let mut spec = tiny_ts_spec();
        spec.unet.in_channels = 9;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("unet expects"), "{msg}");
    }

    #[test]
    fn graph_and_eval_paths_agree_bitwise() {
        let m: Model<f32> = build_model(&tiny_ts_spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(&[1, 4, 3, 8, 8], 0.0, 1.0, &mut rng);
        let eval = m.predict_logits(x.clone()).unwrap();
        let mut g = Graph::new();
        let mut ex = GraphExec::new(&mut g, &m.params);
        let id = m.logits(&mut ex, x).unwrap();
        assert_eq!(g.value(id).shape(), eval.shape());
        assert_eq!(g.value(id).data(), eval.data());
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let t: Tensor<f64> = Tensor::from_f64s(&[1, 3, 1, 2], &[1.0, 0.5, 1.0, 2.0, 0.3, 2.0]).unwrap();
        let m = argmax_channels(&t).unwrap();
        assert_eq!(m.data, vec![0, 1]);
    }

    #[test]
    fn model_spec_serde_round_trip() {
        let spec = tiny_ts_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn small_unet_gradients_match_finite_differences() {
        let spec = ModelSpec::single_image(TinyUNetSpec {
            in_channels: 2,
            base_channels: 2,
            depth: 1,
            num_classes: 2,
        });
        let model: Model<f64> = build_model(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng);
        let r = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let cfg = GradCheckConfig {
            samples: 3,
            tolerance: 1e-3,
            seed: 6,
            ..Default::default()
        };
        let report = gradcheck(&cfg, &model.params, |ps, want| {
            let m = Model {
                spec: spec.clone(),
                params: ps.clone(),
            };
            let mut g = Graph::new();
            let mut ex = GraphExec::new(&mut g, &m.params);
            let y = m.logits(&mut ex, x.clone())?;
            let ids: Vec<NodeId> = ex.param_ids().to_vec();
            let rc = g.constant(r.clone());
            let prod = g.mul(y, rc)?;
            let loss = g.sum_all(prod);
            let lv = g.value(loss).item()?;
            if !want {
                return Ok((lv, None));
            }
            g.backward(loss)?;
            Ok((lv, Some(ids.iter().map(|&i| g.take_grad(i).unwrap()).collect())))
        })
        .unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);
    }
}
