//! Static operator graphs, the forward tape and reverse-mode replay.

use super::array::{Array4, Real};
use super::kernels as k;
use super::params::{Param, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Network input bound to `inputs[slot]` at forward time.
    Input { slot: usize, channels: usize },
    /// 3x3 conv, stride 1, pad 1; `weight`/`bias` index the param store.
    Conv3x3 {
        input: NodeId,
        weight: usize,
        bias: usize,
        cin: usize,
        cout: usize,
    },
    Relu(NodeId),
    MaxPool2x2(NodeId),
    /// Unpools `input` with the argmax indices recorded at `pool`.
    MaxUnpool2x2 { input: NodeId, pool: NodeId },
    Concat(Vec<NodeId>),
    /// Inverted dropout. `mc` nodes stay stochastic under [`Mode::McEval`].
    Dropout { input: NodeId, rate: f32, mc: bool },
    Softmax(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
}

impl OpKind {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            OpKind::Input { .. } => vec![],
            OpKind::Conv3x3 { input, .. }
            | OpKind::Dropout { input, .. }
            | OpKind::Relu(input)
            | OpKind::MaxPool2x2(input)
            | OpKind::Softmax(input)
            | OpKind::Sigmoid(input)
            | OpKind::Scale(input, _) => vec![*input],
            OpKind::MaxUnpool2x2 { input, .. } => vec![*input],
            OpKind::Concat(parts) => parts.clone(),
            OpKind::Add(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub name: String,
    pub kind: OpKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Acyclic operator list in execution order; the last node is the output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<OpNode>,
    params: Vec<ParamSpec>,
    n_inputs: usize,
}

/// Forward execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Deterministic inference; dropout is the identity.
    Eval,
    /// Inference with `mc` dropout nodes kept stochastic (MC Dropout).
    McEval,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn num_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    fn push(&mut self, name: impl Into<String>, kind: OpKind) -> NodeId {
        for i in kind.inputs() {
            assert!(i < self.nodes.len(), "node input refers forward");
        }
        self.nodes.push(OpNode { name: name.into(), kind });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        let slot = self.n_inputs;
        self.n_inputs += 1;
        self.push(name, OpKind::Input { slot, channels })
    }

    /// Adds a conv node with parameters `{name}.weight` / `{name}.bias`.
    pub fn conv(&mut self, name: &str, input: NodeId, cin: usize, cout: usize) -> NodeId {
        let weight = self.params.len();
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, 3, 3],
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
        });
        self.push(
            name,
            OpKind::Conv3x3 {
                input,
                weight,
                bias: weight + 1,
                cin,
                cout,
            },
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, OpKind::Relu(x))
    }
    pub fn maxpool(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, OpKind::MaxPool2x2(x))
    }
    pub fn unpool(&mut self, name: &str, x: NodeId, pool: NodeId) -> NodeId {
        assert!(matches!(self.nodes[pool].kind, OpKind::MaxPool2x2(_)));
        self.push(name, OpKind::MaxUnpool2x2 { input: x, pool })
    }
    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> NodeId {
        self.push(name, OpKind::Concat(parts.to_vec()))
    }
    pub fn dropout(&mut self, name: &str, x: NodeId, rate: f32, mc: bool) -> NodeId {
        self.push(name, OpKind::Dropout { input: x, rate, mc })
    }
    pub fn softmax(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, OpKind::Softmax(x))
    }
    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, OpKind::Sigmoid(x))
    }
    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, OpKind::Add(a, b))
    }
    pub fn scale(&mut self, name: &str, x: NodeId, factor: f64) -> NodeId {
        self.push(name, OpKind::Scale(x, factor))
    }

    /// Fresh parameters: Kaiming-normal weights with standard deviation
    /// `sqrt(2 / (cin * 9))`, zero biases.
    pub fn init_params<T: Real>(&self, rng: &mut SeededRng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for spec in &self.params {
            let mut p = Param::zeros(spec.name.clone(), spec.shape.clone());
            if spec.shape.len() == 4 {
                let std = kaiming_std(spec.shape[1]);
                for v in p.data.iter_mut() {
                    *v = T::lit(rng.normal() * std);
                }
            }
            store.push(p);
        }
        store
    }

    fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ParamMismatch(format!(
                "graph declares {} parameters, store has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (spec, p) in self.params.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.shape || p.data.len() != spec.shape.iter().product() {
                return Err(Error::ParamMismatch(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    spec.name, spec.shape, p.name, p.shape
                )));
            }
        }
        Ok(())
    }

    /// Runs the graph and records a tape for [`Tape::backward`].
    pub fn forward<'a, T: Real>(
        &'a self,
        params: &'a ParamStore<T>,
        inputs: &[&Array4<T>],
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<Tape<'a, T>> {
        self.check_params(params)?;
        if inputs.len() != self.n_inputs {
            return Err(Error::ShapeMismatch {
                node: "<inputs>".into(),
                detail: format!("expected {} inputs, got {}", self.n_inputs, inputs.len()),
            });
        }
        let mut values: Vec<Array4<T>> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let mismatch = |detail: String| Error::ShapeMismatch {
                node: node.name.clone(),
                detail,
            };
            let (value, extra) = match &node.kind {
                OpKind::Input { slot, channels } => {
                    let x = inputs[*slot];
                    if x.channels() != *channels {
                        return Err(mismatch(format!("expected {channels} channels, got {}", x.channels())));
                    }
                    (x.clone(), Aux::None)
                }
                OpKind::Conv3x3 {
                    input,
                    weight,
                    bias,
                    cin,
                    cout,
                } => {
                    let x = &values[*input];
                    if x.channels() != *cin {
                        return Err(mismatch(format!("expected {cin} input channels, got {}", x.channels())));
                    }
                    let y = k::conv3x3_forward(x, &params.get(*weight).data, &params.get(*bias).data, *cout);
                    (y, Aux::None)
                }
                OpKind::Relu(x) => (values[*x].map(|v| v.max(T::zero())), Aux::None),
                OpKind::MaxPool2x2(x) => {
                    let x = &values[*x];
                    if x.height() % 2 != 0 || x.width() % 2 != 0 {
                        return Err(mismatch(format!("odd spatial size {:?}", x.shape())));
                    }
                    let (y, idx) = k::maxpool2x2_forward(x);
                    (y, Aux::Indices(idx))
                }
                OpKind::MaxUnpool2x2 { input, pool } => {
                    let x = &values[*input];
                    let pooled = &values[*pool];
                    if x.shape() != pooled.shape() {
                        return Err(mismatch(format!(
                            "unpool input {:?} does not match pooled shape {:?}",
                            x.shape(),
                            pooled.shape()
                        )));
                    }
                    let Aux::Indices(idx) = &aux[*pool] else {
                        unreachable!("pool node without indices")
                    };
                    let src = self.nodes[*pool].kind.inputs()[0];
                    (k::maxunpool2x2_forward(x, idx, values[src].shape()), Aux::None)
                }
                OpKind::Concat(parts) => {
                    let first = values[parts[0]].shape();
                    for &p in parts {
                        let s = values[p].shape();
                        if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                            return Err(mismatch(format!("cannot concat {s:?} with {first:?}")));
                        }
                    }
                    let refs: Vec<&Array4<T>> = parts.iter().map(|&p| &values[p]).collect();
                    (k::concat_forward(&refs), Aux::None)
                }
                OpKind::Dropout { input, rate, mc } => {
                    let x = &values[*input];
                    let active = mode == Mode::Train || (mode == Mode::McEval && *mc);
                    if active && *rate > 0.0 {
                        let keep = 1.0 - *rate as f64;
                        let scale = T::lit(1.0 / keep);
                        let mask: Vec<bool> = (0..x.len()).map(|_| rng.next_f64() < keep).collect();
                        let y = apply_mask(x, &mask, scale);
                        (y, Aux::Mask(mask))
                    } else {
                        (x.clone(), Aux::None)
                    }
                }
                OpKind::Softmax(x) => (k::softmax_forward(&values[*x]), Aux::None),
                OpKind::Sigmoid(x) => (values[*x].map(k::sigmoid), Aux::None),
                OpKind::Add(a, b) => {
                    if values[*a].shape() != values[*b].shape() {
                        return Err(mismatch(format!(
                            "cannot add {:?} and {:?}",
                            values[*a].shape(),
                            values[*b].shape()
                        )));
                    }
                    let mut y = values[*a].clone();
                    y.add_assign(&values[*b]);
                    (y, Aux::None)
                }
                OpKind::Scale(x, f) => {
                    let f = T::lit(*f);
                    (values[*x].map(|v| v * f), Aux::None)
                }
            };
            if let Some(batch) = value.first_non_finite_batch() {
                return Err(Error::NonFinite {
                    node: node.name.clone(),
                    batch,
                });
            }
            values.push(value);
            aux.push(extra);
        }
        Ok(Tape {
            graph: self,
            params,
            values,
            aux,
        })
    }
}

pub fn kaiming_std(cin: usize) -> f64 {
    (2.0 / (cin as f64 * 9.0)).sqrt()
}

#[derive(Debug)]
enum Aux {
    None,
    Indices(Vec<u32>),
    /// Dropout keep mask drawn this pass.
    Mask(Vec<bool>),
}

fn apply_mask<T: Real>(x: &Array4<T>, keep: &[bool], scale: T) -> Array4<T> {
    Array4::from_vec(
        x.shape(),
        x.data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect(),
    )
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub inputs: bool,
}

impl GradRequest {
    pub const ALL: Self = Self {
        params: true,
        inputs: true,
    };
    pub const PARAMS: Self = Self {
        params: true,
        inputs: false,
    };
    pub const INPUTS: Self = Self {
        params: false,
        inputs: true,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    /// Parameter gradients, shaped like the store (present iff requested).
    pub params: Option<ParamStore<T>>,
    /// One entry per input slot (present iff requested).
    pub inputs: Vec<Option<Array4<T>>>,
}

/// Activations of one forward pass. Consumed by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<'a, T: Real = f32> {
    graph: &'a Graph,
    params: &'a ParamStore<T>,
    values: Vec<Array4<T>>,
    aux: Vec<Aux>,
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn output(&self) -> &Array4<T> {
        self.values.last().expect("empty graph")
    }

    pub fn value(&self, node: NodeId) -> &Array4<T> {
        &self.values[node]
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Argmax indices recorded by a pooling node.
    pub fn pool_indices(&self, node: NodeId) -> Option<&[u32]> {
        match &self.aux[node] {
            Aux::Indices(i) => Some(i),
            _ => None,
        }
    }

    /// Backpropagates `output_grad` from the terminal node.
    pub fn backward(self, output_grad: Array4<T>) -> Result<Gradients<T>> {
        let out = self.graph.output();
        self.backward_from(vec![(out, output_grad)], GradRequest::ALL)
    }

    /// Backpropagates from arbitrary seed nodes; seeds on the same node add.
    pub fn backward_from(self, seeds: Vec<(NodeId, Array4<T>)>, req: GradRequest) -> Result<Gradients<T>> {
        let graph = self.graph;
        let nodes = graph.nodes();
        // needs[i]: some requested gradient depends on node i's value.
        let mut needs = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            needs[i] = match &node.kind {
                OpKind::Input { .. } => req.inputs,
                OpKind::Conv3x3 { input, .. } => req.params || needs[*input],
                other => other.inputs().iter().any(|&j| needs[j]),
            };
        }

        let mut grads: Vec<Option<Array4<T>>> = (0..nodes.len()).map(|_| None).collect();
        for (node, g) in seeds {
            if g.shape() != self.values[node].shape() {
                return Err(Error::ShapeMismatch {
                    node: nodes[node].name.clone(),
                    detail: format!("seed gradient {:?} vs value {:?}", g.shape(), self.values[node].shape()),
                });
            }
            accumulate(&mut grads[node], g);
        }

        let mut pgrads = req.params.then(|| self.params.zeros_like());
        let mut igrads: Vec<Option<Array4<T>>> = (0..graph.num_inputs()).map(|_| None).collect();

        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let node = &nodes[i];
            match &node.kind {
                OpKind::Input { slot, .. } => {
                    if req.inputs {
                        accumulate(&mut igrads[*slot], g);
                    }
                }
                OpKind::Conv3x3 {
                    input, weight, bias, ..
                } => {
                    let x = &self.values[*input];
                    let w = &self.params.get(*weight).data;
                    let dx = match pgrads.as_mut() {
                        Some(pg) => {
                            let (dw, db) = two_mut(pg, *weight, *bias);
                            k::conv3x3_backward(x, w, &g, Some((dw, db)), needs[*input])
                        }
                        None => k::conv3x3_backward(x, w, &g, None, needs[*input]),
                    };
                    if let Some(dx) = dx {
                        accumulate(&mut grads[*input], dx);
                    }
                }
                OpKind::Relu(x) => {
                    let y = &self.values[i];
                    let gin = Array4::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                            .collect(),
                    );
                    accumulate(&mut grads[*x], gin);
                }
                OpKind::MaxPool2x2(x) => {
                    let Aux::Indices(idx) = &self.aux[i] else { unreachable!() };
                    let gin = k::maxpool2x2_backward(self.values[*x].shape(), idx, &g);
                    accumulate(&mut grads[*x], gin);
                }
                OpKind::MaxUnpool2x2 { input, pool } => {
                    let Aux::Indices(idx) = &self.aux[*pool] else { unreachable!() };
                    let gin = k::maxunpool2x2_backward(self.values[*input].shape(), idx, &g);
                    accumulate(&mut grads[*input], gin);
                }
                OpKind::Concat(parts) => {
                    let shapes: Vec<[usize; 4]> = parts.iter().map(|&p| self.values[p].shape()).collect();
                    for (&p, gp) in parts.iter().zip(k::concat_backward(&shapes, &g)) {
                        if needs[p] {
                            accumulate(&mut grads[p], gp);
                        }
                    }
                }
                OpKind::Dropout { input, rate, .. } => {
                    let gin = match &self.aux[i] {
                        Aux::Mask(keep) => apply_mask(&g, keep, T::lit(1.0 / (1.0 - *rate as f64))),
                        _ => g,
                    };
                    accumulate(&mut grads[*input], gin);
                }
                OpKind::Softmax(x) => {
                    let gin = k::softmax_backward(&self.values[i], &g);
                    accumulate(&mut grads[*x], gin);
                }
                OpKind::Sigmoid(x) => {
                    let y = &self.values[i];
                    let gin = Array4::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &s)| gv * s * (T::one() - s))
                            .collect(),
                    );
                    accumulate(&mut grads[*x], gin);
                }
                OpKind::Add(a, b) => {
                    if needs[*b] {
                        accumulate(&mut grads[*b], g.clone());
                    }
                    if needs[*a] {
                        accumulate(&mut grads[*a], g);
                    }
                }
                OpKind::Scale(x, f) => {
                    let f = T::lit(*f);
                    accumulate(&mut grads[*x], g.map(|v| v * f));
                }
            }
        }

        if let Some(pg) = &pgrads {
            if !pg.all_finite() {
                return Err(Error::NonFiniteGradient("parameter gradient".into()));
            }
        }
        for g in igrads.iter().flatten() {
            if g.first_non_finite_batch().is_some() {
                return Err(Error::NonFiniteGradient("input gradient".into()));
            }
        }
        if req.inputs {
            // Inputs that the seeds do not depend on get a zero gradient.
            for (i, node) in nodes.iter().enumerate() {
                if let OpKind::Input { slot, .. } = node.kind {
                    if igrads[slot].is_none() {
                        igrads[slot] = Some(Array4::zeros(self.values[i].shape()));
                    }
                }
            }
        }
        Ok(Gradients {
            params: pgrads,
            inputs: igrads,
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array4<T>>, g: Array4<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn two_mut<T: Real>(store: &mut ParamStore<T>, a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let mut it = store.iter_mut().skip(a);
    let pa = it.next().unwrap();
    let pb = it.nth(b - a - 1).unwrap();
    (&mut pa.data, &mut pb.data)
}
