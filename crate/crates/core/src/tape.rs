//! Tape-based reverse-mode differentiation over [`Tensor`] ops.
//!
//! A [`Tape`] records an append-only sequence of nodes; inputs of a node
//! always reference earlier nodes, so the recording order is already a
//! topological order. `backward` walks the tape in reverse from a scalar
//! output and accumulates gradients for every node that (a) the output
//! depends on and (b) depends on a trainable leaf. A tape supports any
//! number of backward passes from any of its scalar nodes; each pass uses
//! fresh gradient buffers, so repeated passes are idempotent.

use crate::error::{Error, Result};
use crate::ops::{self, BinaryKind, ReduceKind, UnaryKind};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Record {
    Leaf {
        trainable: bool,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Unary {
        input: NodeId,
        kind: UnaryKind,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinaryKind,
    },
    Reduce {
        input: NodeId,
        kind: ReduceKind,
    },
    Gram {
        input: NodeId,
    },
    UpsampleNearest {
        input: NodeId,
    },
    DiffH {
        input: NodeId,
    },
    DiffW {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
}

impl Record {
    fn inputs(&self, buf: &mut [NodeId; 3]) -> usize {
        match self {
            Record::Leaf { .. } => 0,
            Record::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                buf[0] = *input;
                buf[1] = *kernel;
                match bias {
                    Some(b) => {
                        buf[2] = *b;
                        3
                    }
                    None => 2,
                }
            }
            Record::Binary { a, b, .. } | Record::ConcatChannels { a, b } => {
                buf[0] = *a;
                buf[1] = *b;
                2
            }
            Record::MaxPool2d { input, .. }
            | Record::Unary { input, .. }
            | Record::Reduce { input, .. }
            | Record::Gram { input }
            | Record::UpsampleNearest { input }
            | Record::DiffH { input }
            | Record::DiffW { input } => {
                buf[0] = *input;
                1
            }
        }
    }
}

struct Node {
    value: Tensor,
    record: Record,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, record: Record) -> NodeId {
        self.nodes.push(Node { value, record });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a trainable leaf: gradients will be computed for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Record::Leaf { trainable: true })
    }

    /// Record a constant leaf: no gradient flows into or through it
    /// unless it also feeds trainable values downstream.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Record::Leaf { trainable: false })
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Record::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2d(self.value(input))?;
        Ok(self.push(out, Record::MaxPool2d { input, argmax }))
    }

    pub fn unary(&mut self, input: NodeId, kind: UnaryKind) -> NodeId {
        let out = ops::unary(self.value(input), kind);
        self.push(out, Record::Unary { input, kind })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.unary(input, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, UnaryKind::Sigmoid)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        self.unary(input, UnaryKind::Abs)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        self.unary(input, UnaryKind::Square)
    }

    pub fn binary(&mut self, a: NodeId, b: NodeId, kind: BinaryKind) -> Result<NodeId> {
        let out = ops::binary(self.value(a), self.value(b), kind)?;
        Ok(self.push(out, Record::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// Multiply by a plain constant (recorded as a scalar leaf).
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.scalar(c);
        self.mul(a, s).expect("scalar broadcast cannot fail")
    }

    pub fn reduce(&mut self, input: NodeId, kind: ReduceKind) -> NodeId {
        let out = ops::reduce(self.value(input), kind);
        self.push(out, Record::Reduce { input, kind })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.reduce(input, ReduceKind::Sum)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        self.reduce(input, ReduceKind::Mean)
    }

    pub fn gram(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::gram(self.value(input))?;
        Ok(self.push(out, Record::Gram { input }))
    }

    pub fn upsample_nearest(&mut self, input: NodeId) -> NodeId {
        let out = ops::upsample_nearest(self.value(input));
        self.push(out, Record::UpsampleNearest { input })
    }

    pub fn diff_h(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::diff_h(self.value(input))?;
        Ok(self.push(out, Record::DiffH { input }))
    }

    pub fn diff_w(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::diff_w(self.value(input))?;
        Ok(self.push(out, Record::DiffW { input }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::ConcatChannels { a, b }))
    }

    /// Reverse pass from a scalar node. Gradients are produced for every
    /// node on a path from a trainable leaf to the output; other nodes
    /// report `None`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(Error::rejected(format!(
                "backward requires a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }

        let n = output.0 + 1;
        let mut inputs = [NodeId(0); 3];

        // which nodes depend on a trainable leaf
        let mut lively = vec![false; n];
        for i in 0..n {
            lively[i] = match &self.nodes[i].record {
                Record::Leaf { trainable } => *trainable,
                rec => {
                    let k = rec.inputs(&mut inputs);
                    inputs[..k].iter().any(|id| lively[id.0])
                }
            };
        }
        // which nodes the output depends on
        let mut needed = vec![false; n];
        needed[output.0] = true;
        for i in (0..n).rev() {
            if !needed[i] || !lively[i] {
                continue;
            }
            let k = self.nodes[i].record.inputs(&mut inputs);
            for id in &inputs[..k] {
                needed[id.0] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !lively[output.0] {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            if !needed[i] || !lively[i] {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &lively, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        i: usize,
        gout: &Tensor,
        lively: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.record {
            Record::Leaf { .. } => {}
            Record::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let need_din = lively[input.0];
                let need_dk = lively[kernel.0];
                let need_db = bias.map(|b| lively[b.0]).unwrap_or(false);
                if need_din || need_dk || need_db {
                    let g = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        *stride,
                        *pad,
                        gout,
                        need_din,
                        need_dk,
                        need_db,
                    )?;
                    if let Some(d) = g.dinput {
                        accumulate(&mut grads[input.0], d);
                    }
                    if let Some(d) = g.dkernel {
                        accumulate(&mut grads[kernel.0], d);
                    }
                    if let Some(d) = g.dbias {
                        accumulate(&mut grads[bias.unwrap().0], d);
                    }
                }
            }
            Record::MaxPool2d { input, argmax } => {
                if lively[input.0] {
                    let d = ops::maxpool2d_backward(self.value(*input).dims(), argmax, gout);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Record::Unary { input, kind } => {
                if lively[input.0] {
                    let d = ops::unary_backward(self.value(*input), &node.value, *kind, gout);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Record::Binary { a, b, kind } => {
                let (da, db) = ops::binary_backward(
                    self.value(*a),
                    self.value(*b),
                    *kind,
                    gout,
                    lively[a.0],
                    lively[b.0],
                );
                if let Some(d) = da {
                    accumulate(&mut grads[a.0], d);
                }
                if let Some(d) = db {
                    accumulate(&mut grads[b.0], d);
                }
            }
            Record::Reduce { input, kind } => {
                if lively[input.0] {
                    let d = ops::reduce_backward(self.value(*input).dims(), *kind, gout);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Record::Gram { input } => {
                if lively[input.0] {
                    let d = ops::gram_backward(self.value(*input), gout);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Record::UpsampleNearest { input } => {
                if lively[input.0] {
                    let d = ops::upsample_nearest_backward(self.value(*input).dims(), gout);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Record::DiffH { input } => {
                if lively[input.0] {
                    let d = ops::diff_h_backward(self.value(*input).dims(), gout);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Record::DiffW { input } => {
                if lively[input.0] {
                    let d = ops::diff_w_backward(self.value(*input).dims(), gout);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Record::ConcatChannels { a, b } => {
                let (da, db) = ops::concat_channels_backward(
                    self.value(*a).dims(),
                    self.value(*b).dims(),
                    gout,
                    lively[a.0],
                    lively[b.0],
                );
                if let Some(d) = da {
                    accumulate(&mut grads[a.0], d);
                }
                if let Some(d) = db {
                    accumulate(&mut grads[b.0], d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            debug_assert_eq!(t.dims(), add.dims());
            for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
    }
}

/// Result of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, materializing zeros when no gradient reached it.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(id).dims()),
        }
    }

    /// Concatenate the gradients of the given leaves in order, with zeros
    /// for leaves the output does not depend on.
    pub fn flatten(&self, tape: &Tape, ids: &[NodeId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            match self.get(id) {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat(0.0).take(tape.value(id).numel())),
            }
        }
        out
    }
}
