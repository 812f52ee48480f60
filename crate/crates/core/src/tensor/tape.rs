//! Define-by-run gradient tape.
//!
//! A [`Tape`] records one forward pass as a topologically ordered list of
//! nodes; each recorded op carries the rule that maps an upstream gradient
//! back onto its inputs. The tape is rebuilt per forward pass and owned by a
//! single thread; parallelism happens across independent tapes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule for one recorded operation.
///
/// `backward` receives the op's input values, its output value, and the
/// gradient w.r.t. the output; it returns one gradient buffer per input.
/// Inputs whose `needs` flag is false may be skipped by returning `None`.
pub trait TapeOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    inputs: Vec<Var>,
    op: Option<Box<dyn TapeOp>>,
    value: Tensor,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a forward computation and replays it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enter a tensor as a graph input. Its `requires_grad` flag decides
    /// whether gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            inputs: Vec::new(),
            op: None,
            value,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an op node. All inputs must already live on this tape.
    pub(crate) fn push(&mut self, inputs: Vec<Var>, op: Box<dyn TapeOp>, value: Tensor) -> Var {
        let id = self.nodes.len();
        let mut needs_grad = false;
        for v in &inputs {
            assert!(v.0 < id, "tape op input must precede the op");
            needs_grad |= self.nodes[v.0].needs_grad;
        }
        self.nodes.push(Node {
            inputs,
            op: Some(op),
            value,
            needs_grad,
            grad: None,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by the last backward pass, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Backward from a scalar node, seeding with 1.
    pub fn backward(&mut self, v: Var) -> Result<()> {
        if self.nodes[v.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward() requires a scalar node, got shape {:?}",
                self.nodes[v.0].value.shape()
            )));
        }
        self.backward_seeded(v, &[1.0])
    }

    /// Backward from any node with an explicit output gradient.
    ///
    /// Visits every node at most once, in reverse recording order, so a
    /// node's gradient is complete before its own rule runs.
    pub fn backward_seeded(&mut self, v: Var, seed: &[f64]) -> Result<()> {
        let n = self.nodes[v.0].value.len();
        if seed.len() != n {
            return Err(Error::shape(format!(
                "seed length {} does not match node length {}",
                seed.len(),
                n
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[v.0].grad = Some(seed.to_vec());

        for i in (0..=v.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let (op, gout) = match (&node.op, &node.grad) {
                (Some(op), Some(g)) => (op, g),
                _ => continue,
            };
            let input_vals: Vec<&Tensor> = node.inputs.iter().map(|v| &before[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| before[v.0].needs_grad).collect();
            let grads = op.backward(&input_vals, &node.value, gout, &needs);
            assert_eq!(
                grads.len(),
                node.inputs.len(),
                "{} returned {} gradients for {} inputs",
                op.name(),
                grads.len(),
                node.inputs.len()
            );
            let op_name = op.name();
            let inputs = node.inputs.clone();
            for (v_in, g) in inputs.iter().zip(grads) {
                let target = &mut before[v_in.0];
                if !target.needs_grad {
                    continue;
                }
                let g = g.unwrap_or_else(|| {
                    panic!("{op_name} skipped the gradient of an input that needs it")
                });
                assert_eq!(
                    g.len(),
                    target.value.len(),
                    "{} produced a gradient of wrong length",
                    op_name
                );
                match &mut target.grad {
                    Some(buf) => {
                        for (b, gi) in buf.iter_mut().zip(&g) {
                            *b += gi;
                        }
                    }
                    None => target.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}
