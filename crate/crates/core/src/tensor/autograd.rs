//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes in execution order. A [`Var`]
//! is a tensor value plus an optional reference to the node that produced it.
//! Operations on vars run the raw kernel and, when at least one input is
//! tracked, append a node holding a vector-Jacobian closure. Untracked inputs
//! produce untracked outputs, so inference pays nothing for the tape.
//!
//! [`Var::backward`] walks the nodes in exact reverse order.

use std::cell::RefCell;
use std::rc::Rc;

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

type Backward = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<Backward>,
    shape: Vec<usize>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Shared handle to one differentiation tape. Cloning the handle does not
/// copy the tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` as a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.push(Node {
            inputs: Vec::new(),
            backward: None,
            shape: value.shape().to_vec(),
        });
        Var {
            value,
            grad_ref: Some(GradRef {
                tape: self.clone(),
                node: id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[derive(Clone)]
struct GradRef {
    tape: Tape,
    node: usize,
}

/// A tensor value with an optional position on a tape.
#[derive(Clone)]
pub struct Var {
    value: Tensor,
    grad_ref: Option<GradRef>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.grad_ref.as_ref().map(|g| g.node))
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
    tape: Tape,
}

impl Gradients {
    /// Gradient with respect to `var`. Inputs the loss never reached get a
    /// zero tensor of the right shape.
    pub fn wrt(&self, var: &Var) -> Result<Tensor> {
        let r = var
            .grad_ref
            .as_ref()
            .ok_or_else(|| Error::Tape("gradient requested for an untracked value".into()))?;
        if !r.tape.same(&self.tape) {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        match &self.grads[r.node] {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(&self.shapes[r.node]),
        }
    }

    /// Node ids in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
    });
    Ok(())
}

impl Var {
    /// An untracked value; operations on it alone are not recorded.
    pub fn constant(value: Tensor) -> Self {
        Var {
            value,
            grad_ref: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.grad_ref.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.grad_ref.as_ref().map(|g| g.node)
    }

    fn record(
        inputs: &[&Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Result<Var> {
        let mut tape: Option<&Tape> = None;
        for r in inputs.iter().filter_map(|v| v.grad_ref.as_ref()) {
            match tape {
                None => tape = Some(&r.tape),
                Some(t) if !t.same(&r.tape) => {
                    return Err(Error::Tape("operands live on different tapes".into()))
                }
                Some(_) => {}
            }
        }
        let Some(tape) = tape else {
            return Ok(Var::constant(value));
        };
        let tape = tape.clone();
        let id = tape.push(Node {
            inputs: inputs.iter().map(|v| v.node_id()).collect(),
            backward: Some(Box::new(backward)),
            shape: value.shape().to_vec(),
        });
        Ok(Var {
            value,
            grad_ref: Some(GradRef { tape, node: id }),
        })
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        let r = self
            .grad_ref
            .as_ref()
            .ok_or_else(|| Error::Tape("loss is not on a tape".into()))?;
        let inner = r.tape.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[r.node] = Some(Tensor::from_parts(self.shape().to_vec(), vec![1.0]));
        let mut visited = Vec::new();
        for id in (0..=r.node).rev() {
            let node = &inner.nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].clone() else {
                continue;
            };
            visited.push(id);
            let need: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = bw(&g, &need)?;
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(src), Some(ig)) = (slot, ig) {
                    accumulate(&mut grads[*src], ig)?;
                }
            }
        }
        let shapes = inner.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
            tape: r.tape.clone(),
        })
    }

    // -- element-wise ------------------------------------------------------

    /// `self + other`, where `other`'s shape may be a trailing suffix.
    pub fn add(&self, other: &Var) -> Result<Var> {
        let value = ops::add_broadcast(&self.value, &other.value)?;
        let b_shape = other.shape().to_vec();
        Var::record(&[self, other], value, move |g, need| {
            Ok(vec![
                need[0].then(|| g.clone()),
                need[1].then(|| ops::reduce_to_suffix(g, &b_shape)),
            ])
        })
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let value = self.value.zip_map(&other.value, |a, b| a - b)?;
        Var::record(&[self, other], value, |g, need| {
            Ok(vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))])
        })
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = self.value.zip_map(&other.value, |a, b| a * b)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Var::record(&[self, other], value, move |g, need| {
            Ok(vec![
                if need[0] { Some(g.zip_map(&b, |x, y| x * y)?) } else { None },
                if need[1] { Some(g.zip_map(&a, |x, y| x * y)?) } else { None },
            ])
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Var> {
        let value = self.value.map(|v| v * factor);
        Var::record(&[self], value, move |g, _| Ok(vec![Some(g.map(|v| v * factor))]))
    }

    pub fn square(&self) -> Result<Var> {
        let value = self.value.map(|v| v * v);
        let x = self.value.clone();
        Var::record(&[self], value, move |g, _| {
            Ok(vec![Some(g.zip_map(&x, |gv, xv| 2.0 * gv * xv)?)])
        })
    }

    pub fn gelu(&self) -> Result<Var> {
        let value = ops::gelu(&self.value);
        let x = self.value.clone();
        Var::record(&[self], value, move |g, _| {
            Ok(vec![Some(g.zip_map(&x, |gv, xv| gv * ops::gelu_derivative(xv))?)])
        })
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&self) -> Result<Var> {
        let value = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        Var::record(&[self], value, move |g, _| {
            Ok(vec![Some(Tensor::full(&shape, g.item()?)?)])
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    // -- shape -------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Var::record(&[self], value, move |g, _| Ok(vec![Some(g.reshape(&orig)?)]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let value = ops::permute(&self.value, axes)?;
        let inv = ops::inverse_permutation(axes);
        Var::record(&[self], value, move |g, _| Ok(vec![Some(ops::permute(g, &inv)?)]))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = ops::narrow(&self.value, axis, start, len)?;
        let shape = self.shape().to_vec();
        Var::record(&[self], value, move |g, _| {
            Ok(vec![Some(ops::narrow_backward(&shape, axis, start, g))])
        })
    }

    /// Repeats over new leading axes.
    pub fn expand_leading(&self, lead: &[usize]) -> Result<Var> {
        let value = ops::expand_leading(&self.value, lead)?;
        let shape = self.shape().to_vec();
        Var::record(&[self], value, move |g, _| Ok(vec![Some(ops::reduce_to_suffix(g, &shape))]))
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let value = ops::gather_rows(&self.value, indices)?;
        let idx = indices.to_vec();
        let shape = self.shape().to_vec();
        Var::record(&[self], value, move |g, _| {
            let base = Tensor::zeros(&shape)?;
            Ok(vec![Some(ops::scatter_rows(&base, &idx, g)?)])
        })
    }

    /// Writes `values` at `indices` of `self` (the base).
    pub fn scatter_rows(&self, indices: &[usize], values: &Var) -> Result<Var> {
        let value = ops::scatter_rows(&self.value, indices, &values.value)?;
        let idx = indices.to_vec();
        Var::record(&[self, values], value, move |g, need| {
            Ok(vec![
                need[0].then(|| ops::zero_rows(g, &idx)),
                if need[1] { Some(ops::gather_rows(g, &idx)?) } else { None },
            ])
        })
    }

    // -- layers ------------------------------------------------------------

    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Result<Var> {
        let value = ops::conv2d(&self.value, &weight.value, bias.map(|b| &b.value), stride, padding)?;
        let (x, w) = (self.value.clone(), weight.value.clone());
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Var::record(&inputs, value, move |g, need| {
            let grads = ops::conv2d_backward(
                &x,
                &w,
                g,
                stride,
                padding,
                [need[0], need[1], has_bias && need[2]],
            )?;
            let mut out = vec![grads.input, grads.weight];
            if has_bias {
                out.push(grads.bias);
            }
            Ok(out)
        })
    }

    /// `self W^T + b` over the trailing axis.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let value = ops::linear(&self.value, &weight.value, bias.map(|b| &b.value))?;
        let (x, w) = (self.value.clone(), weight.value.clone());
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Var::record(&inputs, value, move |g, need| {
            let (dx, dw, db) = ops::linear_backward(&x, &w, g, [need[0], need[1], has_bias && need[2]])?;
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(db);
            }
            Ok(out)
        })
    }

    pub fn matmul(&self, other: &Var, transpose_b: bool) -> Result<Var> {
        let value = ops::matmul(&self.value, &other.value, transpose_b)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Var::record(&[self, other], value, move |g, need| {
            let (da, db) = ops::matmul_backward(&a, &b, g, transpose_b, [need[0], need[1]])?;
            Ok(vec![da, db])
        })
    }

    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (value, cache) = ops::layer_norm_forward(&self.value, &gamma.value, &beta.value, eps)?;
        let (x, gm) = (self.value.clone(), gamma.value.clone());
        Var::record(&[self, gamma, beta], value, move |g, need| {
            let (dx, dg, db) = ops::layer_norm_backward(&x, &gm, &cache, g, [need[0], need[1], need[2]])?;
            Ok(vec![dx, dg, db])
        })
    }

    pub fn softmax_rows(&self) -> Result<Var> {
        let value = ops::softmax_rows(&self.value);
        let y = value.clone();
        Var::record(&[self], value, move |g, _| Ok(vec![Some(ops::softmax_backward(&y, g))]))
    }

    pub fn avg_pool2d(&self, k: usize, stride: usize) -> Result<Var> {
        let value = ops::avg_pool2d(&self.value, k, stride)?;
        let shape = self.shape().to_vec();
        Var::record(&[self], value, move |g, _| {
            Ok(vec![Some(ops::avg_pool2d_backward(&shape, g, k, stride))])
        })
    }

    pub fn upsample_nearest2x(&self) -> Result<Var> {
        let value = ops::upsample_nearest2x(&self.value)?;
        let shape = self.shape().to_vec();
        Var::record(&[self], value, move |g, _| {
            Ok(vec![Some(ops::upsample_nearest2x_backward(&shape, g))])
        })
    }
}
