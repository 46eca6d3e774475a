//! Recording tape and reverse-mode accumulation.
//!
//! Nodes are appended in evaluation order, so the arena order is already a
//! topological order and `backward` is a single reverse sweep.

use super::kernels::{self, ConvGeom, NormCache};
use super::{cast, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Add(Var, Var),
    Concat(Var, Var),
    Clamp01(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    L1(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present after `backward` reached the node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Move the value out of a node, e.g. the network output after inference.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(w).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = b {
            if self.value(b).numel() != geom.cout {
                return Err(Error::Shape(format!(
                    "conv bias has {} values for {} output channels",
                    self.value(b).numel(),
                    geom.cout
                )));
            }
        }
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.batch, geom.cout, geom.out_h, geom.out_w], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| v.max(T::zero()).min(T::one()))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Clamp01(x), &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even extents, got {h}x{w}"
            )));
        }
        let (y, argmax) = kernels::maxpool2_forward(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], y)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4(x)?;
        let y = kernels::upsample2_forward(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], y)?;
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, c, h, w) = self.dims4(x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "instance norm affine params must have {c} values"
            )));
        }
        let (y, cache) = kernels::instance_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            b,
            c,
            h * w,
            eps,
        );
        let value = Tensor::new(vec![b, c, h, w], y)?;
        let track = [x, gamma, beta].iter().any(|v| self.requires_grad(*v));
        let cache = if track { cache } else { NormCache::default() };
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.dims4(a)?;
        let (bb, cb, hb, wb) = self.dims4(b)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: [{ba},_,{ha},{wa}] vs [{bb},_,{hb},{wb}]"
            )));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for i in 0..ba {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.to_f64().unwrap_or(0.0))
            .sum();
        self.push(Tensor::scalar(cast(s)), Op::Sum(x), &[x])
    }

    /// `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape(
                "weighted_sum: weight count differs from input".into(),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &w)| (a * w).to_f64().unwrap_or(0.0))
            .sum();
        Ok(self.push(
            Tensor::scalar(cast(s)),
            Op::WeightedSum { x, weights },
            &[x],
        ))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "l1: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).abs().to_f64().unwrap_or(0.0))
            .sum();
        let value = Tensor::scalar(cast(s / ta.numel() as f64));
        Ok(self.push(value, Op::L1(a, b), &[a, b]))
    }

    /// Reverse sweep from a scalar loss. Gradients of nodes reached along
    /// several paths are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Shape(
                "loss does not depend on any tracked parameter".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("checked");
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contribs = self.local_grads(&op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contribs {
                if self.nodes[v.0].requires_grad {
                    add_into(&mut self.nodes[v.0].grad, g);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, op: &Op<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, geom, rg(*x));
                let mut out = vec![(*w, dw)];
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, d)]
            }
            Op::Clamp01(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v >= T::zero() && v <= T::one() {
                            gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*x, d)]
            }
            Op::MaxPool2 { x, argmax } => {
                vec![(*x, kernels::maxpool2_backward(g, argmax, val(*x).len()))]
            }
            Op::Upsample2(x) => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4().expect("4-D");
                vec![(*x, kernels::upsample2_backward(g, b * c, h, w))]
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (b, c, h, w) = self.nodes[x.0].value.dims4().expect("4-D");
                let (dx, dg, db) =
                    kernels::instance_norm_backward(g, cache, val(*gamma), b, c, h * w);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Concat(a, b) => {
                let (bn, ca, h, w) = self.nodes[a.0].value.dims4().expect("4-D");
                let cb = self.nodes[b.0].value.dims4().expect("4-D").1;
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for n in 0..bn {
                    let base = n * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::WeightedSum { x, weights } => {
                vec![(*x, weights.iter().map(|&w| w * g[0]).collect())]
            }
            Op::L1(a, b) => {
                let n: T = cast(val(*a).len() as f64);
                let scale = g[0] / n;
                // subgradient 0 at ties
                let da: Vec<T> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![(*a, da), (*b, db)]
            }
        }
    }
}
