//! A small reverse-mode tape over rank-2 tensors.
//!
//! Every node owns its forward value. `backward` walks the tape in reverse
//! insertion order, so a node's gradient is complete before it is
//! propagated to its inputs.

use super::tensor::{self, matmul_nt, matmul_tn, norm, Tensor};
use crate::error::{MoproError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    /// Saves the per-row norms for the backward pass.
    L2Normalize(Var, Vec<f64>),
    SoftmaxRows(Var),
    Sum(Var),
    /// Scalar node whose local gradients w.r.t. its inputs were computed
    /// when the node was recorded; used for fused loss terms.
    Fused(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x (b×n) + bias (1×n)` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(MoproError::Dimension {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        out.clear_grad();
        let c = out.cols();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(MoproError::Dimension {
                op: name,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let norms: Vec<f64> = src.row_iter().map(norm).collect();
        let out = tensor::l2_normalize_rows(src)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::L2Normalize(x, norms), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(x), rg)
    }

    /// Record a scalar whose gradient w.r.t. each input has already been
    /// computed by the caller.
    pub fn fused_scalar(&mut self, value: f64, local: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &local {
            let shape = self.value(*v).shape();
            if g.len() != self.value(*v).len() {
                return Err(MoproError::Dimension {
                    op: "fused_scalar",
                    left: shape.to_vec(),
                    right: vec![g.len()],
                });
            }
        }
        let inputs: Vec<Var> = local.iter().map(|(v, _)| *v).collect();
        let rg = self.needs(&inputs);
        Ok(self.push(Tensor::from_vec(1, 1, vec![value]), Op::Fused(local), rg))
    }

    /// Propagate d(output)/d(node) to every node that requires a gradient.
    /// The output must be a scalar.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(MoproError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let accumulate = |v: Var, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, bv.data(), &mut da, m, n, k);
                    accumulate(*a, da, grads);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(av.data(), g, &mut db, k, m, n);
                    accumulate(*b, db, grads);
                }
            }
            Op::AddBias(x, bias) => {
                let c = self.value(*bias).cols();
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                accumulate(*x, g.to_vec(), grads);
                accumulate(*bias, db, grads);
            }
            Op::Add(a, b) => {
                accumulate(*a, g.to_vec(), grads);
                accumulate(*b, g.to_vec(), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate(*a, da, grads);
                accumulate(*b, db, grads);
            }
            Op::Scale(x, f) => accumulate(*x, g.iter().map(|v| v * f).collect(), grads),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(*x, dx, grads);
            }
            Op::L2Normalize(x, norms) => {
                // d/dx (x/|x|) = (I - ẑẑᵀ)/|x|
                let out = &node.value;
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, nrm) in norms.iter().enumerate() {
                    let z = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let proj = tensor::dot(gr, z);
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - proj * z[j]) / nrm;
                    }
                }
                accumulate(*x, dx, grads);
            }
            Op::SoftmaxRows(x) => {
                let p = &node.value;
                let c = p.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let inner = tensor::dot(gr, pr);
                    for j in 0..c {
                        dx[r * c + j] = pr[j] * (gr[j] - inner);
                    }
                }
                accumulate(*x, dx, grads);
            }
            Op::Sum(x) => accumulate(*x, vec![g[0]; self.value(*x).len()], grads),
            Op::Fused(local) => {
                for (v, lg) in local {
                    accumulate(*v, lg.iter().map(|d| d * g[0]).collect(), grads);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_backward_gives_row_broadcast_of_b_row_sums() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap());
        let b = g.param(Tensor::from_rows(&[vec![3.0, 1.0, 2.0], vec![0.0, -1.0, 4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[6.0, 3.0, 6.0, 3.0]);
        // d/db = column sums of a, broadcast along b's columns
        assert_eq!(g.grad(b).unwrap(), &[0.0, 0.0, 0.0, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = g.param(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // f(x) = x*x + x  => f' = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }
}
