//! Fixed-shape expression trees over the multiscale operator library.
//!
//! A leaf applies one unary operator to every input coordinate after scaling
//! it by a trainable coefficient, then joins the terms with its combiner:
//!
//! ```text
//! sum:      ℓ(x) = Σᵢ wᵢ·u(k·αᵢ·xᵢ) + b
//! product:  ℓ(x) = w·Πᵢ u(k·αᵢ·xᵢ) + b
//! ```
//!
//! where `k` is the unary's base frequency. Internal nodes apply a binary
//! operator to their children. Value, gradient and Laplacian are computed
//! analytically in one forward sweep; [`Expression::param_grad`] runs the
//! matching reverse sweep for any adjoint over (value, gradient, Laplacian).

mod ops;
mod parse;
mod render;
mod shape;

use rand::Rng;

pub use ops::{BinaryOp, CombinerOp, OperatorLibrary, UnaryKind, UnaryOp, DEFAULT_BASE_FREQUENCIES};
pub use parse::{parse_formula, Formula};
pub use render::PRINT_THRESHOLD;
pub use shape::{DecodedTree, OperatorSequence, SlotKind, SlotRole, TreeShape};

use crate::error::{FexError, Result};

/// Value, spatial gradient and Laplacian at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub laplacian: f64,
}

impl Jet {
    pub fn zeros(dim: usize) -> Self {
        Jet {
            value: 0.0,
            grad: vec![0.0; dim],
            laplacian: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.laplacian.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// Sensitivities of a scalar objective with respect to (E, ∇E, ΔE).
#[derive(Clone, Debug, PartialEq)]
pub struct Adjoint {
    pub value: f64,
    pub grad: Vec<f64>,
    pub laplacian: f64,
}

impl Adjoint {
    pub fn zeros(dim: usize) -> Self {
        Adjoint {
            value: 0.0,
            grad: vec![0.0; dim],
            laplacian: 0.0,
        }
    }

    fn reset(&mut self) {
        self.value = 0.0;
        self.laplacian = 0.0;
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Parameter indices of one leaf. Several slots may share one index after
/// parameter grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub combiner: CombinerOp,
    pub unary: UnaryOp,
    pub alpha: Vec<usize>,
    /// `d` entries for a sum leaf, one for a product leaf.
    pub weight: Vec<usize>,
    pub bias: usize,
}

/// A candidate solution `u(x; T, e, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expression {
    shape: TreeShape,
    ops: OperatorSequence,
    dim: usize,
    leaves: Vec<Leaf>,
    nodes: Vec<BinaryOp>,
    params: Vec<f64>,
    lambda: Option<usize>,
}

/// Number of trainable values of a freshly built expression.
pub fn param_count(shape: &TreeShape, dim: usize, combiners: &[CombinerOp], eigen: bool) -> usize {
    assert_eq!(combiners.len(), shape.num_leaves());
    let leaves: usize = combiners
        .iter()
        .map(|c| match c {
            CombinerOp::Sum => 2 * dim + 1,
            CombinerOp::Product => dim + 2,
        })
        .sum();
    leaves + usize::from(eigen)
}

impl Expression {
    /// Builds an expression with α = 1 and weights/biases drawn from U[−1, 1].
    pub fn build<R: Rng + ?Sized>(
        shape: TreeShape,
        ops: OperatorSequence,
        library: &OperatorLibrary,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut expr = Self::build_with(shape, ops, library, dim, |_| 0.0)?;
        for leaf in &expr.leaves {
            for &w in &leaf.weight {
                expr.params[w] = rng.random_range(-1.0..=1.0);
            }
            expr.params[leaf.bias] = rng.random_range(-1.0..=1.0);
        }
        Ok(expr)
    }

    /// Builds an expression with α = 1 and every weight and bias set by
    /// `fill(kind)`.
    pub fn build_with(
        shape: TreeShape,
        ops: OperatorSequence,
        library: &OperatorLibrary,
        dim: usize,
        mut fill: impl FnMut(ParamRole) -> f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(FexError::DimensionMismatch { expected: 1, got: 0 });
        }
        let decoded = ops.decode(&shape, library)?;
        let mut params = Vec::new();
        let mut leaves = Vec::with_capacity(decoded.leaves.len());
        for (combiner, unary) in decoded.leaves {
            let alpha: Vec<usize> = (0..dim)
                .map(|_| {
                    params.push(1.0);
                    params.len() - 1
                })
                .collect();
            let n_weights = match combiner {
                CombinerOp::Sum => dim,
                CombinerOp::Product => 1,
            };
            let weight: Vec<usize> = (0..n_weights)
                .map(|_| {
                    params.push(fill(ParamRole::Weight));
                    params.len() - 1
                })
                .collect();
            params.push(fill(ParamRole::Bias));
            let bias = params.len() - 1;
            leaves.push(Leaf {
                combiner,
                unary,
                alpha,
                weight,
                bias,
            });
        }
        Ok(Expression {
            shape,
            ops,
            dim,
            leaves,
            nodes: decoded.nodes,
            params,
            lambda: None,
        })
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn ops(&self) -> &OperatorSequence {
        &self.ops
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn nodes(&self) -> &[BinaryOp] {
        &self.nodes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len(), "parameter vector length");
        self.params.copy_from_slice(params);
    }

    pub fn alpha_values(&self, leaf: usize) -> Vec<f64> {
        self.leaves[leaf].alpha.iter().map(|&i| self.params[i]).collect()
    }

    pub fn weight_values(&self, leaf: usize) -> Vec<f64> {
        self.leaves[leaf].weight.iter().map(|&i| self.params[i]).collect()
    }

    pub fn bias_value(&self, leaf: usize) -> f64 {
        self.params[self.leaves[leaf].bias]
    }

    /// Effective per-dimension frequencies `k·αᵢ` of a leaf.
    pub fn frequencies(&self, leaf: usize) -> Vec<f64> {
        let k = f64::from(self.leaves[leaf].unary.base_freq());
        self.alpha_values(leaf).into_iter().map(|a| k * a).collect()
    }

    pub fn set_alpha(&mut self, leaf: usize, dim: usize, value: f64) {
        let i = self.leaves[leaf].alpha[dim];
        self.params[i] = value;
    }

    pub fn set_weight(&mut self, leaf: usize, term: usize, value: f64) {
        let i = self.leaves[leaf].weight[term];
        self.params[i] = value;
    }

    pub fn set_bias(&mut self, leaf: usize, value: f64) {
        let i = self.leaves[leaf].bias;
        self.params[i] = value;
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda.map(|i| self.params[i])
    }

    pub fn lambda_index(&self) -> Option<usize> {
        self.lambda
    }

    /// Sets the eigenvalue parameter, appending it on first use.
    pub fn set_lambda(&mut self, value: f64) {
        match self.lambda {
            Some(i) => self.params[i] = value,
            None => {
                self.params.push(value);
                self.lambda = Some(self.params.len() - 1);
            }
        }
    }

    /// Replaces the leaf parameter maps and the parameter vector; used by
    /// parameter grouping. λ, if present, must be re-declared by the caller.
    pub(crate) fn retie(&mut self, leaves: Vec<Leaf>, params: Vec<f64>, lambda: Option<usize>) {
        debug_assert!(leaves.iter().all(|l| {
            l.alpha.iter().chain(&l.weight).chain(std::iter::once(&l.bias)).all(|&i| i < params.len())
        }));
        self.leaves = leaves;
        self.params = params;
        self.lambda = lambda;
    }

    /// Replaces the parameter layout with explicit per-leaf index maps
    /// `(alpha, weight, bias)`, e.g. a regrouped layout read back from a
    /// checkpoint.
    pub fn with_layout(mut self, layout: Vec<(Vec<usize>, Vec<usize>, usize)>, params: Vec<f64>, lambda: Option<usize>) -> Result<Self> {
        if layout.len() != self.leaves.len() {
            return Err(FexError::InvalidShape(format!(
                "layout has {} leaves, tree has {}",
                layout.len(),
                self.leaves.len()
            )));
        }
        let n = params.len();
        let mut leaves = Vec::with_capacity(layout.len());
        for (old, (alpha, weight, bias)) in self.leaves.iter().zip(layout) {
            let in_range = alpha.iter().chain(&weight).chain([&bias]).chain(&lambda).all(|&i| i < n);
            if alpha.len() != self.dim || weight.len() != old.weight.len() || !in_range {
                return Err(FexError::InvalidShape("parameter layout does not fit the tree".into()));
            }
            leaves.push(Leaf {
                combiner: old.combiner,
                unary: old.unary,
                alpha,
                weight,
                bias,
            });
        }
        self.retie(leaves, params, lambda);
        Ok(self)
    }

    fn check_dim(&self, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "point dimension");
    }

    pub fn workspace(&self) -> Workspace {
        let n_nodes = self.nodes.len() + self.leaves.len();
        Workspace {
            leaves: (0..self.leaves.len()).map(|_| LeafScratch::new(self.dim)).collect(),
            jets: (0..n_nodes).map(|_| Jet::zeros(self.dim)).collect(),
            adjoints: (0..n_nodes).map(|_| Adjoint::zeros(self.dim)).collect(),
        }
    }

    /// E(x). Non-finite results (e.g. `exp` overflow) are returned as-is for
    /// the caller to flag.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.jet(x).value
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.jet(x).grad
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        self.jet(x).laplacian
    }

    pub fn jet(&self, x: &[f64]) -> Jet {
        let mut ws = self.workspace();
        self.forward(x, &mut ws).clone()
    }

    /// Value only, without the derivative bookkeeping.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.check_dim(x);
        self.value_node(0, x)
    }

    fn value_node(&self, node: usize, x: &[f64]) -> f64 {
        let internal = self.nodes.len();
        if node >= internal {
            let leaf = &self.leaves[node - internal];
            let k = f64::from(leaf.unary.base_freq());
            let b = self.params[leaf.bias];
            match leaf.combiner {
                CombinerOp::Sum => {
                    let mut v = 0.0;
                    for i in 0..self.dim {
                        let s = k * self.params[leaf.alpha[i]];
                        v += self.params[leaf.weight[i]] * leaf.unary.value(s * x[i]);
                    }
                    v + b
                }
                CombinerOp::Product => {
                    let mut p = 1.0;
                    for i in 0..self.dim {
                        let s = k * self.params[leaf.alpha[i]];
                        p *= leaf.unary.value(s * x[i]);
                    }
                    self.params[leaf.weight[0]] * p + b
                }
            }
        } else {
            let a = self.value_node(2 * node + 1, x);
            let c = self.value_node(2 * node + 2, x);
            self.nodes[node].apply(a, c)
        }
    }

    /// Forward sweep; returns the root jet stored in `ws`.
    pub fn forward<'w>(&self, x: &[f64], ws: &'w mut Workspace) -> &'w Jet {
        self.check_dim(x);
        let internal = self.nodes.len();
        for (l, leaf) in self.leaves.iter().enumerate() {
            let jet = &mut ws.jets[internal + l];
            self.leaf_forward(leaf, x, &mut ws.leaves[l], jet);
        }
        for node in (0..internal).rev() {
            let (head, tail) = ws.jets.split_at_mut(node + 1);
            let out = &mut head[node];
            let left = &tail[2 * node + 1 - (node + 1)];
            let right = &tail[2 * node + 2 - (node + 1)];
            node_forward(self.nodes[node], left, right, out);
        }
        &ws.jets[0]
    }

    fn leaf_forward(&self, leaf: &Leaf, x: &[f64], sc: &mut LeafScratch, jet: &mut Jet) {
        let k = f64::from(leaf.unary.base_freq());
        let d = self.dim;
        for i in 0..d {
            let s = k * self.params[leaf.alpha[i]];
            sc.scale[i] = s;
            sc.u[i] = leaf.unary.derivatives(s * x[i]);
        }
        let b = self.params[leaf.bias];
        match leaf.combiner {
            CombinerOp::Sum => {
                let mut v = 0.0;
                let mut lap = 0.0;
                for i in 0..d {
                    let w = self.params[leaf.weight[i]];
                    let s = sc.scale[i];
                    let u = &sc.u[i];
                    v += w * u[0];
                    jet.grad[i] = w * s * u[1];
                    lap += w * s * s * u[2];
                }
                jet.value = v + b;
                jet.laplacian = lap;
            }
            CombinerOp::Product => {
                sc.prefix[0] = 1.0;
                for i in 0..d {
                    sc.prefix[i + 1] = sc.prefix[i] * sc.u[i][0];
                }
                sc.suffix[d] = 1.0;
                for i in (0..d).rev() {
                    sc.suffix[i] = sc.suffix[i + 1] * sc.u[i][0];
                }
                let w = self.params[leaf.weight[0]];
                let mut lap = 0.0;
                for i in 0..d {
                    let excl = sc.prefix[i] * sc.suffix[i + 1];
                    let s = sc.scale[i];
                    jet.grad[i] = w * s * sc.u[i][1] * excl;
                    lap += s * s * sc.u[i][2] * excl;
                }
                jet.value = w * sc.prefix[d] + b;
                jet.laplacian = w * lap;
            }
        }
    }

    /// Gradient of `adj·(E, ∇E, ΔE)` with respect to every parameter, for a
    /// single point. The λ entry (if any) is zero since E does not depend on it.
    pub fn param_grad(&self, x: &[f64], adj: &Adjoint) -> Vec<f64> {
        let mut ws = self.workspace();
        self.forward(x, &mut ws);
        let mut out = vec![0.0; self.params.len()];
        self.backward(x, &mut ws, adj, &mut out);
        out
    }

    /// Reverse sweep after [`Expression::forward`] at the same `x`;
    /// accumulates into `out`.
    pub fn backward(&self, x: &[f64], ws: &mut Workspace, adj: &Adjoint, out: &mut [f64]) {
        let internal = self.nodes.len();
        ws.adjoints[0].value = adj.value;
        ws.adjoints[0].laplacian = adj.laplacian;
        ws.adjoints[0].grad.copy_from_slice(&adj.grad);
        for node in 0..internal {
            let (head, tail) = ws.adjoints.split_at_mut(node + 1);
            let a = &head[node];
            let (l_slot, r_slot) = tail.split_at_mut(2 * node + 2 - (node + 1));
            let left_adj = &mut l_slot[2 * node + 1 - (node + 1)];
            let right_adj = &mut r_slot[0];
            node_backward(
                self.nodes[node],
                &ws.jets[2 * node + 1],
                &ws.jets[2 * node + 2],
                a,
                left_adj,
                right_adj,
            );
        }
        for (l, leaf) in self.leaves.iter().enumerate() {
            self.leaf_backward(leaf, x, &ws.leaves[l], &ws.adjoints[internal + l], out);
        }
    }

    fn leaf_backward(&self, leaf: &Leaf, x: &[f64], sc: &LeafScratch, adj: &Adjoint, out: &mut [f64]) {
        let k = f64::from(leaf.unary.base_freq());
        let d = self.dim;
        let (a, l) = (adj.value, adj.laplacian);
        out[leaf.bias] += a;
        match leaf.combiner {
            CombinerOp::Sum => {
                for i in 0..d {
                    let w = self.params[leaf.weight[i]];
                    let s = sc.scale[i];
                    let [u0, u1, u2, u3] = sc.u[i];
                    let g = adj.grad[i];
                    let xi = x[i];
                    out[leaf.weight[i]] += a * u0 + g * s * u1 + l * s * s * u2;
                    out[leaf.alpha[i]] +=
                        k * w * (a * u1 * xi + g * (u1 + s * u2 * xi) + l * (2.0 * s * u2 + s * s * u3 * xi));
                }
            }
            CombinerOp::Product => {
                // Dual-number prefix/suffix products of (uᵢ + ε hᵢ): the real
                // part excludes a factor from the product, the ε part carries
                // the first-order (gradient/Laplacian) terms.
                let w = self.params[leaf.weight[0]];
                let h = |i: usize| {
                    let s = sc.scale[i];
                    adj.grad[i] * s * sc.u[i][1] + l * s * s * sc.u[i][2]
                };
                let mut pre = vec![(1.0, 0.0); d + 1];
                for i in 0..d {
                    pre[i + 1] = dual_mul(pre[i], (sc.u[i][0], h(i)));
                }
                let mut suf = vec![(1.0, 0.0); d + 1];
                for i in (0..d).rev() {
                    suf[i] = dual_mul(suf[i + 1], (sc.u[i][0], h(i)));
                }
                let (p, hsum) = pre[d];
                out[leaf.weight[0]] += a * p + hsum;
                for m in 0..d {
                    let (q, r) = dual_mul(pre[m], suf[m + 1]);
                    let s = sc.scale[m];
                    let [_, u1, u2, u3] = sc.u[m];
                    let xm = x[m];
                    let du = k * xm * u1;
                    let dh = k * (adj.grad[m] * (u1 + s * u2 * xm) + l * (2.0 * s * u2 + s * s * u3 * xm));
                    out[leaf.alpha[m]] += w * ((a * du + dh) * q + du * r);
                }
            }
        }
    }

    /// Deterministic text form; see [`PRINT_THRESHOLD`].
    pub fn render(&self, precision: usize) -> String {
        render::render(self, precision)
    }
}

/// What a free weight/bias slot is, for [`Expression::build_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[inline]
fn dual_mul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0, a.0 * b.1 + a.1 * b.0)
}

fn node_forward(op: BinaryOp, left: &Jet, right: &Jet, out: &mut Jet) {
    match op {
        BinaryOp::Add => {
            out.value = left.value + right.value;
            out.laplacian = left.laplacian + right.laplacian;
            for ((o, a), b) in out.grad.iter_mut().zip(&left.grad).zip(&right.grad) {
                *o = a + b;
            }
        }
        BinaryOp::Sub => {
            out.value = left.value - right.value;
            out.laplacian = left.laplacian - right.laplacian;
            for ((o, a), b) in out.grad.iter_mut().zip(&left.grad).zip(&right.grad) {
                *o = a - b;
            }
        }
        BinaryOp::Mul => {
            let (v1, v2) = (left.value, right.value);
            let mut dot = 0.0;
            for ((o, a), b) in out.grad.iter_mut().zip(&left.grad).zip(&right.grad) {
                *o = v2 * a + v1 * b;
                dot += a * b;
            }
            out.value = v1 * v2;
            out.laplacian = v2 * left.laplacian + 2.0 * dot + v1 * right.laplacian;
        }
    }
}

fn node_backward(op: BinaryOp, left: &Jet, right: &Jet, adj: &Adjoint, la: &mut Adjoint, ra: &mut Adjoint) {
    la.reset();
    ra.reset();
    match op {
        BinaryOp::Add | BinaryOp::Sub => {
            let sign = if op == BinaryOp::Add { 1.0 } else { -1.0 };
            la.value = adj.value;
            la.laplacian = adj.laplacian;
            ra.value = sign * adj.value;
            ra.laplacian = sign * adj.laplacian;
            for i in 0..adj.grad.len() {
                la.grad[i] = adj.grad[i];
                ra.grad[i] = sign * adj.grad[i];
            }
        }
        BinaryOp::Mul => {
            let (a, l) = (adj.value, adj.laplacian);
            let mut g_dot_r = 0.0;
            let mut g_dot_l = 0.0;
            for i in 0..adj.grad.len() {
                let g = adj.grad[i];
                g_dot_r += g * right.grad[i];
                g_dot_l += g * left.grad[i];
                la.grad[i] = g * right.value + 2.0 * l * right.grad[i];
                ra.grad[i] = g * left.value + 2.0 * l * left.grad[i];
            }
            la.value = a * right.value + g_dot_r + l * right.laplacian;
            ra.value = a * left.value + g_dot_l + l * left.laplacian;
            la.laplacian = l * right.value;
            ra.laplacian = l * left.value;
        }
    }
}

#[derive(Clone, Debug)]
struct LeafScratch {
    scale: Vec<f64>,
    u: Vec<[f64; 4]>,
    prefix: Vec<f64>,
    suffix: Vec<f64>,
}

impl LeafScratch {
    fn new(dim: usize) -> Self {
        LeafScratch {
            scale: vec![0.0; dim],
            u: vec![[0.0; 4]; dim],
            prefix: vec![0.0; dim + 1],
            suffix: vec![0.0; dim + 1],
        }
    }
}

/// Reusable buffers for forward/backward sweeps of one expression.
#[derive(Clone, Debug)]
pub struct Workspace {
    leaves: Vec<LeafScratch>,
    jets: Vec<Jet>,
    adjoints: Vec<Adjoint>,
}
