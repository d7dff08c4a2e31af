//! The forward tape and its primitive operations.

use std::cell::RefCell;

use super::store::ParamStore;
use super::{AutodiffError, Tensor, LOG_CLAMP};

/// Shape of a tape node. Scalars are length-1 vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }
}

/// Handle to a node on a tape. Only meaningful with the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    ConcatRows(Vec<usize>),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    NegLog(usize),
    SoftmaxVec(usize),
    MaxOverRows(usize),
    MaxOverCols(usize),
    Pick(usize, usize),
    Sum(usize),
    PickRow(usize, usize),
    PickCol(usize, usize),
    StackCols(Vec<usize>),
    StackRows(Vec<usize>),
}

/// Binding of a leaf node to a parameter in the store, so gradients can be
/// harvested back by name after `backward`.
#[derive(Debug, Clone)]
enum ParamRef {
    Full(String),
    Row(String, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Shape,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    param: Option<ParamRef>,
}

/// Records a forward computation. One tape belongs to one logical thread of
/// execution; distinct examples get distinct tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Kahan-compensated running sum. Reductions feed the loss through
/// high-sensitivity paths (softmax normalizers, output logits); compensation
/// keeps their rounding noise well under what central differences resolve.
#[derive(Clone, Copy, Default)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub(crate) fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

pub(crate) fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].shape
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.shape_of(v)
    }

    /// Clone of a node's forward values.
    pub fn values(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].values.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor {
            shape: n.shape.dims(),
            values: n.values.clone(),
        }
    }

    /// Scalar convenience accessor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].values.len(), 1);
        nodes[v.0].values[0]
    }

    /// Gradient of a node, if backward has populated it.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    // -- leaves ------------------------------------------------------------

    pub fn constant(&self, t: Tensor) -> Var {
        let shape = match t.shape() {
            [n] => Shape::Vector(*n),
            [r, c] => Shape::Matrix(*r, *c),
            other => panic!("unsupported tensor rank {other:?}"),
        };
        self.push(Node {
            op: Op::Leaf,
            shape,
            values: t.values().to_vec(),
            grad: None,
            requires_grad: false,
            param: None,
        })
    }

    pub fn constant_vec(&self, values: Vec<f64>) -> Var {
        self.constant(Tensor::vector(values))
    }

    pub fn zeros(&self, n: usize) -> Var {
        self.constant_vec(vec![0.0; n])
    }

    /// Lease a whole parameter onto the tape as a differentiable leaf.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var, AutodiffError> {
        let p = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let shape = match p.tensor.shape() {
            [n] => Shape::Vector(*n),
            [r, c] => Shape::Matrix(*r, *c),
            other => panic!("unsupported tensor rank {other:?}"),
        };
        Ok(self.push(Node {
            op: Op::Leaf,
            shape,
            values: p.tensor.values().to_vec(),
            grad: None,
            requires_grad: true,
            param: Some(ParamRef::Full(name.to_string())),
        }))
    }

    /// Lease one row of a matrix parameter (an embedding lookup). The
    /// harvested gradient lands in that row only.
    pub fn param_row(
        &self,
        store: &ParamStore,
        name: &str,
        row: usize,
    ) -> Result<Var, AutodiffError> {
        let p = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let (rows, cols) = match p.tensor.shape() {
            [r, c] => (*r, *c),
            other => {
                return Err(AutodiffError::Argument {
                    op: "param_row",
                    message: format!("{name:?} is not a matrix (shape {other:?})"),
                })
            }
        };
        if row >= rows {
            return Err(AutodiffError::Argument {
                op: "param_row",
                message: format!("row {row} out of range for {name:?} with {rows} rows"),
            });
        }
        let values = p.tensor.values()[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(Node {
            op: Op::Leaf,
            shape: Shape::Vector(cols),
            values,
            grad: None,
            requires_grad: true,
            param: Some(ParamRef::Row(name.to_string(), row)),
        }))
    }

    // -- primitives ---------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let (out_shape, m, k, n) = match (sa, sb) {
            (Shape::Matrix(m, k1), Shape::Matrix(k2, n)) if k1 == k2 => {
                (Shape::Matrix(m, n), m, k1, n)
            }
            (Shape::Matrix(m, k1), Shape::Vector(k2)) if k1 == k2 => (Shape::Vector(m), m, k1, 1),
            _ => {
                return Err(AutodiffError::Shape {
                    op: "matmul",
                    lhs: sa.dims(),
                    rhs: sb.dims(),
                })
            }
        };
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
        let mut acc = vec![KahanSum::default(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let arow = &mut acc[i * n..(i + 1) * n];
                for (o, &bj) in arow.iter_mut().zip(brow) {
                    o.add(aip * bj);
                }
            }
        }
        let out: Vec<f64> = acc.iter().map(|a| a.value()).collect();
        let req = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::MatMul(a.0, b.0),
            shape: out_shape,
            values: out,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    fn binary_same_shape(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<Shape, AutodiffError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(AutodiffError::Shape {
                op: op_name,
                lhs: sa.dims(),
                rhs: sb.dims(),
            });
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let shape = self.binary_same_shape("add", a, b)?;
        let nodes = self.nodes.borrow();
        let values = nodes[a.0]
            .values
            .iter()
            .zip(&nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let req = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::Add(a.0, b.0),
            shape,
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let shape = self.binary_same_shape("mul_elementwise", a, b)?;
        let nodes = self.nodes.borrow();
        let values = nodes[a.0]
            .values
            .iter()
            .zip(&nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let req = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::Mul(a.0, b.0),
            shape,
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Concatenation along rows: vectors chain end to end, matrices with the
    /// same column count stack vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Argument {
                op: "concat_rows",
                message: "no inputs".into(),
            });
        }
        let nodes = self.nodes.borrow();
        let shape = match nodes[parts[0].0].shape {
            Shape::Vector(_) => {
                let mut total = 0;
                for v in parts {
                    match nodes[v.0].shape {
                        Shape::Vector(n) => total += n,
                        s => {
                            return Err(AutodiffError::Shape {
                                op: "concat_rows",
                                lhs: nodes[parts[0].0].shape.dims(),
                                rhs: s.dims(),
                            })
                        }
                    }
                }
                Shape::Vector(total)
            }
            Shape::Matrix(_, c0) => {
                let mut rows = 0;
                for v in parts {
                    match nodes[v.0].shape {
                        Shape::Matrix(r, c) if c == c0 => rows += r,
                        s => {
                            return Err(AutodiffError::Shape {
                                op: "concat_rows",
                                lhs: nodes[parts[0].0].shape.dims(),
                                rhs: s.dims(),
                            })
                        }
                    }
                }
                Shape::Matrix(rows, c0)
            }
        };
        let mut values = Vec::with_capacity(shape.len());
        for v in parts {
            values.extend_from_slice(&nodes[v.0].values);
        }
        let req = parts.iter().any(|v| nodes[v.0].requires_grad);
        drop(nodes);
        Ok(self.push(Node {
            op: Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            shape,
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let nodes = self.nodes.borrow();
        let values = nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = nodes[a.0].shape;
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        self.push(Node {
            op,
            shape,
            values,
            grad: None,
            requires_grad: req,
            param: None,
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Elementwise -ln(x), with x clamped at `LOG_CLAMP` so saturated
    /// probabilities stay finite.
    pub fn neg_log(&self, a: Var) -> Var {
        self.unary(a, Op::NegLog(a.0), |x| -(x.max(LOG_CLAMP)).ln())
    }

    pub fn softmax_vec(&self, a: Var) -> Result<Var, AutodiffError> {
        let n = match self.shape_of(a) {
            Shape::Vector(n) if n > 0 => n,
            s => {
                return Err(AutodiffError::Argument {
                    op: "softmax_vec",
                    message: format!("requires a non-empty vector, found {:?}", s.dims()),
                })
            }
        };
        let nodes = self.nodes.borrow();
        let xs = &nodes[a.0].values;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
        let total = kahan_sum(exps.iter().copied());
        let values: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::SoftmaxVec(a.0),
            shape: Shape::Vector(n),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Per-row maxima of a matrix: (r, c) -> vector of length r.
    pub fn max_over_rows(&self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = match self.shape_of(a) {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::Argument {
                    op: "max_over_rows",
                    message: format!("requires a matrix, found {:?}", s.dims()),
                })
            }
        };
        let nodes = self.nodes.borrow();
        let xs = &nodes[a.0].values;
        let values: Vec<f64> = (0..r)
            .map(|i| xs[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::MaxOverRows(a.0),
            shape: Shape::Vector(r),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Per-column maxima of a matrix: (r, c) -> vector of length c.
    pub fn max_over_cols(&self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = match self.shape_of(a) {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::Argument {
                    op: "max_over_cols",
                    message: format!("requires a matrix, found {:?}", s.dims()),
                })
            }
        };
        let nodes = self.nodes.borrow();
        let xs = &nodes[a.0].values;
        let values: Vec<f64> = (0..c)
            .map(|j| (0..r).map(|i| xs[i * c + j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::MaxOverCols(a.0),
            shape: Shape::Vector(c),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Select one component of a vector as a scalar.
    pub fn pick(&self, a: Var, idx: usize) -> Result<Var, AutodiffError> {
        let n = match self.shape_of(a) {
            Shape::Vector(n) => n,
            s => {
                return Err(AutodiffError::Argument {
                    op: "pick",
                    message: format!("requires a vector, found {:?}", s.dims()),
                })
            }
        };
        if idx >= n {
            return Err(AutodiffError::Argument {
                op: "pick",
                message: format!("index {idx} out of range for length {n}"),
            });
        }
        let nodes = self.nodes.borrow();
        let values = vec![nodes[a.0].values[idx]];
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::Pick(a.0, idx),
            shape: Shape::Vector(1),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Sum of all components, as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let total = kahan_sum(nodes[a.0].values.iter().copied());
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        self.push(Node {
            op: Op::Sum(a.0),
            shape: Shape::Vector(1),
            values: vec![total],
            grad: None,
            requires_grad: req,
            param: None,
        })
    }

    pub fn pick_row(&self, a: Var, i: usize) -> Result<Var, AutodiffError> {
        let (r, c) = match self.shape_of(a) {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::Argument {
                    op: "pick_row",
                    message: format!("requires a matrix, found {:?}", s.dims()),
                })
            }
        };
        if i >= r {
            return Err(AutodiffError::Argument {
                op: "pick_row",
                message: format!("row {i} out of range for {r} rows"),
            });
        }
        let nodes = self.nodes.borrow();
        let values = nodes[a.0].values[i * c..(i + 1) * c].to_vec();
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::PickRow(a.0, i),
            shape: Shape::Vector(c),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    pub fn pick_col(&self, a: Var, j: usize) -> Result<Var, AutodiffError> {
        let (r, c) = match self.shape_of(a) {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::Argument {
                    op: "pick_col",
                    message: format!("requires a matrix, found {:?}", s.dims()),
                })
            }
        };
        if j >= c {
            return Err(AutodiffError::Argument {
                op: "pick_col",
                message: format!("column {j} out of range for {c} columns"),
            });
        }
        let nodes = self.nodes.borrow();
        let values = (0..r).map(|i| nodes[a.0].values[i * c + j]).collect();
        let req = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(Node {
            op: Op::PickCol(a.0, j),
            shape: Shape::Vector(r),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Build a (d, n) matrix whose columns are the given length-d vectors.
    pub fn stack_cols(&self, cols: &[Var]) -> Result<Var, AutodiffError> {
        if cols.is_empty() {
            return Err(AutodiffError::Argument {
                op: "stack_cols",
                message: "no inputs".into(),
            });
        }
        let nodes = self.nodes.borrow();
        let d = match nodes[cols[0].0].shape {
            Shape::Vector(d) => d,
            s => {
                return Err(AutodiffError::Argument {
                    op: "stack_cols",
                    message: format!("requires vectors, found {:?}", s.dims()),
                })
            }
        };
        let n = cols.len();
        let mut values = vec![0.0; d * n];
        for (j, v) in cols.iter().enumerate() {
            match nodes[v.0].shape {
                Shape::Vector(len) if len == d => {}
                s => {
                    return Err(AutodiffError::Shape {
                        op: "stack_cols",
                        lhs: vec![d],
                        rhs: s.dims(),
                    })
                }
            }
            for (i, &x) in nodes[v.0].values.iter().enumerate() {
                values[i * n + j] = x;
            }
        }
        let req = cols.iter().any(|v| nodes[v.0].requires_grad);
        drop(nodes);
        Ok(self.push(Node {
            op: Op::StackCols(cols.iter().map(|v| v.0).collect()),
            shape: Shape::Matrix(d, n),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    /// Build a (k, n) matrix whose rows are the given length-n vectors.
    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var, AutodiffError> {
        if rows.is_empty() {
            return Err(AutodiffError::Argument {
                op: "stack_rows",
                message: "no inputs".into(),
            });
        }
        let nodes = self.nodes.borrow();
        let n = match nodes[rows[0].0].shape {
            Shape::Vector(n) => n,
            s => {
                return Err(AutodiffError::Argument {
                    op: "stack_rows",
                    message: format!("requires vectors, found {:?}", s.dims()),
                })
            }
        };
        let k = rows.len();
        let mut values = Vec::with_capacity(k * n);
        for v in rows {
            match nodes[v.0].shape {
                Shape::Vector(len) if len == n => {}
                s => {
                    return Err(AutodiffError::Shape {
                        op: "stack_rows",
                        lhs: vec![n],
                        rhs: s.dims(),
                    })
                }
            }
            values.extend_from_slice(&nodes[v.0].values);
        }
        let req = rows.iter().any(|v| nodes[v.0].requires_grad);
        drop(nodes);
        Ok(self.push(Node {
            op: Op::StackRows(rows.iter().map(|v| v.0).collect()),
            shape: Shape::Matrix(k, n),
            values,
            grad: None,
            requires_grad: req,
            param: None,
        }))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Every `requires_grad` node reachable
    /// from the loss ends up holding dLoss/dNode; contributions from multiple
    /// uses accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<(), AutodiffError> {
        let mut nodes = self.nodes.borrow_mut();
        match nodes[loss.0].shape {
            Shape::Vector(1) => {}
            s => return Err(AutodiffError::NonScalarLoss(s.dims())),
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[loss.0].grad = Some(vec![1.0]);

        fn add_grad(nodes: &mut [Node], id: usize, contrib: impl Iterator<Item = (usize, f64)>) {
            if !nodes[id].requires_grad {
                return;
            }
            if nodes[id].grad.is_none() {
                nodes[id].grad = Some(vec![0.0; nodes[id].shape.len()]);
            }
            let g = nodes[id].grad.as_mut().unwrap();
            for (i, v) in contrib {
                g[i] += v;
            }
        }

        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let g = match &nodes[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k, n) = match (nodes[a].shape, nodes[b].shape) {
                        (Shape::Matrix(m, k), Shape::Matrix(_, n)) => (m, k, n),
                        (Shape::Matrix(m, k), Shape::Vector(_)) => (m, k, 1),
                        _ => unreachable!("validated at forward time"),
                    };
                    let av = nodes[a].values.clone();
                    let bv = nodes[b].values.clone();
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    add_grad(
                        &mut nodes,
                        a,
                        (0..m).flat_map(|i| {
                            let g = &g;
                            let bv = &bv;
                            (0..k).map(move |p| {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                (i * k + p, s)
                            })
                        }),
                    );
                    // dB[p,j] += sum_i A[i,p] * g[i,j]
                    add_grad(
                        &mut nodes,
                        b,
                        (0..k).flat_map(|p| {
                            let g = &g;
                            let av = &av;
                            (0..n).map(move |j| {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[i * k + p] * g[i * n + j];
                                }
                                (p * n + j, s)
                            })
                        }),
                    );
                }
                Op::Add(a, b) => {
                    add_grad(&mut nodes, a, g.iter().cloned().enumerate());
                    add_grad(&mut nodes, b, g.iter().cloned().enumerate());
                }
                Op::Mul(a, b) => {
                    let av = nodes[a].values.clone();
                    let bv = nodes[b].values.clone();
                    add_grad(&mut nodes, a, g.iter().zip(&bv).map(|(gi, bi)| gi * bi).enumerate());
                    add_grad(&mut nodes, b, g.iter().zip(&av).map(|(gi, ai)| gi * ai).enumerate());
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p].shape.len();
                        let slice: Vec<(usize, f64)> = g[offset..offset + len]
                            .iter()
                            .cloned()
                            .enumerate()
                            .collect();
                        add_grad(&mut nodes, p, slice.into_iter());
                        offset += len;
                    }
                }
                Op::Tanh(a) => {
                    let y = nodes[id].values.clone();
                    add_grad(
                        &mut nodes,
                        a,
                        g.iter().zip(&y).map(|(gi, yi)| gi * (1.0 - yi * yi)).enumerate(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = nodes[id].values.clone();
                    add_grad(
                        &mut nodes,
                        a,
                        g.iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)).enumerate(),
                    );
                }
                Op::Relu(a) => {
                    let x = nodes[a].values.clone();
                    add_grad(
                        &mut nodes,
                        a,
                        g.iter()
                            .zip(&x)
                            .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                            .enumerate(),
                    );
                }
                Op::NegLog(a) => {
                    let x = nodes[a].values.clone();
                    add_grad(
                        &mut nodes,
                        a,
                        g.iter()
                            .zip(&x)
                            .map(|(gi, xi)| -gi / xi.max(LOG_CLAMP))
                            .enumerate(),
                    );
                }
                Op::SoftmaxVec(a) => {
                    let s = nodes[id].values.clone();
                    let dot: f64 = g.iter().zip(&s).map(|(gi, si)| gi * si).sum();
                    add_grad(
                        &mut nodes,
                        a,
                        s.iter().zip(&g).map(|(si, gi)| si * (gi - dot)).enumerate(),
                    );
                }
                Op::MaxOverRows(a) => {
                    let (r, c) = match nodes[a].shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    let x = nodes[a].values.clone();
                    let mut contrib = Vec::with_capacity(r);
                    for i in 0..r {
                        let row = &x[i * c..(i + 1) * c];
                        let mut arg = 0;
                        for (j, &v) in row.iter().enumerate() {
                            if v > row[arg] {
                                arg = j;
                            }
                        }
                        contrib.push((i * c + arg, g[i]));
                    }
                    add_grad(&mut nodes, a, contrib.into_iter());
                }
                Op::MaxOverCols(a) => {
                    let (r, c) = match nodes[a].shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    let x = nodes[a].values.clone();
                    let mut contrib = Vec::with_capacity(c);
                    for j in 0..c {
                        let mut arg = 0;
                        for i in 0..r {
                            if x[i * c + j] > x[arg * c + j] {
                                arg = i;
                            }
                        }
                        contrib.push((arg * c + j, g[j]));
                    }
                    add_grad(&mut nodes, a, contrib.into_iter());
                }
                Op::Pick(a, idx) => {
                    add_grad(&mut nodes, a, std::iter::once((idx, g[0])));
                }
                Op::Sum(a) => {
                    let len = nodes[a].shape.len();
                    add_grad(&mut nodes, a, (0..len).map(|i| (i, g[0])));
                }
                Op::PickRow(a, i) => {
                    let c = match nodes[a].shape {
                        Shape::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    add_grad(
                        &mut nodes,
                        a,
                        g.iter().enumerate().map(|(j, &v)| (i * c + j, v)),
                    );
                }
                Op::PickCol(a, j) => {
                    let c = match nodes[a].shape {
                        Shape::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    add_grad(
                        &mut nodes,
                        a,
                        g.iter().enumerate().map(|(i, &v)| (i * c + j, v)),
                    );
                }
                Op::StackCols(cols) => {
                    let n = cols.len();
                    for (j, v) in cols.iter().enumerate() {
                        let d = nodes[*v].shape.len();
                        let contrib: Vec<(usize, f64)> =
                            (0..d).map(|i| (i, g[i * n + j])).collect();
                        add_grad(&mut nodes, *v, contrib.into_iter());
                    }
                }
                Op::StackRows(rows) => {
                    for (i, v) in rows.iter().enumerate() {
                        let n = nodes[*v].shape.len();
                        let contrib: Vec<(usize, f64)> =
                            (0..n).map(|j| (j, g[i * n + j])).collect();
                        add_grad(&mut nodes, *v, contrib.into_iter());
                    }
                }
            }
        }
        Ok(())
    }

    /// Fold every parameter-bound leaf gradient back into the store.
    pub fn accumulate_grads(&self, store: &mut ParamStore) {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            let (binding, grad) = match (&node.param, &node.grad) {
                (Some(b), Some(g)) => (b, g),
                _ => continue,
            };
            match binding {
                ParamRef::Full(name) => store.add_grad(name, 0, grad),
                ParamRef::Row(name, row) => {
                    let cols = grad.len();
                    store.add_grad(name, row * cols, grad);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn vec_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tape::new();
        let x = t.constant_vec(vec![0.0, 0.0]);
        let s = t.softmax_vec(x).unwrap();
        vec_close(&t.values(s), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..9);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
            let t = Tape::new();
            let s = t.softmax_vec(t.constant_vec(xs)).unwrap();
            let vals = t.values(s);
            assert!(vals.iter().all(|&v| v > 0.0));
            assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_over_rows_and_cols() {
        let t = Tape::new();
        let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 2.0, 0.0]));
        let rows = t.max_over_rows(m).unwrap();
        assert_eq!(t.values(rows), vec![3.0, 2.0]);
        let cols = t.max_over_cols(m).unwrap();
        assert_eq!(t.values(cols), vec![2.0, 3.0]);
    }

    #[test]
    fn mul_elementwise_example() {
        let t = Tape::new();
        let a = t.constant_vec(vec![1.0, 2.0, 3.0]);
        let b = t.constant_vec(vec![4.0, 5.0, 6.0]);
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.values(c), vec![4.0, 10.0, 18.0]);
    }

    #[test]
    fn square_gradient() {
        let t = Tape::new();
        let mut store = ParamStore::new(0);
        store.insert("x", Tensor::vector(vec![3.0]));
        let x = t.param(&store, "x").unwrap();
        let y = t.mul(x, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), vec![6.0]);
    }

    #[test]
    fn sum_of_product_gradient() {
        let t = Tape::new();
        let mut store = ParamStore::new(0);
        store.insert("a", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let a = t.param(&store, "a").unwrap();
        let b = t.constant_vec(vec![4.0, 5.0, 6.0]);
        let loss = t.sum(t.mul(a, b).unwrap());
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_cross_entropy_identity() {
        // d/dz of -log softmax(z)[k] is softmax(z) - onehot(k)
        let t = Tape::new();
        let mut store = ParamStore::new(0);
        store.insert("z", Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]));
        let z = t.param(&store, "z").unwrap();
        let p = t.softmax_vec(z).unwrap();
        let loss = t.neg_log(t.pick(p, 2).unwrap());
        t.backward(loss).unwrap();
        let softmax = t.values(p);
        let expected: Vec<f64> = softmax
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 2 { s - 1.0 } else { *s })
            .collect();
        vec_close(&t.grad(z).unwrap(), &expected, 1e-12);
    }

    #[test]
    fn dag_reuse_accumulates_both_paths() {
        // loss = sum(x*x) + sum(x) uses x twice.
        let t = Tape::new();
        let mut store = ParamStore::new(0);
        store.insert("x", Tensor::vector(vec![2.0, -1.0]));
        let x = t.param(&store, "x").unwrap();
        let loss = t.add(t.sum(t.mul(x, x).unwrap()), t.sum(x)).unwrap();
        t.backward(loss).unwrap();
        // d/dx (x^2 + x) = 2x + 1
        vec_close(&t.grad(x).unwrap(), &[5.0, -1.0], 1e-12);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let t = Tape::new();
        let a = t.constant_vec(vec![1.0, 2.0]);
        let b = t.constant_vec(vec![1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let t = Tape::new();
        let a = t.constant_vec(vec![1.0, 2.0]);
        assert!(matches!(t.backward(a), Err(AutodiffError::NonScalarLoss(_))));
    }

    /// Central-difference check for a scalar function of one leased parameter.
    fn fd_check<F>(name: &str, init: Tensor, f: F)
    where
        F: Fn(&Tape, Var) -> Var,
    {
        let mut store = ParamStore::new(0);
        store.insert("p", init.clone());
        let tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let loss = f(&tape, p);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(p).unwrap();

        let eps = 1e-6;
        for i in 0..init.len() {
            let eval = |delta: f64, store: &mut ParamStore| -> f64 {
                store.get_mut("p").unwrap().tensor.values_mut()[i] += delta;
                let t = Tape::new();
                let p = t.param(store, "p").unwrap();
                let l = f(&t, p);
                let v = t.scalar_value(l);
                store.get_mut("p").unwrap().tensor.values_mut()[i] -= delta;
                v
            };
            let plus = eval(eps, &mut store);
            let minus = eval(-eps, &mut store);
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel < 1e-6,
                "{name}: component {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn primitive_gradients_match_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut rand_vec = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
        };

        let weights4 = Tensor::vector(vec![0.7, -1.3, 0.2, 1.9]);

        let w4 = weights4.clone();
        fd_check("tanh", Tensor::vector(rand_vec(4)), move |t, p| {
            let c = t.constant(w4.clone());
            t.sum(t.mul(t.tanh(p), c).unwrap())
        });
        let w4 = weights4.clone();
        fd_check("sigmoid", Tensor::vector(rand_vec(4)), move |t, p| {
            let c = t.constant(w4.clone());
            t.sum(t.mul(t.sigmoid(p), c).unwrap())
        });
        let w4 = weights4.clone();
        fd_check("relu", Tensor::vector(vec![0.5, -0.7, 1.2, -0.1]), move |t, p| {
            let c = t.constant(w4.clone());
            t.sum(t.mul(t.relu(p), c).unwrap())
        });
        fd_check("neg_log", Tensor::vector(vec![0.3, 1.5, 0.9, 2.0]), |t, p| {
            t.sum(t.neg_log(p))
        });
        let w4 = weights4.clone();
        fd_check("softmax_vec", Tensor::vector(rand_vec(4)), move |t, p| {
            let c = t.constant(w4.clone());
            t.sum(t.mul(t.softmax_vec(p).unwrap(), c).unwrap())
        });
        fd_check("matmul_lhs", Tensor::matrix(2, 3, rand_vec(6)), |t, p| {
            let b = t.constant(Tensor::matrix(3, 2, vec![0.2, -0.5, 1.0, 0.7, -1.1, 0.4]));
            let out = t.matmul(p, b).unwrap();
            let c = t.constant(Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 0.3]));
            t.sum(t.mul(out, c).unwrap())
        });
        fd_check("matmul_rhs_vec", Tensor::vector(rand_vec(3)), |t, p| {
            let a = t.constant(Tensor::matrix(2, 3, vec![0.2, -0.5, 1.0, 0.7, -1.1, 0.4]));
            let out = t.matmul(a, p).unwrap();
            let c = t.constant(Tensor::vector(vec![1.3, -0.2]));
            t.sum(t.mul(out, c).unwrap())
        });
        fd_check("concat_rows", Tensor::vector(rand_vec(3)), |t, p| {
            let other = t.constant_vec(vec![0.4, -0.9, 0.1]);
            let cat = t.concat_rows(&[p, other, p]).unwrap();
            let c = t.constant_vec(vec![0.5, -0.4, 1.1, -2.0, 0.3, 0.8, -0.6, 0.2, 1.4]);
            t.sum(t.mul(cat, c).unwrap())
        });
        fd_check("max_over_rows", Tensor::matrix(3, 4, rand_vec(12)), |t, p| {
            let c = t.constant(Tensor::vector(vec![1.0, -0.7, 0.4]));
            t.sum(t.mul(t.max_over_rows(p).unwrap(), c).unwrap())
        });
        fd_check("max_over_cols", Tensor::matrix(3, 4, rand_vec(12)), |t, p| {
            let c = t.constant(Tensor::vector(vec![1.0, -0.7, 0.4, 0.9]));
            t.sum(t.mul(t.max_over_cols(p).unwrap(), c).unwrap())
        });
        fd_check("pick", Tensor::vector(rand_vec(5)), |t, p| {
            t.pick(p, 3).unwrap()
        });
        fd_check("pick_row_col", Tensor::matrix(3, 4, rand_vec(12)), |t, p| {
            let r = t.pick_row(p, 1).unwrap();
            let c = t.pick_col(p, 2).unwrap();
            t.add(t.sum(r), t.sum(c)).unwrap()
        });
        fd_check("stack_cols", Tensor::vector(rand_vec(3)), |t, p| {
            let other = t.constant_vec(vec![0.4, -0.9, 0.1]);
            let m = t.stack_cols(&[p, other, p]).unwrap();
            let c = t.constant(Tensor::matrix(3, 3, vec![0.2; 9]));
            let weighted = t.mul(m, c).unwrap();
            let rows = t.max_over_rows(weighted).unwrap();
            t.sum(rows)
        });
        fd_check("stack_rows", Tensor::vector(rand_vec(4)), |t, p| {
            let other = t.constant_vec(vec![0.4, -0.9, 0.1, 2.0]);
            let m = t.stack_rows(&[p, other]).unwrap();
            let c = t.constant(Tensor::matrix(2, 4, vec![-0.3; 8]));
            t.sum(t.mul(m, c).unwrap())
        });
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || -> f64 {
            let mut store = ParamStore::new(42);
            store.init_uniform("w", &[4, 4], 4, 4);
            store.init_uniform("x", &[4], 4, 1);
            let t = Tape::new();
            let w = t.param(&store, "w").unwrap();
            let x = t.param(&store, "x").unwrap();
            let h = t.tanh(t.matmul(w, x).unwrap());
            let p = t.softmax_vec(h).unwrap();
            t.scalar_value(t.neg_log(t.pick(p, 1).unwrap()))
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
