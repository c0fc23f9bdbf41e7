//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The op set is exactly what the models here need: affine layers, tanh/relu,
//! vector arithmetic, concatenation, and the scalar glue (L2 norm, hinge,
//! square, weighted sums) that losses are assembled from. Parameters live in
//! a [`ParamStore`] and are referenced by id, so a forward pass never clones
//! weight matrices.

use crate::error::{Error, Result};
use crate::numerics::matrix::DenseMatrix;
use serde::{Deserialize, Serialize};

pub type ParamId = usize;
pub type NodeId = usize;

/// One parameter tensor: a matrix, or a vector stored as an n x 1 matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub matrix: DenseMatrix,
}

/// Flat registry of all trainable tensors in a model ensemble.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_matrix(&mut self, name: &str, m: DenseMatrix) -> ParamId {
        self.params.push(Param {
            name: name.to_string(),
            matrix: m,
        });
        self.params.len() - 1
    }

    pub fn add_vector(&mut self, name: &str, v: Vec<f64>) -> ParamId {
        let rows = v.len();
        self.add_matrix(
            name,
            DenseMatrix {
                rows,
                cols: 1,
                values: v,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn matrix(&self, id: ParamId) -> &DenseMatrix {
        &self.params[id].matrix
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.params[id].matrix
    }

    pub fn vector(&self, id: ParamId) -> &[f64] {
        &self.params[id].matrix.values
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    /// Flatten selected parameters into one vector (optimizer order = id order).
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(&self.params[id].matrix.values);
        }
        out
    }

    pub fn unflatten(&mut self, ids: &[ParamId], flat: &[f64]) {
        let mut offset = 0;
        for &id in ids {
            let vals = &mut self.params[id].matrix.values;
            let n = vals.len();
            vals.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len());
    }

    /// Bit-exact snapshot of selected tensors, for freeze audits.
    pub fn snapshot_bits(&self, ids: &[ParamId]) -> Vec<Vec<u64>> {
        ids.iter()
            .map(|&id| {
                self.params[id]
                    .matrix
                    .values
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Per-parameter gradient, aligned with ParamStore ids. Zero-filled for
    /// parameters the tape never touched.
    pub params: Vec<Vec<f64>>,
    node_grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id]
    }

    /// Gradient w.r.t. a leaf (input) node.
    pub fn node(&self, id: NodeId) -> &[f64] {
        &self.node_grads[id]
    }

    /// Serial accumulation; reduction order is pinned by the caller.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for p in &mut self.params {
            for x in p.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            params: (0..store.len())
                .map(|id| vec![0.0; store.matrix(id).values.len()])
                .collect(),
            node_grads: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { w: ParamId, b: ParamId, x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Concat { parts: Vec<NodeId> },
    L2Norm { x: NodeId },
    Square { x: NodeId },
    // The shift is applied at node creation; backward only needs `x`.
    SubConst { x: NodeId },
    Sum { parts: Vec<NodeId> },
}

/// Wengert tape: forward values cached per node, replayed in reverse by
/// [`Tape::backward`]. Single-owner; a consumed tape rejects further use.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, node: NodeId) -> &[f64] {
        &self.values[node]
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        debug_assert_eq!(self.values[node].len(), 1);
        self.values[node][0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, context: &str) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if let Some(index) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{context} (op {})", self.ops.len()),
                index,
            });
        }
        self.ops.push(op);
        self.values.push(value);
        Ok(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    /// Wx + b.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        w: ParamId,
        b: ParamId,
        x: NodeId,
    ) -> Result<NodeId> {
        let wm = store.matrix(w);
        let bv = store.vector(b);
        let xv = &self.values[x];
        if xv.len() != wm.cols || bv.len() != wm.rows {
            return Err(Error::DimensionMismatch {
                op: "affine_forward",
                expected: format!("x of length {}, b of length {}", wm.cols, wm.rows),
                got: format!("x of length {}, b of length {}", xv.len(), bv.len()),
            });
        }
        let mut out = wm.matvec(xv)?;
        for (o, bi) in out.iter_mut().zip(bv) {
            *o += bi;
        }
        self.push(Op::Affine { w, b, x }, out, "affine")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.values[x].iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh { x }, out, "tanh")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.values[x].iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu { x }, out, "relu")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_dims(a, b, "add")?;
        let out = self.values[a]
            .iter()
            .zip(&self.values[b])
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add { a, b }, out, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_dims(a, b, "sub")?;
        let out = self.values[a]
            .iter()
            .zip(&self.values[b])
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub { a, b }, out, "sub")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.values[x].iter().map(|v| v * c).collect();
        self.push(Op::Scale { x, c }, out, "scale")
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(&self.values[p]);
        }
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            out,
            "concat",
        )
    }

    /// Euclidean norm, as a length-1 node. Subgradient at 0 is 0.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.values[x].iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Op::L2Norm { x }, vec![n], "l2_norm")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.values[x].iter().map(|v| v * v).collect();
        self.push(Op::Square { x }, out, "square")
    }

    pub fn sub_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.values[x].iter().map(|v| v - c).collect();
        self.push(Op::SubConst { x }, out, "sub_const")
    }

    /// Elementwise sum of same-shaped nodes (typically scalar loss terms).
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dim = self.values[parts[0]].len();
        let mut out = vec![0.0; dim];
        for &p in parts {
            self.binary_dims(parts[0], p, "sum")?;
            for (o, v) in out.iter_mut().zip(&self.values[p]) {
                *o += v;
            }
        }
        self.push(
            Op::Sum {
                parts: parts.to_vec(),
            },
            out,
            "sum",
        )
    }

    fn binary_dims(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.values[a].len() != self.values[b].len() {
            return Err(Error::DimensionMismatch {
                op,
                expected: format!("length {}", self.values[a].len()),
                got: format!("length {}", self.values[b].len()),
            });
        }
        Ok(())
    }

    /// Reverse sweep from `output`. Consumes the tape: a second call fails.
    pub fn backward(
        &mut self,
        store: &ParamStore,
        output: NodeId,
        output_grad: &[f64],
    ) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.ops.is_empty() {
            return Err(Error::EmptyTape);
        }
        if output_grad.len() != self.values[output].len() {
            return Err(Error::DimensionMismatch {
                op: "backward",
                expected: format!("output grad of length {}", self.values[output].len()),
                got: format!("length {}", output_grad.len()),
            });
        }
        self.consumed = true;

        let mut node_grads: Vec<Vec<f64>> =
            self.values.iter().map(|v| vec![0.0; v.len()]).collect();
        node_grads[output].copy_from_slice(output_grad);
        let mut param_grads: Vec<Vec<f64>> = (0..store.len())
            .map(|id| vec![0.0; store.matrix(id).values.len()])
            .collect();

        for node in (0..=output).rev() {
            let g = node_grads[node].clone();
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            match &self.ops[node] {
                Op::Leaf => {}
                Op::Affine { w, b, x } => {
                    let wm = store.matrix(*w);
                    let gx = wm.matvec_transpose(&g)?;
                    for (a, v) in node_grads[*x].iter_mut().zip(gx) {
                        *a += v;
                    }
                    let xv = &self.values[*x];
                    let gw = &mut param_grads[*w];
                    for r in 0..wm.rows {
                        for c in 0..wm.cols {
                            gw[r * wm.cols + c] += g[r] * xv[c];
                        }
                    }
                    for (a, v) in param_grads[*b].iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                Op::Tanh { x } => {
                    let y = &self.values[node];
                    for ((a, gi), yi) in node_grads[*x].iter_mut().zip(&g).zip(y) {
                        *a += gi * (1.0 - yi * yi);
                    }
                }
                Op::Relu { x } => {
                    let xv = self.values[*x].clone();
                    for ((a, gi), xi) in node_grads[*x].iter_mut().zip(&g).zip(&xv) {
                        *a += if *xi > 0.0 { *gi } else { 0.0 };
                    }
                }
                Op::Add { a, b } => {
                    for (t, gi) in node_grads[*a].iter_mut().zip(&g) {
                        *t += gi;
                    }
                    for (t, gi) in node_grads[*b].iter_mut().zip(&g) {
                        *t += gi;
                    }
                }
                Op::Sub { a, b } => {
                    for (t, gi) in node_grads[*a].iter_mut().zip(&g) {
                        *t += gi;
                    }
                    for (t, gi) in node_grads[*b].iter_mut().zip(&g) {
                        *t -= gi;
                    }
                }
                Op::Scale { x, c } => {
                    for (t, gi) in node_grads[*x].iter_mut().zip(&g) {
                        *t += gi * c;
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.values[p].len();
                        for (t, gi) in node_grads[p].iter_mut().zip(&g[offset..offset + len]) {
                            *t += gi;
                        }
                        offset += len;
                    }
                }
                Op::L2Norm { x } => {
                    let n = self.values[node][0];
                    if n > 0.0 {
                        let xv = self.values[*x].clone();
                        for (t, xi) in node_grads[*x].iter_mut().zip(&xv) {
                            *t += g[0] * xi / n;
                        }
                    }
                }
                Op::Square { x } => {
                    let xv = self.values[*x].clone();
                    for ((t, gi), xi) in node_grads[*x].iter_mut().zip(&g).zip(&xv) {
                        *t += 2.0 * gi * xi;
                    }
                }
                Op::SubConst { x } => {
                    for (t, gi) in node_grads[*x].iter_mut().zip(&g) {
                        *t += gi;
                    }
                }
                Op::Sum { parts } => {
                    for &p in parts {
                        for (t, gi) in node_grads[p].iter_mut().zip(&g) {
                            *t += gi;
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            params: param_grads,
            node_grads,
        })
    }
}

/// Standalone affine forward, recorded on a tape. `x` becomes a fresh leaf.
pub fn affine_forward(
    x: &[f64],
    store: &ParamStore,
    w: ParamId,
    b: ParamId,
    tape: &mut Tape,
) -> Result<(NodeId, Vec<f64>)> {
    let leaf = tape.leaf(x.to_vec())?;
    let out = tape.affine(store, w, b, leaf)?;
    Ok((out, tape.value(out).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::finite_difference_gradient;
    use crate::rng::seed_rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn affine_diagonal_action() {
        let mut store = ParamStore::new();
        let w = store.add_matrix("w", DenseMatrix::diagonal(&[2.0, 3.0]));
        let b = store.add_vector("b", vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let (_, out) = affine_forward(&[1.0, 0.0], &store, w, b, &mut tape).unwrap();
        assert_eq!(out, vec![2.0, 0.0]);
    }

    #[test]
    fn affine_zero_input_returns_bias() {
        let mut store = ParamStore::new();
        let w = store.add_matrix("w", DenseMatrix::from_rows(&[vec![9.0, -3.0], vec![1.0, 2.0]]));
        let b = store.add_vector("b", vec![5.0, -1.0]);
        let mut tape = Tape::new();
        let (_, out) = affine_forward(&[0.0, 0.0], &store, w, b, &mut tape).unwrap();
        assert_eq!(out, vec![5.0, -1.0]);
    }

    #[test]
    fn affine_hand_multiplication() {
        // x=[1,1], W=[[1,2],[3,4]], b=[1,1] -> [4,8]
        let mut store = ParamStore::new();
        let w = store.add_matrix("w", DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = store.add_vector("b", vec![1.0, 1.0]);
        let mut tape = Tape::new();
        let (_, out) = affine_forward(&[1.0, 1.0], &store, w, b, &mut tape).unwrap();
        assert_eq!(out, vec![4.0, 8.0]);
    }

    #[test]
    fn affine_dimension_mismatch_names_shapes() {
        let mut store = ParamStore::new();
        let w = store.add_matrix("w", DenseMatrix::zeros(2, 3));
        let b = store.add_vector("b", vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let err = affine_forward(&[1.0], &store, w, b, &mut tape).unwrap_err();
        assert!(err.to_string().contains("length 3"));
    }

    #[test]
    fn backward_square_scalar() {
        // f(w) = w^2 at w=3: built as Square on a parameter-fed leaf.
        let mut store = ParamStore::new();
        let w = store.add_matrix("w", DenseMatrix::identity(1));
        let b = store.add_vector("b", vec![0.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0]).unwrap();
        let wx = tape.affine(&store, w, b, x).unwrap(); // 1*x + 0, value 3 via W
        let y = tape.square(wx).unwrap();
        assert_eq!(tape.scalar(y), 9.0);
        let grads = tape.backward(&store, y, &[1.0]).unwrap();
        // d/dW (Wx)^2 = 2*Wx*x = 2*3*3 = 18; d/dx = 2*Wx*W = 6
        assert_eq!(grads.param(w), &[18.0]);
        assert_eq!(grads.node(x), &[6.0]);
    }

    #[test]
    fn backward_dead_relu() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![-1.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0]);
        let grads = tape.backward(&store, y, &[1.0]).unwrap();
        assert_eq!(grads.node(x), &[0.0]);
        let _ = &mut store;
    }

    #[test]
    fn consumed_tape_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0]).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward(&store, y, &[1.0]).unwrap();
        assert!(matches!(
            tape.backward(&store, y, &[1.0]),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn empty_tape_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        assert!(matches!(
            tape.backward(&store, 0, &[1.0]),
            Err(Error::EmptyTape) | Err(Error::TapeConsumed)
        ));
    }

    /// Two-layer network gradient vs central finite differences.
    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = seed_rng(42);
        let mut store = ParamStore::new();
        let w1 = store.add_matrix("w1", DenseMatrix::random(4, 3, 0.5, &mut rng));
        let b1 = store.add_vector("b1", vec![0.1, -0.2, 0.3, 0.0]);
        let w2 = store.add_matrix("w2", DenseMatrix::random(1, 4, 0.5, &mut rng));
        let b2 = store.add_vector("b2", vec![0.05]);
        let ids = [w1, b1, w2, b2];
        let input = vec![0.7, -0.3, 0.2];

        let forward = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone()).unwrap();
            let h = tape.affine(store, w1, b1, x).unwrap();
            let h = tape.tanh(h).unwrap();
            let y = tape.affine(store, w2, b2, h).unwrap();
            let y2 = tape.square(y).unwrap();
            tape.scalar(y2)
        };

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone()).unwrap();
        let h = tape.affine(&store, w1, b1, x).unwrap();
        let h = tape.tanh(h).unwrap();
        let y = tape.affine(&store, w2, b2, h).unwrap();
        let y2 = tape.square(y).unwrap();
        let grads = tape.backward(&store, y2, &[1.0]).unwrap();

        let theta = store.flatten(&ids);
        let fd = finite_difference_gradient(
            |t| {
                let mut s = store.clone();
                s.unflatten(&ids, t);
                forward(&s)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        let analytic: Vec<f64> = ids.iter().flat_map(|&id| grads.param(id).to_vec()).collect();
        for (a, f) in analytic.iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-8);
            assert!(
                (a - f).abs() / denom < 1e-6,
                "analytic {a} vs fd {f}"
            );
        }
        assert_abs_diff_eq!(analytic.len() as f64, fd.len() as f64);
    }

    /// Chain rule on a 2-op tape computed by hand: y = tanh(2x), dy/dx = 2(1-tanh^2(2x)).
    #[test]
    fn chain_rule_two_op_tape() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.3]).unwrap();
        let s = tape.scale(x, 2.0).unwrap();
        let y = tape.tanh(s).unwrap();
        let grads = tape.backward(&store, y, &[1.0]).unwrap();
        let expected = 2.0 * (1.0 - (0.6f64).tanh().powi(2));
        assert_abs_diff_eq!(grads.node(x)[0], expected, epsilon = 1e-15);
    }
}
