//! Reverse-mode automatic differentiation on matrices.
//!
//! A [`Tape`] records each operation eagerly (values are computed as
//! nodes are pushed) and [`Tape::backward`] replays the record in
//! reverse, accumulating adjoints. The op set is exactly what the
//! network in [`crate::model`] needs; forward values are computed with
//! the same kernels as the plain inference path so both routes agree
//! to machine precision.

use crate::linalg::{layer_norm_rows, sigmoid, softmax_rows, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Broadcast-add a `1 x C` row vector to every row of the first arg.
    AddRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    LayerNormRows {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// `out[i, j] = d[i, 0] * m[i, j]`: scales row `i` of `m` by the
    /// `i`-th entry of the column vector `d`.
    ScaleRows {
        d: NodeId,
        m: NodeId,
    },
    /// Scalar `coef * sum(x^2)`.
    SumSqScaled {
        x: NodeId,
        coef: f64,
    },
    /// Scalar `coef * sum_i w[i] * sum_j x[i,j]^2`.
    WeightedRowSumSq {
        x: NodeId,
        row_weights: Vec<f64>,
        coef: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`], indexable by [`NodeId`].
pub struct TapeGrads(Vec<Mat>);

impl TapeGrads {
    pub fn get(&self, id: NodeId) -> &Mat {
        &self.0[id.0]
    }
}

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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inputs and parameters enter the graph as leaves.
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let value = self.value(a).add_row(self.value(row));
        self.push(value, Op::AddRow(a, row))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Hadamard(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> NodeId {
        let value = layer_norm_rows(self.value(x), self.value(scale), self.value(shift), eps);
        self.push(value, Op::LayerNormRows { x, scale, shift, eps })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let value = self.value(x).slice_cols(start, width);
        self.push(value, Op::SliceCols { x, start, width })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn scale_rows(&mut self, d: NodeId, m: NodeId) -> NodeId {
        let dv = self.value(d);
        let mv = self.value(m);
        assert_eq!(dv.shape(), (mv.rows(), 1), "row scaler must be a matching column");
        let mut value = mv.clone();
        for i in 0..mv.rows() {
            let di = dv[(i, 0)];
            for j in 0..mv.cols() {
                value[(i, j)] *= di;
            }
        }
        self.push(value, Op::ScaleRows { d, m })
    }

    pub fn sum_sq_scaled(&mut self, x: NodeId, coef: f64) -> NodeId {
        let value = Mat::from_vec(1, 1, vec![coef * self.value(x).frob_norm_sq()]);
        self.push(value, Op::SumSqScaled { x, coef })
    }

    pub fn weighted_row_sum_sq(&mut self, x: NodeId, row_weights: &[f64], coef: f64) -> NodeId {
        let xv = self.value(x);
        assert_eq!(row_weights.len(), xv.rows(), "one weight per row is required");
        let mut total = 0.0;
        for (i, w) in row_weights.iter().enumerate() {
            total += w * xv.row(i).iter().map(|v| v * v).sum::<f64>();
        }
        let value = Mat::from_vec(1, 1, vec![coef * total]);
        self.push(value, Op::WeightedRowSumSq { x, row_weights: row_weights.to_vec(), coef })
    }

    /// Reverse sweep from a scalar root. Returns the adjoint of every
    /// node; callers read off the leaves they care about.
    pub fn backward(&self, root: NodeId) -> TapeGrads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0][(0, 0)] = 1.0;

        for idx in (0..=root.0).rev() {
            if grads[idx].frob_norm_sq() == 0.0 {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].add_assign(&g);
                }
                Op::Sub(a, b) => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].axpy(-1.0, &g);
                }
                Op::AddRow(a, row) => {
                    grads[a.0].add_assign(&g);
                    let dr = &mut grads[row.0];
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            dr[(0, j)] += g[(i, j)];
                        }
                    }
                }
                Op::Hadamard(a, b) => {
                    let da = g.hadamard(self.value(*b));
                    let db = g.hadamard(self.value(*a));
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&g);
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Op::Scale(a, factor) => {
                    grads[a.0].axpy(*factor, &g);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.hadamard(&y.map(|v| 1.0 - v * v));
                    grads[a.0].add_assign(&da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.hadamard(&y.map(|v| v * (1.0 - v)));
                    grads[a.0].add_assign(&da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = g.hadamard(&x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                    grads[a.0].add_assign(&da);
                }
                Op::SoftmaxRows(a) => {
                    // Per row: ds = p .* (g - <g, p>).
                    let p = &self.nodes[idx].value;
                    let mut da = Mat::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let dot: f64 =
                            (0..p.cols()).map(|j| g[(i, j)] * p[(i, j)]).sum();
                        for j in 0..p.cols() {
                            da[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    grads[a.0].add_assign(&da);
                }
                Op::Transpose(a) => {
                    grads[a.0].add_assign(&g.transpose());
                }
                Op::LayerNormRows { x, scale, shift, eps } => {
                    let xv = self.value(*x);
                    let sv = self.value(*scale);
                    let cols = xv.cols();
                    let cf = cols as f64;
                    let mut dx = Mat::zeros(xv.rows(), cols);
                    let mut dscale = Mat::zeros(1, cols);
                    let mut dshift = Mat::zeros(1, cols);
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / cf;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        // d x_hat, then the two row means that couple
                        // the coordinates through mean and variance.
                        let dxhat: Vec<f64> =
                            (0..cols).map(|j| g[(i, j)] * sv[(0, j)]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cf;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for j in 0..cols {
                            dx[(i, j)] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                            dscale[(0, j)] += g[(i, j)] * xhat[j];
                            dshift[(0, j)] += g[(i, j)];
                        }
                    }
                    grads[x.0].add_assign(&dx);
                    grads[scale.0].add_assign(&dscale);
                    grads[shift.0].add_assign(&dshift);
                }
                Op::SliceCols { x, start, width } => {
                    let dx = &mut grads[x.0];
                    for i in 0..g.rows() {
                        for j in 0..*width {
                            dx[(i, start + j)] += g[(i, j)];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let dp = &mut grads[p.0];
                        for i in 0..g.rows() {
                            for j in 0..w {
                                dp[(i, j)] += g[(i, offset + j)];
                            }
                        }
                        offset += w;
                    }
                }
                Op::ScaleRows { d, m } => {
                    let dv = self.value(*d);
                    let mv = self.value(*m);
                    let mut dd = Mat::zeros(dv.rows(), 1);
                    let mut dm = Mat::zeros(mv.rows(), mv.cols());
                    for i in 0..mv.rows() {
                        for j in 0..mv.cols() {
                            dd[(i, 0)] += g[(i, j)] * mv[(i, j)];
                            dm[(i, j)] = dv[(i, 0)] * g[(i, j)];
                        }
                    }
                    grads[d.0].add_assign(&dd);
                    grads[m.0].add_assign(&dm);
                }
                Op::SumSqScaled { x, coef } => {
                    let factor = 2.0 * coef * g[(0, 0)];
                    let dx = self.value(*x).scale(factor);
                    grads[x.0].add_assign(&dx);
                }
                Op::WeightedRowSumSq { x, row_weights, coef } => {
                    let xv = self.value(*x);
                    let g0 = g[(0, 0)];
                    let dx = &mut grads[x.0];
                    for i in 0..xv.rows() {
                        let factor = 2.0 * coef * row_weights[i] * g0;
                        for j in 0..xv.cols() {
                            dx[(i, j)] += factor * xv[(i, j)];
                        }
                    }
                }
            }
        }
        TapeGrads(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    /// Central-difference check of every input coordinate against the
    /// tape's analytic gradient. `build` must return a scalar root.
    fn grad_check(inputs: &[Mat], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let eval = |mats: &[Mat]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
            let root = build(&mut tape, &ids);
            tape.value(root)[(0, 0)]
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &ids);
        assert_eq!(tape.value(root).shape(), (1, 1));
        let grads = tape.backward(root);

        let eps = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[e] += eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[e] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = grads.get(ids[i]).data()[e];
                let tol = 1e-7 + 1e-5 * an.abs().max(fd.abs());
                assert!(
                    (an - fd).abs() <= tol,
                    "input {i} elem {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mat(&mut rng, 3, 4);
        let b = random_mat(&mut rng, 4, 2);
        grad_check(&[a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1]);
            t.sum_sq_scaled(c, 0.5)
        });
    }

    #[test]
    fn add_sub_scale_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_mat(&mut rng, 2, 3);
        let b = random_mat(&mut rng, 2, 3);
        grad_check(&[a, b], |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let d = t.sub(s, ids[1]);
            let sc = t.scale(d, -1.7);
            t.sum_sq_scaled(sc, 1.0)
        });
    }

    #[test]
    fn add_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_mat(&mut rng, 3, 4);
        let row = random_mat(&mut rng, 1, 4);
        grad_check(&[a, row], |t, ids| {
            let s = t.add_row(ids[0], ids[1]);
            t.sum_sq_scaled(s, 1.0)
        });
    }

    #[test]
    fn hadamard_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_mat(&mut rng, 2, 2);
        let b = random_mat(&mut rng, 2, 2);
        grad_check(&[a, b], |t, ids| {
            let h = t.hadamard(ids[0], ids[1]);
            t.sum_sq_scaled(h, 1.0)
        });
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_mat(&mut rng, 2, 3);
        grad_check(std::slice::from_ref(&a), |t, ids| {
            let y = t.tanh(ids[0]);
            t.sum_sq_scaled(y, 1.0)
        });
        grad_check(&[a], |t, ids| {
            let y = t.sigmoid(ids[0]);
            t.sum_sq_scaled(y, 1.0)
        });
    }

    #[test]
    fn relu_gradients_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = random_mat(&mut rng, 3, 3);
        // Keep inputs off the non-differentiable point at zero.
        for v in a.data_mut() {
            *v += 0.2 * v.signum();
        }
        grad_check(&[a], |t, ids| {
            let y = t.relu(ids[0]);
            t.sum_sq_scaled(y, 1.0)
        });
    }

    #[test]
    fn softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mat(&mut rng, 3, 4);
        let w = random_mat(&mut rng, 4, 1);
        // Mix the probabilities with a fixed vector so the gradient is
        // not annihilated by the rows-sum-to-one constraint.
        grad_check(&[a, w], |t, ids| {
            let p = t.softmax_rows(ids[0]);
            let mixed = t.matmul(p, ids[1]);
            t.sum_sq_scaled(mixed, 1.0)
        });
    }

    #[test]
    fn transpose_slice_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_mat(&mut rng, 2, 4);
        grad_check(&[a], |t, ids| {
            let left = t.slice_cols(ids[0], 0, 2);
            let right = t.slice_cols(ids[0], 2, 2);
            let swapped = t.concat_cols(&[right, left]);
            let tr = t.transpose(swapped);
            t.sum_sq_scaled(tr, 0.25)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_mat(&mut rng, 3, 4);
        let scale = random_mat(&mut rng, 1, 4);
        let shift = random_mat(&mut rng, 1, 4);
        grad_check(&[x, scale, shift], |t, ids| {
            let y = t.layer_norm_rows(ids[0], ids[1], ids[2], 1e-5);
            t.sum_sq_scaled(y, 1.0)
        });
    }

    #[test]
    fn scale_rows_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = random_mat(&mut rng, 3, 1);
        let m = random_mat(&mut rng, 3, 4);
        grad_check(&[d, m], |t, ids| {
            let y = t.scale_rows(ids[0], ids[1]);
            t.sum_sq_scaled(y, 1.0)
        });
    }

    #[test]
    fn weighted_row_sum_sq_gradients_and_value() {
        let x = Mat::filled(4, 1, 1.0);
        let weights = [1.0, 1.0, 4.0, 4.0];
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let root = tape.weighted_row_sum_sq(id, &weights, 1.0);
        assert!((tape.value(root)[(0, 0)] - 10.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_mat(&mut rng, 4, 2);
        grad_check(&[x], |t, ids| t.weighted_row_sum_sq(ids[0], &weights, 0.3));
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // root = sum((a + a.*a)^2): the leaf receives gradient through
        // two distinct consumers.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_mat(&mut rng, 2, 2);
        grad_check(&[a], |t, ids| {
            let sq = t.hadamard(ids[0], ids[0]);
            let s = t.add(ids[0], sq);
            t.sum_sq_scaled(s, 1.0)
        });
    }

    #[test]
    fn composite_network_gradients() {
        // A miniature of the real model's attention arithmetic:
        // scale_rows -> matmul -> softmax -> layer norm -> readout.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = random_mat(&mut rng, 3, 1);
        let e = random_mat(&mut rng, 3, 4);
        let w = random_mat(&mut rng, 4, 4);
        let scale = random_mat(&mut rng, 1, 4);
        let shift = random_mat(&mut rng, 1, 4);
        let readout = random_mat(&mut rng, 4, 1);
        grad_check(&[z, e, w, scale, shift, readout], |t, ids| {
            let tokens = t.scale_rows(ids[0], ids[1]);
            let q = t.matmul(tokens, ids[2]);
            let kt = t.transpose(tokens);
            let scores = t.matmul(q, kt);
            let scores = t.scale(scores, 0.5);
            let probs = t.softmax_rows(scores);
            let mixed = t.matmul(probs, ids[1]);
            let summed = t.add(tokens, mixed);
            let normed = t.layer_norm_rows(summed, ids[3], ids[4], 1e-5);
            let out = t.matmul(normed, ids[5]);
            t.sum_sq_scaled(out, 1.0)
        });
    }
}
