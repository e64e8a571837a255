//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is an append-only graph of matrix operations. Each node keeps
//! its value and, per parent, a closure mapping the node's output gradient to
//! that parent's gradient contribution. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid reverse topological order because
//! operations can only reference already-created nodes.
//!
//! Tapes are cheap and short-lived: the trainer builds one per video, reads
//! the gradients it needs, and drops it. Nothing here is thread-safe by
//! design; parallelism happens one tape per worker.

use std::cell::RefCell;
use std::rc::Rc;

use crate::matrix::Matrix;

type Vjp = Box<dyn Fn(&Matrix) -> Matrix>;

struct Node {
    value: Rc<Matrix>,
    parents: Vec<(usize, Vjp)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{r}x{c}]", self.idx)
    }
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads[var.idx].as_ref()
    }
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

    fn push(&self, value: Matrix, parents: Vec<(usize, Vjp)>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Registers an input node (parameter or constant).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Vec::new())
    }

    fn value_of(&self, idx: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Backpropagates from a `[1 x 1]` root. Returns the gradient of the
    /// root with respect to every node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.idx].value.shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[root.idx] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.idx).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            for (parent, vjp) in &nodes[idx].parents {
                let contribution = vjp(&grad);
                match &mut grads[*parent] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Scalar payload of a `[1 x 1]` var.
    pub fn scalar_value(&self) -> f64 {
        self.value().scalar()
    }

    fn unary(self, value: Matrix, vjp: Vjp) -> Var<'t> {
        self.tape.push(value, vec![(self.idx, vjp)])
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b);
        let (a_c, b_c) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push(
            out,
            vec![
                (self.idx, Box::new(move |g| g.matmul(&b_c.transpose()))),
                (other.idx, Box::new(move |g| a_c.transpose().matmul(g))),
            ],
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.unary(out, Box::new(|g| g.transpose()))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().add(&other.value());
        self.tape.push(
            out,
            vec![
                (self.idx, Box::new(|g| g.clone())),
                (other.idx, Box::new(|g| g.clone())),
            ],
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().sub(&other.value());
        self.tape.push(
            out,
            vec![
                (self.idx, Box::new(|g| g.clone())),
                (other.idx, Box::new(|g| g.scale(-1.0))),
            ],
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = a.hadamard(&b);
        let (a_c, b_c) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push(
            out,
            vec![
                (self.idx, Box::new(move |g| g.hadamard(&b_c))),
                (other.idx, Box::new(move |g| g.hadamard(&a_c))),
            ],
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = a.zip_map(&b, |x, y| x / y);
        let (a_c, b_c) = (Rc::clone(&a), Rc::clone(&b));
        let b_c2 = Rc::clone(&b);
        self.tape.push(
            out,
            vec![
                (self.idx, Box::new(move |g| g.zip_map(&b_c, |gv, y| gv / y))),
                (
                    other.idx,
                    Box::new(move |g| {
                        let mut out = g.clone();
                        for i in 0..out.len() {
                            let y = b_c2.as_slice()[i];
                            out.as_mut_slice()[i] *= -a_c.as_slice()[i] / (y * y);
                        }
                        out
                    }),
                ),
            ],
        )
    }

    /// Broadcast add of a `[1 x n]` row to every row of `[m x n]`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let r = row.value();
        assert_eq!(r.rows(), 1, "add_row expects a [1 x n] operand");
        assert_eq!(a.cols(), r.cols(), "add_row width mismatch");
        let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + r.get(0, j));
        self.tape.push(
            out,
            vec![
                (self.idx, Box::new(|g| g.clone())),
                (
                    row.idx,
                    Box::new(|g| {
                        let mut out = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                out.as_mut_slice()[j] += g.get(i, j);
                            }
                        }
                        out
                    }),
                ),
            ],
        )
    }

    /// Broadcast multiply of `[m x n]` by a `[m x 1]` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let a = self.value();
        let c = col.value();
        assert_eq!(c.cols(), 1, "mul_col expects a [m x 1] operand");
        assert_eq!(a.rows(), c.rows(), "mul_col height mismatch");
        let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * c.get(i, 0));
        let (a_c, c_c) = (Rc::clone(&a), Rc::clone(&c));
        self.tape.push(
            out,
            vec![
                (
                    self.idx,
                    Box::new(move |g| {
                        Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * c_c.get(i, 0))
                    }),
                ),
                (
                    col.idx,
                    Box::new(move |g| {
                        Matrix::from_fn(g.rows(), 1, |i, _| {
                            (0..g.cols()).map(|j| g.get(i, j) * a_c.get(i, j)).sum()
                        })
                    }),
                ),
            ],
        )
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.unary(out, Box::new(move |g| g.scale(s)))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        self.unary(out, Box::new(|g| g.clone()))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiply every entry by a `[1 x 1]` var.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.value().scalar();
        let out = a.scale(sv);
        let a_c = Rc::clone(&a);
        self.tape.push(
            out,
            vec![
                (self.idx, Box::new(move |g| g.scale(sv))),
                (
                    s.idx,
                    Box::new(move |g| {
                        let dot: f64 = g
                            .as_slice()
                            .iter()
                            .zip(a_c.as_slice())
                            .map(|(x, y)| x * y)
                            .sum();
                        Matrix::filled(1, 1, dot)
                    }),
                ),
            ],
        )
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(|v| v.max(0.0));
        let a_c = Rc::clone(&a);
        self.unary(
            out,
            Box::new(move |g| g.zip_map(&a_c, |gv, x| if x > 0.0 { gv } else { 0.0 })),
        )
    }

    pub fn abs(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(f64::abs);
        let a_c = Rc::clone(&a);
        self.unary(
            out,
            Box::new(move |g| {
                g.zip_map(&a_c, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(stable_sigmoid);
        let out_c = Rc::new(out.clone());
        self.unary(
            out,
            Box::new(move |g| g.zip_map(&out_c, |gv, s| gv * s * (1.0 - s))),
        )
    }

    /// QuickGELU: `x * sigmoid(1.702 x)`.
    pub fn quick_gelu(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(|x| x * stable_sigmoid(1.702 * x));
        let a_c = Rc::clone(&a);
        self.unary(
            out,
            Box::new(move |g| {
                g.zip_map(&a_c, |gv, x| {
                    let s = stable_sigmoid(1.702 * x);
                    gv * (s + x * 1.702 * s * (1.0 - s))
                })
            }),
        )
    }

    /// Clamp with pass-through gradient strictly inside (lo, hi).
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let a = self.value();
        let out = a.map(|v| v.clamp(lo, hi));
        let a_c = Rc::clone(&a);
        self.unary(
            out,
            Box::new(move |g| {
                g.zip_map(&a_c, |gv, x| if x > lo && x < hi { gv } else { 0.0 })
            }),
        )
    }

    /// Inverse sigmoid with inputs clamped to [eps, 1 - eps].
    pub fn inv_sigmoid(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let out = a.map(|p| {
            let p = p.clamp(eps, 1.0 - eps);
            (p / (1.0 - p)).ln()
        });
        let a_c = Rc::clone(&a);
        self.unary(
            out,
            Box::new(move |g| {
                g.zip_map(&a_c, |gv, p| {
                    if p > eps && p < 1.0 - eps {
                        gv / (p * (1.0 - p))
                    } else {
                        0.0
                    }
                })
            }),
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn vmax(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = a.zip_map(&b, f64::max);
        let (a_c, b_c) = (Rc::clone(&a), Rc::clone(&b));
        let (a_c2, b_c2) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push(
            out,
            vec![
                (
                    self.idx,
                    Box::new(move |g| {
                        let mut out = g.clone();
                        for i in 0..out.len() {
                            if a_c.as_slice()[i] < b_c.as_slice()[i] {
                                out.as_mut_slice()[i] = 0.0;
                            }
                        }
                        out
                    }),
                ),
                (
                    other.idx,
                    Box::new(move |g| {
                        let mut out = g.clone();
                        for i in 0..out.len() {
                            if b_c2.as_slice()[i] <= a_c2.as_slice()[i] {
                                out.as_mut_slice()[i] = 0.0;
                            }
                        }
                        out
                    }),
                ),
            ],
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn vmin(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = a.zip_map(&b, f64::min);
        let (a_c, b_c) = (Rc::clone(&a), Rc::clone(&b));
        let (a_c2, b_c2) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push(
            out,
            vec![
                (
                    self.idx,
                    Box::new(move |g| {
                        let mut out = g.clone();
                        for i in 0..out.len() {
                            if a_c.as_slice()[i] > b_c.as_slice()[i] {
                                out.as_mut_slice()[i] = 0.0;
                            }
                        }
                        out
                    }),
                ),
                (
                    other.idx,
                    Box::new(move |g| {
                        let mut out = g.clone();
                        for i in 0..out.len() {
                            if b_c2.as_slice()[i] >= a_c2.as_slice()[i] {
                                out.as_mut_slice()[i] = 0.0;
                            }
                        }
                        out
                    }),
                ),
            ],
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let out = softmax_rows_matrix(&a);
        let out_c = Rc::new(out.clone());
        self.unary(
            out,
            Box::new(move |g| {
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let s = out_c.row(i);
                    let gr = g.row(i);
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..g.cols() {
                        dx.set(i, j, s[j] * (gr[j] - dot));
                    }
                }
                dx
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let soft = softmax_rows_matrix(&a);
        let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| {
            let row = a.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            a.get(i, j) - lse
        });
        let soft_c = Rc::new(soft);
        self.unary(
            out,
            Box::new(move |g| {
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for j in 0..g.cols() {
                        dx.set(i, j, g.get(i, j) - soft_c.get(i, j) * gsum);
                    }
                }
                dx
            }),
        )
    }

    /// Per-row layer normalization with affine parameters (`[1 x n]` each).
    pub fn layer_norm_rows(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let g_val = gamma.value();
        let b_val = beta.value();
        let n = x.cols();
        assert_eq!(g_val.shape(), (1, n), "layer_norm gamma shape");
        assert_eq!(b_val.shape(), (1, n), "layer_norm beta shape");
        let mut xhat = Matrix::zeros(x.rows(), n);
        let mut inv_std = vec![0.0; x.rows()];
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            inv_std[i] = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                xhat.set(i, j, (row[j] - mean) * inv_std[i]);
            }
        }
        let out = Matrix::from_fn(x.rows(), n, |i, j| {
            g_val.get(0, j) * xhat.get(i, j) + b_val.get(0, j)
        });
        let xhat_rc = Rc::new(xhat);
        let inv_std_rc = Rc::new(inv_std);
        let (xhat_x, inv_x, gamma_x) = (Rc::clone(&xhat_rc), Rc::clone(&inv_std_rc), g_val);
        let xhat_g = Rc::clone(&xhat_rc);
        self.tape.push(
            out,
            vec![
                (
                    self.idx,
                    Box::new(move |g| {
                        let rows = g.rows();
                        let cols = g.cols();
                        let mut dx = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            let mut dxhat = vec![0.0; cols];
                            for j in 0..cols {
                                dxhat[j] = g.get(i, j) * gamma_x.get(0, j);
                            }
                            let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                            let mean_dxhat_xhat = dxhat
                                .iter()
                                .enumerate()
                                .map(|(j, v)| v * xhat_x.get(i, j))
                                .sum::<f64>()
                                / cols as f64;
                            for j in 0..cols {
                                let v = dxhat[j] - mean_dxhat - xhat_x.get(i, j) * mean_dxhat_xhat;
                                dx.set(i, j, v * inv_x[i]);
                            }
                        }
                        dx
                    }),
                ),
                (
                    gamma.idx,
                    Box::new(move |g| {
                        let mut dg = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                dg.as_mut_slice()[j] += g.get(i, j) * xhat_g.get(i, j);
                            }
                        }
                        dg
                    }),
                ),
                (
                    beta.idx,
                    Box::new(move |g| {
                        let mut db = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                db.as_mut_slice()[j] += g.get(i, j);
                            }
                        }
                        db
                    }),
                ),
            ],
        )
    }

    /// Row-wise L2 normalization. Rows with norm below `eps` are scaled by
    /// `1/eps` and treated as having constant norm in the backward pass.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let mut norms = vec![0.0; x.rows()];
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[i] = norm;
            for j in 0..x.cols() {
                out.set(i, j, row[j] / norm);
            }
        }
        let out_rc = Rc::new(out.clone());
        let norms_rc = Rc::new(norms);
        self.unary(
            out,
            Box::new(move |g| {
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let y = out_rc.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..g.cols() {
                        dx.set(i, j, (gr[j] - y[j] * dot) / norms_rc[i]);
                    }
                }
                dx
            }),
        )
    }

    pub fn slice_rows(self, r0: usize, r1: usize) -> Var<'t> {
        let a = self.value();
        assert!(r0 < r1 && r1 <= a.rows(), "slice_rows out of range");
        let (rows, cols) = (a.rows(), a.cols());
        let out = Matrix::from_fn(r1 - r0, cols, |i, j| a.get(r0 + i, j));
        self.unary(
            out,
            Box::new(move |g| {
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..g.rows() {
                    for j in 0..cols {
                        dx.set(r0 + i, j, g.get(i, j));
                    }
                }
                dx
            }),
        )
    }

    pub fn slice_cols(self, c0: usize, c1: usize) -> Var<'t> {
        let a = self.value();
        assert!(c0 < c1 && c1 <= a.cols(), "slice_cols out of range");
        let (rows, cols) = (a.rows(), a.cols());
        let out = Matrix::from_fn(rows, c1 - c0, |i, j| a.get(i, c0 + j));
        self.unary(
            out,
            Box::new(move |g| {
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    for j in 0..g.cols() {
                        dx.set(i, c0 + j, g.get(i, j));
                    }
                }
                dx
            }),
        )
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), rows * cols, "reshape element count mismatch");
        let (orig_r, orig_c) = a.shape();
        let out = Matrix::from_vec(rows, cols, a.as_slice().to_vec());
        self.unary(
            out,
            Box::new(move |g| Matrix::from_vec(orig_r, orig_c, g.as_slice().to_vec())),
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = a.shape();
        let out = Matrix::filled(1, 1, a.sum());
        self.unary(
            out,
            Box::new(move |g| Matrix::filled(rows, cols, g.scalar())),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let a = self.value();
        let n = a.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Linear interpolation of rows of `self` (`[T x d]`) at fractional row
    /// indices `positions` (`[P x 1]`, clamped to `[0, T-1]`). Differentiable
    /// with respect to both the values and the positions; positions at or
    /// beyond the clamp boundary get zero positional gradient.
    pub fn gather_interp(self, positions: Var<'t>) -> Var<'t> {
        let values = self.value();
        let pos = positions.value();
        assert_eq!(pos.cols(), 1, "positions must be [P x 1]");
        let t = values.rows();
        let d = values.cols();
        let p_count = pos.rows();
        let max_idx = (t - 1) as f64;

        let mut out = Matrix::zeros(p_count, d);
        let mut lo = vec![0usize; p_count];
        let mut hi = vec![0usize; p_count];
        let mut frac = vec![0.0; p_count];
        let mut interior = vec![false; p_count];
        for i in 0..p_count {
            let raw = pos.get(i, 0);
            let clamped = raw.clamp(0.0, max_idx);
            let i0 = clamped.floor().min(max_idx) as usize;
            let i1 = (i0 + 1).min(t - 1);
            let f = clamped - i0 as f64;
            lo[i] = i0;
            hi[i] = i1;
            frac[i] = f;
            interior[i] = raw > 0.0 && raw < max_idx;
            for j in 0..d {
                out.set(i, j, (1.0 - f) * values.get(i0, j) + f * values.get(i1, j));
            }
        }
        let (lo_v, hi_v, frac_v) = (Rc::new(lo), Rc::new(hi), Rc::new(frac));
        let (lo_p, hi_p) = (Rc::clone(&lo_v), Rc::clone(&hi_v));
        let interior = Rc::new(interior);
        let values_c = Rc::clone(&values);
        self.tape.push(
            out,
            vec![
                (
                    self.idx,
                    Box::new(move |g| {
                        let mut dv = Matrix::zeros(t, d);
                        for i in 0..g.rows() {
                            let f = frac_v[i];
                            for j in 0..d {
                                let gv = g.get(i, j);
                                dv.set(lo_v[i], j, dv.get(lo_v[i], j) + (1.0 - f) * gv);
                                dv.set(hi_v[i], j, dv.get(hi_v[i], j) + f * gv);
                            }
                        }
                        dv
                    }),
                ),
                (
                    positions.idx,
                    Box::new(move |g| {
                        let mut dp = Matrix::zeros(g.rows(), 1);
                        for i in 0..g.rows() {
                            if !interior[i] {
                                continue;
                            }
                            let mut acc = 0.0;
                            for j in 0..d {
                                acc += g.get(i, j)
                                    * (values_c.get(hi_p[i], j) - values_c.get(lo_p[i], j));
                            }
                            dp.set(i, 0, acc);
                        }
                        dp
                    }),
                ),
            ],
        )
    }
}

/// Vertical concatenation.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows needs at least one part");
    let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
    let cols = values[0].cols();
    let total: usize = values.iter().map(|v| v.rows()).sum();
    let mut out = Matrix::zeros(total, cols);
    let mut offsets = Vec::with_capacity(parts.len());
    let mut at = 0;
    for v in &values {
        assert_eq!(v.cols(), cols, "concat_rows width mismatch");
        offsets.push(at);
        for i in 0..v.rows() {
            out.row_mut(at + i).copy_from_slice(v.row(i));
        }
        at += v.rows();
    }
    let parents = parts
        .iter()
        .zip(offsets)
        .map(|(part, offset)| {
            let rows = part.value().rows();
            let vjp: Vjp = Box::new(move |g: &Matrix| {
                Matrix::from_fn(rows, g.cols(), |i, j| g.get(offset + i, j))
            });
            (part.idx, vjp)
        })
        .collect();
    tape.push(out, parents)
}

/// Horizontal concatenation.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols needs at least one part");
    let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
    let rows = values[0].rows();
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut out = Matrix::zeros(rows, total);
    let mut offsets = Vec::with_capacity(parts.len());
    let mut at = 0;
    for v in &values {
        assert_eq!(v.rows(), rows, "concat_cols height mismatch");
        offsets.push(at);
        for i in 0..rows {
            for j in 0..v.cols() {
                out.set(i, at + j, v.get(i, j));
            }
        }
        at += v.cols();
    }
    let parents = parts
        .iter()
        .zip(offsets)
        .map(|(part, offset)| {
            let cols = part.value().cols();
            let vjp: Vjp = Box::new(move |g: &Matrix| {
                Matrix::from_fn(g.rows(), cols, |i, j| g.get(i, offset + j))
            });
            (part.idx, vjp)
        })
        .collect();
    tape.push(out, parents)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_matrix(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..a.cols() {
            let e = (row[j] - m).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..a.cols() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}
