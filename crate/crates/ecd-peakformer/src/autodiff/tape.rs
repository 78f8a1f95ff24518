//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. The op set is exactly what
//! the graph encoder, the peak-query transformer and the peak loss need;
//! there is no broadcasting magic beyond row-wise bias addition.

use std::sync::Arc;

use super::mat::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddBias { a: Var, bias: Var },
    Relu { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows { a: Var },
    CrossEntropyMean { logits: Var, targets: Arc<Vec<usize>> },
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    ScatterAddRows { a: Var, idx: Arc<Vec<usize>> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    SumRows { a: Var },
    SumAll { a: Var },
    Dropout { a: Var, mask: Arc<Vec<f64>> },
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

/// Records a computation for later gradient evaluation.
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a shared tensor (a model parameter) without copying it.
    pub fn leaf(&mut self, value: Arc<Mat>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned constant/input tensor.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = self.value(a).matmul(ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows(), ma.cols()), (mb.rows(), mb.cols()));
        let mut out = ma.clone();
        out.add_assign(mb);
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows(), ma.cols()), (mb.rows(), mb.cols()));
        let data = ma.data().iter().zip(mb.data()).map(|(x, y)| x - y).collect();
        let out = Mat::from_vec(ma.rows(), ma.cols(), data);
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows(), ma.cols()), (mb.rows(), mb.cols()));
        let data = ma.data().iter().zip(mb.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(ma.rows(), ma.cols(), data);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ma = self.value(a);
        let data = ma.data().iter().map(|x| x * factor).collect();
        let out = Mat::from_vec(ma.rows(), ma.cols(), data);
        self.push(out, Op::Scale { a, factor })
    }

    /// Adds a `1 x c` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(bias));
        assert_eq!(mb.rows(), 1);
        assert_eq!(ma.cols(), mb.cols());
        let mut out = ma.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(mb.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias { a, bias })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let data = ma.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Mat::from_vec(ma.rows(), ma.cols(), data);
        self.push(out, Op::Relu { a })
    }

    /// Row-wise layer normalization with learnable gain and bias (both `1 x c`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (ma, mg, mb) = (self.value(a), self.value(gain), self.value(bias));
        assert_eq!(mg.rows(), 1);
        assert_eq!(mb.rows(), 1);
        assert_eq!(ma.cols(), mg.cols());
        assert_eq!(ma.cols(), mb.cols());
        let (r, c) = (ma.rows(), ma.cols());
        let mut out = Mat::zeros(r, c);
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = ma.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let orow = out.row_mut(i);
            for j in 0..c {
                orow[j] = (row[j] - mean) * rstd * mg.get(0, j) + mb.get(0, j);
            }
        }
        self.push(
            out,
            Op::LayerNorm { a, gain, bias, mean: means, rstd: rstds },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let (r, c) = (ma.rows(), ma.cols());
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = ma.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(i);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows { a })
    }

    /// Mean over rows of the cross-entropy between `logits` rows and integer
    /// targets. Returns a `1 x 1` scalar. Empty target lists yield 0.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Var {
        let ml = self.value(logits);
        assert_eq!(ml.rows(), targets.len());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = ml.row(i);
            assert!(t < row.len(), "cross-entropy target out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let mean = if targets.is_empty() {
            0.0
        } else {
            total / targets.len() as f64
        };
        self.push(
            Mat::from_vec(1, 1, vec![mean]),
            Op::CrossEntropyMean { logits, targets },
        )
    }

    /// Selects rows of `a` by index (with repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let ma = self.value(a);
        let c = ma.cols();
        let mut out = Mat::zeros(idx.len(), c);
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(ma.row(src));
        }
        self.push(out, Op::GatherRows { a, idx })
    }

    /// `out[idx[i]] += a[i]` into a fresh `out_rows x cols` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, out_rows: usize) -> Var {
        let ma = self.value(a);
        assert_eq!(ma.rows(), idx.len());
        let c = ma.cols();
        let mut out = Mat::zeros(out_rows, c);
        for (i, &dst) in idx.iter().enumerate() {
            let src = ma.row(i);
            for (o, &s) in out.row_mut(dst).iter_mut().zip(src) {
                *o += s;
            }
        }
        self.push(out, Op::ScatterAddRows { a, idx })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Mat::zeros(total, c);
        let mut at = 0;
        for &p in parts {
            let mp = self.value(p);
            assert_eq!(mp.cols(), c);
            for r in 0..mp.rows() {
                out.row_mut(at + r).copy_from_slice(mp.row(r));
            }
            at += mp.rows();
        }
        self.push(out, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(r, total);
        let mut at = 0;
        for &p in parts {
            let mp = self.value(p);
            assert_eq!(mp.rows(), r);
            for i in 0..r {
                out.row_mut(i)[at..at + mp.cols()].copy_from_slice(mp.row(i));
            }
            at += mp.cols();
        }
        self.push(out, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ma = self.value(a);
        assert!(start + len <= ma.rows());
        let c = ma.cols();
        let mut out = Mat::zeros(len, c);
        for i in 0..len {
            out.row_mut(i).copy_from_slice(ma.row(start + i));
        }
        self.push(out, Op::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ma = self.value(a);
        assert!(start + len <= ma.cols());
        let r = ma.rows();
        let mut out = Mat::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&ma.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    /// Column-wise sum, producing `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let c = ma.cols();
        let mut out = Mat::zeros(1, c);
        for r in 0..ma.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(ma.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows { a })
    }

    /// Sum of all entries, producing `1 x 1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Mat::from_vec(1, 1, vec![total]), Op::SumAll { a })
    }

    /// Elementwise multiply by a precomputed dropout mask. The mask already
    /// carries the `1/(1-p)` scaling, so evaluation-mode code simply skips
    /// this op.
    pub fn dropout(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Var {
        let ma = self.value(a);
        assert_eq!(ma.len(), mask.len());
        let data = ma.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let out = Mat::from_vec(ma.rows(), ma.cols(), data);
        self.push(out, Op::Dropout { a, mask })
    }

    /// Reverse pass from a `1 x 1` loss node. Returns one gradient slot per
    /// tape node; untouched slots are `None`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let loss_val = self.value(loss);
        assert_eq!(
            (loss_val.rows(), loss_val.cols()),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients(grads)
    }

    fn accumulate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let add_to = |grads: &mut [Option<Mat>], v: Var, delta: Mat| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                // C = op(A) op(B); dA and dB follow from the four cases.
                let da = match (ta, tb) {
                    (false, false) => g.matmul(false, mb, true),
                    (false, true) => g.matmul(false, mb, false),
                    (true, false) => mb.matmul(false, g, true),
                    (true, true) => mb.matmul(true, g, true),
                };
                let db = match (ta, tb) {
                    (false, false) => ma.matmul(true, g, false),
                    (false, true) => g.matmul(true, ma, false),
                    (true, false) => ma.matmul(false, g, false),
                    (true, true) => g.matmul(true, ma, true),
                };
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                add_to(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                add_to(grads, *b, neg);
            }
            Op::Mul { a, b } => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(mb.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(ma.data()).map(|(x, y)| x * y).collect(),
                );
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Scale { a, factor } => {
                let mut da = g.clone();
                da.scale_assign(*factor);
                add_to(grads, *a, da);
            }
            Op::AddBias { a, bias } => {
                add_to(grads, *a, g.clone());
                let mut db = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                add_to(grads, *bias, db);
            }
            Op::Relu { a } => {
                let ma = self.value(*a);
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ma.data())
                        .map(|(&gx, &x)| if x > 0.0 { gx } else { 0.0 })
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::LayerNorm { a, gain, bias, mean, rstd } => {
                let (ma, mg) = (self.value(*a), self.value(*gain));
                let (r, c) = (ma.rows(), ma.cols());
                let mut da = Mat::zeros(r, c);
                let mut dgain = Mat::zeros(1, c);
                let mut dbias = Mat::zeros(1, c);
                for i in 0..r {
                    let row = ma.row(i);
                    let grow = g.row(i);
                    let (mu, rs) = (mean[i], rstd[i]);
                    // dxhat and the two reduction terms of the standard
                    // layer-norm backward.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mu) * rs;
                        let dxhat = grow[j] * mg.get(0, j);
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain.row_mut(0)[j] += grow[j] * xhat;
                        dbias.row_mut(0)[j] += grow[j];
                    }
                    let inv_c = 1.0 / c as f64;
                    let darow = da.row_mut(i);
                    for j in 0..c {
                        let xhat = (row[j] - mu) * rs;
                        let dxhat = grow[j] * mg.get(0, j);
                        darow[j] =
                            rs * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *gain, dgain);
                add_to(grads, *bias, dbias);
            }
            Op::SoftmaxRows { a } => {
                let y = &self.nodes[id].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let yrow = y.row(i);
                    let grow = g.row(i);
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    let darow = da.row_mut(i);
                    for j in 0..c {
                        darow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::CrossEntropyMean { logits, targets } => {
                if targets.is_empty() {
                    return;
                }
                let ml = self.value(*logits);
                let upstream = g.get(0, 0) / targets.len() as f64;
                let (r, c) = (ml.rows(), ml.cols());
                let mut da = Mat::zeros(r, c);
                for (i, &t) in targets.iter().enumerate() {
                    let row = ml.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    let darow = da.row_mut(i);
                    for j in 0..c {
                        let p = (row[j] - max).exp() / sum;
                        darow[j] = upstream * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                add_to(grads, *logits, da);
            }
            Op::GatherRows { a, idx } => {
                let ma = self.value(*a);
                let mut da = Mat::zeros(ma.rows(), ma.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &x) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ScatterAddRows { a, idx } => {
                let ma = self.value(*a);
                let mut da = Mat::zeros(ma.rows(), ma.cols());
                for (i, &dst) in idx.iter().enumerate() {
                    da.row_mut(i).copy_from_slice(g.row(dst));
                }
                add_to(grads, *a, da);
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let mut dp = Mat::zeros(rows, g.cols());
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(g.row(at + r));
                    }
                    at += rows;
                    add_to(grads, p, dp);
                }
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut dp = Mat::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                    }
                    at += cols;
                    add_to(grads, p, dp);
                }
            }
            Op::SliceRows { a, start } => {
                let ma = self.value(*a);
                let mut da = Mat::zeros(ma.rows(), ma.cols());
                for r in 0..g.rows() {
                    da.row_mut(start + r).copy_from_slice(g.row(r));
                }
                add_to(grads, *a, da);
            }
            Op::SliceCols { a, start } => {
                let ma = self.value(*a);
                let mut da = Mat::zeros(ma.rows(), ma.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                add_to(grads, *a, da);
            }
            Op::SumRows { a } => {
                let ma = self.value(*a);
                let mut da = Mat::zeros(ma.rows(), ma.cols());
                for r in 0..ma.rows() {
                    da.row_mut(r).copy_from_slice(g.row(0));
                }
                add_to(grads, *a, da);
            }
            Op::SumAll { a } => {
                let ma = self.value(*a);
                let da = Mat::filled(ma.rows(), ma.cols(), g.get(0, 0));
                add_to(grads, *a, da);
            }
            Op::Dropout { a, mask } => {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
                );
                add_to(grads, *a, da);
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients(Vec<Option<Mat>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(probe)/d(input) against central differences for an arbitrary
    /// tape program. `build` maps input matrices to a scalar output.
    fn check_grad(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]);
            for e in 0..input.len() {
                let mut lo = inputs.to_vec();
                let mut hi = inputs.to_vec();
                lo[i].data_mut()[e] -= eps;
                hi[i].data_mut()[e] += eps;
                let eval = |ms: &[Mat]| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = ms.iter().map(|m| t.constant(m.clone())).collect();
                    let l = build(&mut t, &vs);
                    t.value(l).get(0, 0)
                };
                let fd = (eval(&hi) - eval(&lo)) / (2.0 * eps);
                let an = analytic.map_or(0.0, |m| m.data()[e]);
                assert!(
                    (an - fd).abs() <= 1e-6 * (1.0 + an.abs().max(fd.abs())),
                    "input {i} elem {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rng_mats(shapes: &[(usize, usize)], seed: u64) -> Vec<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shapes
            .iter()
            .map(|&(r, c)| Mat::uniform(r, c, 0.8, &mut rng))
            .collect()
    }

    #[test]
    fn grad_matmul_chain() {
        let inputs = rng_mats(&[(3, 4), (4, 2), (3, 2)], 1);
        check_grad(&inputs, |t, v| {
            let p = t.matmul(v[0], v[1]);
            let q = t.mul(p, v[2]);
            t.sum_all(q)
        });
    }

    #[test]
    fn grad_matmul_transposes() {
        let inputs = rng_mats(&[(4, 3), (4, 2)], 2);
        check_grad(&inputs, |t, v| {
            let p = t.matmul_ex(v[0], true, v[1], false); // 3x2
            let q = t.matmul_ex(p, false, v[1], true); // 3x4
            let r = t.matmul_ex(q, true, v[0], true); // 4x4... (4x3 * 3x4)^T paths
            t.sum_all(r)
        });
    }

    #[test]
    fn grad_mlp_block() {
        let inputs = rng_mats(&[(3, 4), (4, 5), (1, 5), (5, 2), (1, 2)], 3);
        check_grad(&inputs, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_bias(h, v[2]);
            let h = t.relu(h);
            let o = t.matmul(h, v[3]);
            let o = t.add_bias(o, v[4]);
            t.sum_all(o)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let inputs = rng_mats(&[(3, 6), (1, 6), (1, 6), (3, 6)], 4);
        check_grad(&inputs, |t, v| {
            let n = t.layer_norm(v[0], v[1], v[2]);
            let w = t.mul(n, v[3]);
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_softmax_attention_shape() {
        let inputs = rng_mats(&[(4, 3), (4, 3), (4, 3), (4, 3)], 5);
        check_grad(&inputs, |t, v| {
            let scores = t.matmul_ex(v[0], false, v[1], true);
            let scores = t.scale(scores, 1.0 / (3.0f64).sqrt());
            let probs = t.softmax_rows(scores);
            let ctx = t.matmul(probs, v[2]);
            let w = t.mul(ctx, v[3]);
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let inputs = rng_mats(&[(3, 5)], 6);
        let targets = Arc::new(vec![1usize, 4, 0]);
        check_grad(&inputs, move |t, v| {
            t.cross_entropy_mean(v[0], targets.clone())
        });
    }

    #[test]
    fn grad_gather_scatter_concat_slice() {
        let inputs = rng_mats(&[(4, 3), (6, 3)], 7);
        let gather = Arc::new(vec![0usize, 2, 2, 3, 1]);
        let scatter = Arc::new(vec![1usize, 0, 3, 3, 2]);
        check_grad(&inputs, move |t, v| {
            let g = t.gather_rows(v[0], gather.clone());
            let s = t.scatter_add_rows(g, scatter.clone(), 4);
            let cat = t.concat_rows(&[s, v[1]]);
            let sl = t.slice_rows(cat, 2, 5);
            let cols = t.slice_cols(sl, 1, 2);
            let sum = t.sum_rows(cols);
            t.sum_all(sum)
        });
    }

    #[test]
    fn grad_sub_scale_dropout() {
        let inputs = rng_mats(&[(3, 4), (3, 4)], 8);
        let mask = Arc::new(vec![
            0.0, 2.0, 2.0, 0.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 2.0,
        ]);
        check_grad(&inputs, move |t, v| {
            let d = t.sub(v[0], v[1]);
            let d = t.scale(d, 0.7);
            let d = t.dropout(d, mask.clone());
            let sq = t.mul(d, d);
            t.sum_all(sq)
        });
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut t = Tape::new();
        let logits = t.constant(Mat::zeros(2, 371));
        let loss = t.cross_entropy_mean(logits, Arc::new(vec![13, 222]));
        let got = t.value(loss).get(0, 0);
        assert!((got - (371.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_cross_entropy_is_zero() {
        let mut t = Tape::new();
        let logits = t.constant(Mat::zeros(0, 7));
        let loss = t.cross_entropy_mean(logits, Arc::new(vec![]));
        assert_eq!(t.value(loss).get(0, 0), 0.0);
        // backward should not panic on the empty branch
        let _ = t.backward(loss);
    }
}
