//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Only the operations the graph transformer and the size classifier need
//! are provided. Parameters are referenced by index into a borrowed slice so
//! a forward pass never copies weights.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows × cols");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b` for row-major `a: r×k`, `b: k×c`.
fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (l, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(l)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: r×c`, `b: k×c`.
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` for `a: r×k`, `b: r×c`.
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (l, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[l * b.cols..(l + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn col_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols);
    for r in 0..m.rows {
        for (o, v) in out.data.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Mean,
    Max,
    Min,
    Std,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const STD_POOL_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Param(usize),
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Mul(usize, usize),
    AddConst(usize),
    Scale(usize, f64),
    Relu(usize),
    /// Normalized output is the node value; keeps `1/σ` per row.
    LayerNorm(usize, Vec<f64>),
    /// `out[i·n + j, c] = q[i, c] · k[j, c] · scale`.
    PairProduct(usize, usize, usize, f64),
    /// Softmax over `j` of rows `i·n + j`, per column.
    NeighborSoftmax(usize, usize),
    /// `out[i, c] = Σ_j w[i·n + j, c] · v[j, c]`.
    WeightedSum(usize, usize, usize),
    /// Keeps the selected row per column for max/min.
    Pool(usize, Pool, Vec<usize>),
    Concat(Vec<usize>),
    /// `out[i·n + j] = (a[i·n + j] + a[j·n + i]) / 2`.
    Symmetrize(usize, usize),
    /// Weighted row-wise cross-entropy of softmax(logits); keeps the
    /// per-row gradient `w (p - onehot)`.
    CrossEntropy(usize, Mat),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(m)) => m,
            _ => unreachable!("computed nodes carry values"),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        assert!(idx < self.params.len());
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let m = Mat::from_vec(x.rows, x.cols, data);
        self.push(m, Op::Add(a.0, b.0))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
        let mut m = x.clone();
        for chunk in m.data.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(m, Op::AddRow(a.0, row.0))
    }

    /// Scales every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "mul_row shape mismatch");
        let mut m = x.clone();
        for chunk in m.data.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        self.push(m, Op::MulRow(a.0, row.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let m = Mat::from_vec(x.rows, x.cols, data);
        self.push(m, Op::Mul(a.0, b.0))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut m = self.value(a).clone();
        m.data.iter_mut().for_each(|x| *x += c);
        self.push(m, Op::AddConst(a.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut m = self.value(a).clone();
        m.data.iter_mut().for_each(|x| *x *= s);
        self.push(m, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        m.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(m, Op::Relu(a.0))
    }

    /// Row-wise normalization to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols as f64;
        let mut m = x.clone();
        let mut inv = Vec::with_capacity(x.rows);
        for chunk in m.data.chunks_mut(x.cols) {
            let mean = chunk.iter().sum::<f64>() / c;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv.push(is);
        }
        self.push(m, Op::LayerNorm(a.0, inv))
    }

    pub fn pair_product(&mut self, q: Var, k: Var, scale: f64) -> Var {
        let (qm, km) = (self.value(q), self.value(k));
        assert_eq!((qm.rows, qm.cols), (km.rows, km.cols));
        let (n, c) = (qm.rows, qm.cols);
        let mut out = Mat::zeros(n * n, c);
        for i in 0..n {
            for j in 0..n {
                let o = &mut out.data[(i * n + j) * c..(i * n + j + 1) * c];
                for ((o, a), b) in o.iter_mut().zip(qm.row(i)).zip(km.row(j)) {
                    *o = a * b * scale;
                }
            }
        }
        self.push(out, Op::PairProduct(q.0, k.0, n, scale))
    }

    pub fn neighbor_softmax(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, n * n);
        let c = x.cols;
        let mut out = x.clone();
        for i in 0..n {
            for col in 0..c {
                let idx = |j: usize| (i * n + j) * c + col;
                let max = (0..n).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x.data[idx(j)] - max).exp();
                    out.data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out.data[idx(j)] /= total;
                }
            }
        }
        self.push(out, Op::NeighborSoftmax(a.0, n))
    }

    pub fn weighted_sum(&mut self, w: Var, v: Var, n: usize) -> Var {
        let (wm, vm) = (self.value(w), self.value(v));
        assert_eq!((wm.rows, wm.cols), (n * n, vm.cols));
        assert_eq!(vm.rows, n);
        let c = vm.cols;
        let mut out = Mat::zeros(n, c);
        for i in 0..n {
            let o = &mut out.data[i * c..(i + 1) * c];
            for j in 0..n {
                for ((o, a), b) in o.iter_mut().zip(wm.row(i * n + j)).zip(vm.row(j)) {
                    *o += a * b;
                }
            }
        }
        self.push(out, Op::WeightedSum(w.0, v.0, n))
    }

    /// Column-wise reduction over rows to a `1 × c` row.
    pub fn pool(&mut self, a: Var, kind: Pool) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows, x.cols);
        let mut out = Mat::zeros(1, c);
        let mut picks = Vec::new();
        match kind {
            Pool::Mean => {
                out = col_sums(x);
                out.data.iter_mut().for_each(|v| *v /= r as f64);
            }
            Pool::Max | Pool::Min => {
                for col in 0..c {
                    let mut best = 0;
                    for row in 1..r {
                        let (cand, cur) = (x.data[row * c + col], x.data[best * c + col]);
                        let better = if kind == Pool::Max { cand > cur } else { cand < cur };
                        if better {
                            best = row;
                        }
                    }
                    picks.push(best);
                    out.data[col] = x.data[best * c + col];
                }
            }
            Pool::Std => {
                let mean = col_sums(x);
                for col in 0..c {
                    let mu = mean.data[col] / r as f64;
                    let var = (0..r).map(|row| (x.data[row * c + col] - mu).powi(2)).sum::<f64>() / r as f64;
                    out.data[col] = (var + STD_POOL_EPS).sqrt();
                }
            }
        }
        self.push(out, Op::Pool(a.0, kind, picks))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows, "concat row mismatch");
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    pub fn symmetrize(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, n * n);
        let c = x.cols;
        let mut out = Mat::zeros(n * n, c);
        for i in 0..n {
            for j in 0..n {
                for col in 0..c {
                    out.data[(i * n + j) * c + col] =
                        0.5 * (x.data[(i * n + j) * c + col] + x.data[(j * n + i) * c + col]);
                }
            }
        }
        self.push(out, Op::Symmetrize(a.0, n))
    }

    /// `Σ_r w_r · -log_softmax(logits_r)[target_r]` as a `1 × 1`.
    ///
    /// Computed in log space without clamping, so a confidently wrong row
    /// still receives its full gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(targets.len(), x.rows);
        assert_eq!(weights.len(), x.rows);
        let c = x.cols;
        let mut grad = Mat::zeros(x.rows, c);
        let mut loss = 0.0;
        for r in 0..x.rows {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[targets[r]]);
            let g = &mut grad.data[r * c..(r + 1) * c];
            for (k, gk) in g.iter_mut().enumerate() {
                let p = (row[k] - lse).exp();
                *gk = w * (p - if k == targets[r] { 1.0 } else { 0.0 });
            }
        }
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::CrossEntropy(logits.0, grad))
    }

    /// Gradients of the `1 × 1` output with respect to every parameter;
    /// untouched parameters get zero matrices.
    pub fn backward(&self, out: Var) -> Vec<Mat> {
        assert_eq!(self.value(out).data.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut param_grads: Vec<Mat> = self.params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();

        fn accumulate(grads: &mut [Option<Mat>], idx: usize, g: Mat) {
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                    accumulate(&mut grads, *a, matmul_bt(&g, bv));
                    accumulate(&mut grads, *b, matmul_at(av, &g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, col_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(Var(*a)), self.value(Var(*row)));
                    let mut ga = g.clone();
                    let mut gr = Mat::zeros(1, rv.cols);
                    for (r, chunk) in ga.data.chunks_mut(rv.cols).enumerate() {
                        for (col, gv) in chunk.iter_mut().enumerate() {
                            gr.data[col] += *gv * av.data[r * rv.cols + col];
                            *gv *= rv.data[col];
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                    let ga = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect());
                    let gb = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let av = self.value(Var(*a));
                    let mut ga = g;
                    for (x, v) in ga.data.iter_mut().zip(&av.data) {
                        if *v <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv) => {
                    let y = node.value.as_ref().expect("value");
                    let c = y.cols;
                    let mut ga = Mat::zeros(y.rows, c);
                    for r in 0..y.rows {
                        let (gy, yr) = (g.row(r), y.row(r));
                        let mean_g = gy.iter().sum::<f64>() / c as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for col in 0..c {
                            ga.data[r * c + col] = inv[r] * (gy[col] - mean_g - yr[col] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PairProduct(q, k, n, scale) => {
                    let (qv, kv) = (self.value(Var(*q)), self.value(Var(*k)));
                    let (n, c) = (*n, qv.cols);
                    let mut gq = Mat::zeros(n, c);
                    let mut gk = Mat::zeros(n, c);
                    for i in 0..n {
                        for j in 0..n {
                            let gr = g.row(i * n + j);
                            for col in 0..c {
                                gq.data[i * c + col] += gr[col] * kv.data[j * c + col] * scale;
                                gk.data[j * c + col] += gr[col] * qv.data[i * c + col] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                }
                Op::NeighborSoftmax(a, n) => {
                    let s = node.value.as_ref().expect("value");
                    let (n, c) = (*n, s.cols);
                    let mut ga = Mat::zeros(s.rows, c);
                    for i in 0..n {
                        for col in 0..c {
                            let idx = |j: usize| (i * n + j) * c + col;
                            let dot: f64 = (0..n).map(|j| g.data[idx(j)] * s.data[idx(j)]).sum();
                            for j in 0..n {
                                ga.data[idx(j)] = s.data[idx(j)] * (g.data[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSum(w, v, n) => {
                    let (wv, vv) = (self.value(Var(*w)), self.value(Var(*v)));
                    let (n, c) = (*n, vv.cols);
                    let mut gw = Mat::zeros(n * n, c);
                    let mut gv = Mat::zeros(n, c);
                    for i in 0..n {
                        let gi = g.row(i);
                        for j in 0..n {
                            for col in 0..c {
                                gw.data[(i * n + j) * c + col] = gi[col] * vv.data[j * c + col];
                                gv.data[j * c + col] += gi[col] * wv.data[(i * n + j) * c + col];
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Pool(a, kind, picks) => {
                    let av = self.value(Var(*a));
                    let (r, c) = (av.rows, av.cols);
                    let mut ga = Mat::zeros(r, c);
                    match kind {
                        Pool::Mean => {
                            for row in 0..r {
                                for col in 0..c {
                                    ga.data[row * c + col] = g.data[col] / r as f64;
                                }
                            }
                        }
                        Pool::Max | Pool::Min => {
                            for (col, &row) in picks.iter().enumerate() {
                                ga.data[row * c + col] = g.data[col];
                            }
                        }
                        Pool::Std => {
                            let out = node.value.as_ref().expect("value");
                            let sums = col_sums(av);
                            for col in 0..c {
                                let mu = sums.data[col] / r as f64;
                                for row in 0..r {
                                    ga.data[row * c + col] =
                                        g.data[col] * (av.data[row * c + col] - mu) / (r as f64 * out.data[col]);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(Var(p)).cols;
                        let mut gp = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Symmetrize(a, n) => {
                    let n = *n;
                    let c = g.cols;
                    let mut ga = Mat::zeros(g.rows, c);
                    for i in 0..n {
                        for j in 0..n {
                            for col in 0..c {
                                ga.data[(i * n + j) * c + col] =
                                    0.5 * (g.data[(i * n + j) * c + col] + g.data[(j * n + i) * c + col]);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, local) => {
                    let mut ga = local.clone();
                    let s = g.data[0];
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        param_grads
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` against the tape gradient on every entry.
    fn check(params: &mut [Mat], f: impl Fn(&mut Tape<'_>) -> Var) {
        let analytic = {
            let mut tape = Tape::new(params);
            let out = f(&mut tape);
            tape.backward(out)
        };
        let h = 1e-6;
        for p in 0..params.len() {
            for e in 0..params[p].data.len() {
                let orig = params[p].data[e];
                params[p].data[e] = orig + h;
                let up = {
                    let mut t = Tape::new(params);
                    let o = f(&mut t);
                    t.value(o).data[0]
                };
                params[p].data[e] = orig - h;
                let down = {
                    let mut t = Tape::new(params);
                    let o = f(&mut t);
                    t.value(o).data[0]
                };
                params[p].data[e] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[p].data[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "param {p} entry {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_row_ops_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = vec![
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 4, 5),
            rand_mat(&mut rng, 1, 5),
            rand_mat(&mut rng, 1, 5),
            rand_mat(&mut rng, 3, 5),
        ];
        check(&mut params, |t| {
            let (a, b, r1, r2, c) = (t.param(0), t.param(1), t.param(2), t.param(3), t.param(4));
            let m = t.matmul(a, b);
            let m = t.add_row(m, r1);
            let m = t.mul_row(m, r2);
            let m = t.mul(m, c);
            let m = t.add(m, c);
            let m = t.add_const(m, 0.3);
            let m = t.layer_norm(m);
            let m = t.relu(m);
            let m = t.scale(m, 1.7);
            t.cross_entropy(m, &[0, 3, 4], &[1.0, 0.5, 2.0])
        });
    }

    #[test]
    fn attention_ops() {
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = vec![
            rand_mat(&mut rng, n, 4),
            rand_mat(&mut rng, n, 4),
            rand_mat(&mut rng, n, 4),
            rand_mat(&mut rng, n * n, 4),
        ];
        check(&mut params, |t| {
            let (q, k, v, e) = (t.param(0), t.param(1), t.param(2), t.param(3));
            let y = t.pair_product(q, k, 0.5);
            let y = t.mul(y, e);
            let a = t.neighbor_softmax(y, n);
            let o = t.weighted_sum(a, v, n);
            let s = t.symmetrize(y, n);
            let sp = [Pool::Mean, Pool::Max, Pool::Min, Pool::Std].map(|p| t.pool(s, p));
            let op = [Pool::Mean, Pool::Std].map(|p| t.pool(o, p));
            let cat = t.concat_cols(&[sp[0], sp[1], sp[2], sp[3], op[0], op[1]]);
            t.cross_entropy(cat, &[5], &[1.0])
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0, 1001.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[1] > p[0]);
    }

    #[test]
    fn confident_mistakes_keep_their_gradient() {
        let params = vec![Mat::from_vec(1, 2, vec![0.0, 80.0])];
        let mut t = Tape::new(&params);
        let x = t.param(0);
        let l = t.cross_entropy(x, &[0], &[1.0]);
        assert!((t.value(l).data[0] - 80.0).abs() < 1e-9);
        let g = t.backward(l);
        assert!((g[0].data[0] + 1.0).abs() < 1e-12 && (g[0].data[1] - 1.0).abs() < 1e-12);
    }
}
