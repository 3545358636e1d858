use super::{accumulate, Node, NodeId, Op, Tape, BCE_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (if cols == 0 { 0 } else { n / cols }, cols)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// Adds a bias vector to every row; the bias length must equal the last dim.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, cols) = matrix_dims(self.shape(a));
        if self.value(bias).len() != cols {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + bias {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let mut out: Vec<T> = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddBias(a, bias)))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&x| if x < T::zero() { T::zero() } else { x }).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid(a))
    }

    /// Mean of a matrix over `axis` (0: down the rows, 1: across the columns).
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || axis > 1 {
            return Err(Error::dim("mean_axis", format!("shape {s:?}, axis {axis}")));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let out = if axis == 0 {
            let inv = T::one() / T::from_count(m);
            (0..n).map(|j| (0..m).map(|i| v[i * n + j]).sum::<T>() * inv).collect()
        } else {
            let inv = T::one() / T::from_count(n);
            (0..m).map(|i| v[i * n..(i + 1) * n].iter().copied().sum::<T>() * inv).collect()
        };
        let shape = vec![if axis == 0 { n } else { m }];
        Ok(self.push(shape, out, Op::MeanAxis { input: a, axis }))
    }

    /// Mean over every element.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.iter().copied().sum::<T>() / T::from_count(v.len());
        self.push(vec![1], vec![m], Op::MeanAll(a))
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let lead = lead.to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat", format!("{s:?} vs leading {lead:?}")));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a)))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let (rows, cols) = matrix_dims(&s);
        if start >= end || end > cols {
            return Err(Error::dim("slice", format!("{start}..{end} of width {cols}")));
        }
        let v = self.value(a);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = w;
        Ok(self.push(shape, out, Op::SliceLast { input: a, start, end }))
    }

    /// Per-concept convex combination `w·pos + (1−w)·neg`.
    ///
    /// `weights` is `[B×K]`; `pos` and `neg` hold `B·K·d` values laid out as
    /// `[B, K, d]`. The result is `[B, K·d]`.
    pub fn mix(&mut self, weights: NodeId, pos: NodeId, neg: NodeId) -> Result<NodeId> {
        let (b, k) = matrix_dims(self.shape(weights));
        let n = self.value(pos).len();
        if self.value(neg).len() != n || b * k == 0 || n % (b * k) != 0 {
            return Err(Error::dim(
                "assemble_embedding",
                format!(
                    "weights {:?}, pos {:?}, neg {:?}",
                    self.shape(weights),
                    self.shape(pos),
                    self.shape(neg)
                ),
            ));
        }
        // NaN passes through so the caller's non-finite check can name its source.
        if let Some(w) = self.value(weights).iter().find(|w| !w.is_nan() && !(**w >= T::zero() && **w <= T::one())) {
            return Err(Error::contract("assemble_embedding", format!("weight {w} outside [0,1]")));
        }
        let d = n / (b * k);
        let (w, p, q) = (self.value(weights), self.value(pos), self.value(neg));
        let out = (0..n)
            .map(|i| {
                let wi = w[i / d];
                wi * p[i] + (T::one() - wi) * q[i]
            })
            .collect();
        Ok(self.push(vec![b, k * d], out, Op::Mix { weights, pos, neg, d }))
    }

    /// Mean over rows of `−log softmax(logits)[class]` for one-hot `target` rows.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: &[T]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 || target.len() != self.value(logits).len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {s:?}, target length {}", target.len()),
            ));
        }
        let (b, q) = (s[0], s[1]);
        for r in 0..b {
            let row = &target[r * q..(r + 1) * q];
            let ones = row.iter().filter(|&&t| t == T::one()).count();
            let zeros = row.iter().filter(|&&t| t == T::zero()).count();
            if ones != 1 || zeros != q - 1 {
                return Err(Error::contract("softmax_cross_entropy", format!("target row {r} is not one-hot")));
            }
        }
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(b * q);
        let mut total = T::zero();
        for r in 0..b {
            let row = &v[r * q..(r + 1) * q];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
            for j in 0..q {
                probs.push((row[j] - lse).exp());
                if target[r * q + j] == T::one() {
                    total += lse - row[j];
                }
            }
        }
        let loss = total / T::from_count(b);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, target: target.to_vec(), probs },
        ))
    }

    /// Mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
    pub fn binary_cross_entropy(&mut self, p: NodeId, target: &[T]) -> Result<NodeId> {
        if target.len() != self.value(p).len() {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("p {:?}, target length {}", self.shape(p), target.len()),
            ));
        }
        if let Some(t) = target.iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::contract("binary_cross_entropy", format!("target {t} not in {{0,1}}")));
        }
        let eps = T::lit(BCE_EPS);
        let v = self.value(p);
        // Running mean: exact when every term is equal (e.g. a chance-level
        // discriminator gives ln 2 bitwise).
        let mut loss = T::zero();
        for (i, (&pi, &t)) in v.iter().zip(target).enumerate() {
            // NaN must survive the clamp so callers can detect it.
            let pc = if pi.is_nan() { pi } else { pi.max(eps).min(T::one() - eps) };
            let term = if t == T::one() { -pc.ln() } else { -(T::one() - pc).ln() };
            loss += (term - loss) / T::from_count(i + 1);
        }
        Ok(self.push(vec![1], vec![loss], Op::BinaryCrossEntropy { p, target: target.to_vec() }))
    }

    /// `min(a, τ)` for a scalar node. The gradient passes only when `a < τ`.
    pub fn min_const(&mut self, a: NodeId, tau: T) -> Result<NodeId> {
        if self.value(a).len() != 1 {
            return Err(Error::contract("scalar_min_const", "input must be scalar"));
        }
        let v = self.value(a)[0];
        let passthrough = v < tau;
        let out = if passthrough { v } else { tau };
        Ok(self.push(vec![1], vec![out], Op::MinConst { input: a, passthrough }))
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n < 8 {
        // Narrow outputs: row-by-column dot products over a transposed b.
        let mut bt = vec![T::zero(); n * k];
        for p in 0..k {
            for c in 0..n {
                bt[c * k + p] = b[p * n + c];
            }
        }
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for c in 0..n {
                out[i * n + c] = arow.iter().zip(&bt[c * k..(c + 1) * k]).map(|(&x, &y)| x * y).sum();
            }
        }
        return out;
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Push the adjoint `g` of node `i` into the adjoints of its inputs.
pub(crate) fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let wants = |id: NodeId| nodes[id.0].requires_grad;
    let len = |id: NodeId| nodes[id.0].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if wants(*a) {
                // da = g · bᵀ, with bᵀ materialized so the inner loop is contiguous.
                let mut bt = vec![T::zero(); n * k];
                for p in 0..k {
                    for c in 0..n {
                        bt[c * k + p] = bv[p * n + c];
                    }
                }
                accumulate(adj, *a, m * k, |da| {
                    for r in 0..m {
                        let drow = &mut da[r * k..(r + 1) * k];
                        for c in 0..n {
                            let grc = g[r * n + c];
                            if grc == T::zero() {
                                continue;
                            }
                            let brow = &bt[c * k..(c + 1) * k];
                            drow.iter_mut().zip(brow).for_each(|(d, &x)| *d += grc * x);
                        }
                    }
                });
            }
            if wants(*b) {
                // db = aᵀ · g, accumulated transposed so the inner loop runs over k.
                let mut dbt = vec![T::zero(); n * k];
                for r in 0..m {
                    let arow = &av[r * k..(r + 1) * k];
                    for c in 0..n {
                        let grc = g[r * n + c];
                        if grc == T::zero() {
                            continue;
                        }
                        dbt[c * k..(c + 1) * k].iter_mut().zip(arow).for_each(|(d, &x)| *d += grc * x);
                    }
                }
                accumulate(adj, *b, k * n, |db| {
                    for p in 0..k {
                        for c in 0..n {
                            db[p * n + c] += dbt[c * k + p];
                        }
                    }
                });
            }
        }
        Op::AddBias(a, bias) => {
            if wants(*a) {
                accumulate(adj, *a, g.len(), |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            if wants(*bias) {
                let cols = len(*bias);
                accumulate(adj, *bias, cols, |db| {
                    for row in g.chunks_exact(cols.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                });
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if wants(*a) {
                accumulate(adj, *a, g.len(), |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            if wants(*b) {
                accumulate(adj, *b, g.len(), |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if wants(*a) {
                accumulate(adj, *a, g.len(), |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                });
            }
            if wants(*b) {
                accumulate(adj, *b, g.len(), |db| {
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                accumulate(adj, *a, g.len(), |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += *c * x));
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let av = &nodes[a.0].value;
                accumulate(adj, *a, g.len(), |da| {
                    for j in 0..g.len() {
                        if av[j] > T::zero() {
                            da[j] += g[j];
                        }
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            if wants(*a) {
                let out = &node.value;
                accumulate(adj, *a, g.len(), |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * out[j] * (T::one() - out[j]);
                    }
                });
            }
        }
        Op::MeanAxis { input, axis } => {
            if wants(*input) {
                let (m, n) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                accumulate(adj, *input, m * n, |da| {
                    if *axis == 0 {
                        let inv = T::one() / T::from_count(m);
                        for r in 0..m {
                            for c in 0..n {
                                da[r * n + c] += g[c] * inv;
                            }
                        }
                    } else {
                        let inv = T::one() / T::from_count(n);
                        for r in 0..m {
                            for c in 0..n {
                                da[r * n + c] += g[r] * inv;
                            }
                        }
                    }
                });
            }
        }
        Op::MeanAll(a) => {
            if wants(*a) {
                let n = len(*a);
                let share = g[0] / T::from_count(n);
                accumulate(adj, *a, n, |da| da.iter_mut().for_each(|d| *d += share));
            }
        }
        Op::Concat(parts) => {
            let (rows, total) = matrix_dims(&node.shape);
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p.0].shape.last().unwrap();
                if wants(p) {
                    accumulate(adj, p, rows * w, |dp| {
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                }
                offset += w;
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                accumulate(adj, *a, g.len(), |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
        }
        Op::SliceLast { input, start, end } => {
            if wants(*input) {
                let (rows, cols) = matrix_dims(&nodes[input.0].shape);
                let w = end - start;
                accumulate(adj, *input, rows * cols, |da| {
                    for r in 0..rows {
                        for c in 0..w {
                            da[r * cols + start + c] += g[r * w + c];
                        }
                    }
                });
            }
        }
        Op::Mix { weights, pos, neg, d } => {
            let (w, p, q) = (&nodes[weights.0].value, &nodes[pos.0].value, &nodes[neg.0].value);
            if wants(*weights) {
                accumulate(adj, *weights, w.len(), |dw| {
                    for j in 0..g.len() {
                        dw[j / d] += g[j] * (p[j] - q[j]);
                    }
                });
            }
            if wants(*pos) {
                accumulate(adj, *pos, p.len(), |dp| {
                    for j in 0..g.len() {
                        dp[j] += g[j] * w[j / d];
                    }
                });
            }
            if wants(*neg) {
                accumulate(adj, *neg, q.len(), |dq| {
                    for j in 0..g.len() {
                        dq[j] += g[j] * (T::one() - w[j / d]);
                    }
                });
            }
        }
        Op::SoftmaxCrossEntropy { logits, target, probs } => {
            if wants(*logits) {
                let b = nodes[logits.0].shape[0];
                let scale = g[0] / T::from_count(b);
                accumulate(adj, *logits, probs.len(), |dl| {
                    for j in 0..probs.len() {
                        dl[j] += scale * (probs[j] - target[j]);
                    }
                });
            }
        }
        Op::BinaryCrossEntropy { p, target } => {
            if wants(*p) {
                let pv = &nodes[p.0].value;
                let n = pv.len();
                let scale = g[0] / T::from_count(n);
                let eps = T::lit(BCE_EPS);
                accumulate(adj, *p, n, |dp| {
                    for j in 0..n {
                        let pj = pv[j];
                        // Zero gradient where the clamp is active.
                        if pj < eps || pj > T::one() - eps {
                            continue;
                        }
                        let d = if target[j] == T::one() { -T::one() / pj } else { T::one() / (T::one() - pj) };
                        dp[j] += scale * d;
                    }
                });
            }
        }
        Op::MinConst { input, passthrough } => {
            if *passthrough && wants(*input) {
                accumulate(adj, *input, 1, |da| da[0] += g[0]);
            }
        }
    }
}
