use super::params::{ParamId, ParamStore};
use super::{log_softmax_row, matmul_kernel, Matrix, NumericsError, Scalar, LOGIT_CLIP};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse rows as `(column, value)` lists.
pub type SparseRows<T> = Vec<Vec<(usize, T)>>;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SparseMatMul(SparseRows<T>, Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    Pick(Var, Vec<(usize, usize)>),
    SegmentSum(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Records operations for one forward pass; single-threaded by design.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

type Result<T> = std::result::Result<T, NumericsError>;

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a,
        right: b,
    }
}

/// Whether `b` broadcasts onto `a` (same shape, a row, a column or a scalar).
fn broadcastable(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars past `len`
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Which side of every non-differentiable point the recorded inputs lie
    /// on: relu inputs above zero and softmax logits inside the clip range.
    /// Two passes with equal patterns lie on one smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&x| x > T::zero())),
                Op::MaskedLogSoftmax(a, _) => out.extend(
                    self.value(*a)
                        .data()
                        .iter()
                        .map(|x| x.as_f64().abs() < LOGIT_CLIP),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).get(0, 0)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Places parameter `id` on the tape; its gradient is reported by
    /// [`Grads::for_store`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let value = matmul_kernel(self.value(a), self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Matrix<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(shape_err(name, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(sa.0, sa.1);
        for r in 0..sa.0 {
            for c in 0..sa.1 {
                let y = vb.get(r.min(sb.0 - 1), c.min(sb.1 - 1));
                out.set(r, c, f(va.get(r, c), y));
            }
        }
        Ok(out)
    }

    /// `a + b` with `b` broadcast over rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::from_f64(k);
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = *x * k);
        self.push(v, Op::Scale(a, k))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = f(*x));
        self.push(v, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let v = self.value(p);
                for c in 0..v.cols() {
                    out.set(r, c0 + c, v.get(r, c));
                }
                c0 += v.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", (n, cols), (bad, 0)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let out = Matrix::from_vec(rows.len(), cols, data);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    /// `X · w` for a sparse `X` given row by row.
    pub fn sparse_matmul(&mut self, x: SparseRows<T>, w: Var) -> Result<Var> {
        let (k, cols) = self.shape(w);
        if let Some(&(bad, _)) = x.iter().flatten().find(|&&(c, _)| c >= k) {
            return Err(shape_err("sparse_matmul", (x.len(), bad + 1), (k, cols)));
        }
        let wv = self.value(w);
        let mut out = Matrix::zeros(x.len(), cols);
        for (r, entries) in x.iter().enumerate() {
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for &(c, val) in entries {
                for (o, &y) in orow.iter_mut().zip(wv.row(c)) {
                    *o = *o + val * y;
                }
            }
        }
        Ok(self.push(out, Op::SparseMatMul(x, w)))
    }

    /// Row-wise log-softmax restricted to `mask` (row-major, same size as
    /// `a`). Masked entries hold `-inf` and receive no gradient.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if mask.len() != rows * cols {
            return Err(shape_err("masked_log_softmax", (rows, cols), (mask.len(), 1)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = log_softmax_row(src.row(r), &mask[r * cols..(r + 1) * cols])
                .ok_or(NumericsError::AllMasked { row: r })?;
            data.extend(row);
        }
        let out = Matrix::from_vec(rows, cols, data);
        Ok(self.push(out, Op::MaskedLogSoftmax(a, mask.to_vec())))
    }

    /// Column vector of the entries `a[r, c]` for each `(r, c)`.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(a);
        if let Some(&bad) = at.iter().find(|&&(r, c)| r >= shape.0 || c >= shape.1) {
            return Err(shape_err("pick", shape, bad));
        }
        let src = self.value(a);
        let data = at.iter().map(|&(r, c)| src.get(r, c)).collect();
        let out = Matrix::from_vec(at.len(), 1, data);
        Ok(self.push(out, Op::Pick(a, at.to_vec())))
    }

    /// Sums the rows of a column vector into `segments` buckets.
    pub fn segment_sum(&mut self, a: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.1 != 1 || segment.len() != shape.0 || segment.iter().any(|&s| s >= segments) {
            return Err(shape_err("segment_sum", shape, (segment.len(), segments)));
        }
        let mut acc = vec![0f64; segments];
        for (r, &s) in segment.iter().enumerate() {
            acc[s] += self.value(a).get(r, 0).as_f64();
        }
        let out = Matrix::from_vec(segments, 1, acc.into_iter().map(T::from_f64).collect());
        Ok(self.push(out, Op::SegmentSum(a, segment.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        self.push(Matrix::scalar(T::from_f64(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.data().len().max(1) as f64;
        let s: f64 = v.data().iter().map(|x| x.as_f64()).sum();
        self.push(Matrix::scalar(T::from_f64(s / n)), Op::Mean(a))
    }

    /// Reverse pass from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        let (r, c) = self.shape(loss);
        let mut seed = Matrix::zeros(r, c);
        seed.data_mut().iter_mut().for_each(|x| *x = T::one());
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Grads { grads, params }
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = matmul_kernel(g, &val(*b).transpose());
                let gb = matmul_kernel(&val(*a).transpose(), g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) | Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                let mut gb = reduce_to(g, val(*b).shape());
                if matches!(node.op, Op::Sub(..)) {
                    gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let sb = vb.shape();
                let mut ga = g.clone();
                let mut gfull = g.clone();
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let y = vb.get(r.min(sb.0 - 1), c.min(sb.1 - 1));
                        ga.set(r, c, g.get(r, c) * y);
                        gfull.set(r, c, g.get(r, c) * va.get(r, c));
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, reduce_to(&gfull, sb));
            }
            Op::Scale(a, k) => accumulate(grads, *a, elementwise(g, g, |x, _| x * *k)),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                elementwise(g, val(*a), |x, y| if y > T::zero() { x } else { T::zero() }),
            ),
            Op::Square(a) => accumulate(
                grads,
                *a,
                elementwise(g, val(*a), |x, y| x * (y + y)),
            ),
            Op::Log(a) => accumulate(grads, *a, elementwise(g, val(*a), |x, y| x / y)),
            Op::Exp(a) => accumulate(grads, *a, elementwise(g, &node.value, |x, y| x * y)),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    let mut gp = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gp.set(r, c, g.get(r, c0 + c));
                        }
                    }
                    c0 += cols;
                    accumulate(grads, p, gp);
                }
            }
            Op::GatherRows(a, rows) => {
                let (n, cols) = val(*a).shape();
                let mut ga = Matrix::zeros(n, cols);
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        ga.set(r, c, ga.get(r, c) + g.get(k, c));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SparseMatMul(x, w) => {
                let (k, cols) = val(*w).shape();
                let mut gw = Matrix::zeros(k, cols);
                for (r, entries) in x.iter().enumerate() {
                    for &(c, v) in entries {
                        for j in 0..cols {
                            gw.set(c, j, gw.get(c, j) + v * g.get(r, j));
                        }
                    }
                }
                accumulate(grads, *w, gw);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let (rows, cols) = g.shape();
                let x = val(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let live = |c: usize| mask[r * cols + c];
                    let s = (0..cols)
                        .filter(|&c| live(c))
                        .fold(T::zero(), |acc, c| acc + g.get(r, c));
                    for c in (0..cols).filter(|&c| live(c)) {
                        if x.get(r, c).as_f64().abs() >= LOGIT_CLIP {
                            continue;
                        }
                        let p = node.value.get(r, c).exp();
                        ga.set(r, c, g.get(r, c) - p * s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Pick(a, at) => {
                let (rows, cols) = val(*a).shape();
                let mut ga = Matrix::zeros(rows, cols);
                for (k, &(r, c)) in at.iter().enumerate() {
                    ga.set(r, c, ga.get(r, c) + g.get(k, 0));
                }
                accumulate(grads, *a, ga);
            }
            Op::SegmentSum(a, segment) => {
                let data = segment.iter().map(|&s| g.get(s, 0)).collect();
                accumulate(grads, *a, Matrix::from_vec(segment.len(), 1, data));
            }
            Op::Sum(a) | Op::Mean(a) => {
                let (rows, cols) = val(*a).shape();
                let mut k = g.get(0, 0);
                if matches!(node.op, Op::Mean(_)) {
                    k = k / T::from_f64((rows * cols).max(1) as f64);
                }
                let mut ga = Matrix::zeros(rows, cols);
                ga.data_mut().iter_mut().for_each(|x| *x = k);
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn elementwise<T: Scalar>(g: &Matrix<T>, y: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = g.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
    Matrix::from_vec(g.rows(), g.cols(), data)
}

/// Sums a gradient down to a broadcast operand's shape.
fn reduce_to<T: Scalar>(g: &Matrix<T>, shape: (usize, usize)) -> Matrix<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let (rr, cc) = (r.min(shape.0 - 1), c.min(shape.1 - 1));
            out.set(rr, cc, out.get(rr, cc) + g.get(r, c));
        }
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        slot => *slot = Some(g),
    }
}

/// Gradients from one reverse pass.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients for `store`, summed over every placement of
    /// the parameter on the tape; `None` where it was unused.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Matrix<T>>> {
        let mut out: Vec<Option<Matrix<T>>> = vec![None; store.len()];
        for &(id, node) in &self.params {
            if id.store() != store.tag() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out[id.index()] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Matrix<f64> {
        Matrix::from_f64(rows, cols, d)
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 2, &[-1.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_square_gradient() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 2, &[1.0, 2.0]));
        let sq = t.square(x);
        let l = t.mean(sq);
        let g = t.backward(l);
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = t.constant(Matrix::zeros(3, 2));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn masked_softmax_gradient_skips_masked() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 3, &[0.3, -0.2, 1.0]));
        let y = t.masked_log_softmax(x, &[true, false, true]).unwrap();
        let p = t.pick(y, &[(0, 0)]).unwrap();
        let l = t.sum(p);
        let g = t.backward(l);
        let gx = g.wrt(x).unwrap();
        assert_eq!(gx.get(0, 1), 0.0);
        assert!((gx.get(0, 0) + gx.get(0, 2)).abs() < 1e-12);
        assert!(t.masked_log_softmax(x, &[false; 3]).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(m(1, 1, &[0.5]));
        let s = t.add(a, b).unwrap();
        let l = t.sum(s);
        let g = t.backward(l);
        assert_eq!(g.wrt(b).unwrap().data(), &[4.0]);
    }
}
