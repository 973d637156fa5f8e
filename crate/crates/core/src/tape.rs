//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes once in reverse order and
//! accumulates vector-Jacobian products into the inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_abt_acc, gemm_atb_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Input,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    LnAbs(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    RepeatRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    guard_hits: usize,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            guard_hits: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Entries that fell below the guard of a [`Tape::ln_abs`] call.
    pub fn guard_hits(&self) -> usize {
        self.guard_hits
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(Tensor::raw(r, c, t.into_data()), Op::Const, false)
    }

    /// Leaf whose gradient can be read back with [`Tape::grad_of`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(Tensor::raw(r, c, t.into_data()), Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let value = Tensor::raw(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push(value, Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(dim_err(op, format!("{}x{}", da.0, da.1), format!("{}x{}", db.0, db.1)));
        }
        Ok(da)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(Tensor::raw(r, c, data), op, ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_dims(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::raw(r, c, data), op, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(dim_err("matmul", format!("inner dimension {k}"), format!("{k2}")));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::raw(m, n, data), Op::MatMul(a, b), ng))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.dims(a), self.dims(bias));
        if br != 1 || bc != c {
            return Err(dim_err("add_row", format!("1x{c}"), format!("{br}x{bc}")));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::raw(r, c, data), Op::AddRow(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| math::leaky_relu(x, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), math::exp)
    }

    /// `ln(max(|a|, guard))`; entries below the guard get zero gradient and
    /// are counted in [`Tape::guard_hits`].
    pub fn ln_abs(&mut self, a: Var, guard: f64) -> Var {
        let hits = self.value(a).data().iter().filter(|x| math::abs(**x) < guard).count();
        self.guard_hits += hits;
        self.unary(a, Op::LnAbs(a, guard), |x| math::ln(math::abs(x).max(guard)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), math::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::raw(1, 1, vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(dim_err("slice_cols", format!("at most {c} columns"), format!("{}..{}", start, start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::raw(r, len, data), Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |p| self.dims(*p).0);
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).0 != r) {
            return Err(dim_err("concat_cols", format!("{r} rows"), format!("{} rows", self.dims(*bad).0)));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.dims(*p).1).collect();
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[row * w..(row + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::raw(r, c, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(dim_err("reshape", format!("{} entries", r * c), format!("{rows}x{cols}")));
        }
        let data = self.value(a).data().to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::raw(rows, cols, data), Op::Reshape(a), ng))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * c * times);
        for row in src.chunks(c.max(1)).take(r) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::raw(r * times, c, data), Op::RepeatRows(a, times), ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(dim_err("select_rows", format!("row < {r}"), format!("{bad}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::raw(rows.len(), c, data), Op::SelectRows(a, rows.to_vec()), ng))
    }

    /// Tiles a `1 x c` node into `rows x c`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != 1 {
            return Err(dim_err("broadcast_rows", "1 row", format!("{r} rows")));
        }
        let src = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&src);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::raw(rows, c, data), Op::BroadcastRows(a), ng))
    }

    /// Runs the reverse sweep from `output` seeded with `seed` and returns the
    /// gradient buffer of every node.
    fn sweep(&self, output: Var, seed: &Tensor) -> Result<Vec<Option<Vec<f64>>>> {
        let (r, c) = self.dims(output);
        if seed.rows() != r || seed.cols() != c {
            return Err(dim_err(
                "backward",
                format!("seed of shape {r}x{c}"),
                format!("{}x{}", seed.rows(), seed.cols()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (rows, cols) = (node.value.rows(), node.value.cols());
            match &node.op {
                Op::Const | Op::Input | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = cols;
                    if self.ng(*a) {
                        let bv = self.value(*b).data();
                        gemm_abt_acc(&g, bv, acc(&mut grads, *a, m * k), m, n, k);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a).data();
                        gemm_atb_acc(av, &g, acc(&mut grads, *b, k * n), k, m, n);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.ng(*a) {
                        add_into(acc(&mut grads, *a, g.len()), &g);
                    }
                    if self.ng(*bias) {
                        let gb = acc(&mut grads, *bias, cols);
                        for row in g.chunks(cols.max(1)) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        add_into(acc(&mut grads, *a, g.len()), &g);
                    }
                    if self.ng(*b) {
                        add_into(acc(&mut grads, *b, g.len()), &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        add_into(acc(&mut grads, *a, g.len()), &g);
                    }
                    if self.ng(*b) {
                        for (x, y) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                            *x -= y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b).data();
                        for ((x, y), z) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(bv) {
                            *x += y * z;
                        }
                    }
                    if self.ng(*b) {
                        let av = self.value(*a).data();
                        for ((x, y), z) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(av) {
                            *x += y * z;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += s * y;
                    }
                }
                Op::AddScalar(a) => add_into(acc(&mut grads, *a, g.len()), &g),
                Op::LeakyRelu(a, slope) => {
                    let av = self.value(*a).data();
                    for ((x, y), z) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(av) {
                        *x += if *z > 0.0 { *y } else { slope * y };
                    }
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    for ((x, y), z) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(out) {
                        *x += y * z;
                    }
                }
                Op::LnAbs(a, guard) => {
                    let av = self.value(*a).data();
                    for ((x, y), z) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(av) {
                        if math::abs(*z) >= *guard {
                            *x += y / z;
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = self.value(*a).data();
                    for ((x, y), z) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(av) {
                        if *z > 0.0 {
                            *x += y;
                        } else if *z < 0.0 {
                            *x -= y;
                        }
                    }
                }
                Op::Square(a) => {
                    let av = self.value(*a).data();
                    for ((x, y), z) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(av) {
                        *x += 2.0 * z * y;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    for x in acc(&mut grads, *a, n).iter_mut() {
                        *x += g[0];
                    }
                }
                Op::SliceCols(a, start) => {
                    let ac = self.dims(*a).1;
                    let ga = acc(&mut grads, *a, rows * ac);
                    for row in 0..rows {
                        add_into(&mut ga[row * ac + start..row * ac + start + cols], &g[row * cols..(row + 1) * cols]);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.dims(*p).1;
                        if self.ng(*p) {
                            let gp = acc(&mut grads, *p, rows * w);
                            for row in 0..rows {
                                add_into(&mut gp[row * w..(row + 1) * w], &g[row * cols + offset..row * cols + offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Reshape(a) => add_into(acc(&mut grads, *a, g.len()), &g),
                Op::RepeatRows(a, times) => {
                    let ar = self.dims(*a).0;
                    let ga = acc(&mut grads, *a, ar * cols);
                    for row in 0..ar {
                        for s in 0..*times {
                            let src = (row * times + s) * cols;
                            add_into(&mut ga[row * cols..(row + 1) * cols], &g[src..src + cols]);
                        }
                    }
                }
                Op::SelectRows(a, idx) => {
                    let ar = self.dims(*a).0;
                    let ga = acc(&mut grads, *a, ar * cols);
                    for (j, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * cols..(src + 1) * cols], &g[j * cols..(j + 1) * cols]);
                    }
                }
                Op::BroadcastRows(a) => {
                    let ga = acc(&mut grads, *a, cols);
                    for row in g.chunks(cols.max(1)) {
                        add_into(ga, row);
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of `output` (weighted by `seed`) with respect to every
    /// parameter. Parameters not on the tape get zero gradient.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<ParamStore> {
        let grads = self.sweep(output, seed)?;
        let mut out = self.params.zeros_like();
        for (i, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                if let Some(Some(g)) = grads.get(v.0) {
                    out.get_mut(ParamId(i)).data_mut().copy_from_slice(g);
                }
            }
        }
        Ok(out)
    }

    /// [`Tape::backward`] for a `1 x 1` output.
    pub fn backward_scalar(&self, output: Var) -> Result<ParamStore> {
        if self.value(output).len() != 1 {
            return Err(Error::Evaluation(format!(
                "backward_scalar on a {}x{} node",
                self.dims(output).0,
                self.dims(output).1
            )));
        }
        self.backward(output, &Tensor::scalar(1.0))
    }

    /// Gradients of `output` with respect to arbitrary nodes.
    pub fn grad_of(&self, output: Var, seed: &Tensor, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.sweep(output, seed)?;
        Ok(wrt
            .iter()
            .map(|v| {
                let (r, c) = self.dims(*v);
                match grads.get(v.0) {
                    Some(Some(g)) => Tensor::raw(r, c, g.clone()),
                    _ => Tensor::raw(r, c, vec![0.0; r * c]),
                }
            })
            .collect())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in vals {
            s.insert(n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn square_gradient() {
        let p = store(&[("w", Tensor::scalar(3.0))]);
        let mut tape = Tape::new(&p);
        let w = tape.param(ParamId(0));
        let y = tape.square(w);
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.get(ParamId(0)).data(), &[6.0]);
    }

    #[test]
    fn leaky_relu_gradient_on_negative_side() {
        let p = store(&[("w", Tensor::scalar(-1.0))]);
        let mut tape = Tape::new(&p);
        let w = tape.param(ParamId(0));
        let y = tape.leaky_relu(w, 0.2);
        assert!((tape.scalar(y) + 0.2).abs() < 1e-15);
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.get(ParamId(0)).data(), &[0.2]);
    }

    #[test]
    fn seed_shape_is_checked() {
        let p = store(&[("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())]);
        let mut tape = Tape::new(&p);
        let w = tape.param(ParamId(0));
        assert!(matches!(tape.backward(w, &Tensor::scalar(1.0)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn shared_nodes_accumulate() {
        // f(w) = w * w + w at w = 2 -> 2w + 1 = 5
        let p = store(&[("w", Tensor::scalar(2.0))]);
        let mut tape = Tape::new(&p);
        let w = tape.param(ParamId(0));
        let w2 = tape.param(ParamId(0));
        assert_eq!(w, w2);
        let sq = tape.mul(w, w).unwrap();
        let y = tape.add(sq, w).unwrap();
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.get(ParamId(0)).data(), &[5.0]);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let p = ParamStore::new();
        let mut tape = Tape::new(&p);
        let a = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.slice_cols(a, 1, 1).unwrap(); // [2, 4]
        let rep = tape.repeat_rows(s, 2); // [2, 2, 4, 4]
        let sel = tape.select_rows(rep, &[0, 3]).unwrap(); // [2, 4]
        let cat = tape.concat_cols(&[sel, s]).unwrap(); // [[2,2],[4,4]]
        let r = tape.reshape(cat, 1, 4).unwrap();
        let sq = tape.square(r);
        let y = tape.sum(sq);
        assert_eq!(tape.scalar(y), 4.0 + 4.0 + 16.0 + 16.0);
        let g = tape.grad_of(y, &Tensor::scalar(1.0), &[a]).unwrap();
        // column 1 entries each reach y twice with d/dx x^2 = 2x
        assert_eq!(g[0].data(), &[0.0, 8.0, 0.0, 16.0]);
    }

    #[test]
    fn guard_counts_small_entries() {
        let p = ParamStore::new();
        let mut tape = Tape::new(&p);
        let a = tape.input(Tensor::matrix(1, 3, vec![0.0, 1e-20, 2.0]).unwrap());
        let l = tape.ln_abs(a, 1e-12);
        assert_eq!(tape.guard_hits(), 2);
        assert!((tape.value(l).data()[0] - math::ln(1e-12)).abs() < 1e-12);
        let y = tape.sum(l);
        let g = tape.grad_of(y, &Tensor::scalar(1.0), &[a]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.5]);
    }
}
