//! The primitive catalog. Every grid computation in the crate is composed
//! from these operations (plus the fused loss kernels in `losses`).

use std::rc::Rc;

use super::gemm::{col2im, gemm, im2col, ConvGeom};
use super::tape::{Primitive, Tape, Var};
use super::Array;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Add;
impl Primitive for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        same_shape("add", i[0], i[1])?;
        Ok(zip_map(i[0], i[1], |a, b| a + b))
    }
    fn vjp(&self, _: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct Sub;
impl Primitive for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        same_shape("sub", i[0], i[1])?;
        Ok(zip_map(i[0], i[1], |a, b| a - b))
    }
    fn vjp(&self, _: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    }
}

struct Mul;
impl Primitive for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        same_shape("mul", i[0], i[1])?;
        Ok(zip_map(i[0], i[1], |a, b| a * b))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, n: &[bool]) -> Vec<Option<Array>> {
        vec![
            n[0].then(|| zip_map(g, i[1], |g, b| g * b)),
            n[1].then(|| zip_map(g, i[0], |g, a| g * a)),
        ]
    }
}

struct Scale(f64);
impl Primitive for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        Ok(i[0].map(|v| v * self.0))
    }
    fn vjp(&self, _: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

struct Sigmoid;
impl Primitive for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        Ok(i[0].map(sigmoid))
    }
    fn vjp(&self, _: &[&Array], y: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        vec![Some(zip_map(g, y, |g, y| g * y * (1.0 - y)))]
    }
}

struct Relu;
impl Primitive for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        Ok(i[0].map(|v| v.max(0.0)))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        vec![Some(zip_map(g, i[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
    }
    fn kink_margin(&self, i: &[&Array]) -> f64 {
        i[0].data().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)
    }
}

fn dims2(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

/// `[m,k] · [k,n] -> [m,n]`
struct MatMul;
impl Primitive for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (m, k) = dims2("matmul", i[0])?;
        let (k2, n) = dims2("matmul", i[1])?;
        if k != k2 {
            return Err(Error::shape("matmul", i[0].shape(), i[1].shape()));
        }
        let mut out = Array::zeros(&[m, n]);
        gemm(m, k, n, i[0].data(), false, i[1].data(), false, out.data_mut(), false);
        Ok(out)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, need: &[bool]) -> Vec<Option<Array>> {
        let (m, k) = (i[0].shape()[0], i[0].shape()[1]);
        let n = i[1].shape()[1];
        let da = need[0].then(|| {
            let mut da = Array::zeros(&[m, k]);
            gemm(m, n, k, g.data(), false, i[1].data(), true, da.data_mut(), false);
            da
        });
        let db = need[1].then(|| {
            let mut db = Array::zeros(&[k, n]);
            gemm(k, m, n, i[0].data(), true, g.data(), false, db.data_mut(), false);
            db
        });
        vec![da, db]
    }
}

/// Row-wise affine map: `x [n,in]`, `w [out,in]`, `b [out]` -> `[n,out]`.
struct Linear;
impl Primitive for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (n, din) = dims2("linear", i[0])?;
        let (dout, din2) = dims2("linear", i[1])?;
        if din != din2 || i[2].shape() != [dout] {
            return Err(Error::shape("linear", i[0].shape(), i[1].shape()));
        }
        let mut out = Array::zeros(&[n, dout]);
        gemm(n, din, dout, i[0].data(), false, i[1].data(), true, out.data_mut(), false);
        for r in 0..n {
            for (o, b) in out.data_mut()[r * dout..(r + 1) * dout].iter_mut().zip(i[2].data()) {
                *o += b;
            }
        }
        Ok(out)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, need: &[bool]) -> Vec<Option<Array>> {
        let (n, din) = (i[0].shape()[0], i[0].shape()[1]);
        let dout = i[1].shape()[0];
        let dx = need[0].then(|| {
            let mut dx = Array::zeros(&[n, din]);
            gemm(n, dout, din, g.data(), false, i[1].data(), false, dx.data_mut(), false);
            dx
        });
        let dw = need[1].then(|| {
            let mut dw = Array::zeros(&[dout, din]);
            gemm(dout, n, din, g.data(), true, i[0].data(), false, dw.data_mut(), false);
            dw
        });
        let db = need[2].then(|| {
            let mut db = Array::zeros(&[dout]);
            for r in 0..n {
                for (d, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                    *d += gv;
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

fn transpose_data(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

struct Transpose;
impl Primitive for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (r, c) = dims2("transpose", i[0])?;
        Array::new(vec![c, r], transpose_data(r, c, i[0].data()))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let (r, c) = (i[0].shape()[0], i[0].shape()[1]);
        vec![Some(Array::new(vec![r, c], transpose_data(c, r, g.data())).unwrap())]
    }
}

struct Reshape(Vec<usize>);
impl Primitive for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        i[0].clone().reshape(&self.0)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        vec![Some(g.clone().reshape(i[0].shape()).unwrap())]
    }
}

/// Zero-padded, stride-1 convolution over 2 or 3 spatial axes.
/// `x [ci, spatial..]`, `w [co, ci, k..]`, `b [co]`.
struct Conv {
    spatial_rank: usize,
    /// Columns built at record time, reused by the reverse pass.
    columns: std::cell::OnceCell<Vec<f64>>,
}

impl Conv {
    fn geom(&self, x: &Array, w: &Array) -> Result<(usize, usize, ConvGeom)> {
        let r = self.spatial_rank;
        let op = if r == 2 { "conv2d" } else { "conv3d" };
        if x.ndim() != r + 1 || w.ndim() != r + 2 || x.shape()[0] != w.shape()[1] {
            return Err(Error::shape(op, x.shape(), w.shape()));
        }
        let k = w.shape()[2];
        if k.is_multiple_of(2) || w.shape()[2..].iter().any(|&d| d != k) {
            return Err(Error::contract(format!(
                "{op}: kernel must be odd and cubic, got {:?}",
                &w.shape()[2..]
            )));
        }
        let mut dims = [1; 3];
        let mut ks = [1; 3];
        for a in 0..r {
            dims[a] = x.shape()[1 + a];
            ks[a] = k;
        }
        Ok((w.shape()[1], w.shape()[0], ConvGeom { dims, ks }))
    }
}

impl Primitive for Conv {
    fn name(&self) -> &'static str {
        if self.spatial_rank == 2 {
            "conv2d"
        } else {
            "conv3d"
        }
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (x, w, b) = (i[0], i[1], i[2]);
        let (ci, co, g) = self.geom(x, w)?;
        if b.shape() != [co] {
            return Err(Error::shape(self.name(), w.shape(), b.shape()));
        }
        let s = g.spatial();
        let rows = ci * g.taps();
        let mut out = vec![0.0; co * s];
        if g.is_pointwise() {
            gemm(co, rows, s, w.data(), false, x.data(), false, &mut out, false);
        } else {
            let col = im2col(x.data(), ci, g);
            gemm(co, rows, s, w.data(), false, &col, false, &mut out, false);
            let _ = self.columns.set(col);
        }
        for (o, bias) in out.chunks_mut(s).zip(b.data()) {
            o.iter_mut().for_each(|v| *v += bias);
        }
        let mut shape = vec![co];
        shape.extend_from_slice(&x.shape()[1..]);
        Array::new(shape, out)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, need: &[bool]) -> Vec<Option<Array>> {
        let (x, w) = (i[0], i[1]);
        let (ci, co, geom) = self.geom(x, w).expect("validated in eval");
        let s = geom.spatial();
        let rows = ci * geom.taps();
        let col_storage;
        let col: &[f64] = if geom.is_pointwise() {
            x.data()
        } else if need[1] {
            match self.columns.get() {
                Some(c) => c,
                None => {
                    col_storage = im2col(x.data(), ci, geom);
                    &col_storage
                }
            }
        } else {
            &[]
        };
        let dx = need[0].then(|| {
            let mut dx = Array::zeros(x.shape());
            if geom.is_pointwise() {
                gemm(ci, co, s, w.data(), true, g.data(), false, dx.data_mut(), false);
            } else {
                let mut dcol = vec![0.0; rows * s];
                gemm(rows, co, s, w.data(), true, g.data(), false, &mut dcol, false);
                col2im(&dcol, ci, geom, dx.data_mut());
            }
            dx
        });
        let dw = need[1].then(|| {
            let mut dw = Array::zeros(w.shape());
            gemm(co, s, rows, g.data(), false, col, true, dw.data_mut(), false);
            dw
        });
        let db = need[2].then(|| {
            Array::from_vec(g.data().chunks(s).map(|c| c.iter().sum()).collect())
        });
        vec![dx, dw, db]
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Softmax {
    axis: usize,
}
impl Primitive for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let x = i[0];
        if self.axis >= x.ndim() {
            return Err(Error::contract(format!(
                "softmax axis {} out of range for shape {:?}",
                self.axis,
                x.shape()
            )));
        }
        let (outer, n, inner) = axis_split(x.shape(), self.axis);
        let mut out = x.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let at = |a: usize| (o * n + a) * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..n {
                    mx = mx.max(d[at(a)]);
                }
                let mut sum = 0.0;
                for a in 0..n {
                    let e = (d[at(a)] - mx).exp();
                    d[at(a)] = e;
                    sum += e;
                }
                for a in 0..n {
                    d[at(a)] /= sum;
                }
            }
        }
        Ok(out)
    }
    fn vjp(&self, _: &[&Array], y: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let (outer, n, inner) = axis_split(y.shape(), self.axis);
        let mut dx = Array::zeros(y.shape());
        let (yd, gd) = (y.data(), g.data());
        let dd = dx.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let at = |a: usize| (o * n + a) * inner + j;
                let dot: f64 = (0..n).map(|a| yd[at(a)] * gd[at(a)]).sum();
                for a in 0..n {
                    dd[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

/// Reduction over the leading axis of `[n, m]`, giving `[m]`.
struct ReduceRows(Reduce);
impl Primitive for ReduceRows {
    fn name(&self) -> &'static str {
        match self.0 {
            Reduce::Mean => "mean_rows",
            Reduce::Max => "max_rows",
        }
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (n, m) = dims2(self.name(), i[0])?;
        let x = i[0].data();
        let out = (0..m)
            .map(|j| match self.0 {
                Reduce::Mean => (0..n).map(|r| x[r * m + j]).sum::<f64>() / n as f64,
                Reduce::Max => (0..n).map(|r| x[r * m + j]).fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        Ok(Array::from_vec(out))
    }
    fn vjp(&self, i: &[&Array], y: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let (n, m) = (i[0].shape()[0], i[0].shape()[1]);
        let x = i[0].data();
        let mut dx = Array::zeros(&[n, m]);
        let d = dx.data_mut();
        for j in 0..m {
            match self.0 {
                Reduce::Mean => {
                    for r in 0..n {
                        d[r * m + j] = g.data()[j] / n as f64;
                    }
                }
                Reduce::Max => {
                    let r = (0..n).find(|&r| x[r * m + j] == y.data()[j]).unwrap_or(0);
                    d[r * m + j] = g.data()[j];
                }
            }
        }
        vec![Some(dx)]
    }
    fn kink_margin(&self, i: &[&Array]) -> f64 {
        if self.0 == Reduce::Mean {
            return f64::INFINITY;
        }
        let (n, m) = (i[0].shape()[0], i[0].shape()[1]);
        let x = i[0].data();
        (0..m)
            .map(|j| {
                let mut col: Vec<f64> = (0..n).map(|r| x[r * m + j]).collect();
                col.sort_by(|a, b| b.total_cmp(a));
                if n < 2 { f64::INFINITY } else { col[0] - col[1] }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sum of all entries, giving a one-element array.
struct SumAll;
impl Primitive for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        Ok(Array::scalar(i[0].sum()))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        vec![Some(Array::full(i[0].shape(), g.item()))]
    }
}

/// Sparse linear read-out over the trailing (flattened spatial) axis:
/// `x [c, s] -> [c, t]` with `out[:, j] = Σ w · x[:, idx]` over `taps[j]`.
/// Masked means and bilinear sampling are both expressed this way.
pub type Taps = Vec<Vec<(usize, f64)>>;

struct Gather(Rc<Taps>);
impl Primitive for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (c, s) = dims2("gather", i[0])?;
        if let Some(bad) = self.0.iter().flatten().find(|(idx, _)| *idx >= s) {
            return Err(Error::contract(format!(
                "gather index {} out of range for {s} cells",
                bad.0
            )));
        }
        let t = self.0.len();
        let x = i[0].data();
        let mut out = Array::zeros(&[c, t]);
        let o = out.data_mut();
        for ch in 0..c {
            let row = &x[ch * s..(ch + 1) * s];
            for (j, taps) in self.0.iter().enumerate() {
                o[ch * t + j] = taps.iter().map(|&(idx, w)| w * row[idx]).sum();
            }
        }
        Ok(out)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let (c, s) = (i[0].shape()[0], i[0].shape()[1]);
        let t = self.0.len();
        let mut dx = Array::zeros(&[c, s]);
        let d = dx.data_mut();
        for ch in 0..c {
            for (j, taps) in self.0.iter().enumerate() {
                let gv = g.data()[ch * t + j];
                for &(idx, w) in taps {
                    d[ch * s + idx] += w * gv;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct SelectRows(Vec<usize>);
impl Primitive for SelectRows {
    fn name(&self) -> &'static str {
        "select_rows"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let x = i[0];
        let n = x.shape()[0];
        if let Some(&r) = self.0.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!("select_rows: row {r} of {n}")));
        }
        let w = x.len() / n;
        let mut data = Vec::with_capacity(self.0.len() * w);
        for &r in &self.0 {
            data.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = self.0.len();
        Array::new(shape, data)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let n = i[0].shape()[0];
        let w = i[0].len() / n;
        let mut dx = Array::zeros(i[0].shape());
        for (k, &r) in self.0.iter().enumerate() {
            for (d, gv) in dx.data_mut()[r * w..(r + 1) * w]
                .iter_mut()
                .zip(&g.data()[k * w..(k + 1) * w])
            {
                *d += gv;
            }
        }
        vec![Some(dx)]
    }
}

/// Concatenation along the leading (channel) axis.
struct Concat;
impl Primitive for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let tail = &i[0].shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for a in i {
            if &a.shape()[1..] != tail {
                return Err(Error::shape("concat", i[0].shape(), a.shape()));
            }
            rows += a.shape()[0];
            data.extend_from_slice(a.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Array::new(shape, data)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let mut at = 0;
        i.iter()
            .map(|a| {
                let part = g.data()[at..at + a.len()].to_vec();
                at += a.len();
                Some(Array::new(a.shape().to_vec(), part).unwrap())
            })
            .collect()
    }
}

/// `grid [c, ..] * v [c]`, one factor per channel.
struct ScaleChannels;
impl Primitive for ScaleChannels {
    fn name(&self) -> &'static str {
        "scale_channels"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (x, v) = (i[0], i[1]);
        if v.shape() != [x.shape()[0]] {
            return Err(Error::shape("scale_channels", x.shape(), v.shape()));
        }
        let s = x.len() / x.shape()[0];
        let mut out = x.clone();
        for (chunk, &f) in out.data_mut().chunks_mut(s).zip(v.data()) {
            chunk.iter_mut().for_each(|a| *a *= f);
        }
        Ok(out)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, need: &[bool]) -> Vec<Option<Array>> {
        let (x, v) = (i[0], i[1]);
        let s = x.len() / x.shape()[0];
        let dx = need[0].then(|| {
            let mut dx = g.clone();
            for (chunk, &f) in dx.data_mut().chunks_mut(s).zip(v.data()) {
                chunk.iter_mut().for_each(|a| *a *= f);
            }
            dx
        });
        let dv = need[1].then(|| {
            Array::from_vec(
                g.data()
                    .chunks(s)
                    .zip(x.data().chunks(s))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect(),
            )
        });
        vec![dx, dv]
    }
}

/// `grid [c, cells..] * map [cells..]`, one gate per cell shared by all channels.
struct GateCells;
impl Primitive for GateCells {
    fn name(&self) -> &'static str {
        "gate_cells"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let (x, m) = (i[0], i[1]);
        if &x.shape()[1..] != m.shape() {
            return Err(Error::shape("gate_cells", x.shape(), m.shape()));
        }
        let s = m.len();
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(s) {
            for (a, &f) in chunk.iter_mut().zip(m.data()) {
                *a *= f;
            }
        }
        Ok(out)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, need: &[bool]) -> Vec<Option<Array>> {
        let (x, m) = (i[0], i[1]);
        let s = m.len();
        let dx = need[0].then(|| {
            let mut dx = g.clone();
            for chunk in dx.data_mut().chunks_mut(s) {
                for (a, &f) in chunk.iter_mut().zip(m.data()) {
                    *a *= f;
                }
            }
            dx
        });
        let dm = need[1].then(|| {
            let mut dm = Array::zeros(m.shape());
            for (gc, xc) in g.data().chunks(s).zip(x.data().chunks(s)) {
                for ((d, gv), xv) in dm.data_mut().iter_mut().zip(gc).zip(xc) {
                    *d += gv * xv;
                }
            }
            dm
        });
        vec![dx, dm]
    }
}

/// Folds the height axis into channels: `[c,x,y,z] -> [c·z, x, y]` with
/// output channel `c·Z + z`.
struct CollapseHeight;
impl Primitive for CollapseHeight {
    fn name(&self) -> &'static str {
        "collapse_height"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let &[c, x, y, z] = i[0].shape() else {
            return Err(Error::shape("collapse_height", i[0].shape(), &[0, 0, 0, 0]));
        };
        let src = i[0].data();
        let mut out = vec![0.0; src.len()];
        let xy = x * y;
        for ch in 0..c {
            for cell in 0..xy {
                for h in 0..z {
                    out[(ch * z + h) * xy + cell] = src[(ch * xy + cell) * z + h];
                }
            }
        }
        Array::new(vec![c * z, x, y], out)
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let &[c, x, y, z] = i[0].shape() else {
            unreachable!()
        };
        let xy = x * y;
        let mut dx = Array::zeros(i[0].shape());
        let d = dx.data_mut();
        for ch in 0..c {
            for cell in 0..xy {
                for h in 0..z {
                    d[(ch * xy + cell) * z + h] = g.data()[(ch * z + h) * xy + cell];
                }
            }
        }
        vec![Some(dx)]
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Scale(factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Relu, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Linear, &[x, w, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape(shape.to_vec()), &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Conv { spatial_rank: 2, columns: Default::default() }, &[x, w, b])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Conv { spatial_rank: 3, columns: Default::default() }, &[x, w, b])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Softmax { axis }, &[a])
    }

    pub fn reduce_rows(&mut self, a: Var, kind: Reduce) -> Result<Var> {
        self.apply(ReduceRows(kind), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(SumAll, &[a])
    }

    pub fn gather(&mut self, x: Var, taps: Taps) -> Result<Var> {
        self.apply(Gather(Rc::new(taps)), &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.apply(SelectRows(rows.to_vec()), &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero arrays"));
        }
        self.apply(Concat, parts)
    }

    pub fn scale_channels(&mut self, grid: Var, factors: Var) -> Result<Var> {
        self.apply(ScaleChannels, &[grid, factors])
    }

    pub fn gate_cells(&mut self, grid: Var, gate: Var) -> Result<Var> {
        self.apply(GateCells, &[grid, gate])
    }

    pub fn collapse_height(&mut self, grid: Var) -> Result<Var> {
        self.apply(CollapseHeight, &[grid])
    }

    /// Mean over the cells selected by `indices` of a `[c, s]` array, as `[c]`.
    pub fn masked_mean(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let w = if indices.is_empty() {
            0.0
        } else {
            1.0 / indices.len() as f64
        };
        let taps = vec![indices.iter().map(|&i| (i, w)).collect()];
        let c = self.shape(x)[0];
        let g = self.gather(x, taps)?;
        self.reshape(g, &[c])
    }
}
