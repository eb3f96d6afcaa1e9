use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_nt_into, matmul_tn_into};
use crate::numerics::{Function, Tape, Tensor, Var};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct MatMul;

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        inputs[0].matmul(inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = a.dims2("matmul")?;
        let (_, n) = b.dims2("matmul")?;
        let mut ga = vec![0.0; m * k];
        matmul_nt_into(g.data(), b.data(), &mut ga, m, n, k);
        let mut gb = vec![0.0; k * n];
        matmul_tn_into(a.data(), g.data(), &mut gb, m, k, n);
        Ok(vec![
            Some(Tensor::matrix(m, k, ga)?),
            Some(Tensor::matrix(k, n, gb)?),
        ])
    }
}

struct Add;

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        same_shape("add", inputs[0], inputs[1])?;
        Ok(inputs[0].zip_map(inputs[1], |a, b| a + b))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

/// `a[m×n] + b[n]` broadcast over rows.
struct AddRow;

impl Function for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let (_, n) = a.dims2("add_row")?;
        if b.shape() != [n] {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} does not match {:?}", b.shape(), a.shape()),
            ));
        }
        let mut out = a.clone();
        out.set_requires_grad(false);
        for row in out.data_mut().chunks_mut(n) {
            for (x, bv) in row.iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let n = inputs[1].len();
        let mut gb = vec![0.0; n];
        for row in g.data().chunks(n) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Ok(vec![Some(g.clone()), Some(Tensor::vector(gb))])
    }
}

struct Mul;

impl Function for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        same_shape("mul", inputs[0], inputs[1])?;
        Ok(inputs[0].zip_map(inputs[1], |a, b| a * b))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![
            Some(g.zip_map(inputs[1], |g, b| g * b)),
            Some(g.zip_map(inputs[0], |g, a| g * a)),
        ])
    }
}

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let c = self.0;
        Ok(inputs[0].map(|x| c * x))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let c = self.0;
        Ok(vec![Some(g.map(|x| c * x))])
    }
}

/// Elementwise unary functions. Backward is expressed through the input and
/// the cached output.
#[derive(Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Softplus,
    Silu,
}

impl Function for Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Silu => "silu",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let x = inputs[0];
        Ok(match self {
            Unary::Exp => x.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            Unary::Softplus => x.map(softplus),
            Unary::Silu => x.map(|v| v * sigmoid(v)),
        })
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let local = match self {
            Unary::Exp => out.clone(),
            Unary::Log => x.map(|v| 1.0 / v),
            Unary::Softplus => x.map(sigmoid),
            Unary::Silu => x.map(|v| {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            }),
        };
        Ok(vec![Some(g.zip_map(&local, |g, l| g * l))])
    }
}

struct ConcatLast {
    left_cols: usize,
}

impl Function for ConcatLast {
    fn name(&self) -> &'static str {
        "concat_last_dim"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let (m, p) = inputs[0].dims2("concat_last_dim")?;
        let (m2, q) = inputs[1].dims2("concat_last_dim")?;
        if m != m2 {
            return Err(Error::dim(
                "concat_last_dim",
                format!("row counts {m} and {m2} differ"),
            ));
        }
        self.left_cols = p;
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(inputs[0].row(i));
            out.extend_from_slice(inputs[1].row(i));
        }
        Tensor::matrix(m, p + q, out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (m, pq) = g.dims2("concat_last_dim")?;
        let p = self.left_cols;
        let q = pq - p;
        let mut ga = Vec::with_capacity(m * p);
        let mut gb = Vec::with_capacity(m * q);
        for i in 0..m {
            let row = g.row(i);
            ga.extend_from_slice(&row[..p]);
            gb.extend_from_slice(&row[p..]);
        }
        debug_assert_eq!(inputs[1].len(), m * q);
        Ok(vec![
            Some(Tensor::matrix(m, p, ga)?),
            Some(Tensor::matrix(m, q, gb)?),
        ])
    }
}

struct GatherRows {
    idx: Vec<usize>,
}

impl Function for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let (rows, cols) = inputs[0].dims2("gather_rows")?;
        let mut out = Vec::with_capacity(self.idx.len() * cols);
        for &i in &self.idx {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(inputs[0].row(i));
        }
        Tensor::matrix(self.idx.len(), cols, out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (rows, cols) = inputs[0].dims2("gather_rows")?;
        let mut acc = vec![0.0; rows * cols];
        for (j, &i) in self.idx.iter().enumerate() {
            for (a, v) in acc[i * cols..(i + 1) * cols].iter_mut().zip(g.row(j)) {
                *a += v;
            }
        }
        Ok(vec![Some(Tensor::matrix(rows, cols, acc)?)])
    }
}

struct Sum {
    mean: bool,
}

impl Function for Sum {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let x = inputs[0];
        if x.is_empty() {
            return Err(Error::dim(self.name(), "empty input"));
        }
        let s = x.sum();
        Ok(Tensor::scalar(if self.mean { s / x.len() as f64 } else { s }))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let mut v = g.item()?;
        if self.mean {
            v /= x.len() as f64;
        }
        Ok(vec![Some(Tensor::full(x.shape(), v))])
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward_row(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}

struct Softmax1d;

impl Function for Softmax1d {
    fn name(&self) -> &'static str {
        "softmax_1d"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let v = inputs[0];
        if v.ndim() != 1 || v.is_empty() {
            return Err(Error::dim(
                "softmax_1d",
                format!("expected a non-empty vector, got shape {:?}", v.shape()),
            ));
        }
        let mut out = v.data().to_vec();
        softmax_in_place(&mut out);
        Ok(Tensor::vector(out))
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut gx = vec![0.0; out.len()];
        softmax_backward_row(out.data(), g.data(), &mut gx);
        Ok(vec![Some(Tensor::vector(gx))])
    }
}

struct SoftmaxRows;

impl Function for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let (m, n) = inputs[0].dims2("softmax_rows")?;
        if n == 0 {
            return Err(Error::dim("softmax_rows", "zero-width rows"));
        }
        let mut out = inputs[0].data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        Tensor::matrix(m, n, out)
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (m, n) = out.dims2("softmax_rows")?;
        let mut gx = vec![0.0; m * n];
        for i in 0..m {
            softmax_backward_row(out.row(i), g.row(i), &mut gx[i * n..(i + 1) * n]);
        }
        Ok(vec![Some(Tensor::matrix(m, n, gx)?)])
    }
}

struct Transpose;

impl Function for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        inputs[0].transpose()
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.transpose()?)])
    }
}

struct Reshape {
    shape: Vec<usize>,
}

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), inputs[0].data().to_vec())
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::new(
            inputs[0].shape().to_vec(),
            g.data().to_vec(),
        )?)])
    }
}

/// Concatenates one-element tensors into a vector.
struct StackScalars;

impl Function for StackScalars {
    fn name(&self) -> &'static str {
        "stack_scalars"
    }

    fn forward(&mut self, inputs: &[&Tensor], _record: bool) -> Result<Tensor> {
        let values = inputs.iter().map(|t| t.item()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::vector(values))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        inputs
            .iter()
            .zip(g.data())
            .map(|(t, &v)| Ok(Some(Tensor::new(t.shape().to_vec(), vec![v])?)))
            .collect()
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Add, &[a, b])
    }

    /// Adds the vector `bias` to every row of the matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(AddRow, &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Scale(c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Unary::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Unary::Log, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Unary::Softplus, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(Unary::Silu, &[a])
    }

    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(ConcatLast { left_cols: 0 }, &[a, b])
    }

    /// Rows `t[idx[j]]`; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, t: Var, idx: &[usize]) -> Result<Var> {
        self.apply(GatherRows { idx: idx.to_vec() }, &[t])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Sum { mean: false }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Sum { mean: true }, &[a])
    }

    pub fn softmax_1d(&mut self, v: Var) -> Result<Var> {
        self.apply(Softmax1d, &[v])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(SoftmaxRows, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn stack_scalars(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::dim("stack_scalars", "no inputs"));
        }
        self.apply(StackScalars, items)
    }

    /// Sum of squares of every element in `vars`, as one scalar.
    pub fn sq_norm(&mut self, vars: &[Var]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &v in vars {
            let sq = self.mul(v, v)?;
            let s = self.sum(sq)?;
            total = Some(match total {
                Some(t) => self.add(t, s)?,
                None => s,
            });
        }
        total.ok_or_else(|| Error::dim("sq_norm", "no inputs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn selection_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn scalar_activations() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let s = tape.silu(z).unwrap();
        let p = tape.softplus(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0]);
        assert!((tape.value(p).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((tape.value(p).data()[0] - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let g = tape.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 1.0, 3.0]);
        let loss = tape.sum(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(t).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.gather_rows(t, &[2]),
            Err(Error::Index { index: 2, len: 2, .. })
        ));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(t), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn exp_overflow_fails_fast() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(tape.exp(t), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let sa = tape.softmax_1d(a).unwrap();
        assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);

        let c = 17.25;
        let b = tape.constant(Tensor::vector(vec![c, c, c]));
        let sb = tape.softmax_1d(b).unwrap();
        for v in tape.value(sb).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // exp(-1000) is far below f64 resolution next to 1
        let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let sbig = tape.softmax_1d(big).unwrap();
        let out = tape.value(sbig).data();
        assert_eq!(out[0], 1.0);
        assert!(out[1] >= 0.0 && out[1] < 1e-300);
    }

    #[test]
    fn softmax_of_empty_is_dimension_error() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::vector(vec![]));
        assert!(matches!(tape.softmax_1d(e), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]).with_grad());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        let y = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_records_no_ops() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 4.0);
        assert!(!tape.requires_grad(y));
        assert!(tape.backward(y).is_err());
    }
}
