//! Diagonal selective state-space block with a linear-time scan.
//!
//! Per channel `e` and state `n`, with `h_0 = 0`:
//!
//! ```text
//! h[t,e,n] = exp(delta[t,e] * a[e]) * h[t-1,e,n] + delta[t,e] * B[t,n] * u[t,e]
//! y[t,e]   = sum_n C[t,n] * h[t,e,n] + d[e] * u[t,e]
//! ```
//!
//! `a = -exp(a_log)` is strictly negative, so every step decays the state.
//! The block wraps the scan with input, gate and output projections and a
//! residual connection. A single-layer softmax self-attention encoder is
//! provided as the quadratic-cost reference for timing.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Function, Tape, Tensor, Var};

/// Selective scan as one tape primitive.
///
/// Inputs: `u[T×E]`, `delta[T×E]`, `B[T×N]`, `C[T×N]`, `a[E]`, `d[E]`.
struct SelectiveScan {
    /// States after each step, `[T][E][N]`, kept only when recording.
    states: Vec<f64>,
}

fn scan_dims(inputs: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let (t, e) = inputs[0].dims2("selective_scan")?;
    let (t_n, n) = inputs[2].dims2("selective_scan")?;
    let ok = inputs[1].shape() == [t, e]
        && t_n == t
        && inputs[3].shape() == [t, n]
        && inputs[4].shape() == [e]
        && inputs[5].shape() == [e];
    if !ok {
        let shapes: Vec<&[usize]> = inputs.iter().map(|x| x.shape()).collect();
        return Err(Error::dim("selective_scan", format!("inconsistent shapes {shapes:?}")));
    }
    if t == 0 {
        return Err(Error::dim("selective_scan", "sequence length is zero"));
    }
    Ok((t, e, n))
}

impl Function for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn forward(&mut self, inputs: &[&Tensor], record: bool) -> Result<Tensor> {
        let (len, e_dim, n_dim) = scan_dims(inputs)?;
        let (u, delta, b, c, a, d) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        if let Some(bad) = delta.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "selective_scan",
                detail: format!("step size {bad} is not positive"),
            });
        }
        let mut h = vec![0.0; e_dim * n_dim];
        let mut y = vec![0.0; len * e_dim];
        if record {
            self.states = Vec::with_capacity(len * e_dim * n_dim);
        }
        for t in 0..len {
            let b_t = &b[t * n_dim..(t + 1) * n_dim];
            let c_t = &c[t * n_dim..(t + 1) * n_dim];
            for e in 0..e_dim {
                let dt = delta[t * e_dim + e];
                let u_te = u[t * e_dim + e];
                let decay = (dt * a[e]).exp();
                let drive = dt * u_te;
                let h_e = &mut h[e * n_dim..(e + 1) * n_dim];
                let mut acc = 0.0;
                for ((hv, &bv), &cv) in h_e.iter_mut().zip(b_t).zip(c_t) {
                    *hv = decay * *hv + drive * bv;
                    acc += cv * *hv;
                }
                y[t * e_dim + e] = acc + d[e] * u_te;
            }
            if record {
                self.states.extend_from_slice(&h);
            }
        }
        Tensor::matrix(len, e_dim, y)
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gy: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (len, e_dim, n_dim) = scan_dims(inputs)?;
        let (u, delta, b, c, a, d) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        let gy = gy.data();
        let mut gu = vec![0.0; len * e_dim];
        let mut gdelta = vec![0.0; len * e_dim];
        let mut gb = vec![0.0; len * n_dim];
        let mut gc = vec![0.0; len * n_dim];
        let mut ga = vec![0.0; e_dim];
        let mut gd = vec![0.0; e_dim];
        // dL/dh_t accumulated from the future
        let mut gh = vec![0.0; e_dim * n_dim];
        let zeros = vec![0.0; e_dim * n_dim];
        let stride = e_dim * n_dim;

        for t in (0..len).rev() {
            let h_t = &self.states[t * stride..(t + 1) * stride];
            let h_prev = if t == 0 {
                &zeros[..]
            } else {
                &self.states[(t - 1) * stride..t * stride]
            };
            let b_t = &b[t * n_dim..(t + 1) * n_dim];
            let c_t = &c[t * n_dim..(t + 1) * n_dim];
            for e in 0..e_dim {
                let i = t * e_dim + e;
                let g = gy[i];
                let dt = delta[i];
                let u_te = u[i];
                let decay = (dt * a[e]).exp();
                let drive = dt * u_te;
                gd[e] += g * u_te;
                gu[i] += g * d[e];

                let gh_e = &mut gh[e * n_dim..(e + 1) * n_dim];
                let h_te = &h_t[e * n_dim..(e + 1) * n_dim];
                let hp_e = &h_prev[e * n_dim..(e + 1) * n_dim];
                let mut g_decay = 0.0;
                let mut g_drive = 0.0;
                for n in 0..n_dim {
                    gh_e[n] += g * c_t[n];
                    gc[t * n_dim + n] += g * h_te[n];
                    g_decay += gh_e[n] * hp_e[n];
                    g_drive += gh_e[n] * b_t[n];
                    gb[t * n_dim + n] += gh_e[n] * drive;
                    gh_e[n] *= decay;
                }
                gdelta[i] += g_drive * u_te + g_decay * a[e] * decay;
                gu[i] += g_drive * dt;
                ga[e] += g_decay * dt * decay;
            }
        }
        Ok(vec![
            Some(Tensor::matrix(len, e_dim, gu)?),
            Some(Tensor::matrix(len, e_dim, gdelta)?),
            Some(Tensor::matrix(len, n_dim, gb)?),
            Some(Tensor::matrix(len, n_dim, gc)?),
            Some(Tensor::vector(ga)),
            Some(Tensor::vector(gd)),
        ])
    }
}

impl Tape {
    /// Linear-time selective scan; see the module docs for the recurrence.
    pub fn selective_scan(&mut self, u: Var, delta: Var, b: Var, c: Var, a: Var, d: Var) -> Result<Var> {
        self.apply(SelectiveScan { states: Vec::new() }, &[u, delta, b, c, a, d])
    }
}

/// Parameters of one selective SSM block, generic over storage so the same
/// layout serves owned tensors and tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmBlock<P> {
    /// `D × E`
    pub w_in: P,
    /// `D × E`
    pub w_gate: P,
    /// `E × E`
    pub w_delta: P,
    /// `E`
    pub b_delta: P,
    /// `E × N`
    pub w_b: P,
    /// `E × N`
    pub w_c: P,
    /// `E`; the decay rate is `-exp(a_log)`.
    pub a_log: P,
    /// `E`
    pub d_skip: P,
    /// `E × D`
    pub w_out: P,
}

pub type SsmBlockParams = SsmBlock<Tensor>;

impl<P> SsmBlock<P> {
    pub const FIELDS: [&'static str; 9] = [
        "w_in", "w_gate", "w_delta", "b_delta", "w_b", "w_c", "a_log", "d_skip", "w_out",
    ];

    pub fn fields(&self) -> [&P; 9] {
        [
            &self.w_in,
            &self.w_gate,
            &self.w_delta,
            &self.b_delta,
            &self.w_b,
            &self.w_c,
            &self.a_log,
            &self.d_skip,
            &self.w_out,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut P; 9] {
        [
            &mut self.w_in,
            &mut self.w_gate,
            &mut self.w_delta,
            &mut self.b_delta,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.a_log,
            &mut self.d_skip,
            &mut self.w_out,
        ]
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SsmBlock<Q> {
        SsmBlock {
            w_in: f(&self.w_in),
            w_gate: f(&self.w_gate),
            w_delta: f(&self.w_delta),
            b_delta: f(&self.b_delta),
            w_b: f(&self.w_b),
            w_c: f(&self.w_c),
            a_log: f(&self.a_log),
            d_skip: f(&self.d_skip),
            w_out: f(&self.w_out),
        }
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl SsmBlockParams {
    /// Projections uniform in `±1/sqrt(fan_in)`; step sizes log-uniform in
    /// `[0.01, 0.1]` after softplus; decay rates log-spaced over `[1, N]`.
    pub fn init(d_model: usize, inner: usize, state: usize, rng: &mut ChaCha8Rng) -> Self {
        let bd = 1.0 / (d_model as f64).sqrt();
        let be = 1.0 / (inner as f64).sqrt();
        let b_delta = (0..inner)
            .map(|_| {
                let log_dt = rng.random_range(0.01f64.ln()..0.1f64.ln());
                let dt = log_dt.exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let a_log = (0..inner)
            .map(|e| {
                let frac = if inner > 1 { e as f64 / (inner - 1) as f64 } else { 0.0 };
                // -A = exp(frac * ln N), so a_log = frac * ln N
                frac * (state as f64).ln()
            })
            .collect();
        Self {
            w_in: uniform(rng, &[d_model, inner], bd),
            w_gate: uniform(rng, &[d_model, inner], bd),
            w_delta: uniform(rng, &[inner, inner], be),
            b_delta: Tensor::vector(b_delta),
            w_b: uniform(rng, &[inner, state], be),
            w_c: uniform(rng, &[inner, state], be),
            a_log: Tensor::vector(a_log),
            d_skip: Tensor::ones(&[inner]),
            w_out: uniform(rng, &[inner, d_model], be),
        }
    }

    /// `(D, E, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.w_in.shape();
        (s[0], s[1], self.w_b.shape()[1])
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> SsmBlock<Var> {
        self.map(|t| tape.leaf(t.clone().with_grad()))
    }
}

/// Residual selective SSM block over `x[T×D]`.
pub fn ssm_block_forward(tape: &mut Tape, x: Var, p: &SsmBlock<Var>) -> Result<Var> {
    let u = tape.matmul(x, p.w_in)?;
    let z = tape.matmul(x, p.w_gate)?;
    let pre = tape.matmul(u, p.w_delta)?;
    let pre = tape.add_row(pre, p.b_delta)?;
    let delta = tape.softplus(pre)?;
    let b = tape.matmul(u, p.w_b)?;
    let c = tape.matmul(u, p.w_c)?;
    let a = tape.exp(p.a_log)?;
    let a = tape.scale(a, -1.0)?;
    let s = tape.selective_scan(u, delta, b, c, a, p.d_skip)?;
    let gate = tape.silu(z)?;
    let gated = tape.mul(s, gate)?;
    let o = tape.matmul(gated, p.w_out)?;
    tape.add(x, o)
}

/// Inference-only block evaluation on owned tensors.
pub fn ssm_block_apply(x: &Tensor, p: &SsmBlockParams) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.leaf(x.clone());
    let pv = p.bind(&mut tape);
    let y = ssm_block_forward(&mut tape, xv, &pv)?;
    Ok(tape.value(y).clone())
}

/// Square projections of the single-layer attention reference.
#[derive(Clone, Debug)]
pub struct AttentionRefParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttentionRefParams {
    pub fn init(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let b = 1.0 / (d_model as f64).sqrt();
        Self {
            w_q: uniform(rng, &[d_model, d_model], b),
            w_k: uniform(rng, &[d_model, d_model], b),
            w_v: uniform(rng, &[d_model, d_model], b),
            w_o: uniform(rng, &[d_model, d_model], b),
        }
    }
}

/// `x + softmax(Q Kᵀ / sqrt(D)) V W_o`, quadratic in `T`.
pub fn attention_ref_forward(tape: &mut Tape, x: Var, p: &AttentionRefParams) -> Result<Var> {
    let d = p.w_q.shape()[0];
    let (wq, wk, wv, wo) = (
        tape.leaf(p.w_q.clone()),
        tape.leaf(p.w_k.clone()),
        tape.leaf(p.w_v.clone()),
        tape.leaf(p.w_o.clone()),
    );
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_rows(scores)?;
    let mixed = tape.matmul(attn, v)?;
    let o = tape.matmul(mixed, wo)?;
    tape.add(x, o)
}

/// Inference-only [`attention_ref_forward`] that materialises the score
/// matrix a block of rows at a time: same `O(T²)` work, `O(T)` memory.
pub fn attention_ref_apply(x: &Tensor, p: &AttentionRefParams) -> Result<Tensor> {
    const BLOCK: usize = 64;
    let (t, d) = x.dims2("attention_ref_apply")?;
    let q = x.matmul(&p.w_q)?;
    let kt = x.matmul(&p.w_k)?.transpose()?;
    let v = x.matmul(&p.w_v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut mixed = Vec::with_capacity(t * d);
    for start in (0..t).step_by(BLOCK) {
        let end = (start + BLOCK).min(t);
        let qb = Tensor::matrix(end - start, d, q.data()[start * d..end * d].to_vec())?;
        let mut scores = qb.matmul(&kt)?;
        for row in scores.data_mut().chunks_exact_mut(t) {
            row.iter_mut().for_each(|s| *s *= scale);
            crate::numerics::softmax_in_place(row);
        }
        mixed.extend_from_slice(scores.matmul(&v)?.data());
    }
    let o = Tensor::matrix(t, d, mixed)?.matmul(&p.w_o)?;
    Ok(x.zip_map(&o, |a, b| a + b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Scan,
    Attention,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Scan => "scan",
            EncoderKind::Attention => "attention",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(EncoderKind::Scan),
            "attention" => Ok(EncoderKind::Attention),
            other => Err(Error::Argument(format!("unknown encoder {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub encoder: EncoderKind,
    pub tokens: usize,
    pub median_ms: f64,
    /// `time(T) / time(previous T)`; absent for the first row.
    pub ratio_vs_prev: Option<f64>,
}

/// Median wall-clock of one inference forward pass per sequence length.
pub fn scaling_bench(
    kind: EncoderKind,
    d_model: usize,
    state: usize,
    sizes: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repetitions < 3 {
        return Err(Error::Argument(format!("need at least 3 repetitions, got {repetitions}")));
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Argument(format!("sizes must be positive and strictly increasing: {sizes:?}")));
    }
    let mut rng = crate::seed::rng_for(seed, "bench", &[]);
    let ssm = SsmBlockParams::init(d_model, 2 * d_model, state, &mut rng);
    let attn = AttentionRefParams::init(d_model, &mut rng);

    let mut rows: Vec<BenchRow> = Vec::with_capacity(sizes.len());
    for &t in sizes {
        let x = uniform(&mut rng, &[t, d_model], 1.0);
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            let y = match kind {
                EncoderKind::Scan => ssm_block_apply(&x, &ssm)?,
                EncoderKind::Attention => attention_ref_apply(&x, &attn)?,
            };
            std::hint::black_box(&y);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        let ratio = rows.last().map(|prev| median / prev.median_ms);
        rows.push(BenchRow {
            encoder: kind,
            tokens: t,
            median_ms: median,
            ratio_vs_prev: ratio,
        });
    }
    Ok(rows)
}
