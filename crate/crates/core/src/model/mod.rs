//! The multi-scale network: one SSM block per level, coarse-to-fine parent
//! fusion, attention pooling over the finest level and a slide-level head.
//!
//! Levels are encoded in order `k = 0..=S`. Before level `k > 0` is encoded,
//! every token is concatenated with the encoded embedding of its parent from
//! level `k - 1` and projected back to `D` dimensions.

mod checkpoint;

use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::pyramid::TokenBag;
use crate::seed::rng_for;
use crate::ssm::{ssm_block_forward, uniform, SsmBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classification,
    Survival,
}

impl HeadKind {
    pub fn tag(self) -> u8 {
        match self {
            HeadKind::Classification => 0,
            HeadKind::Survival => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(HeadKind::Classification),
            1 => Ok(HeadKind::Survival),
            t => Err(Error::Checkpoint(format!("unknown head tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Classification => "classification",
            HeadKind::Survival => "survival",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(HeadKind::Classification),
            "survival" => Ok(HeadKind::Survival),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Model dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// `D`
    pub d_model: usize,
    /// `E`
    pub inner: usize,
    /// `N`
    pub state: usize,
    /// Number of levels, `S + 1`.
    pub levels: usize,
    /// `C`; unused by the survival head.
    pub classes: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(d_model: usize, levels: usize, head: HeadKind) -> Self {
        Self {
            d_model,
            inner: 2 * d_model,
            state: 16,
            levels,
            classes: 2,
            head,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.inner == 0 || self.state == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.levels == 0 || self.levels > 255 {
            return Err(Error::Config(format!("level count {} out of range", self.levels)));
        }
        if self.head == HeadKind::Classification && self.classes < 2 {
            return Err(Error::Config("classification needs at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Affine map `[x ‖ c] ↦ [x ‖ c]·W + b` from `2D` to `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion<P> {
    /// `2D × D`
    pub w: P,
    /// `D`
    pub b: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head<P> {
    Classifier {
        /// `D × C`
        w: P,
        /// `C`
        b: P,
    },
    Cox {
        /// `D`
        beta: P,
    },
}

/// All trainable parameters, generic over storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Marble<P> {
    pub blocks: Vec<SsmBlock<P>>,
    /// One projection per level `k = 1..=S`.
    pub fuse: Vec<Fusion<P>>,
    /// `D`
    pub pool_w: P,
    pub head: Head<P>,
}

pub type MarbleParams = Marble<Tensor>;

impl<P> Marble<P> {
    pub fn num_levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            Head::Classifier { .. } => HeadKind::Classification,
            Head::Cox { .. } => HeadKind::Survival,
        }
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (k, block) in self.blocks.iter().enumerate() {
            for (name, p) in SsmBlock::<P>::FIELDS.iter().zip(block.fields()) {
                out.push((format!("block{k}.{name}"), p));
            }
        }
        for (i, f) in self.fuse.iter().enumerate() {
            out.push((format!("fuse{}.w", i + 1), &f.w));
            out.push((format!("fuse{}.b", i + 1), &f.b));
        }
        out.push(("pool_w".to_string(), &self.pool_w));
        match &self.head {
            Head::Classifier { w, b } => {
                out.push(("cls_w".to_string(), w));
                out.push(("cls_b".to_string(), b));
            }
            Head::Cox { beta } => out.push(("cox_beta".to_string(), beta)),
        }
        out
    }

    /// Mutable references in the same order as [`Marble::named`].
    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = Vec::new();
        for block in &mut self.blocks {
            out.extend(block.fields_mut());
        }
        for f in &mut self.fuse {
            out.push(&mut f.w);
            out.push(&mut f.b);
        }
        out.push(&mut self.pool_w);
        match &mut self.head {
            Head::Classifier { w, b } => {
                out.push(w);
                out.push(b);
            }
            Head::Cox { beta } => out.push(beta),
        }
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Marble<Q> {
        Marble {
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            fuse: self
                .fuse
                .iter()
                .map(|x| Fusion {
                    w: f(&x.w),
                    b: f(&x.b),
                })
                .collect(),
            pool_w: f(&self.pool_w),
            head: match &self.head {
                Head::Classifier { w, b } => Head::Classifier { w: f(w), b: f(b) },
                Head::Cox { beta } => Head::Cox { beta: f(beta) },
            },
        }
    }
}

impl MarbleParams {
    /// Fresh parameters drawn from the `init` stream of `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "init", &[]);
        Ok(Self::init_with(config, &mut rng))
    }

    pub fn init_with(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let blocks = (0..config.levels)
            .map(|_| crate::ssm::SsmBlockParams::init(d, config.inner, config.state, rng))
            .collect();
        let fb = 1.0 / ((2 * d) as f64).sqrt();
        let fuse = (1..config.levels)
            .map(|_| Fusion {
                w: uniform(rng, &[2 * d, d], fb),
                b: uniform(rng, &[d], fb),
            })
            .collect();
        let db = 1.0 / (d as f64).sqrt();
        let pool_w = uniform(rng, &[d], db);
        let head = match config.head {
            HeadKind::Classification => Head::Classifier {
                w: uniform(rng, &[d, config.classes], db),
                b: Tensor::zeros(&[config.classes]),
            },
            HeadKind::Survival => Head::Cox {
                beta: uniform(rng, &[d], db),
            },
        };
        Self {
            blocks,
            fuse,
            pool_w,
            head,
        }
    }

    pub fn d_model(&self) -> usize {
        self.pool_w.len()
    }

    /// `(D, E, N)` of the level-0 block.
    pub fn block_dims(&self) -> (usize, usize, usize) {
        self.blocks[0].dims()
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Marble<Var> {
        self.map(|t| tape.leaf(t.clone().with_grad()))
    }

    /// Squared ℓ2 norm of all parameters.
    pub fn sq_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sq_norm()).sum()
    }
}

/// `φ([x_i ‖ y_prev[parents[i]]])` for every fine token.
pub fn fuse_level(
    tape: &mut Tape,
    x: Var,
    y_prev: Var,
    parents: &[usize],
    phi: &Fusion<Var>,
) -> Result<Var> {
    let context = tape.gather_rows(y_prev, parents)?;
    let joined = tape.concat_last_dim(x, context)?;
    let projected = tape.matmul(joined, phi.w)?;
    tape.add_row(projected, phi.b)
}

/// Softmax attention over rows of `y[T×D]` scored by `w`; returns the pooled
/// vector `z[D]` and the weights `[T]`.
pub fn attention_pool(tape: &mut Tape, y: Var, w: Var) -> Result<(Var, Var)> {
    let (t, d) = tape.value(y).dims2("attention_pool")?;
    if t == 0 {
        return Err(Error::dim("attention_pool", "no tokens to pool"));
    }
    let w_col = tape.reshape(w, &[d, 1])?;
    let scores = tape.matmul(y, w_col)?;
    let scores = tape.reshape(scores, &[t])?;
    let weights = tape.softmax_1d(scores)?;
    let w_row = tape.reshape(weights, &[1, t])?;
    let z = tape.matmul(w_row, y)?;
    let z = tape.reshape(z, &[d])?;
    Ok((z, weights))
}

/// `logits = z·W + b`.
pub fn classify(tape: &mut Tape, z: Var, w: Var, b: Var) -> Result<Var> {
    let d = tape.value(z).len();
    let z_row = tape.reshape(z, &[1, d])?;
    let logits = tape.matmul(z_row, w)?;
    let c = tape.value(logits).len();
    let logits = tape.reshape(logits, &[c])?;
    tape.add(logits, b)
}

/// `r = βᵀ z`.
pub fn risk_score(tape: &mut Tape, z: Var, beta: Var) -> Result<Var> {
    let prod = tape.mul(z, beta)?;
    tape.sum(prod)
}

/// Tape handles produced by one slide forward pass.
#[derive(Clone, Debug)]
pub struct SlideVars {
    pub levels: Vec<Var>,
    pub pooled: Var,
    pub pool_weights: Var,
    /// Logits `[C]` or the scalar risk.
    pub head: Var,
}

/// Encodes a bag on `tape` with bound parameters.
pub fn encode_slide_on(tape: &mut Tape, bag: &TokenBag, params: &Marble<Var>) -> Result<SlideVars> {
    if bag.num_levels() != params.num_levels() {
        return Err(Error::dim(
            "encode_slide",
            format!("bag has {} levels, model expects {}", bag.num_levels(), params.num_levels()),
        ));
    }
    let d = tape.value(params.pool_w).len();
    if bag.dim != d {
        return Err(Error::dim(
            "encode_slide",
            format!("bag embeddings have dim {}, model expects {d}", bag.dim),
        ));
    }
    if let Some(k) = bag.levels.iter().position(|l| l.is_empty()) {
        return Err(Error::dim("encode_slide", format!("level {k} has no tokens")));
    }

    let mut outputs: Vec<Var> = Vec::with_capacity(bag.num_levels());
    for (k, level) in bag.levels.iter().enumerate() {
        let x = tape.constant(level.embeddings.clone());
        let input = match outputs.last() {
            None => x,
            Some(&y_prev) => fuse_level(tape, x, y_prev, &level.parents, &params.fuse[k - 1])?,
        };
        outputs.push(ssm_block_forward(tape, input, &params.blocks[k])?);
    }
    let finest = *outputs.last().expect("at least one level");
    let (pooled, pool_weights) = attention_pool(tape, finest, params.pool_w)?;
    let head = match &params.head {
        Head::Classifier { w, b } => classify(tape, pooled, *w, *b)?,
        Head::Cox { beta } => risk_score(tape, pooled, *beta)?,
    };
    Ok(SlideVars {
        levels: outputs,
        pooled,
        pool_weights,
        head,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Logits(Tensor),
    Risk(f64),
}

/// Values of one slide forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideOutput {
    /// `Y^(k)` for every level.
    pub levels: Vec<Tensor>,
    pub pooled: Tensor,
    pub pool_weights: Tensor,
    pub head: HeadOutput,
}

/// Inference forward pass.
pub fn encode_slide(bag: &TokenBag, params: &MarbleParams) -> Result<SlideOutput> {
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape);
    let vars = encode_slide_on(&mut tape, bag, &bound)?;
    let head = match params.head_kind() {
        HeadKind::Classification => HeadOutput::Logits(tape.value(vars.head).clone()),
        HeadKind::Survival => HeadOutput::Risk(tape.value(vars.head).item()?),
    };
    Ok(SlideOutput {
        levels: vars.levels.iter().map(|v| tape.value(*v).clone()).collect(),
        pooled: tape.value(vars.pooled).clone(),
        pool_weights: tape.value(vars.pool_weights).clone(),
        head,
    })
}
