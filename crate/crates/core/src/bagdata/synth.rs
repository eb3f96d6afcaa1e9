//! Synthetic slides with a planted cross-scale signal.
//!
//! Every slide carries the same number of coarse tokens shifted along
//! `s_coarse` and fine tokens shifted along `s_fine`. What differs between
//! classes is only whether a fine signal token sits under a coarse signal
//! token (a co-located pair). Fine signals always sit under distinct,
//! uniformly drawn parents and coarse signals always form a uniform set of
//! cells, so single-scale views of a slide are identically distributed
//! across classes.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::metrics::SurvivalRecord;
use crate::model::HeadKind;
use crate::numerics::Tensor;
use crate::pyramid::{build_bag, LevelGrid, TokenBag};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_slides: usize,
    /// `S`; the bag has `S + 1` levels.
    pub scales: usize,
    /// Grid ratio between consecutive levels.
    pub ratio: u32,
    pub coarse_rows: usize,
    pub coarse_cols: usize,
    pub dim: usize,
    pub sigma: f64,
    pub amplitude: f64,
    /// Coarse tokens shifted along `s_coarse` per slide.
    pub coarse_signals: usize,
    /// Level-1 tokens shifted along `s_fine` per slide.
    pub fine_signals: usize,
    pub task: HeadKind,
    pub censoring: f64,
    /// Log hazard per co-located pair.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_slides: 700,
            scales: 1,
            ratio: 2,
            coarse_rows: 4,
            coarse_cols: 4,
            dim: 64,
            sigma: 1.0,
            amplitude: 8.0,
            coarse_signals: 2,
            fine_signals: 2,
            task: HeadKind::Classification,
            censoring: 0.3,
            gamma: 0.7,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.amplitude >= 0.0) {
            return bad(format!("amplitude must be non-negative, got {}", self.amplitude));
        }
        if !(0.0..1.0).contains(&self.censoring) {
            return bad(format!("censoring rate must be in [0, 1), got {}", self.censoring));
        }
        if self.scales == 0 {
            return bad("planting needs at least two levels (S >= 1)".into());
        }
        if self.ratio == 0 || self.dim == 0 || self.n_slides == 0 {
            return bad("ratio, dim and n_slides must be positive".into());
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite".into());
        }
        if self.coarse_signals == 0 || self.fine_signals == 0 {
            return bad("signal token counts must be positive".into());
        }
        // negatives need disjoint parents for both signal kinds
        let cells = self.coarse_rows * self.coarse_cols;
        if self.coarse_signals + self.fine_signals > cells {
            return bad(format!(
                "a {}x{} coarse grid cannot hold {} coarse signals and {} fine signals under other parents",
                self.coarse_rows, self.coarse_cols, self.coarse_signals, self.fine_signals
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.scales + 1
    }

    /// Most co-located pairs a slide can carry.
    pub fn max_pairs(&self) -> usize {
        self.fine_signals.min(self.coarse_signals)
    }

    /// Orthonormal `(s_coarse, s_fine)` derived from the seed.
    pub fn signals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_for(self.seed, "signal", &[]);
        let mut draw = || -> Vec<f64> { (0..self.dim).map(|_| rng.sample(StandardNormal)).collect() };
        let normalize = |v: &mut Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        };
        let mut a = draw();
        normalize(&mut a);
        let mut b = draw();
        if self.dim > 1 {
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
        }
        normalize(&mut b);
        (a, b)
    }

    fn grids(&self) -> Vec<LevelGrid> {
        let mut grids = vec![LevelGrid::all_tissue(self.coarse_rows, self.coarse_cols, 1)];
        for _ in 0..self.scales {
            let prev = grids.last().unwrap();
            let m = self.ratio as usize;
            grids.push(LevelGrid::all_tissue(prev.rows * m, prev.cols * m, self.ratio));
        }
        grids
    }
}

/// Supervision target of a generated slide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Survival(SurvivalRecord),
}

/// A generated bag together with where the signal went.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSlide {
    pub bag: TokenBag,
    /// Level-0 token indices shifted along `s_coarse`.
    pub coarse_signal: Vec<usize>,
    /// Level-1 token indices shifted along `s_fine`.
    pub fine_signal: Vec<usize>,
}

impl PlantedSlide {
    /// Fine signal tokens whose parent carries the coarse signal.
    pub fn co_located_pairs(&self) -> usize {
        let parents = &self.bag.levels[1].parents;
        self.fine_signal
            .iter()
            .filter(|&&i| self.coarse_signal.contains(&parents[i]))
            .count()
    }
}

fn gaussian_table(rows: usize, dim: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * dim)
        .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

/// Draws one slide with exactly `pairs` co-located pairs.
pub fn generate_slide(spec: &SynthSpec, pairs: usize, rng: &mut ChaCha8Rng) -> Result<PlantedSlide> {
    spec.validate()?;
    if pairs > spec.max_pairs() {
        return Err(Error::Config(format!(
            "{pairs} co-located pairs requested, at most {} possible",
            spec.max_pairs()
        )));
    }
    let (s_coarse, s_fine) = spec.signals();
    let grids = spec.grids();
    let d = spec.dim;
    let mut tables: Vec<Vec<f64>> = grids
        .iter()
        .map(|g| gaussian_table(g.rows * g.cols, d, spec.sigma, rng))
        .collect();

    // fine signals go under distinct, uniformly drawn parents; the class only
    // decides whether coarse signals land on those parents or elsewhere
    let cells0 = spec.coarse_rows * spec.coarse_cols;
    let hosts = sample(rng, cells0, spec.fine_signals).into_vec();
    let others: Vec<usize> = (0..cells0).filter(|c| !hosts.contains(c)).collect();
    let mut coarse_signal: Vec<usize> = sample(rng, hosts.len(), pairs)
        .into_iter()
        .map(|i| hosts[i])
        .collect();
    coarse_signal.extend(
        sample(rng, others.len(), spec.coarse_signals - pairs)
            .into_iter()
            .map(|i| others[i]),
    );

    let m = spec.ratio as usize;
    let cols1 = spec.coarse_cols * m;
    let fine_signal: Vec<usize> = hosts
        .iter()
        .map(|&cell| {
            let j = rng.random_range(0..m * m);
            let (r, c) = (cell / spec.coarse_cols, cell % spec.coarse_cols);
            (r * m + j / m) * cols1 + c * m + j % m
        })
        .collect();

    let shift = |table: &mut [f64], cell: usize, dir: &[f64]| {
        for (x, s) in table[cell * d..(cell + 1) * d].iter_mut().zip(dir) {
            *x += spec.amplitude * s;
        }
    };
    for &c in &coarse_signal {
        shift(&mut tables[0], c, &s_coarse);
    }
    for &c in &fine_signal {
        shift(&mut tables[1], c, &s_fine);
    }

    // stored as f32 on disk; round here so files round-trip exactly
    let embeddings: Vec<Tensor> = tables
        .into_iter()
        .map(|t| {
            let rows = t.len() / d;
            Tensor::matrix(rows, d, t.into_iter().map(|v| v as f32 as f64).collect())
        })
        .collect::<Result<_>>()?;
    let bag = build_bag(&grids, &embeddings)?;
    // every cell is tissue, so token index equals the row-major cell index
    Ok(PlantedSlide {
        bag,
        coarse_signal,
        fine_signal,
    })
}

/// One slide of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub id: String,
    pub planted: PlantedSlide,
    pub target: Target,
}

/// Draws all `n_slides` slides. Classification alternates labels so classes
/// stay balanced; positives carry 1 to `max_pairs` pairs. Survival slides draw
/// the pair count uniformly from `0..=max_pairs` and an exponential event time
/// with rate `exp(gamma * pairs)`, censored with probability `censoring` at a
/// uniform fraction of the event time.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<SyntheticSlide>> {
    spec.validate()?;
    let width = spec.n_slides.to_string().len().max(4);
    (0..spec.n_slides)
        .map(|i| {
            let mut rng = rng_for(spec.seed, "slide", &[i as u64]);
            let (pairs, target) = match spec.task {
                HeadKind::Classification => {
                    let label = i % 2;
                    let pairs = if label == 1 { rng.random_range(1..=spec.max_pairs()) } else { 0 };
                    (pairs, Target::Class(label))
                }
                HeadKind::Survival => {
                    let pairs = rng.random_range(0..=spec.max_pairs());
                    let rate = (spec.gamma * pairs as f64).exp();
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let t = -u.ln() / rate;
                    let censored = rng.random::<f64>() < spec.censoring;
                    let frac: f64 = 1.0 - rng.random::<f64>();
                    let time = if censored { t * frac } else { t };
                    let time = time.max(f64::MIN_POSITIVE);
                    (pairs, Target::Survival(SurvivalRecord::new(time, !censored)?))
                }
            };
            let planted = generate_slide(spec, pairs, &mut rng)?;
            Ok(SyntheticSlide {
                id: format!("slide{i:0width$}"),
                planted,
                target,
            })
        })
        .collect()
}
