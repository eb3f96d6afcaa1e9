//! Brute-force oracles and random instance generators shared by the
//! integration tests.
#![allow(dead_code)]

use marble::metrics::SurvivalRecord;
use marble::numerics::{Tape, Tensor};
use marble::pyramid::{build_bag, LevelGrid, TokenBag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random pyramid with random tissue masks; retried until no level is empty.
pub fn random_bag(rng: &mut ChaCha8Rng, levels: usize, dim: usize) -> TokenBag {
    loop {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(1..=5);
        let mut grids = Vec::with_capacity(levels);
        let mut embeddings = Vec::with_capacity(levels);
        let (mut r, mut c) = (rows, cols);
        for k in 0..levels {
            let m = if k == 0 { 1 } else { rng.random_range(1..=3u32) };
            r *= m as usize;
            c *= m as usize;
            let mask: Vec<bool> = (0..r * c).map(|_| rng.random::<f64>() < 0.8).collect();
            let count = mask.iter().filter(|x| **x).count();
            grids.push(LevelGrid::with_mask(r, c, m, mask).unwrap());
            // small integers keep values exactly comparable
            let data = (0..count * dim).map(|_| rng.random_range(-50..50) as f64).collect();
            embeddings.push(Tensor::matrix(count, dim, data).unwrap());
        }
        let bag = build_bag(&grids, &embeddings).unwrap();
        if !bag.is_empty() {
            return bag;
        }
    }
}

/// Scan output from the closed form
/// `y[t,e] = Σ_{s≤t} Σ_n C[t,n] exp(a_e Σ_{r=s+1..t} δ[r,e]) δ[s,e] B[s,n] u[s,e] + d_e u[t,e]`,
/// evaluated pair by pair in O(T²).
pub fn naive_scan(u: &Tensor, delta: &Tensor, b: &Tensor, c: &Tensor, a: &Tensor, d: &Tensor) -> Tensor {
    let (t_len, e_dim) = (u.shape()[0], u.shape()[1]);
    let n_dim = b.shape()[1];
    let mut y = vec![0.0; t_len * e_dim];
    for t in 0..t_len {
        for e in 0..e_dim {
            let mut acc = d.data()[e] * u.row(t)[e];
            for s in 0..=t {
                let decay_sum: f64 = (s + 1..=t).map(|r| delta.row(r)[e]).sum();
                let decay = (a.data()[e] * decay_sum).exp();
                let drive = delta.row(s)[e] * u.row(s)[e];
                for n in 0..n_dim {
                    acc += c.row(t)[n] * decay * drive * b.row(s)[n];
                }
            }
            y[t * e_dim + e] = acc;
        }
    }
    Tensor::matrix(t_len, e_dim, y).unwrap()
}

pub fn scan(u: &Tensor, delta: &Tensor, b: &Tensor, c: &Tensor, a: &Tensor, d: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let v: Vec<_> = [u, delta, b, c, a, d].iter().map(|x| tape.leaf((*x).clone())).collect();
    let y = tape.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
    tape.value(y).clone()
}

/// Random scan inputs `(u, delta, B, C, a, d)`.
pub fn random_scan_inputs(rng: &mut ChaCha8Rng, t: usize, e: usize, n: usize) -> [Tensor; 6] {
    [
        uniform_tensor(rng, &[t, e], -2.0, 2.0),
        uniform_tensor(rng, &[t, e], 0.01, 1.0),
        uniform_tensor(rng, &[t, n], -1.0, 1.0),
        uniform_tensor(rng, &[t, n], -1.0, 1.0),
        uniform_tensor(rng, &[e], -3.0, -0.1),
        uniform_tensor(rng, &[e], -1.0, 1.0),
    ]
}

/// Partial likelihood enumerated subject by subject: every event `i` scans
/// all `j` with `t_j >= t_i`.
pub fn brute_cox(risks: &[f64], records: &[SurvivalRecord]) -> f64 {
    let mut loss = 0.0;
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        let denom: f64 = records
            .iter()
            .zip(risks)
            .filter(|(rj, _)| rj.time >= ri.time)
            .map(|(_, r)| r.exp())
            .sum();
        loss -= risks[i] - denom.ln();
    }
    loss
}

/// `(concordant half-units, comparable pairs)` by pairwise enumeration.
pub fn brute_c_index_counts(risks: &[f64], records: &[SurvivalRecord]) -> (usize, usize) {
    let (mut conc2, mut comp) = (0, 0);
    for i in 0..records.len() {
        for j in 0..records.len() {
            if records[i].event && records[i].time < records[j].time {
                comp += 1;
                if risks[i] > risks[j] {
                    conc2 += 2;
                } else if risks[i] == risks[j] {
                    conc2 += 1;
                }
            }
        }
    }
    (conc2, comp)
}

/// Pair-counting AUC.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins2, mut pairs) = (0usize, 0usize);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins2 += 2;
                } else if scores[i] == scores[j] {
                    wins2 += 1;
                }
            }
        }
    }
    wins2 as f64 / (2 * pairs) as f64
}

/// Random cohort with times on a small integer grid so ties are common.
pub fn random_cohort(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<SurvivalRecord>) {
    let risks = (0..n).map(|_| (rng.random_range(-8..8) as f64) * 0.25).collect();
    let records = (0..n)
        .map(|_| SurvivalRecord::new(rng.random_range(1..=6) as f64, rng.random::<f64>() < 0.7).unwrap())
        .collect();
    (risks, records)
}

pub fn row_key(t: &Tensor, i: usize) -> Vec<u64> {
    t.row(i).iter().map(|v| v.to_bits()).collect()
}

/// Level-0 ancestor coordinate of every token at every level.
pub fn root_coords(bag: &TokenBag) -> Vec<Vec<(i32, i32)>> {
    let mut out: Vec<Vec<(i32, i32)>> = Vec::new();
    for (k, level) in bag.levels.iter().enumerate() {
        let roots = if k == 0 {
            level.coords.clone()
        } else {
            level.parents.iter().map(|&p| out[k - 1][p]).collect()
        };
        out.push(roots);
    }
    out
}

/// Multiset of (token, parent token) embedding pairs for level `k`.
pub fn fused_pairs(bag: &TokenBag, k: usize) -> Vec<(Vec<u64>, Vec<u64>)> {
    let level = &bag.levels[k];
    let mut pairs: Vec<_> = (0..level.len())
        .map(|i| {
            (
                row_key(&level.embeddings, i),
                row_key(&bag.levels[k - 1].embeddings, level.parents[i]),
            )
        })
        .collect();
    pairs.sort();
    pairs
}
