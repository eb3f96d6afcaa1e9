//! Multi-resolution tile grids and the token bag built from them.
//!
//! Level 0 is the coarsest grid. Level `k > 0` is aligned to level `k - 1`
//! with an integer ratio `m_k`, so the parent of fine cell `(r, c)` is
//! `(r / m_k, c / m_k)`.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::rng_for;

/// Grid cell `(row, col)`.
pub type Coord = (i32, i32);

/// Coarse cell containing `coord` on a grid `ratio` times finer.
pub fn parent_index(coord: Coord, ratio: u32) -> Result<Coord> {
    if ratio == 0 {
        return Err(Error::Argument("parent ratio must be at least 1".into()));
    }
    if coord.0 < 0 || coord.1 < 0 {
        return Err(Error::Argument(format!("negative coordinate {coord:?}")));
    }
    let m = ratio as i32;
    Ok((coord.0 / m, coord.1 / m))
}

/// Tile grid of one level with its tissue mask (row-major).
#[derive(Clone, Debug)]
pub struct LevelGrid {
    pub rows: usize,
    pub cols: usize,
    /// `m_k`; ignored for level 0.
    pub ratio_to_parent: u32,
    pub tissue: Vec<bool>,
}

impl LevelGrid {
    pub fn all_tissue(rows: usize, cols: usize, ratio_to_parent: u32) -> Self {
        Self {
            rows,
            cols,
            ratio_to_parent,
            tissue: vec![true; rows * cols],
        }
    }

    pub fn with_mask(rows: usize, cols: usize, ratio_to_parent: u32, tissue: Vec<bool>) -> Result<Self> {
        if tissue.len() != rows * cols {
            return Err(Error::Count(format!(
                "mask has {} cells for a {rows}x{cols} grid",
                tissue.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            ratio_to_parent,
            tissue,
        })
    }

    pub fn is_tissue(&self, (r, c): Coord) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.rows
            && (c as usize) < self.cols
            && self.tissue[r as usize * self.cols + c as usize]
    }

    pub fn tissue_count(&self) -> usize {
        self.tissue.iter().filter(|t| **t).count()
    }
}

/// Tokens of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct BagLevel {
    /// `T_k × D`.
    pub embeddings: Tensor,
    pub coords: Vec<Coord>,
    /// Index into the previous level per token; empty at level 0.
    pub parents: Vec<usize>,
    /// `m_k`; zero at level 0.
    pub ratio: u32,
}

impl BagLevel {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn select(&self, keep: &[usize], parents: Vec<usize>) -> BagLevel {
        let d = self.embeddings.shape()[1];
        let mut data = Vec::with_capacity(keep.len() * d);
        for &i in keep {
            data.extend_from_slice(self.embeddings.row(i));
        }
        BagLevel {
            embeddings: Tensor::matrix(keep.len(), d, data).expect("row count matches"),
            coords: keep.iter().map(|&i| self.coords[i]).collect(),
            parents,
            ratio: self.ratio,
        }
    }
}

/// One slide: token embeddings, grid coordinates and parent links per level.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBag {
    pub dim: usize,
    pub levels: Vec<BagLevel>,
}

impl TokenBag {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.levels.iter().map(BagLevel::len).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().any(BagLevel::is_empty)
    }

    /// Checks counts, parent ranges and coordinate/parent agreement.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Count("bag has no levels".into()));
        }
        for (k, level) in self.levels.iter().enumerate() {
            let (rows, cols) = level.embeddings.dims2("bag")?;
            if rows != level.coords.len() || cols != self.dim {
                return Err(Error::Count(format!(
                    "level {k}: embeddings {:?} for {} coords of dim {}",
                    level.embeddings.shape(),
                    level.coords.len(),
                    self.dim
                )));
            }
            if k == 0 {
                if !level.parents.is_empty() {
                    return Err(Error::Count("level 0 has parent links".into()));
                }
                continue;
            }
            if level.parents.len() != level.coords.len() {
                return Err(Error::Count(format!(
                    "level {k}: {} parents for {} tokens",
                    level.parents.len(),
                    level.coords.len()
                )));
            }
            let prev = &self.levels[k - 1];
            for (i, (&p, &coord)) in level.parents.iter().zip(&level.coords).enumerate() {
                if p >= prev.len() {
                    return Err(Error::Index {
                        op: "bag parents",
                        index: p,
                        len: prev.len(),
                    });
                }
                if prev.coords[p] != parent_index(coord, level.ratio)? {
                    return Err(Error::Alignment(format!(
                        "level {k} token {i} at {coord:?} links to parent at {:?}",
                        prev.coords[p]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bag holding only level `k`, as a single-level bag.
    pub fn single_level(&self, k: usize) -> Result<TokenBag> {
        let level = self
            .levels
            .get(k)
            .ok_or_else(|| Error::Argument(format!("bag has no level {k}")))?;
        Ok(TokenBag {
            dim: self.dim,
            levels: vec![BagLevel {
                embeddings: level.embeddings.clone(),
                coords: level.coords.clone(),
                parents: Vec::new(),
                ratio: 0,
            }],
        })
    }

    /// Reorders every level: new position `j` of level `k` holds old token
    /// `perms[k][j]`. Parent links follow their parents.
    pub fn permute_levels(&self, perms: &[Vec<usize>]) -> Result<TokenBag> {
        if perms.len() != self.levels.len() {
            return Err(Error::Count(format!(
                "{} permutations for {} levels",
                perms.len(),
                self.levels.len()
            )));
        }
        let mut out = Vec::with_capacity(self.levels.len());
        let mut prev_inverse: Vec<usize> = Vec::new();
        for (level, perm) in self.levels.iter().zip(perms) {
            check_permutation(perm, level.len())?;
            let parents = if level.parents.is_empty() {
                Vec::new()
            } else {
                perm.iter()
                    .map(|&old| prev_inverse[level.parents[old]])
                    .collect()
            };
            out.push(level.select(perm, parents));
            prev_inverse = vec![0; perm.len()];
            for (new, &old) in perm.iter().enumerate() {
                prev_inverse[old] = new;
            }
        }
        Ok(TokenBag {
            dim: self.dim,
            levels: out,
        })
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Count(format!("permutation of length {} for {n} tokens", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Argument(format!("not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Builds a bag from aligned grids and one embedding row per tissue cell
/// (row-major). Fine tissue cells whose parent is not kept are skipped, and
/// the skip propagates to every finer level.
pub fn build_bag(grids: &[LevelGrid], embeddings: &[Tensor]) -> Result<TokenBag> {
    if grids.is_empty() || grids.len() != embeddings.len() {
        return Err(Error::Count(format!(
            "{} grids and {} embedding tables",
            grids.len(),
            embeddings.len()
        )));
    }
    let dim = embeddings[0].dims2("build_bag")?.1;
    for k in 1..grids.len() {
        let (parent, grid) = (&grids[k - 1], &grids[k]);
        let m = grid.ratio_to_parent as usize;
        if m == 0 || grid.rows != parent.rows * m || grid.cols != parent.cols * m {
            return Err(Error::Alignment(format!(
                "level {k} is {}x{} with ratio {m} over a {}x{} parent grid",
                grid.rows, grid.cols, parent.rows, parent.cols
            )));
        }
    }

    let mut levels: Vec<BagLevel> = Vec::with_capacity(grids.len());
    // token index per cell of the previous level, for kept cells
    let mut prev_slot: Vec<Option<usize>> = Vec::new();
    for (k, (grid, emb)) in grids.iter().zip(embeddings).enumerate() {
        let (rows, cols) = emb.dims2("build_bag")?;
        if grid.tissue.len() != grid.rows * grid.cols {
            return Err(Error::Count(format!("level {k}: mask size does not match grid")));
        }
        if rows != grid.tissue_count() || cols != dim {
            return Err(Error::Count(format!(
                "level {k}: {} tissue cells but embeddings {:?}",
                grid.tissue_count(),
                emb.shape()
            )));
        }
        let mut slot = vec![None; grid.rows * grid.cols];
        let mut keep = Vec::new();
        let mut coords = Vec::new();
        let mut parents = Vec::new();
        let mut row_idx = 0;
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                if !grid.tissue[r * grid.cols + c] {
                    continue;
                }
                let this_row = row_idx;
                row_idx += 1;
                let coord = (r as i32, c as i32);
                if k > 0 {
                    let (pr, pc) = parent_index(coord, grid.ratio_to_parent)?;
                    let pcols = grids[k - 1].cols;
                    match prev_slot[pr as usize * pcols + pc as usize] {
                        Some(p) => parents.push(p),
                        None => continue,
                    }
                }
                slot[r * grid.cols + c] = Some(coords.len());
                coords.push(coord);
                keep.push(this_row);
            }
        }
        let mut data = Vec::with_capacity(keep.len() * dim);
        for &i in &keep {
            data.extend_from_slice(emb.row(i));
        }
        levels.push(BagLevel {
            embeddings: Tensor::matrix(keep.len(), dim, data)?,
            coords,
            parents,
            ratio: if k == 0 { 0 } else { grid.ratio_to_parent },
        });
        prev_slot = slot;
    }
    Ok(TokenBag { dim, levels })
}

/// `ceil(alpha * n)`, treating products within `1e-9` of an integer as exact.
pub fn drop_count(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Removes `ceil(alpha * T_0)` level-0 tokens (at least one always survives)
/// and every descendant of a removed token.
pub fn coarse_branch_drop(bag: &TokenBag, alpha: f64, seed: u64) -> Result<TokenBag> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Argument(format!("drop fraction must lie in [0, 1), got {alpha}")));
    }
    let t0 = bag.levels.first().map_or(0, BagLevel::len);
    if t0 == 0 {
        return Err(Error::dim("coarse_branch_drop", "level 0 is empty"));
    }
    let n_drop = drop_count(alpha, t0).min(t0 - 1);
    if n_drop == 0 {
        return Ok(bag.clone());
    }
    let mut rng = rng_for(seed, "coarse-branch-drop", &[]);
    let mut keep_mask = vec![true; t0];
    for i in rand::seq::index::sample(&mut rng, t0, n_drop) {
        keep_mask[i] = false;
    }

    let mut levels = Vec::with_capacity(bag.levels.len());
    let mut new_index: Vec<Option<usize>> = Vec::new();
    for (k, level) in bag.levels.iter().enumerate() {
        let mut keep = Vec::new();
        let mut parents = Vec::new();
        let mut index = vec![None; level.len()];
        for i in 0..level.len() {
            let kept = if k == 0 {
                keep_mask[i]
            } else if let Some(p) = new_index[level.parents[i]] {
                parents.push(p);
                true
            } else {
                false
            };
            if kept {
                index[i] = Some(keep.len());
                keep.push(i);
            }
        }
        levels.push(level.select(&keep, parents));
        new_index = index;
    }
    Ok(TokenBag {
        dim: bag.dim,
        levels,
    })
}

/// Independently permutes the token order of every level.
pub fn shuffle_within_levels(bag: &TokenBag, seed: u64) -> Result<TokenBag> {
    let mut rng = rng_for(seed, "scan-order", &[]);
    let perms: Vec<Vec<usize>> = bag
        .levels
        .iter()
        .map(|level| {
            let mut p: Vec<usize> = (0..level.len()).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    bag.permute_levels(&perms)
}
