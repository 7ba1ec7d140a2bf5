//! Permute-based relative position encoding.
//!
//! A position `p` transforms a kernel-mapped query row by `r^p · P_B^p` and a key row by
//! `r^-p · P_B^p`, where `P_B` is the permutation matrix of `B` (`P_B[i][j] = 1` iff
//! `B(i) = j`). Because `(P_B^i)ᵀ P_B^j = P_B^(j-i)`, the query/key product only depends on
//! the position difference when `r = 1`.

use std::borrow::Cow;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijection on `0..d`, stored 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
    cycle_of: Vec<(usize, usize)>,
    cycles: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let d = map.len();
        let mut seen = vec![false; d];
        for &j in &map {
            if j >= d || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Input(format!("{map:?} is not a permutation of 0..{d}")));
            }
        }
        let mut cycle_of = vec![(0, 0); d];
        let mut cycles = Vec::new();
        let mut visited = vec![false; d];
        for start in 0..d {
            if visited[start] {
                continue;
            }
            let mut cycle = Vec::new();
            let mut i = start;
            while !visited[i] {
                visited[i] = true;
                cycle_of[i] = (cycles.len(), cycle.len());
                cycle.push(i);
                i = map[i];
            }
            cycles.push(cycle);
        }
        Ok(Permutation { map, cycle_of, cycles })
    }

    /// Builds from the 1-based form `B: {1..d} → {1..d}`.
    pub fn from_one_based(b: &[usize]) -> Result<Self> {
        let map = b
            .iter()
            .map(|&j| j.checked_sub(1).ok_or_else(|| Error::Input("1-based permutation contains 0".into())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(map)
    }

    pub fn identity(d: usize) -> Self {
        Self::new((0..d).collect()).expect("identity is a permutation")
    }

    pub fn random(d: usize, seed: u64) -> Self {
        let mut map: Vec<usize> = (0..d).collect();
        map.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(map).expect("shuffle preserves bijectivity")
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.map.iter().map(|j| j + 1).collect()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Self::new(inv).expect("inverse of a permutation is a permutation")
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::dim("compose", &[self.len()], &[other.len()]));
        }
        Self::new(other.map.iter().map(|&j| self.map[j]).collect())
    }

    /// Gather indices of `P_B^p`: `(P_B^p x)[i] = x[idx[i]]`, i.e. `idx[i] = B^p(i)`.
    /// Negative `p` gives powers of the inverse.
    pub fn power_indices(&self, p: i64) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                let (c, t) = self.cycle_of[i];
                let cycle = &self.cycles[c];
                let m = cycle.len() as i64;
                cycle[(t as i64 + p).rem_euclid(m) as usize]
            })
            .collect()
    }

    /// Dense matrix form `P_B` with `P[i][j] = 1` iff `B(i) = j`.
    pub fn to_matrix(&self) -> Tensor {
        let d = self.len();
        let mut m = Tensor::zeros(&[d, d]);
        for (i, &j) in self.map.iter().enumerate() {
            m.data_mut()[i * d + j] = 1.0;
        }
        m
    }

    /// Order of the permutation (lcm of cycle lengths), saturating at `u128::MAX`.
    pub fn order(&self) -> u128 {
        fn gcd(a: u128, b: u128) -> u128 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        self.cycles.iter().fold(1u128, |acc, c| {
            let m = c.len() as u128;
            (acc / gcd(acc, m)).saturating_mul(m)
        })
    }
}

/// Whether a row is transformed as a query (`r^p`) or a key (`r^-p`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
}

/// How per-head RPE configurations are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpeSettings {
    pub seed: u64,
    pub decay: f64,
    /// One permutation for every head instead of a distinct one per head.
    pub shared: bool,
    /// Powers for positions in `-max..=max` are precomputed.
    pub max_cached_position: usize,
}

impl Default for RpeSettings {
    fn default() -> Self {
        RpeSettings {
            seed: 7,
            decay: 1.0,
            shared: false,
            max_cached_position: 1024,
        }
    }
}

/// Permutation `B`, decay `r`, and cached gather tables for `P_B^p`.
#[derive(Debug, Clone)]
pub struct RpeConfig {
    permutation: Permutation,
    decay: f64,
    seed: u64,
    forward: Arc<Vec<Vec<usize>>>,
    backward: Arc<Vec<Vec<usize>>>,
}

impl RpeConfig {
    pub fn new(permutation: Permutation, decay: f64, max_cached_position: usize) -> Result<Self> {
        if !(decay.is_finite() && decay > 0.0) {
            return Err(Error::config(format!("RPE decay must be a positive real, got {decay}")));
        }
        let n = max_cached_position as i64;
        let forward = (0..=n).map(|p| permutation.power_indices(p)).collect();
        let backward = (0..=n).map(|p| permutation.power_indices(-p)).collect();
        Ok(RpeConfig {
            permutation,
            decay,
            seed: 0,
            forward: Arc::new(forward),
            backward: Arc::new(backward),
        })
    }

    /// Random permutation of `0..d` drawn from `seed`.
    pub fn random(d: usize, seed: u64, decay: f64, max_cached_position: usize) -> Result<Self> {
        let mut cfg = Self::new(Permutation::random(d, seed), decay, max_cached_position)?;
        cfg.seed = seed;
        Ok(cfg)
    }

    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.permutation.len()
    }

    /// Gather indices of `P_B^p`, served from the cache when `|p|` is in range.
    pub fn power_indices(&self, p: i64) -> Cow<'_, [usize]> {
        let table = if p >= 0 { &self.forward } else { &self.backward };
        match table.get(p.unsigned_abs() as usize) {
            Some(idx) => Cow::Borrowed(idx.as_slice()),
            None => Cow::Owned(self.permutation.power_indices(p)),
        }
    }

    /// Gather indices and scalar for a row at position `p`.
    pub fn row_transform(&self, p: i64, role: Role) -> Result<(Cow<'_, [usize]>, f64)> {
        let exponent = match role {
            Role::Query => p,
            Role::Key => -p,
        };
        let scale = if self.decay == 1.0 {
            1.0
        } else {
            self.decay.powf(exponent as f64)
        };
        if !scale.is_finite() || scale == 0.0 {
            return Err(Error::Contract(format!(
                "r^{exponent} with r = {} is not representable",
                self.decay
            )));
        }
        Ok((self.power_indices(p), scale))
    }
}

/// Applies the positional transform to kernel-mapped rows `x: [L × d]`.
pub fn apply_rpe(x: &Tensor, positions: &[i64], rpe: &RpeConfig, role: Role) -> Result<Tensor> {
    let (l, d) = x.expect_matrix("apply_rpe")?;
    if positions.len() != l || d != rpe.dim() {
        return Err(Error::dim("apply_rpe", x.shape(), &[positions.len(), rpe.dim()]));
    }
    let mut out = vec![0.0; l * d];
    for (i, &p) in positions.iter().enumerate() {
        let (idx, scale) = rpe.row_transform(p, role)?;
        let row = x.row(i);
        for (o, &src) in out[i * d..(i + 1) * d].iter_mut().zip(idx.iter()) {
            *o = scale * row[src];
        }
    }
    Tensor::new(vec![l, d], out)
}
