use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Candidate pool bounds for greedy selection.
const POOL_MIN: usize = 1_000;
const POOL_MAX: usize = 100_000;
const POOL_FACTOR: usize = 10;

/// Ordered patch orderings for a `g x g` grid. `perms[k][slot]` is the source
/// cell placed at output slot `slot`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    grid: usize,
    seed: u64,
    perms: Vec<Vec<u8>>,
}

/// `(g^2)!`, saturating at `u128::MAX`.
pub fn permutation_count(g: usize) -> u128 {
    (1..=(g * g) as u128).try_fold(1u128, |acc, k| acc.checked_mul(k)).unwrap_or(u128::MAX)
}

pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn check_request(g: usize, n: usize) -> Result<usize> {
    if g == 0 || g * g > u8::MAX as usize + 1 {
        return Err(Error::invalid(format!("grid side {g} out of range")));
    }
    if n == 0 {
        return Err(Error::invalid("permutation set needs at least one entry"));
    }
    let total = permutation_count(g);
    if n as u128 > total {
        return Err(Error::SetTooLarge {
            requested: n as u128,
            available: total,
        });
    }
    Ok(g * g)
}

/// Every permutation of `0..k` in lexicographic order.
fn enumerate_all(k: usize) -> Vec<Vec<u8>> {
    let mut cur: Vec<u8> = (0..k as u8).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..k).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

fn sample_distinct(k: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut p: Vec<u8> = (0..k as u8).collect();
    while out.len() < count {
        p.shuffle(rng);
        if seen.insert(p.clone()) {
            out.push(p.clone());
        }
    }
    out
}

impl PermutationSet {
    /// Greedy max-min Hamming selection from a seeded candidate pool.
    ///
    /// The first entry is a random pool member; each following entry is the
    /// pool member with the largest minimum distance to those already chosen,
    /// ties going to the lowest pool index.
    pub fn generate(g: usize, n: usize, seed: u64) -> Result<Self> {
        let k = check_request(g, n)?;
        let total = permutation_count(g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if n as u128 == total {
            return Ok(Self {
                grid: g,
                seed,
                perms: enumerate_all(k),
            });
        }
        let target = (n * POOL_FACTOR).clamp(POOL_MIN, POOL_MAX).max(2 * n);
        let pool = if total <= target as u128 {
            enumerate_all(k)
        } else {
            sample_distinct(k, target, &mut rng)
        };
        let first = rng.random_range(0..pool.len());
        let mut taken = vec![false; pool.len()];
        let mut min_dist = vec![usize::MAX; pool.len()];
        let mut chosen = Vec::with_capacity(n);
        let mut next = first;
        loop {
            taken[next] = true;
            chosen.push(pool[next].clone());
            if chosen.len() == n {
                break;
            }
            let newest = &pool[next];
            let mut best: Option<(usize, usize)> = None;
            for (c, cand) in pool.iter().enumerate() {
                if taken[c] {
                    continue;
                }
                let d = min_dist[c].min(hamming(cand, newest));
                min_dist[c] = d;
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((c, d));
                }
            }
            next = best.expect("pool holds at least n permutations").0;
        }
        Ok(Self {
            grid: g,
            seed,
            perms: chosen,
        })
    }

    /// `n` distinct uniformly drawn permutations, the unoptimized baseline.
    pub fn random(g: usize, n: usize, seed: u64) -> Result<Self> {
        let k = check_request(g, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms = if n as u128 * 2 >= permutation_count(g) {
            let mut all = enumerate_all(k);
            all.shuffle(&mut rng);
            all.truncate(n);
            all
        } else {
            sample_distinct(k, n, &mut rng)
        };
        Ok(Self { grid: g, seed, perms })
    }

    pub fn from_perms(g: usize, seed: u64, perms: Vec<Vec<u8>>) -> Result<Self> {
        let k = check_request(g, perms.len().max(1))?;
        let mut seen = HashSet::new();
        for p in &perms {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..k as u8).collect::<Vec<_>>() {
                return Err(Error::Format(format!("{p:?} is not a permutation of 0..{k}")));
            }
            if !seen.insert(p.clone()) {
                return Err(Error::Format(format!("duplicate permutation {p:?}")));
            }
        }
        Ok(Self { grid: g, seed, perms })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn perms(&self) -> &[Vec<u8>] {
        &self.perms
    }

    pub fn get(&self, id: usize) -> Result<&[u8]> {
        self.perms.get(id).map(Vec::as_slice).ok_or_else(|| {
            Error::invalid(format!("permutation id {id} out of range for a set of {}", self.perms.len()))
        })
    }

    /// Smallest pairwise Hamming distance; `g^2` for a singleton set.
    pub fn min_pairwise_hamming(&self) -> usize {
        let mut best = self.grid * self.grid;
        for (i, a) in self.perms.iter().enumerate() {
            for b in &self.perms[i + 1..] {
                best = best.min(hamming(a, b));
            }
        }
        best
    }

    /// Header `g n seed`, then one space-separated permutation per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.grid, self.perms.len(), self.seed);
        for p in &self.perms {
            let line: Vec<String> = p.iter().map(u8::to_string).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty permutation file".into()))?;
        let fields: Vec<u64> = header
            .split_whitespace()
            .map(|f| f.parse::<u64>().map_err(|e| Error::Format(format!("header {header:?}: {e}"))))
            .collect::<Result<_>>()?;
        let [g, n, seed] = fields[..] else {
            return Err(Error::Format(format!("header {header:?} must be \"g n seed\"")));
        };
        let perms: Vec<Vec<u8>> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<u8>().map_err(|e| Error::Format(format!("line {l:?}: {e}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        if perms.len() as u64 != n {
            return Err(Error::Format(format!("header declares {n} permutations, found {}", perms.len())));
        }
        Self::from_perms(g as usize, seed, perms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
