//! Jigsaw label space: a fixed, ordered set of tile permutations chosen
//! greedily for large pairwise Hamming distance.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Ordered permutations of `0..n_elements`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSet {
    n_elements: usize,
    perms: Vec<Vec<usize>>,
    min_hamming: usize,
    mean_hamming: f64,
}

/// On-disk form.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PermSetFile {
    n: usize,
    perms: Vec<Vec<usize>>,
    min_hamming: usize,
}

/// Knobs for [`generate_permutation_set_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Seed of the candidate sampling stream.
    pub seed: u64,
    /// Random candidates drawn per greedy step when not enumerating.
    pub pool_size: usize,
    /// Enumerate all `n!` permutations instead of sampling.
    pub exhaustive: bool,
    /// Runners-up per step carried into all later candidate pools.
    pub near_winners: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            pool_size: 100_000,
            exhaustive: false,
            near_winners: 64,
        }
    }
}

/// Above this size the candidate pool is sampled unless `exhaustive` is set.
pub const EXHAUSTIVE_LIMIT: usize = 6;

/// Number of positions where `p` and `q` differ.
pub fn hamming(p: &[usize], q: &[usize]) -> Result<usize> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "hamming distance between permutations of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter().zip(q).filter(|(a, b)| a != b).count())
}

pub fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&v| v < p.len() && !std::mem::replace(&mut seen[v], true))
}

fn factorial_at_least(n: usize, bound: usize) -> bool {
    let mut acc: usize = 1;
    for k in 2..=n {
        acc = acc.saturating_mul(k);
        if acc >= bound {
            return true;
        }
    }
    acc >= bound
}

/// Pairwise statistics `(min, mean)`; `(0, 0.0)` for fewer than two items.
fn pair_stats(perms: &[Vec<usize>]) -> (usize, f64) {
    let mut min = usize::MAX;
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..perms.len() {
        for j in i + 1..perms.len() {
            let d = perms[i].iter().zip(&perms[j]).filter(|(a, b)| a != b).count();
            min = min.min(d);
            total += d;
            pairs += 1;
        }
    }
    if pairs == 0 {
        (0, 0.0)
    } else {
        (min, total as f64 / pairs as f64)
    }
}

impl PermutationSet {
    /// Validates and wraps an explicit list of permutations.
    pub fn from_perms(perms: Vec<Vec<usize>>) -> Result<Self> {
        let n_elements = perms
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::PermutationSet("set is empty".into()))?;
        let mut seen = BTreeSet::new();
        for (row, p) in perms.iter().enumerate() {
            if p.len() != n_elements {
                return Err(Error::PermutationSet(format!(
                    "row {row} has {} entries, expected {n_elements}",
                    p.len()
                )));
            }
            if !is_bijection(p) {
                return Err(Error::PermutationSet(format!("row {row} {p:?} is not a bijection")));
            }
            if !seen.insert(p.clone()) {
                return Err(Error::PermutationSet(format!("row {row} {p:?} is a duplicate")));
            }
        }
        let (min_hamming, mean_hamming) = pair_stats(&perms);
        Ok(Self {
            n_elements,
            perms,
            min_hamming,
            mean_hamming,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[usize]> {
        self.perms.get(index).map(Vec::as_slice)
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn min_hamming(&self) -> usize {
        self.min_hamming
    }

    pub fn mean_hamming(&self) -> f64 {
        self.mean_hamming
    }

    pub fn index_of(&self, perm: &[usize]) -> Option<usize> {
        self.perms.iter().position(|p| p == perm)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PermSetFile {
            n: self.n_elements,
            perms: self.perms.clone(),
            min_hamming: self.min_hamming,
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses the JSON form and re-derives every invariant, including the
    /// stored minimum distance.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PermSetFile =
            serde_json::from_str(text).map_err(|e| Error::parse("permutation set", &e))?;
        let set = Self::from_perms(file.perms)?;
        if set.n_elements != file.n {
            return Err(Error::PermutationSet(format!(
                "header says n = {} but rows have {} entries",
                file.n, set.n_elements
            )));
        }
        if set.min_hamming != file.min_hamming {
            return Err(Error::PermutationSet(format!(
                "stored min_hamming {} but rows give {}",
                file.min_hamming, set.min_hamming
            )));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Greedy max-min construction with default options.
pub fn generate_permutation_set(n_elements: usize, set_size: usize) -> Result<PermutationSet> {
    generate_permutation_set_with(n_elements, set_size, &GenerateOptions::default())
}

/// Ranking key of a candidate: larger minimum distance, then larger total
/// distance to the chosen set, then lexicographically smaller.
#[derive(Debug, Clone, Copy)]
struct Score {
    min: usize,
    sum: usize,
}

fn better(a: (Score, &[u8]), b: (Score, &[u8])) -> Ordering {
    b.0.min
        .cmp(&a.0.min)
        .then(b.0.sum.cmp(&a.0.sum))
        .then(a.1.cmp(b.1))
}

/// Starts from the identity and repeatedly appends the candidate that
/// maximises the minimum Hamming distance to the chosen permutations.
///
/// For `n_elements <= 6` (or with `exhaustive`) candidates are all `n!`
/// permutations. Otherwise each step scores `pool_size` permutations sampled
/// from the `permset` stream plus the runners-up of all earlier steps.
pub fn generate_permutation_set_with(
    n_elements: usize,
    set_size: usize,
    opts: &GenerateOptions,
) -> Result<PermutationSet> {
    if n_elements == 0 || n_elements > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "permutations of {n_elements} elements are not supported"
        )));
    }
    if set_size == 0 || !factorial_at_least(n_elements, set_size) {
        return Err(Error::InvalidArgument(format!(
            "cannot choose {set_size} distinct permutations of {n_elements} elements"
        )));
    }
    let n = n_elements;
    let identity: Vec<u8> = (0..n as u8).collect();
    let mut chosen: Vec<Vec<u8>> = vec![identity];

    if opts.exhaustive || n <= EXHAUSTIVE_LIMIT {
        greedy_exhaustive(n, set_size, &mut chosen);
    } else {
        greedy_sampled(n, set_size, opts, &mut chosen)?;
    }

    PermutationSet::from_perms(
        chosen
            .into_iter()
            .map(|p| p.into_iter().map(usize::from).collect())
            .collect(),
    )
}

fn greedy_exhaustive(n: usize, set_size: usize, chosen: &mut Vec<Vec<u8>>) {
    let pool = all_permutations(n);
    let count = pool.len() / n;
    let mut mins = vec![usize::MAX; count];
    let mut sums = vec![0usize; count];
    let mut taken = vec![false; count];
    taken[0] = true; // identity is first in lexicographic order
    while chosen.len() < set_size {
        let last = chosen.last().expect("non-empty");
        let mut best: Option<usize> = None;
        for i in 0..count {
            if taken[i] {
                continue;
            }
            let cand = &pool[i * n..(i + 1) * n];
            let d = cand.iter().zip(last).filter(|(a, b)| a != b).count();
            mins[i] = mins[i].min(d);
            sums[i] += d;
            let is_better = match best {
                None => true,
                Some(b) => {
                    let sb = Score { min: mins[b], sum: sums[b] };
                    let si = Score { min: mins[i], sum: sums[i] };
                    better((si, cand), (sb, &pool[b * n..(b + 1) * n])) == Ordering::Less
                }
            };
            if is_better {
                best = Some(i);
            }
        }
        let b = best.expect("set_size <= n! leaves a candidate");
        taken[b] = true;
        chosen.push(pool[b * n..(b + 1) * n].to_vec());
    }
}

fn greedy_sampled(
    n: usize,
    set_size: usize,
    opts: &GenerateOptions,
    chosen: &mut Vec<Vec<u8>>,
) -> Result<()> {
    let mut carried: BTreeSet<Vec<u8>> = BTreeSet::new();
    let mut step = 0u64;
    while chosen.len() < set_size {
        step += 1;
        let mut rng = rng::substream(opts.seed, rng::PERMSET, step);
        let mut pool: BTreeSet<Vec<u8>> = carried.clone();
        let mut perm: Vec<u8> = (0..n as u8).collect();
        for _ in 0..opts.pool_size {
            perm.shuffle(&mut rng);
            pool.insert(perm.clone());
        }
        for c in chosen.iter() {
            pool.remove(c);
        }
        if pool.is_empty() {
            return Err(Error::PermutationSet(format!(
                "candidate pool exhausted at step {step}"
            )));
        }
        let mut scored: Vec<(Score, &[u8])> = pool
            .iter()
            .map(|cand| {
                let mut min = usize::MAX;
                let mut sum = 0;
                for c in chosen.iter() {
                    let d = cand.iter().zip(c).filter(|(a, b)| a != b).count();
                    min = min.min(d);
                    sum += d;
                }
                (Score { min, sum }, cand.as_slice())
            })
            .collect();
        let keep = (opts.near_winners + 1).min(scored.len());
        if keep < scored.len() {
            scored.select_nth_unstable_by(keep - 1, |a, b| better(*a, *b));
            scored.truncate(keep);
        }
        scored.sort_by(|a, b| better(*a, *b));
        let winner = scored[0].1.to_vec();
        let runners: Vec<Vec<u8>> = scored[1..].iter().map(|(_, p)| p.to_vec()).collect();
        carried.remove(&winner);
        carried.extend(runners);
        chosen.push(winner);
    }
    Ok(())
}

/// All permutations of `0..n` in lexicographic order, flattened.
fn all_permutations(n: usize) -> Vec<u8> {
    let mut perm: Vec<u8> = (0..n as u8).collect();
    let mut out = Vec::new();
    loop {
        out.extend_from_slice(&perm);
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).expect("pivot exists");
        perm.swap(i - 1, j);
        perm[i..].reverse();
    }
    out
}
