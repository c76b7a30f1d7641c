//! Synthetic fitness landscapes with additive and pairwise (epistatic)
//! terms. The landscape is its own exact oracle.

use std::collections::HashSet;

use ndarray::ArrayView2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{Dataset, FitnessRecord, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Site {
    pub pos: usize,
    pub token: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub a: Site,
    pub b: Site,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    pub length: usize,
    pub vocab_size: usize,
    /// Number of pairwise terms; `None` means `2 * length`.
    pub pairwise_terms: Option<usize>,
    /// Tokens besides the target that mutants may carry at each position.
    pub alternatives_per_position: usize,
    pub seed: u64,
}

impl LandscapeConfig {
    pub fn new(length: usize, vocab_size: usize, seed: u64) -> Self {
        Self { length, vocab_size, pairwise_terms: None, alternatives_per_position: 4, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLandscape {
    pub seed: u64,
    pub length: usize,
    pub vocab_size: usize,
    pub target_sequence: Sequence,
    /// `length x vocab_size`, row-major.
    pub linear_weights: Vec<f64>,
    pub pairwise_weights: Vec<PairTerm>,
    /// Per-position tokens used when drawing mutants.
    pub alternatives: Vec<Vec<u8>>,
    lower: f64,
    upper: f64,
}

impl SyntheticLandscape {
    /// Builds a landscape from explicit terms. The rescaling bounds are the
    /// sum of per-position linear extremes plus all negative (resp. positive)
    /// pairwise weights.
    pub fn from_terms(
        seed: u64,
        target_sequence: Sequence,
        vocab_size: usize,
        linear_weights: Vec<f64>,
        pairwise_weights: Vec<PairTerm>,
        alternatives: Vec<Vec<u8>>,
    ) -> Result<Self> {
        let length = target_sequence.len();
        if linear_weights.len() != length * vocab_size {
            return Err(Error::shape(format!(
                "linear weights: expected {} entries, got {}",
                length * vocab_size,
                linear_weights.len()
            )));
        }
        for t in &pairwise_weights {
            for s in [t.a, t.b] {
                if s.pos >= length || s.token as usize >= vocab_size {
                    return Err(Error::shape(format!("pair term site {s:?} out of range")));
                }
            }
        }
        let mut lower = 0.0;
        let mut upper = 0.0;
        for row in linear_weights.chunks(vocab_size) {
            lower += row.iter().copied().fold(f64::INFINITY, f64::min);
            upper += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        for t in &pairwise_weights {
            lower += t.weight.min(0.0);
            upper += t.weight.max(0.0);
        }
        if !(upper > lower) {
            return Err(Error::InvalidRange { y_min: lower, y_max: upper });
        }
        Ok(Self {
            seed,
            length,
            vocab_size,
            target_sequence,
            linear_weights,
            pairwise_weights,
            alternatives,
            lower,
            upper,
        })
    }

    /// Random landscape whose global optimum is `target_sequence`.
    ///
    /// Target tokens carry the largest linear weight at every position and
    /// every positive pair term joins two target tokens. Negative pair terms
    /// couple a target token with a non-target alternative, so single
    /// reversions toward the target can lower fitness.
    pub fn generate(cfg: &LandscapeConfig) -> Result<Self> {
        let (d, v) = (cfg.length, cfg.vocab_size);
        if d < 2 || v < 2 {
            return Err(Error::config("landscape needs length >= 2 and vocab >= 2"));
        }
        if cfg.alternatives_per_position == 0 || cfg.alternatives_per_position >= v {
            return Err(Error::config(format!("alternatives_per_position must be in 1..{v}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let target: Vec<u8> = (0..d).map(|_| rng.random_range(0..v as u8)).collect();

        let mut alternatives = Vec::with_capacity(d);
        let mut linear = vec![0.0; d * v];
        for (p, &t) in target.iter().enumerate() {
            let mut others: Vec<u8> = (0..v as u8).filter(|&a| a != t).collect();
            others.shuffle(&mut rng);
            others.truncate(cfg.alternatives_per_position);
            others.sort_unstable();
            let w = rng.random_range(0.5..1.5);
            linear[p * v + t as usize] = w;
            for &a in &others {
                linear[p * v + a as usize] = w * rng.random_range(0.0..0.5);
            }
            alternatives.push(others);
        }

        let n_pairs = cfg.pairwise_terms.unwrap_or(2 * d);
        let mut pairs = Vec::with_capacity(n_pairs);
        for k in 0..n_pairs {
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            let a = Site { pos: i, token: target[i] };
            let w = rng.random_range(0.3..1.0);
            if k % 2 == 0 {
                pairs.push(PairTerm { a, b: Site { pos: j, token: target[j] }, weight: w });
            } else {
                let token = *alternatives[j].choose(&mut rng).expect("nonempty");
                pairs.push(PairTerm { a, b: Site { pos: j, token }, weight: -w });
            }
        }
        Self::from_terms(cfg.seed, Sequence::new(target), v, linear, pairs, alternatives)
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    fn rescale(&self, raw: f64) -> f64 {
        (raw - self.lower) / (self.upper - self.lower)
    }

    pub fn raw_value(&self, seq: &Sequence) -> Result<f64> {
        let x = seq.tokens();
        if x.len() != self.length {
            return Err(Error::LengthMismatch { expected: self.length, got: x.len() });
        }
        let mut raw: f64 =
            x.iter().enumerate().map(|(p, &t)| self.linear_weights[p * self.vocab_size + t as usize]).sum();
        for t in &self.pairwise_weights {
            if x[t.a.pos] == t.a.token && x[t.b.pos] == t.b.token {
                raw += t.weight;
            }
        }
        Ok(raw)
    }

    /// Multilinear extension over a relaxed one-hot (`length x vocab_size`)
    /// input, plus its gradient. Agrees with [`synthetic_oracle`] on hard
    /// one-hot inputs.
    pub fn relaxed_value_and_grad(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Vec<f64>)> {
        if x.dim() != (self.length, self.vocab_size) {
            return Err(Error::shape(format!(
                "landscape input {:?}, expected ({}, {})",
                x.dim(),
                self.length,
                self.vocab_size
            )));
        }
        let v = self.vocab_size;
        let mut raw = 0.0;
        let mut grad = self.linear_weights.clone();
        for ((p, a), &xa) in x.indexed_iter() {
            raw += self.linear_weights[p * v + a] * xa;
        }
        for t in &self.pairwise_weights {
            let xa = x[[t.a.pos, t.a.token as usize]];
            let xb = x[[t.b.pos, t.b.token as usize]];
            raw += t.weight * xa * xb;
            grad[t.a.pos * v + t.a.token as usize] += t.weight * xb;
            grad[t.b.pos * v + t.b.token as usize] += t.weight * xa;
        }
        let scale = 1.0 / (self.upper - self.lower);
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((self.rescale(raw), grad))
    }

    /// Mutants of the target: each draws a mutation count uniformly from
    /// `1..=max_mutations` and substitutes that many distinct positions with
    /// one of the position's alternatives. Returned records are unique; the
    /// reference range is the sample's own extremes.
    pub fn sample_full_set(&self, count: usize, max_mutations: usize, seed: u64) -> Result<Dataset> {
        if max_mutations == 0 || max_mutations > self.length {
            return Err(Error::config(format!("max_mutations must be in 1..={}", self.length)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::with_capacity(count);
        let mut records = Vec::with_capacity(count);
        let positions: Vec<usize> = (0..self.length).collect();
        let mut attempts = 0usize;
        while records.len() < count {
            attempts += 1;
            if attempts > count * 50 {
                return Err(Error::config(format!("could only draw {} unique mutants of {count}", records.len())));
            }
            let m = rng.random_range(1..=max_mutations);
            let mut x = self.target_sequence.tokens().to_vec();
            for &p in positions.choose_multiple(&mut rng, m) {
                x[p] = *self.alternatives[p].choose(&mut rng).expect("nonempty");
            }
            let seq = Sequence::new(x);
            if seen.insert(seq.clone()) {
                let raw_fitness = synthetic_oracle(&seq, self)?;
                records.push(FitnessRecord { sequence: seq, raw_fitness });
            }
        }
        Dataset::with_own_range(records)
    }
}

/// Exact fitness of `seq`, rescaled so the landscape's bounds map to [0, 1].
pub fn synthetic_oracle(seq: &Sequence, landscape: &SyntheticLandscape) -> Result<f64> {
    landscape.raw_value(seq).map(|raw| landscape.rescale(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::one_hot;

    fn match_only(d: usize, v: usize) -> SyntheticLandscape {
        let target = Sequence::new((0..d as u8).map(|i| i % v as u8).collect());
        let mut lin = vec![0.0; d * v];
        for (p, &t) in target.tokens().iter().enumerate() {
            lin[p * v + t as usize] = 1.0 + p as f64 * 0.1;
        }
        SyntheticLandscape::from_terms(0, target, v, lin, vec![], vec![vec![]; d]).unwrap()
    }

    #[test]
    fn match_only_extremes() {
        let l = match_only(6, 4);
        assert_eq!(synthetic_oracle(&l.target_sequence, &l).unwrap(), 1.0);
        let mismatch = Sequence::new(l.target_sequence.tokens().iter().map(|t| (t + 1) % 4).collect());
        assert_eq!(synthetic_oracle(&mismatch, &l).unwrap(), 0.0);
    }

    #[test]
    fn generated_target_is_optimum() {
        let l = SyntheticLandscape::generate(&LandscapeConfig::new(12, 20, 3)).unwrap();
        assert_eq!(l.pairwise_weights.len(), 24);
        let best = synthetic_oracle(&l.target_sequence, &l).unwrap();
        assert!((best - 1.0).abs() < 1e-12);
        let full = l.sample_full_set(300, 8, 1).unwrap();
        for r in full.records() {
            assert!(r.raw_fitness <= best && r.raw_fitness >= 0.0);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let l = match_only(4, 3);
        assert!(synthetic_oracle(&Sequence::new(vec![0, 1]), &l).is_err());
    }

    #[test]
    fn relaxed_agrees_on_hard_inputs() {
        let l = SyntheticLandscape::generate(&LandscapeConfig::new(10, 20, 9)).unwrap();
        let full = l.sample_full_set(50, 6, 2).unwrap();
        for r in full.records() {
            let (v, _) = l.relaxed_value_and_grad(one_hot(&r.sequence, 20).view()).unwrap();
            assert!((v - r.raw_fitness).abs() < 1e-12);
        }
    }
}
