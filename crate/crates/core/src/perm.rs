//! Permutations and the hidden-neuron symmetry group.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A bijection `i ↦ map[i]` of `{0, …, n−1}`.
///
/// Acting on a sequence moves the entry at `i` to position `map[i]`:
/// `(σ·v)[σ(i)] = v[i]`, equivalently `(σ·v)[j] = v[σ⁻¹(j)]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Contract(format!("not a permutation: {map:?}")));
            }
        }
        Ok(Self(map))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        Self(v)
    }

    /// Transposition of `i` and `j`.
    pub fn swap(n: usize, i: usize, j: usize) -> Self {
        let mut v: Vec<usize> = (0..n).collect();
        v.swap(i, j);
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn map(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        Self(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Permutation) -> Self {
        assert_eq!(self.len(), other.len());
        Self(other.0.iter().map(|&i| self.0[i]).collect())
    }

    /// Source index for each destination: `gather[j] = σ⁻¹(j)`.
    pub fn gather_index(&self) -> Vec<usize> {
        self.inverse().0
    }

    /// Applies the action to a sequence of equally sized rows.
    pub fn apply_rows<T: Copy>(&self, data: &[T], row: usize) -> Vec<T> {
        assert_eq!(data.len(), self.len() * row);
        let mut out = data.to_vec();
        for (i, &m) in self.0.iter().enumerate() {
            out[m * row..(m + 1) * row].copy_from_slice(&data[i * row..(i + 1) * row]);
        }
        out
    }
}

/// One permutation per hidden layer `1..L−1` of an MLP with the given dims.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenPerm {
    perms: Vec<Permutation>,
}

impl HiddenPerm {
    pub fn new(perms: Vec<Permutation>) -> Self {
        Self { perms }
    }

    pub fn identity(dims: &[usize]) -> Self {
        Self {
            perms: hidden(dims).iter().map(|&d| Permutation::identity(d)).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self {
            perms: hidden(dims).iter().map(|&d| Permutation::random(d, rng)).collect(),
        }
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    /// Permutation acting on layer `l` of `0..=L`; `None` on the fixed boundary layers.
    pub fn layer(&self, l: usize) -> Option<&Permutation> {
        if l == 0 {
            None
        } else {
            self.perms.get(l - 1)
        }
    }

    pub fn check(&self, dims: &[usize]) -> Result<()> {
        let h = hidden(dims);
        let ours: Vec<usize> = self.perms.iter().map(Permutation::len).collect();
        if h != ours {
            return Err(Error::dims("hidden permutation", &ours, h));
        }
        Ok(())
    }

    pub fn compose(&self, other: &HiddenPerm) -> Self {
        Self {
            perms: self.perms.iter().zip(&other.perms).map(|(a, b)| a.compose(b)).collect(),
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            perms: self.perms.iter().map(Permutation::inverse).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perms.iter().all(Permutation::is_identity)
    }
}

fn hidden(dims: &[usize]) -> &[usize] {
    if dims.len() < 2 {
        &[]
    } else {
        &dims[1..dims.len() - 1]
    }
}
