use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named weight tensors. This is the unit that clients
/// and the server exchange.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry, keeping insertion order. Replacing an existing name
    /// keeps its original position.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names in the same order with identical shapes.
    pub fn is_compatible(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.is_compatible(other) {
            return Ok(());
        }
        let detail = self
            .entries
            .iter()
            .zip(&other.entries)
            .find(|((ka, va), (kb, vb))| ka != kb || va.shape() != vb.shape())
            .map(|((ka, va), (kb, vb))| {
                format!("{ka}{:?} vs {kb}{:?}", va.shape(), vb.shape())
            })
            .unwrap_or_else(|| {
                format!("{} entries vs {}", self.entries.len(), other.entries.len())
            });
        Err(Error::Incompatible(detail))
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|t| Tensor::zeros(t.shape().to_vec()))
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), f(v)))
                .collect(),
        }
    }

    /// Elementwise `f(self, other)` over two compatible sets.
    pub fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.ensure_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((k, a), b)| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (k.clone(), Tensor::from_parts(a.shape().to_vec(), data))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    /// Affine combination `Σ αᵢ wᵢ` with `Σ αᵢ = 1`.
    ///
    /// Evaluated as `w₀ + Σ_{i≥1} αᵢ (wᵢ − w₀)` in index order, so identical
    /// inputs come back bit-for-bit and a single input is returned unchanged.
    pub fn affine_combination(sets: &[&ParamSet], alphas: &[f64]) -> Result<ParamSet> {
        let base = *sets
            .first()
            .ok_or_else(|| Error::Incompatible("no parameter sets to combine".into()))?;
        if sets.len() != alphas.len() {
            return Err(Error::contract(format!(
                "{} parameter sets but {} coefficients",
                sets.len(),
                alphas.len()
            )));
        }
        let total: f64 = alphas.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!(
                "affine coefficients sum to {total}, expected 1"
            )));
        }
        for s in &sets[1..] {
            base.ensure_compatible(s)?;
        }
        let mut out = base.clone();
        for (set, &alpha) in sets.iter().zip(alphas).skip(1) {
            for ((acc, b), w) in out
                .entries
                .values_mut()
                .zip(base.entries.values())
                .zip(set.entries.values())
            {
                for ((o, &b0), &wi) in acc.data_mut().iter_mut().zip(b.data()).zip(w.data()) {
                    *o += alpha * (wi - b0);
                }
            }
        }
        Ok(out)
    }

    /// Entries whose names start with any of `prefixes`, in original order.
    pub fn select(&self, prefixes: &[&str]) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Replaces every entry of `self` that also appears in `donor`. Shapes
    /// must agree on the shared names.
    pub fn overwrite_from(&mut self, donor: &ParamSet) -> Result<usize> {
        let mut replaced = 0;
        for (name, value) in donor.iter() {
            if let Some(slot) = self.entries.get_mut(name) {
                if slot.shape() != value.shape() {
                    return Err(Error::Incompatible(format!(
                        "{name}: {:?} vs {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value.clone();
                replaced += 1;
            }
        }
        Ok(replaced)
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bits_eq(vb))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// SHA-256 over names, shapes and the exact bits of every weight.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// One SGD update `w ← w − η·g`; the inputs are left untouched.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    if !(lr > 0.0) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    params.zip_with(grads, |w, g| w - lr * g)
}
