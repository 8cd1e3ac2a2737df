use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng;

/// Named parameter tensors. Vectors are stored as `1 × n` rows. Iteration
/// order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Array2<f64>>,
}

/// Same keyspace and shapes as the trainable subset of a [`ModelParams`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Array2<f64>>,
}

macro_rules! tensor_map_impl {
    ($t:ty) => {
        impl $t {
            pub fn new() -> Self {
                Self::default()
            }

            pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
                self.tensors.get(name)
            }

            pub fn get_key_value(&self, name: &str) -> Option<(&str, &Array2<f64>)> {
                self.tensors.get_key_value(name).map(|(k, v)| (k.as_str(), v))
            }

            pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
                self.tensors.get_mut(name)
            }

            pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Option<Array2<f64>> {
                self.tensors.insert(name.into(), value)
            }

            pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
                self.tensors.remove(name)
            }

            pub fn contains(&self, name: &str) -> bool {
                self.tensors.contains_key(name)
            }

            pub fn keys(&self) -> impl Iterator<Item = &str> {
                self.tensors.keys().map(String::as_str)
            }

            pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
                self.tensors.iter().map(|(k, v)| (k.as_str(), v))
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
                self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
            }

            pub fn len(&self) -> usize {
                self.tensors.len()
            }

            pub fn is_empty(&self) -> bool {
                self.tensors.is_empty()
            }

            /// Total scalar count.
            pub fn numel(&self) -> usize {
                self.tensors.values().map(|t| t.len()).sum()
            }
        }

        impl FromIterator<(String, Array2<f64>)> for $t {
            fn from_iter<I: IntoIterator<Item = (String, Array2<f64>)>>(iter: I) -> Self {
                Self { tensors: iter.into_iter().collect() }
            }
        }
    };
}

tensor_map_impl!(ModelParams);
tensor_map_impl!(Gradients);

impl ModelParams {
    /// FNV-1a over the sorted `(name, rows, cols)` table. Two parameter sets
    /// share a fingerprint iff they have the same keys and shapes.
    pub fn fingerprint(&self) -> u64 {
        let mut desc = String::new();
        for (k, v) in &self.tensors {
            desc.push_str(&format!("{k}:{}x{};", v.nrows(), v.ncols()));
        }
        rng::fnv1a(desc.as_bytes())
    }

    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ModelParams {
        self.tensors
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Copies every tensor of `src` into `self`, requiring each to already
    /// exist with the same shape. Lists all mismatches on failure.
    pub fn overwrite_from(&mut self, src: &ModelParams) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in &src.tensors {
            match self.tensors.get(k) {
                None => problems.push(format!("{k}: not in target model")),
                Some(t) if t.dim() != v.dim() => {
                    problems.push(format!("{k}: init {:?} vs model {:?}", v.dim(), t.dim()))
                }
                _ => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Shape(format!("incompatible init: {}", problems.join("; "))));
        }
        for (k, v) in &src.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
        Ok(())
    }
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * c);
        }
    }

    /// `self += other`, keyset must match.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if !self.keys().eq(other.keys()) {
            return Err(Error::shape("gradient keysets differ"));
        }
        for (k, v) in &other.tensors {
            *self.tensors.get_mut(k).unwrap() += v;
        }
        Ok(())
    }
}
