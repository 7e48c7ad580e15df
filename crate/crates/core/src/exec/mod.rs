//! Execution and measurement of lowered programs.

mod cache;
mod features;
mod interp;
mod reference;
mod surrogate;

pub use cache::{simulate_cache, CacheConfig, ProfileCounters};
pub use features::{extract_features, FeatureVector, FEATURE_LEN};
pub use interp::{interpret, run_program, ExecStats};
pub use reference::reference_eval;
pub use surrogate::{predict_cost, train_surrogate, Predictor, MIN_SAMPLES};

use std::collections::BTreeMap;
use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::Graph;

/// Scalar type a program can run on. `i32` arithmetic wraps.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn add(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn max(self, o: Self) -> Self;
    fn random(rng: &mut impl Rng) -> Self;
    /// Exact for integers, `1e-5` relative for floats.
    fn close(self, o: Self) -> bool;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn max(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn random(rng: &mut impl Rng) -> Self {
        rng.gen_range(-1.0..1.0)
    }
    fn close(self, o: Self) -> bool {
        (self - o).abs() <= 1e-5 * self.abs().max(o.abs()).max(1.0)
    }
}

impl Element for i32 {
    fn from_f64(v: f64) -> Self {
        v as i32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
    fn mul(self, o: Self) -> Self {
        self.wrapping_mul(o)
    }
    fn max(self, o: Self) -> Self {
        Ord::max(self, o)
    }
    fn random(rng: &mut impl Rng) -> Self {
        rng.gen_range(-4..=4)
    }
    fn close(self, o: Self) -> bool {
        self == o
    }
}

/// Seeded random data for every input and constant tensor of `g`.
pub fn random_inputs<T: Element>(g: &Graph, seed: u64) -> BTreeMap<String, Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.tensors
        .iter()
        .filter(|t| t.is_source())
        .map(|t| (t.id.clone(), (0..t.numel()).map(|_| T::random(&mut rng)).collect()))
        .collect()
}

/// First tensor whose contents differ, with the flat index of the first bad
/// element. Only tensors present in both maps are compared.
pub fn first_mismatch<T: Element>(
    got: &BTreeMap<String, Vec<T>>,
    want: &BTreeMap<String, Vec<T>>,
) -> Option<(String, usize)> {
    for (id, w) in want {
        let Some(g) = got.get(id) else { continue };
        if g.len() != w.len() {
            return Some((id.clone(), 0));
        }
        if let Some(k) = g.iter().zip(w).position(|(a, b)| !a.close(*b)) {
            return Some((id.clone(), k));
        }
    }
    None
}

#[cfg(test)]
mod tests;
