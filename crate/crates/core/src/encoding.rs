//! The continuous architecture search space.
//!
//! A child network has `L` parametrized layers, each a softmax mixture over
//! `p = |base_sizes| * |activations|` base layers (logits `alpha`), a presence
//! gate per layer (logit `beta`), and a softmax choice over `E` preprocessing
//! modules (logits `gamma`).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{sigmoid, softmax, Activation};
use crate::{Error, Result};

/// Logit used for the selected option when sampling one-hot encodings.
pub const HOT: f64 = 8.0;
/// Logit used for every unselected option.
pub const COLD: f64 = -8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub num_layers: usize,
    pub base_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub num_preproc_modules: usize,
}

impl Default for SearchSpaceSpec {
    /// Full-size space: seven layers of twelve base layers each.
    fn default() -> Self {
        Self {
            num_layers: 7,
            base_sizes: vec![8, 16, 32, 64, 128, 256],
            activations: vec![Activation::Relu, Activation::Tanh],
            num_preproc_modules: 3,
        }
    }
}

impl SearchSpaceSpec {
    /// Small space used for tests and desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            num_layers: 3,
            base_sizes: vec![4, 8, 16],
            activations: vec![Activation::Relu, Activation::Tanh],
            num_preproc_modules: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidInput("num_layers must be >= 1".into()));
        }
        if self.base_sizes.is_empty() || self.base_sizes.contains(&0) {
            return Err(Error::InvalidInput(
                "base_sizes must be non-empty and positive".into(),
            ));
        }
        if self.activations.is_empty() {
            return Err(Error::InvalidInput("activations must be non-empty".into()));
        }
        if self.num_preproc_modules == 0 {
            return Err(Error::InvalidInput(
                "num_preproc_modules must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Base layers per parametrized layer.
    pub fn num_base_layers(&self) -> usize {
        self.base_sizes.len() * self.activations.len()
    }

    /// Common width of all parametrized layers.
    pub fn width(&self) -> usize {
        self.base_sizes.iter().copied().max().unwrap_or(0)
    }

    /// (size, activation) of base layer `i`; sizes vary slowest.
    pub fn base_layer(&self, i: usize) -> (usize, Activation) {
        let a = self.activations.len();
        (self.base_sizes[i / a], self.activations[i % a])
    }

    pub fn encoding_len(&self) -> usize {
        self.num_layers * self.num_base_layers() + self.num_layers + self.num_preproc_modules
    }

    /// Hex digest identifying the space (layers, sizes, activations, modules).
    pub fn fingerprint(&self) -> String {
        let acts: Vec<&str> = self.activations.iter().map(|a| a.name()).collect();
        let canonical = format!(
            "L={};sizes={:?};acts={:?};E={}",
            self.num_layers, self.base_sizes, acts, self.num_preproc_modules
        );
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureEncoding {
    fingerprint: String,
    num_layers: usize,
    num_base: usize,
    /// Row-major `num_layers x num_base` mixing logits.
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

impl ArchitectureEncoding {
    pub fn zeros(space: &SearchSpaceSpec) -> Self {
        let (l, p) = (space.num_layers, space.num_base_layers());
        Self {
            fingerprint: space.fingerprint(),
            num_layers: l,
            num_base: p,
            alpha: vec![0.0; l * p],
            beta: vec![0.0; l],
            gamma: vec![0.0; space.num_preproc_modules],
        }
    }

    pub fn from_parts(
        space: &SearchSpaceSpec,
        alpha: Vec<Vec<f64>>,
        beta: Vec<f64>,
        gamma: Vec<f64>,
    ) -> Result<Self> {
        let p = space.num_base_layers();
        if alpha.len() != space.num_layers || alpha.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput(format!(
                "alpha must be {}x{}",
                space.num_layers, p
            )));
        }
        let enc = Self {
            fingerprint: space.fingerprint(),
            num_layers: space.num_layers,
            num_base: p,
            alpha: alpha.into_iter().flatten().collect(),
            beta,
            gamma,
        };
        enc.check_space(space)?;
        Ok(enc)
    }

    /// Checks the fingerprint and dimensions against `space` and that every
    /// entry is finite.
    pub fn check_space(&self, space: &SearchSpaceSpec) -> Result<()> {
        let expected = space.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        if self.num_layers != space.num_layers
            || self.num_base != space.num_base_layers()
            || self.alpha.len() != self.num_layers * self.num_base
            || self.beta.len() != space.num_layers
            || self.gamma.len() != space.num_preproc_modules
        {
            return Err(Error::InvalidInput(
                "encoding dimensions do not match the search space".into(),
            ));
        }
        if let Some(i) = self.flatten().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                context: "encoding".into(),
            });
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Fingerprint of the space this encoding was built for.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn alpha_row(&self, layer: usize) -> Result<&[f64]> {
        self.check_layer(layer)?;
        Ok(&self.alpha[layer * self.num_base..(layer + 1) * self.num_base])
    }

    pub fn alpha_row_mut(&mut self, layer: usize) -> Result<&mut [f64]> {
        self.check_layer(layer)?;
        Ok(&mut self.alpha[layer * self.num_base..(layer + 1) * self.num_base])
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut [f64] {
        &mut self.gamma
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.num_layers {
            return Err(Error::OutOfRange {
                index: layer,
                len: self.num_layers,
            });
        }
        Ok(())
    }

    /// Softmax of the layer's alpha row.
    pub fn mixing_weights(&self, layer: usize) -> Result<Vec<f64>> {
        softmax(self.alpha_row(layer)?)
    }

    /// Presence gate `sigmoid(beta_j)`.
    pub fn layer_gate(&self, layer: usize) -> Result<f64> {
        self.check_layer(layer)?;
        Ok(sigmoid(self.beta[layer]))
    }

    /// Softmax over preprocessing modules.
    pub fn module_weights(&self) -> Result<Vec<f64>> {
        softmax(&self.gamma)
    }

    /// Random point whose softmaxes are approximately one-hot.
    pub fn random_one_hot<R: Rng + ?Sized>(space: &SearchSpaceSpec, rng: &mut R) -> Self {
        let mut enc = Self::zeros(space);
        enc.alpha.iter_mut().for_each(|a| *a = COLD);
        for j in 0..enc.num_layers {
            let pick = rng.random_range(0..enc.num_base);
            enc.alpha[j * enc.num_base + pick] = HOT;
        }
        for b in &mut enc.beta {
            *b = if rng.random_bool(0.5) { HOT } else { COLD };
        }
        enc.gamma.iter_mut().for_each(|g| *g = COLD);
        let module = rng.random_range(0..enc.gamma.len());
        enc.gamma[module] = HOT;
        enc
    }

    /// `[alpha row-major, beta, gamma]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.alpha.len() + self.beta.len() + self.gamma.len());
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.gamma);
        out
    }

    pub fn unflatten(space: &SearchSpaceSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != space.encoding_len() {
            return Err(Error::InvalidInput(format!(
                "flat encoding has length {}, expected {}",
                flat.len(),
                space.encoding_len()
            )));
        }
        let na = space.num_layers * space.num_base_layers();
        let nb = space.num_layers;
        Ok(Self {
            fingerprint: space.fingerprint(),
            num_layers: space.num_layers,
            num_base: space.num_base_layers(),
            alpha: flat[..na].to_vec(),
            beta: flat[na..na + nb].to_vec(),
            gamma: flat[na + nb..].to_vec(),
        })
    }

    /// Argmax per slot (lowest index wins ties); gate on iff sigmoid(beta) >= 0.5.
    pub fn discretize(&self, space: &SearchSpaceSpec) -> DiscreteArchitecture {
        let layers = (0..self.num_layers)
            .map(|j| {
                let row = &self.alpha[j * self.num_base..(j + 1) * self.num_base];
                let base_index = argmax(row);
                let (size, activation) = space.base_layer(base_index);
                DiscreteLayer {
                    base_index,
                    size,
                    activation,
                    enabled: sigmoid(self.beta[j]) >= 0.5,
                }
            })
            .collect();
        DiscreteArchitecture {
            layers,
            preproc_module: argmax(&self.gamma),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteLayer {
    pub base_index: usize,
    pub size: usize,
    pub activation: Activation,
    pub enabled: bool,
}

/// Human-readable reading of an encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteArchitecture {
    pub layers: Vec<DiscreteLayer>,
    pub preproc_module: usize,
}

impl fmt::Display for DiscreteArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "module{}", self.preproc_module)?;
        for l in &self.layers {
            if l.enabled {
                write!(f, " -> {}{}", l.activation.name(), l.size)?;
            } else {
                write!(f, " -> (skip)")?;
            }
        }
        write!(f, " -> softmax")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn default_space_shape() {
        let s = SearchSpaceSpec::default();
        assert_eq!(s.num_base_layers(), 12);
        assert_eq!(s.width(), 256);
        assert_eq!(s.encoding_len(), 7 * 12 + 7 + 3);
        assert_eq!(s.base_layer(0), (8, Activation::Relu));
        assert_eq!(s.base_layer(11), (256, Activation::Tanh));
    }

    #[test]
    fn fingerprint_distinguishes_spaces() {
        assert_ne!(
            SearchSpaceSpec::default().fingerprint(),
            SearchSpaceSpec::desk().fingerprint()
        );
        assert_eq!(SearchSpaceSpec::desk().fingerprint().len(), 32);
        let mut other = SearchSpaceSpec::desk();
        other.base_sizes = vec![5, 8, 16];
        let enc = ArchitectureEncoding::zeros(&SearchSpaceSpec::desk());
        assert!(matches!(
            enc.check_space(&other),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(enc.check_space(&SearchSpaceSpec::desk()).is_ok());
    }

    #[test]
    fn mixing_weights_cases() {
        let s = SearchSpaceSpec::default();
        let mut enc = ArchitectureEncoding::zeros(&s);
        for w in enc.mixing_weights(0).unwrap() {
            assert!((w - 1.0 / 12.0).abs() < 1e-15);
        }
        enc.alpha_row_mut(1).unwrap()[0] = 10.0;
        assert!(enc.mixing_weights(1).unwrap()[0] > 0.999);
        assert!(matches!(
            enc.mixing_weights(7),
            Err(Error::OutOfRange { index: 7, len: 7 })
        ));
    }

    #[test]
    fn mixing_weights_are_permutation_equivariant() {
        let s = SearchSpaceSpec::desk();
        let mut rng = seeding::rng(5);
        let mut enc = ArchitectureEncoding::zeros(&s);
        let row: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        enc.alpha_row_mut(0).unwrap().copy_from_slice(&row);
        let w = enc.mixing_weights(0).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted: Vec<f64> = perm.iter().map(|&i| row[i]).collect();
        enc.alpha_row_mut(0).unwrap().copy_from_slice(&permuted);
        let wp = enc.mixing_weights(0).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((wp[k] - w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_values() {
        let s = SearchSpaceSpec::desk();
        let mut enc = ArchitectureEncoding::zeros(&s);
        assert_eq!(enc.layer_gate(0).unwrap(), 0.5);
        enc.beta_mut()[1] = 20.0;
        assert!(enc.layer_gate(1).unwrap() > 0.999_999);
        enc.beta_mut()[2] = 1.0;
        assert!((enc.layer_gate(2).unwrap() - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-16);
        assert!(enc.layer_gate(3).is_err());
    }

    #[test]
    fn one_hot_samples_are_nearly_degenerate() {
        let s = SearchSpaceSpec::default();
        let mut rng = seeding::rng(11);
        for _ in 0..50 {
            let enc = ArchitectureEncoding::random_one_hot(&s, &mut rng);
            for j in 0..s.num_layers {
                let w = enc.mixing_weights(j).unwrap();
                assert!(w.iter().copied().fold(0.0, f64::max) > 0.999);
                assert!(enc.beta()[j] == HOT || enc.beta()[j] == COLD);
            }
            assert_eq!(enc.gamma().iter().filter(|&&g| g == HOT).count(), 1);
        }
    }

    #[test]
    fn one_hot_base_choice_is_uniform() {
        let s = SearchSpaceSpec::default();
        let p = s.num_base_layers();
        let n = 10_000;
        let mut rng = seeding::rng(12);
        let mut counts = vec![0usize; p];
        for _ in 0..n {
            let enc = ArchitectureEncoding::random_one_hot(&s, &mut rng);
            counts[enc.discretize(&s).layers[0].base_index] += 1;
        }
        let q = 1.0 / p as f64;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * q).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn flatten_layout() {
        let s = SearchSpaceSpec {
            num_layers: 1,
            base_sizes: vec![2],
            activations: vec![Activation::Relu, Activation::Tanh],
            num_preproc_modules: 1,
        };
        let enc = ArchitectureEncoding::from_parts(&s, vec![vec![1.0, 2.0]], vec![3.0], vec![4.0])
            .unwrap();
        assert_eq!(enc.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(ArchitectureEncoding::unflatten(&s, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn discretize_cases() {
        let s = SearchSpaceSpec::desk();
        let zero = ArchitectureEncoding::zeros(&s).discretize(&s);
        assert!(zero.layers.iter().all(|l| l.base_index == 0 && l.enabled));
        assert_eq!(zero.preproc_module, 0);

        let mut rng = seeding::rng(3);
        let enc = ArchitectureEncoding::random_one_hot(&s, &mut rng);
        let d = enc.discretize(&s);
        for (j, l) in d.layers.iter().enumerate() {
            assert_eq!(enc.alpha_row(j).unwrap()[l.base_index], HOT);
            assert_eq!(l.enabled, enc.beta()[j] == HOT);
        }
        assert_eq!(enc.gamma()[d.preproc_module], HOT);
    }

    #[test]
    fn discretize_matches_linear_scan() {
        let s = SearchSpaceSpec::desk();
        let mut rng = seeding::rng(4);
        for _ in 0..200 {
            let flat: Vec<f64> = (0..s.encoding_len())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let enc = ArchitectureEncoding::unflatten(&s, &flat).unwrap();
            let d = enc.discretize(&s);
            let p = s.num_base_layers();
            for j in 0..s.num_layers {
                let row = &flat[j * p..(j + 1) * p];
                let mut best = 0;
                for i in 1..p {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                assert_eq!(d.layers[j].base_index, best);
                assert_eq!(d.layers[j].enabled, flat[s.num_layers * p + j] >= 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(vals in proptest::collection::vec(-50.0f64..50.0, 24)) {
            let s = SearchSpaceSpec::desk();
            let enc = ArchitectureEncoding::unflatten(&s, &vals).unwrap();
            prop_assert_eq!(enc.flatten(), vals.clone());
            let again = ArchitectureEncoding::unflatten(&s, &enc.flatten()).unwrap();
            prop_assert_eq!(again, enc);
        }

        #[test]
        fn alpha_shift_invariance(
            vals in proptest::collection::vec(-5.0f64..5.0, 24),
            shift in -100.0f64..100.0,
        ) {
            let s = SearchSpaceSpec::desk();
            let enc = ArchitectureEncoding::unflatten(&s, &vals).unwrap();
            let mut shifted = enc.clone();
            for v in shifted.alpha_row_mut(1).unwrap() {
                *v += shift;
            }
            let (a, b) = (enc.mixing_weights(1).unwrap(), shifted.mixing_weights(1).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(enc.discretize(&s), shifted.discretize(&s));
        }
    }
}
