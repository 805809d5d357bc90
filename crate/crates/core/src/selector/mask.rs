use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NeuronId};

/// A canonical-ordered, duplicate-free set of neurons tied to one model.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronMask {
    neurons: Vec<NeuronId>,
    /// Requested budget for selections, `|neurons| / total_neurons` otherwise.
    pub fraction: f64,
    pub provenance: String,
    pub model_hash: u64,
    /// Neuron count of the model the mask refers to.
    pub total_neurons: usize,
}

impl NeuronMask {
    pub fn new(
        neurons: impl IntoIterator<Item = NeuronId>,
        fraction: f64,
        provenance: impl Into<String>,
        model_hash: u64,
        total_neurons: usize,
    ) -> Self {
        let set: BTreeSet<NeuronId> = neurons.into_iter().collect();
        Self {
            neurons: set.into_iter().collect(),
            fraction,
            provenance: provenance.into(),
            model_hash,
            total_neurons,
        }
    }

    /// A mask whose fraction is its actual share of the model's neurons.
    pub fn from_neurons(
        config: &ModelConfig,
        neurons: impl IntoIterator<Item = NeuronId>,
        provenance: impl Into<String>,
        model_hash: u64,
    ) -> Result<Self> {
        let total = config.neuron_count();
        let mut mask = Self::new(neurons, 0.0, provenance, model_hash, total);
        mask.validate_for(config)?;
        mask.fraction = mask.len() as f64 / total as f64;
        Ok(mask)
    }

    /// Every MLP row of the model.
    pub fn all(config: &ModelConfig, model_hash: u64) -> Self {
        Self::new(config.neurons(), 1.0, "all", model_hash, config.neuron_count())
    }

    pub fn neurons(&self) -> &[NeuronId] {
        &self.neurons
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn contains(&self, id: NeuronId) -> bool {
        self.neurons.binary_search(&id).is_ok()
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        for &id in &self.neurons {
            config.check_neuron(id)?;
        }
        if self.total_neurons != config.neuron_count() {
            return Err(Error::ConfigMismatch(format!(
                "mask was built for {} neurons, model has {}",
                self.total_neurons,
                config.neuron_count()
            )));
        }
        Ok(())
    }

    fn check_compatible(&self, other: &NeuronMask) -> Result<()> {
        if self.model_hash != other.model_hash {
            return Err(Error::ModelHashMismatch(self.model_hash, other.model_hash));
        }
        if self.total_neurons != other.total_neurons {
            return Err(Error::ConfigMismatch(format!(
                "masks cover {} and {} neurons",
                self.total_neurons, other.total_neurons
            )));
        }
        Ok(())
    }

    pub fn intersection_len(&self, other: &NeuronMask) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.neurons.len() && j < other.neurons.len() {
            match self.neurons[i].cmp(&other.neurons[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// Set union of two masks over the same model (the multi-task merge).
pub fn union_masks(a: &NeuronMask, b: &NeuronMask) -> Result<NeuronMask> {
    a.check_compatible(b)?;
    let neurons = a.neurons.iter().chain(&b.neurons).copied();
    let mut out = NeuronMask::new(
        neurons,
        0.0,
        format!("union({},{})", a.provenance, b.provenance),
        a.model_hash,
        a.total_neurons,
    );
    out.fraction = out.len() as f64 / a.total_neurons as f64;
    Ok(out)
}

/// `|a ∩ b| / min(|a|, |b|)`.
pub fn overlap(a: &NeuronMask, b: &NeuronMask) -> Result<f64> {
    a.check_compatible(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("overlap of an empty mask".into()));
    }
    Ok(a.intersection_len(b) as f64 / a.len().min(b.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(rows: &[usize]) -> Vec<NeuronId> {
        rows.iter().map(|&r| NeuronId::up(0, r)).collect()
    }

    fn mask(rows: &[usize]) -> NeuronMask {
        NeuronMask::new(ids(rows), 0.1, "t", 42, 100)
    }

    #[test]
    fn canonical_and_deduplicated() {
        let m = NeuronMask::new(
            vec![NeuronId::down(0, 1), NeuronId::up(1, 0), NeuronId::up(0, 3), NeuronId::up(0, 3)],
            0.1,
            "t",
            0,
            10,
        );
        assert_eq!(
            m.neurons(),
            &[NeuronId::up(0, 3), NeuronId::down(0, 1), NeuronId::up(1, 0)]
        );
    }

    #[test]
    fn union_cases() {
        let a = mask(&[1, 2, 3]);
        let u = union_masks(&a, &a).unwrap();
        assert_eq!(u.neurons(), a.neurons());
        let b = mask(&[2, 3, 4]);
        let u = union_masks(&a, &b).unwrap();
        assert_eq!(u.neurons(), ids(&[1, 2, 3, 4]).as_slice());
        assert_eq!(u.fraction, 0.04);
        assert_eq!(u.provenance, "union(t,t)");
        let c = mask(&[7, 8]);
        assert_eq!(union_masks(&a, &c).unwrap().len(), 5);
    }

    #[test]
    fn overlap_cases() {
        let a = mask(&[1, 2, 3]);
        let b = mask(&[2, 3, 4]);
        assert_eq!(overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap(&a, &mask(&[5, 6])).unwrap(), 0.0);
        assert!((overlap(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(overlap(&a, &mask(&[])), Err(Error::Empty(_))));
    }

    #[test]
    fn hash_mismatch_is_an_error() {
        let a = mask(&[1]);
        let b = NeuronMask::new(ids(&[1]), 0.1, "t", 43, 100);
        assert!(matches!(union_masks(&a, &b), Err(Error::ModelHashMismatch(42, 43))));
        assert!(matches!(overlap(&a, &b), Err(Error::ModelHashMismatch(..))));
    }
}
