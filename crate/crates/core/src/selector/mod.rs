//! Neuron selection: checkpoint diffing, budgeted selection, mask algebra and
//! the probe-based selector.

mod mask;
pub(crate) mod probe;
mod similarity;

pub use mask::{overlap, union_masks, NeuronMask};
pub use probe::{fit_probe, pooled_hidden_states, probe_scores, probe_select, ProbeModel};
pub use similarity::{
    budget, cosine, neuron_similarity, select_neurons, SelectionMode, SimilarityReport,
};
