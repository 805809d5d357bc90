use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{check_version, peek_version, to_json_bytes, FORMAT_VERSION};
use crate::model::NeuronId;
use crate::selector::NeuronMask;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    format_version: u64,
    #[serde(with = "crate::io::hex_u64")]
    model_hash: u64,
    fraction: f64,
    provenance: String,
    total_neurons: usize,
    neurons: Vec<NeuronId>,
}

/// JSON mask file; neurons as `[layer, "up"|"down", row]` in canonical order.
pub fn save_mask(mask: &NeuronMask) -> Result<Vec<u8>> {
    to_json_bytes(&MaskFile {
        format_version: FORMAT_VERSION,
        model_hash: mask.model_hash,
        fraction: mask.fraction,
        provenance: mask.provenance.clone(),
        total_neurons: mask.total_neurons,
        neurons: mask.neurons().to_vec(),
    })
}

pub fn load_mask(bytes: &[u8]) -> Result<NeuronMask> {
    peek_version(bytes)?;
    let f: MaskFile =
        serde_json::from_slice(bytes).map_err(|e| Error::Malformed(format!("mask file: {e}")))?;
    check_version(f.format_version)?;
    if let Some(w) = f.neurons.windows(2).find(|w| w[0] >= w[1]) {
        let why = if w[0] == w[1] { "duplicate" } else { "out-of-order" };
        return Err(Error::Malformed(format!("{why} neuron {} in mask", w[1])));
    }
    if !(f.fraction >= 0.0 && f.fraction <= 1.0) {
        return Err(Error::Malformed(format!("mask fraction {} outside [0, 1]", f.fraction)));
    }
    if f.neurons.len() > f.total_neurons {
        return Err(Error::Malformed(format!(
            "{} neurons in a mask over {}",
            f.neurons.len(),
            f.total_neurons
        )));
    }
    Ok(NeuronMask::new(
        f.neurons,
        f.fraction,
        f.provenance,
        f.model_hash,
        f.total_neurons,
    ))
}
