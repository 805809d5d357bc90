//! JSON layouts for similarity reports, traces, probes, profiles, rank diffs,
//! categories and training logs. Every file carries `format_version`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{Bucket, CategoryReport, RankDiffReport, UtilizationProfile, SIGN_CONVENTION};
use crate::error::{Error, Result};
use crate::io::{check_version, peek_version, to_json_bytes, FORMAT_VERSION};
use crate::model::{ActivationTrace, ModelConfig, NeuronId};
use crate::selector::{ProbeModel, SimilarityReport};
use crate::trainer::TrainLog;

/// A value that has a versioned JSON file form.
pub trait JsonArtifact: Sized {
    fn to_json(&self) -> Result<Vec<u8>>;
    fn from_json(bytes: &[u8]) -> Result<Self>;
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u64,
    #[serde(flatten)]
    body: T,
}

fn write_versioned<T: Serialize>(body: T) -> Result<Vec<u8>> {
    to_json_bytes(&Versioned {
        format_version: FORMAT_VERSION,
        body,
    })
}

fn read_versioned<T: DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    peek_version(bytes)?;
    let v: Versioned<T> = serde_json::from_slice(bytes)
        .map_err(|e| Error::Malformed(format!("{what}: {e}")))?;
    check_version(v.format_version)?;
    Ok(v.body)
}

fn check_canonical<'a>(
    config: &ModelConfig,
    ids: impl ExactSizeIterator<Item = &'a NeuronId>,
    what: &str,
) -> Result<()> {
    config.validate()?;
    if ids.len() != config.neuron_count() {
        return Err(Error::Malformed(format!(
            "{what} lists {} neurons, model has {}",
            ids.len(),
            config.neuron_count()
        )));
    }
    for (got, want) in ids.zip(config.neurons()) {
        if *got != want {
            return Err(Error::Malformed(format!("{what}: expected neuron {want}, found {got}")));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SimilarityFile {
    config: ModelConfig,
    #[serde(with = "crate::io::hex_u64")]
    org_hash: u64,
    #[serde(with = "crate::io::hex_u64")]
    ft_hash: u64,
    scores: Vec<(NeuronId, f64)>,
}

impl JsonArtifact for SimilarityReport {
    fn to_json(&self) -> Result<Vec<u8>> {
        self.validate()?;
        write_versioned(SimilarityFile {
            config: self.config.clone(),
            org_hash: self.org_hash,
            ft_hash: self.ft_hash,
            scores: self.iter().map(|(id, s)| (id, s.clamp(-1.0, 1.0))).collect(),
        })
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: SimilarityFile = read_versioned(bytes, "similarity report")?;
        check_canonical(&f.config, f.scores.iter().map(|(id, _)| id), "similarity report")?;
        let r = SimilarityReport {
            config: f.config,
            org_hash: f.org_hash,
            ft_hash: f.ft_hash,
            scores: f.scores.into_iter().map(|(_, s)| s).collect(),
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileEntry {
    neuron: NeuronId,
    max_pearson: f64,
    rank: usize,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    config: ModelConfig,
    #[serde(with = "crate::io::hex_u64")]
    dataset_hash: u64,
    #[serde(with = "crate::io::hex_u64")]
    model_hash: u64,
    neurons: Vec<ProfileEntry>,
}

impl JsonArtifact for UtilizationProfile {
    fn to_json(&self) -> Result<Vec<u8>> {
        self.validate()?;
        write_versioned(ProfileFile {
            config: self.config.clone(),
            dataset_hash: self.dataset_hash,
            model_hash: self.model_hash,
            neurons: self
                .config
                .neurons()
                .zip(self.max_pearson.iter().zip(&self.rank))
                .map(|(neuron, (&max_pearson, &rank))| ProfileEntry {
                    neuron,
                    max_pearson,
                    rank,
                })
                .collect(),
        })
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: ProfileFile = read_versioned(bytes, "utilization profile")?;
        check_canonical(&f.config, f.neurons.iter().map(|e| &e.neuron), "utilization profile")?;
        let p = UtilizationProfile {
            config: f.config,
            max_pearson: f.neurons.iter().map(|e| e.max_pearson).collect(),
            rank: f.neurons.iter().map(|e| e.rank).collect(),
            dataset_hash: f.dataset_hash,
            model_hash: f.model_hash,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct BucketEntry {
    lo: f64,
    hi: f64,
    count: usize,
    avg_abs_delta: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RankDiffFile {
    sign_convention: String,
    config: ModelConfig,
    #[serde(with = "crate::io::hex_u64")]
    profile_a_hash: u64,
    #[serde(with = "crate::io::hex_u64")]
    profile_b_hash: u64,
    avg_abs_delta: f64,
    buckets: Vec<BucketEntry>,
    delta_rank: Vec<(NeuronId, i64)>,
}

impl JsonArtifact for RankDiffReport {
    fn to_json(&self) -> Result<Vec<u8>> {
        write_versioned(RankDiffFile {
            sign_convention: SIGN_CONVENTION.to_string(),
            config: self.config.clone(),
            profile_a_hash: self.profile_a_hash,
            profile_b_hash: self.profile_b_hash,
            avg_abs_delta: self.avg_abs_delta,
            buckets: self
                .buckets
                .iter()
                .map(|b| BucketEntry {
                    lo: b.lo,
                    hi: b.hi,
                    count: b.count,
                    avg_abs_delta: b.avg_abs_delta,
                })
                .collect(),
            delta_rank: self.config.neurons().zip(self.delta.iter().copied()).collect(),
        })
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: RankDiffFile = read_versioned(bytes, "rank diff")?;
        check_canonical(&f.config, f.delta_rank.iter().map(|(id, _)| id), "rank diff")?;
        Ok(RankDiffReport {
            config: f.config,
            delta: f.delta_rank.into_iter().map(|(_, d)| d).collect(),
            avg_abs_delta: f.avg_abs_delta,
            buckets: f
                .buckets
                .into_iter()
                .map(|b| Bucket {
                    lo: b.lo,
                    hi: b.hi,
                    count: b.count,
                    avg_abs_delta: b.avg_abs_delta,
                })
                .collect(),
            profile_a_hash: f.profile_a_hash,
            profile_b_hash: f.profile_b_hash,
        })
    }
}

/// Tab-separated `bucket\tavg_abs_delta` rows for plotting; empty buckets print `nan`.
pub fn rank_diff_plot(report: &RankDiffReport) -> String {
    let mut s = String::from("bucket\tavg_abs_delta\n");
    for b in &report.buckets {
        let v = b.avg_abs_delta.map_or_else(|| "nan".to_string(), |v| v.to_string());
        s.push_str(&format!("{}-{}\t{v}\n", b.lo, b.hi));
    }
    s
}

#[derive(Serialize, Deserialize)]
struct CategoryFile {
    sign_convention: String,
    threshold: usize,
    mask_provenance: String,
    #[serde(with = "crate::io::hex_u64")]
    mask_model_hash: u64,
    strongly_affected: Vec<NeuronId>,
    suppressed: Vec<NeuronId>,
    indirectly_affected: Vec<NeuronId>,
}

impl JsonArtifact for CategoryReport {
    fn to_json(&self) -> Result<Vec<u8>> {
        write_versioned(CategoryFile {
            sign_convention: SIGN_CONVENTION.to_string(),
            threshold: self.threshold,
            mask_provenance: self.mask_provenance.clone(),
            mask_model_hash: self.mask_model_hash,
            strongly_affected: self.strongly_affected.clone(),
            suppressed: self.suppressed.clone(),
            indirectly_affected: self.indirectly_affected.clone(),
        })
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: CategoryFile = read_versioned(bytes, "category report")?;
        Ok(CategoryReport {
            strongly_affected: f.strongly_affected,
            suppressed: f.suppressed,
            indirectly_affected: f.indirectly_affected,
            threshold: f.threshold,
            mask_provenance: f.mask_provenance,
            mask_model_hash: f.mask_model_hash,
        })
    }
}

impl JsonArtifact for ActivationTrace {
    fn to_json(&self) -> Result<Vec<u8>> {
        self.validate()?;
        write_versioned(self)
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        let t: ActivationTrace = read_versioned(bytes, "activation trace")?;
        t.validate()?;
        Ok(t)
    }
}

impl JsonArtifact for TrainLog {
    fn to_json(&self) -> Result<Vec<u8>> {
        write_versioned(self)
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        read_versioned(bytes, "train log")
    }
}

impl JsonArtifact for ProbeModel {
    fn to_json(&self) -> Result<Vec<u8>> {
        to_json_bytes(self)
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        peek_version(bytes)?;
        let p: ProbeModel =
            serde_json::from_slice(bytes).map_err(|e| Error::Malformed(format!("probe: {e}")))?;
        if p.weights.is_empty() || p.weights.len() != p.bias.len() {
            return Err(Error::Malformed("probe needs one weight vector and bias per class".into()));
        }
        if p.weights.iter().flatten().chain(&p.bias).any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite probe weight".into()));
        }
        Ok(p)
    }
}
