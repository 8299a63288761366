//! LoRA checkpoint fusion: element-wise (weighted) averaging of adapters
//! that share the same tensor layout, e.g. the per-epoch checkpoints of one
//! run or adapters trained on different synthetic datasets.

mod container;

use std::collections::BTreeSet;
use std::path::PathBuf;

use half::{bf16, f16};
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use container::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, AdapterCheckpoint, AdapterMetadata,
    CheckpointError, DType, Tensor, TensorError,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompatFinding {
    KeySetMismatch {
        index: usize,
        missing: Vec<String>,
        extra: Vec<String>,
    },
    ShapeMismatch {
        index: usize,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    DtypeMismatch {
        index: usize,
        tensor: String,
        expected: DType,
        found: DType,
    },
    RankMismatch { index: usize, expected: u32, found: u32 },
    AlphaMismatch { index: usize, expected: f64, found: f64 },
    /// Not blocking: the first input's value is kept.
    MetadataConflict { index: usize, field: String },
}

impl CompatFinding {
    pub fn is_blocking(&self) -> bool {
        !matches!(self, CompatFinding::MetadataConflict { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            CompatFinding::KeySetMismatch { .. } => "key set mismatch",
            CompatFinding::ShapeMismatch { .. } => "shape mismatch",
            CompatFinding::DtypeMismatch { .. } => "dtype mismatch",
            CompatFinding::RankMismatch { .. } => "rank mismatch",
            CompatFinding::AlphaMismatch { .. } => "alpha mismatch",
            CompatFinding::MetadataConflict { .. } => "metadata conflict",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CompatReport {
    pub findings: Vec<CompatFinding>,
}

impl CompatReport {
    pub fn is_fusable(&self) -> bool {
        !self.findings.iter().any(CompatFinding::is_blocking)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &CompatFinding> {
        self.findings.iter().filter(|f| !f.is_blocking())
    }
}

impl std::fmt::Display for CompatReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let labels: Vec<String> = self
            .findings
            .iter()
            .map(|finding| format!("{} ({finding:?})", finding.label()))
            .collect();
        f.write_str(&labels.join("; "))
    }
}

/// Compares every checkpoint against the first one.
pub fn check_compatible(ckpts: &[AdapterCheckpoint]) -> CompatReport {
    let mut findings = Vec::new();
    let Some((first, rest)) = ckpts.split_first() else {
        return CompatReport::default();
    };
    let first_keys: BTreeSet<&str> = first.tensors.keys().map(String::as_str).collect();
    for (offset, other) in rest.iter().enumerate() {
        let index = offset + 1;
        let keys: BTreeSet<&str> = other.tensors.keys().map(String::as_str).collect();
        if keys != first_keys {
            findings.push(CompatFinding::KeySetMismatch {
                index,
                missing: first_keys.difference(&keys).map(|s| s.to_string()).collect(),
                extra: keys.difference(&first_keys).map(|s| s.to_string()).collect(),
            });
        }
        for (name, reference) in &first.tensors {
            let Some(tensor) = other.tensors.get(name) else {
                continue;
            };
            if tensor.shape() != reference.shape() {
                findings.push(CompatFinding::ShapeMismatch {
                    index,
                    tensor: name.clone(),
                    expected: reference.shape().to_vec(),
                    found: tensor.shape().to_vec(),
                });
            }
            if tensor.dtype() != reference.dtype() {
                findings.push(CompatFinding::DtypeMismatch {
                    index,
                    tensor: name.clone(),
                    expected: reference.dtype(),
                    found: tensor.dtype(),
                });
            }
        }
        let (a, b) = (&first.metadata, &other.metadata);
        if a.rank != b.rank {
            findings.push(CompatFinding::RankMismatch {
                index,
                expected: a.rank,
                found: b.rank,
            });
        }
        if a.alpha != b.alpha {
            findings.push(CompatFinding::AlphaMismatch {
                index,
                expected: a.alpha,
                found: b.alpha,
            });
        }
        if a.target_modules != b.target_modules {
            findings.push(CompatFinding::MetadataConflict {
                index,
                field: "target_modules".into(),
            });
        }
        let extra_keys: BTreeSet<&String> = a.extras.keys().chain(b.extras.keys()).collect();
        for key in extra_keys {
            if a.extras.get(key) != b.extras.get(key) {
                findings.push(CompatFinding::MetadataConflict {
                    index,
                    field: key.clone(),
                });
            }
        }
    }
    CompatReport { findings }
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("nothing to fuse")]
    NoInputs,
    #[error("{weights} weights for {inputs} inputs")]
    WeightCount { inputs: usize, weights: usize },
    #[error("weights must be finite and sum to 1, got sum {0}")]
    WeightSum(f64),
    #[error("checkpoints are not fusable: {0}")]
    Incompatible(CompatReport),
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Write(CheckpointError),
}

/// Inputs, optional weights (uniform when absent) and the output path.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPlan {
    pub inputs: Vec<PathBuf>,
    pub weights: Option<Vec<f64>>,
    pub output: PathBuf,
}

const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

fn resolve_weights(count: usize, weights: Option<&[f64]>) -> Result<Vec<f64>, FusionError> {
    if count == 0 {
        return Err(FusionError::NoInputs);
    }
    match weights {
        None => Ok(vec![1.0 / count as f64; count]),
        Some(w) if w.len() != count => Err(FusionError::WeightCount {
            inputs: count,
            weights: w.len(),
        }),
        Some(w) => {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|x| !x.is_finite()) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                Err(FusionError::WeightSum(sum))
            } else {
                Ok(w.to_vec())
            }
        }
    }
}

/// Element-wise `Σ wᵢ·xᵢ` over fusable checkpoints.
///
/// Sums are accumulated in f64 and rounded once (nearest-even) to the
/// common storage dtype. Metadata comes from the first input.
pub fn average(ckpts: &[AdapterCheckpoint], weights: Option<&[f64]>) -> Result<AdapterCheckpoint, FusionError> {
    let weights = resolve_weights(ckpts.len(), weights)?;
    let report = check_compatible(ckpts);
    if !report.is_fusable() {
        return Err(FusionError::Incompatible(report));
    }
    let first = &ckpts[0];
    let names: Vec<&String> = first.tensors.keys().collect();
    let fused: Vec<Tensor> = names
        .par_iter()
        .map(|name| {
            let inputs: Vec<Vec<f32>> = ckpts.iter().map(|c| c.tensors[name.as_str()].to_f32_vec()).collect();
            let reference = &first.tensors[name.as_str()];
            let len = reference.len();
            let mut acc = vec![0f64; len];
            for (values, &w) in inputs.iter().zip(&weights) {
                for (slot, &x) in acc.iter_mut().zip(values) {
                    *slot += w * x as f64;
                }
            }
            encode_f64(reference.dtype(), reference.shape().to_vec(), &acc)
        })
        .collect();

    let tensors: IndexMap<String, Tensor> = names.into_iter().cloned().zip(fused).collect();
    Ok(AdapterCheckpoint {
        tensors,
        metadata: first.metadata.clone(),
    })
}

fn encode_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        match dtype {
            DType::F32 => data.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F16 => data.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            DType::BF16 => data.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
        }
    }
    Tensor::new(dtype, shape, data).expect("fused tensor keeps the input layout")
}

/// Reads every input, fuses them and writes the result.
pub fn average_checkpoints(plan: &FusionPlan) -> Result<AdapterCheckpoint, FusionError> {
    let ckpts = plan
        .inputs
        .iter()
        .map(|path| {
            read_checkpoint(path).map_err(|source| FusionError::Read {
                path: path.display().to_string(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fused = average(&ckpts, plan.weights.as_deref())?;
    write_checkpoint(&fused, &plan.output).map_err(FusionError::Write)?;
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(values: &[f32], dtype: DType, rank: u32) -> AdapterCheckpoint {
        let mut tensors = IndexMap::new();
        tensors.insert("lora_A".to_string(), Tensor::from_f32(dtype, vec![values.len()], values).unwrap());
        AdapterCheckpoint {
            tensors,
            metadata: AdapterMetadata::new(rank, 128.0, vec!["q_proj".into()]),
        }
    }

    #[test]
    fn identical_structures_are_fusable() {
        let a = ckpt(&[1.0, 2.0], DType::F32, 128);
        assert!(check_compatible(&[a.clone(), a]).is_fusable());
    }

    #[test]
    fn missing_key_reported() {
        let a = ckpt(&[1.0], DType::F32, 128);
        let mut b = a.clone();
        b.tensors.insert("lora_B".into(), Tensor::from_f32(DType::F32, vec![1], &[0.0]).unwrap());
        let report = check_compatible(&[a, b]);
        assert!(!report.is_fusable());
        assert_eq!(report.findings[0].label(), "key set mismatch");
    }

    #[test]
    fn rank_shape_dtype_mismatches() {
        let a = ckpt(&[1.0, 2.0], DType::F32, 128);
        let report = check_compatible(&[a.clone(), ckpt(&[1.0, 2.0], DType::F32, 64)]);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].label(), "rank mismatch");
        let report = check_compatible(&[a.clone(), ckpt(&[1.0], DType::F32, 128)]);
        assert_eq!(report.findings[0].label(), "shape mismatch");
        let report = check_compatible(&[a, ckpt(&[1.0, 2.0], DType::BF16, 128)]);
        assert_eq!(report.findings[0].label(), "dtype mismatch");
    }

    #[test]
    fn extras_conflict_is_only_a_warning() {
        let a = ckpt(&[1.0], DType::F32, 128);
        let mut b = a.clone();
        b.metadata.extras.insert("epoch".into(), "2".into());
        let report = check_compatible(&[a.clone(), b.clone()]);
        assert!(report.is_fusable());
        assert_eq!(report.warnings().count(), 1);
        let fused = average(&[a.clone(), b], None).unwrap();
        assert_eq!(fused.metadata, a.metadata);
    }

    #[test]
    fn weights_validated() {
        let a = ckpt(&[1.0], DType::F32, 128);
        let two = [a.clone(), a.clone()];
        assert!(matches!(average(&two, Some(&[1.0])), Err(FusionError::WeightCount { .. })));
        assert!(matches!(average(&two, Some(&[0.7, 0.7])), Err(FusionError::WeightSum(_))));
        assert!(matches!(average(&[], None), Err(FusionError::NoInputs)));
        assert!(average(&two, Some(&[0.25, 0.75])).is_ok());
    }

    #[test]
    fn single_input_passes_through() {
        let a = ckpt(&[1.5, -2.25], DType::BF16, 128);
        assert_eq!(average(std::slice::from_ref(&a), None).unwrap(), a);
    }

    #[test]
    fn weighted_average_small_case() {
        let a = ckpt(&[1.0, 2.0], DType::F32, 128);
        let b = ckpt(&[3.0, 6.0], DType::F32, 128);
        let fused = average(&[a, b], Some(&[0.25, 0.75])).unwrap();
        assert_eq!(fused.tensors["lora_A"].to_f32_vec(), [2.5, 5.0]);
    }

    #[test]
    fn incompatible_inputs_abort() {
        let err = average(&[ckpt(&[1.0], DType::F32, 128), ckpt(&[1.0], DType::F32, 64)], None).unwrap_err();
        assert!(matches!(err, FusionError::Incompatible(_)));
    }
}
