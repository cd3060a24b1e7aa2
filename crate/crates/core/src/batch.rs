use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Target;
use crate::tensor::Tensor;

/// Inputs and targets of one gradient computation, with the domain each row
/// came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub target: Target,
    /// Source domain index per row.
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, target: Target, domains: Vec<usize>) -> Result<Self> {
        let rows = inputs.dims2().0;
        if domains.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{rows} rows but {} provenance tags",
                domains.len()
            )));
        }
        Ok(Self {
            inputs,
            target,
            domains,
        })
    }

    /// A batch with a single synthetic provenance tag for every row.
    pub fn untagged(inputs: Tensor, target: Target) -> Self {
        let rows = inputs.dims2().0;
        Self {
            inputs,
            target,
            domains: vec![usize::MAX; rows],
        }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Stable digest of inputs, targets and provenance (first 8 bytes of SHA-256).
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for v in self.inputs.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        match &self.target {
            Target::Labels(l) => {
                h.update(b"labels");
                for &c in l {
                    h.update((c as u64).to_le_bytes());
                }
            }
            Target::Values(t) => {
                h.update(b"values");
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
            Target::None => h.update(b"none"),
        }
        for &d in &self.domains {
            h.update((d as u64).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}
