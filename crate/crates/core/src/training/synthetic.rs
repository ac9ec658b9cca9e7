//! Seeded binary sequence-classification tasks.

use serde::{Deserialize, Serialize};

use crate::dataset::EncodedExample;
use crate::error::{Error, Result};
use crate::numkernel::SeededRng;

/// Designated token of [`TaskKind::BagOfTokens`].
pub const BAG_TOKEN: usize = 2;
/// The two designated tokens of [`TaskKind::OrderSensitive`].
pub const TOKEN_A: usize = 2;
pub const TOKEN_B: usize = 3;
/// Smallest filler id; ids 0 and 1 are padding and unknown.
pub const FIRST_FILLER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Class 0 when `TOKEN_A` precedes `TOKEN_B`, class 1 otherwise.
    OrderSensitive,
    /// Class 1 when `BAG_TOKEN` occurs, class 0 otherwise.
    BagOfTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub num_examples: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::InvalidArgument(format!("synthetic tasks are binary, got {} classes", self.num_classes)));
        }
        if self.vocab_size <= FIRST_FILLER {
            return Err(Error::InvalidArgument(format!("vocab_size must exceed {FIRST_FILLER} to leave room for filler tokens")));
        }
        let min_len = match self.kind {
            TaskKind::OrderSensitive => 2,
            TaskKind::BagOfTokens => 1,
        };
        if self.seq_len < min_len {
            return Err(Error::InvalidArgument(format!("{:?} needs seq_len >= {min_len}", self.kind)));
        }
        Ok(())
    }
}

/// Unpadded examples with alternating labels, so class counts differ by at
/// most one.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Vec<EncodedExample>> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let n = spec.seq_len;
    let fillers = spec.vocab_size - FIRST_FILLER;
    let examples = (0..spec.num_examples)
        .map(|i| {
            let label = i % 2;
            let mut ids: Vec<usize> = (0..n).map(|_| FIRST_FILLER + rng.below(fillers)).collect();
            match spec.kind {
                TaskKind::OrderSensitive => {
                    let p = rng.below(n);
                    let mut q = rng.below(n - 1);
                    if q >= p {
                        q += 1;
                    }
                    let (first, second) = (p.min(q), p.max(q));
                    let (x, y) = if label == 0 { (TOKEN_A, TOKEN_B) } else { (TOKEN_B, TOKEN_A) };
                    ids[first] = x;
                    ids[second] = y;
                }
                TaskKind::BagOfTokens => {
                    if label == 1 {
                        ids[rng.below(n)] = BAG_TOKEN;
                    }
                }
            }
            EncodedExample { ids, mask: vec![true; n], label }
        })
        .collect();
    Ok(examples)
}
