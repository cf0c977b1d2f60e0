use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{GradTape, Tensor};
use crate::retrieval::topk_indices;

/// One correct entry and the negatives it is contrasted with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub correct: usize,
    pub negatives: Vec<usize>,
}

impl CandidateSet {
    /// Correct index followed by the negatives.
    pub fn members(&self) -> Vec<usize> {
        std::iter::once(self.correct).chain(self.negatives.iter().copied()).collect()
    }
}

/// Top-`k_train` entries of `abar` minus the correct ones form the shared
/// negative pool. Correct entries outside the top set push out the same
/// number of lowest-scoring negatives, so the union always has `k_train`
/// entries.
pub fn select_hard_negatives(abar: &[f64], correct: &[usize], k_train: usize) -> Result<Vec<CandidateSet>> {
    let mut uniq: Vec<usize> = Vec::with_capacity(correct.len());
    for &c in correct {
        if c >= abar.len() {
            return Err(Error::IndexOutOfRange { index: c, len: abar.len() });
        }
        if !uniq.contains(&c) {
            uniq.push(c);
        }
    }
    if k_train < uniq.len() {
        return Err(Error::Invalid(format!("k_train {k_train} is smaller than {} correct entries", uniq.len())));
    }
    if k_train > abar.len() {
        return Err(Error::Invalid(format!("k_train {k_train} exceeds pool size {}", abar.len())));
    }
    let top = topk_indices(abar, k_train);
    let missing = uniq.iter().filter(|c| !top.contains(c)).count();
    let mut negatives: Vec<usize> = top.into_iter().filter(|i| !uniq.contains(i)).collect();
    negatives.truncate(negatives.len() - missing);
    Ok(uniq.into_iter().map(|c| CandidateSet { correct: c, negatives: negatives.clone() }).collect())
}

fn sets_as_pairs(sets: &[CandidateSet]) -> Vec<(usize, Vec<usize>)> {
    sets.iter().map(|s| (s.correct, s.members())).collect()
}

/// `-(1/J) Σ_j log softmax(Ā[N_j] / T)[i_j]`.
pub fn attention_loss(abar: &[f64], sets: &[CandidateSet], temperature: f64) -> Result<f64> {
    let mut tape = GradTape::new();
    let s = tape.constant(Tensor::row_vector(abar.to_vec()));
    let l = tape.candidate_cross_entropy(s, &sets_as_pairs(sets), temperature)?;
    Ok(tape.scalar(l))
}

/// [`attention_loss`] as a tape node over a `1 × M` score row.
pub fn attention_loss_node(
    tape: &mut GradTape,
    abar: crate::numeric::Var,
    sets: &[CandidateSet],
    temperature: f64,
) -> Result<crate::numeric::Var> {
    tape.candidate_cross_entropy(abar, &sets_as_pairs(sets), temperature)
}
