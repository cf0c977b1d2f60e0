use crate::datagen::REFUSAL;
use crate::error::{Error, Result};

/// Fraction of `correct` found among the first `k` ranked indices.
pub fn recall_at_k(ranked: &[usize], correct: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("recall@k needs k >= 1".into()));
    }
    if correct.is_empty() {
        return Err(Error::Invalid("recall is undefined without correct entries".into()));
    }
    let top = &ranked[..k.min(ranked.len())];
    let hits = correct.iter().filter(|c| top.contains(c)).count();
    Ok(hits as f64 / correct.len() as f64)
}

/// 1 when every correct entry sits in the first `|correct|` ranks.
pub fn recall_at_top(ranked: &[usize], correct: &[usize]) -> Result<f64> {
    if correct.len() != 2 && correct.len() != 4 {
        return Err(Error::Invalid(format!("recall@top needs 2 or 4 correct entries, got {}", correct.len())));
    }
    Ok(if recall_at_k(ranked, correct, correct.len())? == 1.0 { 1.0 } else { 0.0 })
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// 1 when every gold label appears as a whole word of `text`.
pub fn id_accuracy(text: &str, labels: &[String]) -> f64 {
    let ok = labels.iter().all(|l| words(text).any(|w| w == l));
    if ok { 1.0 } else { 0.0 }
}

/// 1 when every gold object occurs verbatim in `text`.
pub fn exact_match(text: &str, objects: &[String]) -> f64 {
    if objects.iter().all(|o| text.contains(o.as_str())) { 1.0 } else { 0.0 }
}

/// 1 when `text` refuses and cites no label-shaped (all-uppercase) word.
pub fn refusal_accuracy(text: &str) -> f64 {
    let refuses = words(text).any(|w| w == REFUSAL);
    let cites = words(text).any(|w| w != REFUSAL && w.chars().all(|c| c.is_ascii_uppercase()));
    if refuses && !cites { 1.0 } else { 0.0 }
}

/// Mean and variance of recall@k when `c` correct entries are placed
/// uniformly at random in a pool of `m`.
pub fn chance_recall(m: usize, c: usize, k: usize) -> (f64, f64) {
    let k = k.min(m) as f64;
    let (mf, cf) = (m as f64, c as f64);
    let p = k / mf;
    let var_hits = if m > 1 { cf * p * (1.0 - p) * (mf - cf) / (mf - 1.0) } else { 0.0 };
    (p, var_hits / (cf * cf))
}
