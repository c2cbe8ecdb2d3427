use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::EvalError;

/// Per-sample fold index for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// Validation indices of fold `f`.
    pub fn validation(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == f).collect()
    }

    pub fn train(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != f).collect()
    }
}

/// Indices of each class (negatives first), shuffled under `rng`.
fn shuffled_classes(labels: &[bool], rng: &mut ChaCha8Rng) -> [Vec<usize>; 2] {
    let mut classes = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        classes[y as usize].push(i);
    }
    for class in &mut classes {
        class.shuffle(rng);
    }
    classes
}

/// Deals each class's shuffled members round-robin over the folds. The fold
/// cursor carries over from one class to the next, so fold sizes also stay
/// within one of each other.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = shuffled_classes(labels, &mut rng);
    if let Some(small) = classes.iter().find(|c| !c.is_empty() && c.len() < k) {
        return Err(EvalError::ClassTooSmall {
            members: small.len(),
            k,
        });
    }
    let mut folds = vec![0; labels.len()];
    let mut cursor = 0;
    for class in &classes {
        for &i in class {
            folds[i] = cursor % k;
            cursor += 1;
        }
    }
    Ok(FoldAssignment { k, seed, folds })
}

/// Moves `round(n * fraction)` shuffled members of each class to validation.
/// Returns sorted `(train, validation)` indices.
pub fn holdout_split(labels: &[bool], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in shuffled_classes(labels, &mut rng) {
        let take = (class.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&class[..take]);
        train.extend_from_slice(&class[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn per_class(a: &FoldAssignment, labels: &[bool], y: bool) -> Vec<usize> {
        let mut counts = vec![0; a.k];
        for (i, &f) in a.folds.iter().enumerate() {
            if labels[i] == y {
                counts[f] += 1;
            }
        }
        counts
    }

    #[test]
    fn balanced_ten() {
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let a = stratified_kfold(&labels, 5, 3).unwrap();
        assert_eq!(a.fold_sizes(), vec![2; 5]);
        assert_eq!(per_class(&a, &labels, true), vec![1; 5]);
        assert_eq!(per_class(&a, &labels, false), vec![1; 5]);
        assert_eq!(a.train(0).len() + a.validation(0).len(), 10);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let labels: Vec<bool> = (0..97).map(|i| i % 3 == 0).collect();
        let a = stratified_kfold(&labels, 4, 11).unwrap();
        assert_eq!(a, stratified_kfold(&labels, 4, 11).unwrap());
        let b = stratified_kfold(&labels, 4, 12).unwrap();
        assert_ne!(a.folds, b.folds);
        assert_eq!(a.fold_sizes(), b.fold_sizes());
    }

    #[test]
    fn errors() {
        assert_eq!(stratified_kfold(&[true, false], 1, 0), Err(EvalError::InvalidK(1)));
        assert_eq!(stratified_kfold(&[], 2, 0), Err(EvalError::Empty));
        let labels = [true, false, false, false];
        assert_eq!(
            stratified_kfold(&labels, 2, 0),
            Err(EvalError::ClassTooSmall { members: 1, k: 2 })
        );
        assert_eq!(holdout_split(&labels, 1.0, 0), Err(EvalError::InvalidFraction(1.0)));
        assert!(holdout_split(&labels, f64::NAN, 0)
            .unwrap_err()
            .to_string()
            .contains("NaN"));
    }

    #[test]
    fn holdout_partitions() {
        let labels: Vec<bool> = (0..200).map(|i| i % 4 == 0).collect();
        let (train, val) = holdout_split(&labels, 0.1, 5).unwrap();
        assert_eq!(val.len(), 20);
        assert_eq!(val.iter().filter(|&&i| labels[i]).count(), 5);
        let mut all: Vec<usize> = train.into_iter().chain(val).collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }
}
