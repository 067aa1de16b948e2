use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{pca_reduce, PcaProjection, TimeSeriesSample};
use crate::error::{contract, Result};

pub const CLASSES_PER_TASK: usize = 2;
const MIN_PER_CLASS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub id: usize,
    /// Sorted class ids of this task.
    pub classes: Vec<usize>,
    pub train: Vec<TimeSeriesSample>,
    pub val: Vec<TimeSeriesSample>,
    pub test: Vec<TimeSeriesSample>,
}

impl Task {
    pub fn all_samples(&self) -> impl Iterator<Item = &TimeSeriesSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Projects every split onto the top principal channel components fit on
    /// this task's training samples only.
    pub fn pca_reduce(&mut self, ratio: f64) -> Result<PcaProjection> {
        let (train, val, projection) = pca_reduce(&self.train, &self.val, ratio)?;
        self.train = train;
        self.val = val;
        self.test = projection.apply_all(&self.test)?;
        Ok(projection)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_order: Vec<usize>,
    pub seed: u64,
}

impl TaskStream {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Checks class disjointness across tasks and label membership within them.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return contract(format!("class {c} appears in more than one task"));
                }
            }
            if let Some(s) = task.all_samples().find(|s| !task.classes.contains(&s.label)) {
                return contract(format!(
                    "task {} holds a sample of class {} outside its classes {:?}",
                    task.id, s.label, task.classes
                ));
            }
        }
        Ok(())
    }

    /// Keeps only the first `n` tasks.
    pub fn truncated(mut self, n: usize) -> Self {
        self.tasks.truncate(n);
        let kept: BTreeSet<usize> = self.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        self.class_order.retain(|c| kept.contains(c));
        self
    }
}

/// Shuffles class order with `seed`, then assigns consecutive class pairs to
/// tasks and splits each class 70/10/20 into train/val/test.
pub fn split_tasks(samples: &[TimeSeriesSample], num_classes: usize, seed: u64) -> Result<TaskStream> {
    if num_classes == 0 || !num_classes.is_multiple_of(CLASSES_PER_TASK) {
        return contract(format!(
            "class count {num_classes} must be a positive multiple of {CLASSES_PER_TASK}"
        ));
    }
    let mut by_class: Vec<Vec<&TimeSeriesSample>> = vec![Vec::new(); num_classes];
    for s in samples {
        match by_class.get_mut(s.label) {
            Some(bucket) => bucket.push(s),
            None => return contract(format!("label {} >= class count {num_classes}", s.label)),
        }
    }
    if let Some((c, b)) = by_class.iter().enumerate().find(|(_, b)| b.len() < MIN_PER_CLASS) {
        return contract(format!(
            "class {c} has {} samples; at least {MIN_PER_CLASS} required",
            b.len()
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut rng);

    let mut tasks = Vec::with_capacity(num_classes / CLASSES_PER_TASK);
    for (i, pair) in class_order.chunks(CLASSES_PER_TASK).enumerate() {
        let mut classes = pair.to_vec();
        classes.sort_unstable();
        let mut task = Task {
            id: i + 1,
            classes: classes.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for &c in &classes {
            let mut bucket = by_class[c].clone();
            bucket.shuffle(&mut rng);
            let n = bucket.len();
            let n_val = (n / 10).max(1);
            let n_test = (n / 5).max(1);
            let n_train = n - n_val - n_test;
            let mut it = bucket.into_iter().cloned();
            task.train.extend(it.by_ref().take(n_train));
            task.val.extend(it.by_ref().take(n_val));
            task.test.extend(it);
        }
        tasks.push(task);
    }
    let stream = TaskStream {
        tasks,
        class_order,
        seed,
    };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticConfig};

    fn samples(k: usize, n: usize) -> Vec<TimeSeriesSample> {
        make_synthetic(&SyntheticConfig::new(k, 2, 16, n), 11).unwrap()
    }

    #[test]
    fn eight_classes_make_four_disjoint_pairs() {
        let stream = split_tasks(&samples(8, 10), 8, 5).unwrap();
        assert_eq!(stream.tasks.len(), 4);
        let mut all = BTreeSet::new();
        for t in &stream.tasks {
            assert_eq!(t.classes.len(), 2);
            for &c in &t.classes {
                assert!(all.insert(c));
            }
        }
        assert_eq!(all, (0..8).collect());
    }

    #[test]
    fn seeds_change_class_order() {
        let s = samples(8, 10);
        let a = split_tasks(&s, 8, 1).unwrap();
        let b = split_tasks(&s, 8, 2).unwrap();
        assert_ne!(a.class_order, b.class_order);
    }

    #[test]
    fn splits_are_stratified_70_10_20() {
        let stream = split_tasks(&samples(4, 100), 4, 0).unwrap();
        for t in &stream.tasks {
            assert_eq!((t.train.len(), t.val.len(), t.test.len()), (140, 20, 40));
            for split in [&t.train, &t.val, &t.test] {
                for c in &t.classes {
                    assert!(split.iter().any(|s| s.label == *c));
                }
            }
        }
    }

    #[test]
    fn tiny_class_rejected() {
        let mut s = samples(2, 8);
        let mut dropped = 0;
        s.retain(|x| {
            let drop = x.label == 1 && dropped < 4;
            dropped += drop as usize;
            !drop
        });
        let err = split_tasks(&s, 2, 0).unwrap_err();
        assert!(err.to_string().contains("class 1 has 4 samples"), "{err}");
    }

    #[test]
    fn odd_class_count_rejected() {
        assert!(split_tasks(&samples(4, 8), 3, 0).is_err());
    }
}
