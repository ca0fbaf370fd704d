use rand::seq::SliceRandom;

use crate::data::{ClassCounts, ClassLabel, Manifest, Split};
use crate::error::{Error, Result};
use crate::seeds;

/// Per class, `floor(count · train_fraction)` samples go to train and the rest to
/// val, chosen by a seeded permutation of that class's samples.
pub fn split_stratified(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let counts = manifest.counts(None);
    for (label, &n) in &counts {
        if n < 2 {
            return Err(Error::ClassTooSmall(label.to_string()));
        }
    }
    let mut out = manifest.clone();
    for label in ClassLabel::ALL {
        let mut idx: Vec<usize> =
            manifest.samples.iter().enumerate().filter(|(_, s)| s.label == label).map(|(i, _)| i).collect();
        let mut rng = seeds::rng(seeds::derive_seed(seed, label.as_str()));
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * train_fraction).floor() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            out.samples[i].split = Some(if rank < n_train { Split::Train } else { Split::Val });
        }
    }
    Ok(out)
}

/// Number of synthetic samples each class needs to reach `target_per_class`.
pub fn balance_plan(train_counts: &ClassCounts, target_per_class: usize) -> Result<ClassCounts> {
    let mut plan = ClassCounts::new();
    for label in ClassLabel::ALL {
        let count = train_counts.get(&label).copied().unwrap_or(0);
        if count > target_per_class {
            return Err(Error::TargetBelowCount { class: label.to_string(), count, target: target_per_class });
        }
        plan.insert(label, target_per_class - count);
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{ManifestMeta, Sample};

    pub(crate) fn manifest_with_counts(counts: [usize; 3]) -> Manifest {
        let mut samples = Vec::new();
        for (label, &n) in ClassLabel::ALL.iter().zip(&counts) {
            for i in 0..n {
                samples.push(Sample::real(format!("{label}/{i}.png"), *label, None));
            }
        }
        Manifest::new(samples, ManifestMeta { image_size: 8, ..Default::default() })
    }

    fn counts(c: [usize; 3]) -> ClassCounts {
        ClassLabel::ALL.iter().copied().zip(c).collect()
    }

    #[test]
    fn reproduces_published_split() {
        let m = split_stratified(&manifest_with_counts([437, 210, 133]), 0.8, 42).unwrap();
        assert_eq!(m.counts(Some(Split::Train)), counts([349, 168, 106]));
        assert_eq!(m.counts(Some(Split::Val)), counts([88, 42, 27]));
    }

    #[test]
    fn exact_halves_and_determinism() {
        let base = manifest_with_counts([10, 10, 10]);
        let a = split_stratified(&base, 0.5, 1).unwrap();
        assert_eq!(a.counts(Some(Split::Train)), counts([5, 5, 5]));
        assert_eq!(a, split_stratified(&base, 0.5, 1).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_stratified(&manifest_with_counts([5, 1, 5]), 0.8, 0),
            Err(Error::ClassTooSmall(_))
        ));
        assert!(split_stratified(&manifest_with_counts([5, 5, 5]), 1.0, 0).is_err());
    }

    #[test]
    fn balance_examples() {
        assert_eq!(balance_plan(&counts([349, 168, 106]), 350).unwrap(), counts([1, 182, 244]));
        assert_eq!(balance_plan(&counts([350, 350, 350]), 350).unwrap(), counts([0, 0, 0]));
        // Oracle: plain subtraction.
        let input = [10usize, 5, 1];
        let expected: Vec<usize> = input.iter().map(|c| 10 - c).collect();
        assert_eq!(balance_plan(&counts(input), 10).unwrap(), counts([expected[0], expected[1], expected[2]]));
        assert!(matches!(balance_plan(&counts([11, 0, 0]), 10), Err(Error::TargetBelowCount { .. })));
    }

    proptest! {
        #[test]
        fn split_preserves_class_totals(b in 2usize..40, m in 2usize..40, n in 2usize..40,
                                        frac in 0.05f64..0.95, seed in any::<u64>()) {
            let base = manifest_with_counts([b, m, n]);
            let out = split_stratified(&base, frac, seed).unwrap();
            let tr = out.counts(Some(Split::Train));
            let va = out.counts(Some(Split::Val));
            for (l, total) in base.counts(None) {
                prop_assert_eq!(tr[&l] + va[&l], total);
                prop_assert_eq!(tr[&l], (total as f64 * frac).floor() as usize);
            }
        }

        #[test]
        fn balance_fills_to_target(b in 0usize..500, m in 0usize..500, n in 0usize..500, extra in 0usize..100) {
            let target = b.max(m).max(n) + extra;
            let c = counts([b, m, n]);
            let plan = balance_plan(&c, target).unwrap();
            for l in ClassLabel::ALL {
                prop_assert_eq!(plan[&l] + c[&l], target);
            }
        }
    }
}
