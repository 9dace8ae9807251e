use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Labels, SplitTag};

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Stratum of each example: its class, or for multi-label data its rarest
/// positive label (`num_classes` when it has none).
fn strata(labels: &Labels) -> Vec<usize> {
    match labels {
        Labels::Classes { labels, .. } => labels.clone(),
        Labels::MultiHot { labels: rows, num_classes } => {
            let counts = labels.class_counts();
            rows.iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(_, &b)| b)
                        .min_by_key(|&(c, _)| (counts[c], c))
                        .map_or(*num_classes, |(c, _)| c)
                })
                .collect()
        }
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`; ties in the
/// remainder go to the earlier split.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Seeded stratified split into train/val/test. Each stratum is shuffled and
/// apportioned independently; a stratum smaller than the number of non-empty
/// splits goes entirely to train with a warning. Examples keep their original
/// relative order inside each split.
pub fn stratified_split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let groups = strata(&ds.labels);
    let n_strata = groups.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_strata];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut warnings = Vec::new();
    for (g, mut idx) in members.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < active {
            let msg = format!("stratum {g} has {} example(s), fewer than {active} splits; all kept in train", idx.len());
            warn!("{msg}");
            warnings.push(msg);
            parts[0].extend(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), &fractions);
        let mut at = 0;
        for (part, c) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&idx[at..at + c]);
            at += c;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Splits {
        train: ds.subset(&parts[0], SplitTag::Train),
        val: ds.subset(&parts[1], SplitTag::Val),
        test: ds.subset(&parts[2], SplitTag::Test),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes(ls: Vec<usize>, c: usize) -> Dataset {
        let n = ls.len();
        Dataset::new(
            (0..n).map(|i| i as f32 / n as f32).collect(),
            vec![1],
            Labels::Classes { labels: ls, num_classes: c },
            SplitTag::Train,
        )
        .unwrap()
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(apportion(10, &[0.7, 0.15, 0.15]), [7, 2, 1]);
        assert_eq!(apportion(3, &[0.8, 0.2, 0.0]), [2, 1, 0]);
        assert_eq!(apportion(5, &[0.8, 0.2, 0.0]), [4, 1, 0]);
    }

    #[test]
    fn proportions_per_class() {
        let ls: Vec<usize> = (0..1000).map(|i| if i % 10 == 0 { 1 } else { 0 }).collect();
        let s = stratified_split(&classes(ls, 2), [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(s.train.labels.class_counts(), vec![540, 60]);
        assert_eq!(s.val.labels.class_counts(), vec![180, 20]);
        assert_eq!(s.test.labels.class_counts(), vec![180, 20]);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn tiny_stratum_goes_to_train() {
        let mut ls = vec![0; 30];
        ls.push(1);
        let s = stratified_split(&classes(ls, 2), [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(s.train.labels.class_counts()[1], 1);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn seeded_and_bad_fractions() {
        let ds = classes((0..200).map(|i| i % 4).collect(), 4);
        assert_eq!(stratified_split(&ds, [0.5, 0.25, 0.25], 9).unwrap(), stratified_split(&ds, [0.5, 0.25, 0.25], 9).unwrap());
        assert_ne!(stratified_split(&ds, [0.5, 0.25, 0.25], 9).unwrap(), stratified_split(&ds, [0.5, 0.25, 0.25], 10).unwrap());
        assert!(matches!(stratified_split(&ds, [0.5, 0.5, 0.5], 0), Err(DataError::BadFractions(_))));
    }

    #[test]
    fn multilabel_uses_rarest_positive() {
        let rows: Vec<Vec<bool>> = (0..100).map(|i| vec![true, i % 5 == 0, false]).collect();
        let ds = Dataset::new(
            vec![0.5; 100],
            vec![1],
            Labels::MultiHot { labels: rows, num_classes: 3 },
            SplitTag::Train,
        )
        .unwrap();
        assert_eq!(strata(&ds.labels)[0], 1);
        assert_eq!(strata(&ds.labels)[1], 0);
        let s = stratified_split(&ds, [0.5, 0.5, 0.0], 1).unwrap();
        assert_eq!(s.train.labels.class_counts()[1], 10);
        assert_eq!(s.val.labels.class_counts()[1], 10);
    }

    proptest! {
        #[test]
        fn split_partitions_examples(ls in prop::collection::vec(0usize..5, 1..300), seed in any::<u64>()) {
            let ds = classes(ls, 5);
            let s = stratified_split(&ds, [0.7, 0.15, 0.15], seed).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.len());
            let mut all: Vec<u32> = s.train.features.iter().chain(&s.val.features).chain(&s.test.features)
                .map(|v| v.to_bits()).collect();
            all.sort_unstable();
            let mut orig: Vec<u32> = ds.features.iter().map(|v| v.to_bits()).collect();
            orig.sort_unstable();
            prop_assert_eq!(all, orig);
            let total = ds.labels.class_counts();
            for (c, &t) in total.iter().enumerate() {
                if t >= 3 {
                    let got = s.train.labels.class_counts()[c] as f64;
                    prop_assert!((got - 0.7 * t as f64).abs() <= 1.0);
                }
            }
        }
    }
}
