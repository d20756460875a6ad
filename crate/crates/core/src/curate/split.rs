use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CurateError, DatasetManifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), CurateError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(CurateError::InvalidFractions(format!("{parts:?} has a negative or non-finite part")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CurateError::InvalidFractions(format!("{parts:?} sums to {sum}")));
        }
        Ok(())
    }
}

const MIN_PER_CLASS: usize = 3;

/// Per-bin quotas for `n` items: bin `j` ends at `round(n * cumulative_j)`.
fn quotas(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut prev = 0usize;
    for (j, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if j + 1 == fractions.len() {
            n
        } else {
            ((n as f64 * cum).round() as usize).min(n)
        };
        let end = end.max(prev);
        out.push(end - prev);
        prev = end;
    }
    out
}

struct Group {
    members: Vec<usize>,
    counts: BTreeMap<u8, usize>,
}

/// Assigns each Active sample to a bin, stratified by label.
///
/// Samples sharing a panorama move together when `group_by_pano` is set, so
/// quotas are then met only up to the size of the last groups placed.
fn assign_bins(
    manifest: &DatasetManifest,
    fractions: &[f64],
    rng: &mut ChaCha8Rng,
    group_by_pano: bool,
) -> Result<Vec<(usize, usize)>, CurateError> {
    let class_counts = manifest.class_counts();
    if let Some((label, count)) = class_counts.iter().find(|(_, c)| **c < MIN_PER_CLASS) {
        return Err(CurateError::ClassTooSmall {
            label: *label,
            count: *count,
            needed: MIN_PER_CLASS,
        });
    }
    let mut deficit: BTreeMap<u8, Vec<i64>> = class_counts
        .iter()
        .map(|(label, n)| (*label, quotas(*n, fractions).into_iter().map(|q| q as i64).collect()))
        .collect();
    let target = deficit.clone();

    let mut by_key: BTreeMap<&str, Group> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate().filter(|(_, s)| s.is_active()) {
        let key = if group_by_pano { s.pano_id.as_str() } else { s.sample_id.as_str() };
        let g = by_key.entry(key).or_insert_with(|| Group {
            members: Vec::new(),
            counts: BTreeMap::new(),
        });
        g.members.push(i);
        *g.counts.entry(s.label).or_insert(0) += 1;
    }
    let mut groups: Vec<Group> = by_key.into_values().collect();
    groups.shuffle(rng);
    // big groups first, so singletons can even out the quotas at the end
    groups.sort_by_key(|g| std::cmp::Reverse(g.members.len()));

    let mut out = Vec::new();
    for g in groups {
        let mut best = 0;
        let mut best_score = (i64::MIN, f64::MIN);
        for bin in 0..fractions.len() {
            let mut absorbed = 0i64;
            let mut relative = 0.0;
            for (label, c) in &g.counts {
                let d = deficit[label][bin];
                absorbed += d.clamp(0, *c as i64);
                relative += *c as f64 * d as f64 / target[label][bin].max(1) as f64;
            }
            if (absorbed, relative) > best_score {
                best_score = (absorbed, relative);
                best = bin;
            }
        }
        for (label, c) in &g.counts {
            deficit.get_mut(label).unwrap()[best] -= *c as i64;
        }
        out.extend(g.members.iter().map(|&i| (i, best)));
    }
    Ok(out)
}

/// Stratified train/val/test assignment of the Active samples.
pub fn split(manifest: &mut DatasetManifest, fractions: SplitFractions, seed: u64, group_by_pano: bool) -> Result<(), CurateError> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = assign_bins(manifest, &[fractions.train, fractions.val, fractions.test], &mut rng, group_by_pano)?;
    for s in &mut manifest.samples {
        s.split = None;
    }
    for (i, bin) in assignment {
        manifest.samples[i].split = Some(Split::ALL[bin]);
    }
    Ok(())
}

/// Stratified k-fold partition of the Active samples; folds are numbered from 1.
pub fn make_folds(manifest: &mut DatasetManifest, k: usize, seed: u64, group_by_pano: bool) -> Result<(), CurateError> {
    if !(2..=u8::MAX as usize).contains(&k) {
        return Err(CurateError::InvalidFoldCount(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // independent of the split stream under the same seed
    rng.set_stream(1);
    let assignment = assign_bins(manifest, &vec![1.0 / k as f64; k], &mut rng, group_by_pano)?;
    for s in &mut manifest.samples {
        s.fold = None;
    }
    for (i, bin) in assignment {
        manifest.samples[i].fold = Some(bin as u8 + 1);
    }
    Ok(())
}

/// Extra copies per sample so every class in `split` reaches the majority count.
///
/// Returned in sample id order. Copies are spread round-robin, so within a class
/// replication counts differ by at most one. With `num_classes` set, labels
/// `1..=num_classes` must all be present.
pub fn oversample_plan(
    manifest: &DatasetManifest,
    split: Split,
    num_classes: Option<u8>,
) -> Result<Vec<(String, u32)>, CurateError> {
    let mut by_class: BTreeMap<u8, Vec<&str>> = BTreeMap::new();
    if let Some(k) = num_classes {
        for label in 1..=k {
            by_class.insert(label, Vec::new());
        }
    }
    for s in manifest.active().filter(|s| s.split == Some(split)) {
        by_class.entry(s.label).or_default().push(&s.sample_id);
    }
    if let Some((label, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(CurateError::EmptyClass(*label));
    }
    let majority = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        let n = ids.len();
        let extra = majority - n;
        for (i, id) in ids.iter().enumerate() {
            let reps = extra / n + usize::from(i < extra % n);
            out.push((id.to_string(), reps as u32));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curate::tests::requests;
    use crate::curate::Sample;
    use crate::survey::{Locality, Scheme};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Manifest with `counts[c]` singleton-pano samples of label `c + 1`.
    fn manifest(counts: &[usize]) -> DatasetManifest {
        let template = requests("T", "S1", Locality::Wolds, (2009, 7), 5).remove(0);
        let mut m = DatasetManifest::new(Scheme::FourClass, 0);
        let mut id = 0;
        for (c, n) in counts.iter().enumerate() {
            for _ in 0..*n {
                id += 1;
                let mut s = Sample::from_request(format!("S{id:06}"), &template);
                s.label = c as u8 + 1;
                s.pano_id = format!("P{id:06}");
                m.samples.push(s);
            }
        }
        m
    }

    fn tally(m: &DatasetManifest) -> BTreeMap<(u8, Split), usize> {
        let mut t = BTreeMap::new();
        for s in &m.samples {
            if let Some(sp) = s.split {
                *t.entry((s.label, sp)).or_insert(0) += 1;
            }
        }
        t
    }

    #[test]
    fn quota_rounding() {
        assert_eq!(quotas(100, &[0.7, 0.1, 0.2]), vec![70, 10, 20]);
        assert_eq!(quotas(3452, &[0.7, 0.1, 0.2]), vec![2416, 346, 690]);
        assert_eq!(quotas(3, &[0.7, 0.1, 0.2]), vec![2, 0, 1]);
        assert_eq!(quotas(7, &[0.2; 5]), vec![1, 2, 1, 2, 1]);
    }

    #[test]
    fn single_class_exact() {
        let mut m = manifest(&[100]);
        split(&mut m, SplitFractions::default(), 0, true).unwrap();
        let t = tally(&m);
        assert_eq!((t[&(1, Split::Train)], t[&(1, Split::Val)], t[&(1, Split::Test)]), (70, 10, 20));
        let mut again = manifest(&[100]);
        split(&mut again, SplitFractions::default(), 0, true).unwrap();
        assert_eq!(again, m);
        let mut other = manifest(&[100]);
        split(&mut other, SplitFractions::default(), 1, true).unwrap();
        assert_ne!(other, m);
    }

    #[test]
    fn split_errors() {
        let mut m = manifest(&[10, 2]);
        assert!(matches!(
            split(&mut m, SplitFractions::default(), 0, true),
            Err(CurateError::ClassTooSmall { label: 2, count: 2, needed: 3 })
        ));
        let bad = SplitFractions { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split(&mut manifest(&[10]), bad, 0, true).is_err());
        assert!(matches!(make_folds(&mut manifest(&[10]), 1, 0, true), Err(CurateError::InvalidFoldCount(1))));
    }

    #[test]
    fn pano_groups_stay_together() {
        let mut reqs = Vec::new();
        for p in 0..40 {
            reqs.extend(requests(&format!("P{p:02}"), "S1", Locality::Wolds, (2009, 7), (p % 16) as u32));
        }
        let mut m = DatasetManifest::from_requests(&reqs, Scheme::FourClass, 0);
        split(&mut m, SplitFractions::default(), 0, true).unwrap();
        let mut per_pano: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for s in &m.samples {
            per_pano.entry(&s.pano_id).or_default().insert(s.split.unwrap());
        }
        assert!(per_pano.values().all(|v| v.len() == 1));
        // each group holds 3 samples of one class
        let counts = m.class_counts();
        for ((label, sp), n) in tally(&m) {
            let f = [0.7, 0.1, 0.2][sp as usize];
            assert!((n as f64 - f * counts[&label] as f64).abs() <= 3.0, "{label} {sp:?} {n}");
        }
    }

    #[test]
    fn folds_partition() {
        let mut m = manifest(&[10, 10, 10, 10, 10]);
        make_folds(&mut m, 5, 0, true).unwrap();
        let mut per_fold = BTreeMap::new();
        for s in &m.samples {
            *per_fold.entry((s.fold.unwrap(), s.label)).or_insert(0) += 1;
        }
        assert_eq!(per_fold.len(), 25);
        assert!(per_fold.values().all(|n| *n == 2));
    }

    #[test]
    fn oversampling_examples() {
        let mut m = manifest(&[100, 50, 25]);
        for s in &mut m.samples {
            s.split = Some(Split::Train);
        }
        let plan = oversample_plan(&m, Split::Train, None).unwrap();
        let mut per_class = BTreeMap::new();
        let labels: BTreeMap<_, _> = m.samples.iter().map(|s| (s.sample_id.clone(), s.label)).collect();
        for (id, reps) in &plan {
            *per_class.entry(labels[id]).or_insert(0) += reps;
        }
        assert_eq!(per_class, BTreeMap::from([(1, 0), (2, 50), (3, 75)]));
        assert!(matches!(oversample_plan(&m, Split::Train, Some(4)), Err(CurateError::EmptyClass(4))));

        let mut b = manifest(&[5, 5]);
        for s in &mut b.samples {
            s.split = Some(Split::Train);
        }
        assert!(oversample_plan(&b, Split::Train, None).unwrap().iter().all(|(_, r)| *r == 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn stratified_within_one(counts in proptest::collection::vec(3usize..60, 1..5), seed in 0u64..1000) {
            let mut m = manifest(&counts);
            split(&mut m, SplitFractions::default(), seed, true).unwrap();
            let t = tally(&m);
            for (c, n) in counts.iter().enumerate() {
                let label = c as u8 + 1;
                let mut total = 0;
                for (j, f) in [0.7, 0.1, 0.2].iter().enumerate() {
                    let got = *t.get(&(label, Split::ALL[j])).unwrap_or(&0);
                    total += got;
                    prop_assert!((got as f64 / *n as f64 - f).abs() <= 1.0 / *n as f64);
                }
                prop_assert_eq!(total, *n);
            }
        }

        #[test]
        fn folds_cover_active_once(counts in proptest::collection::vec(3usize..40, 1..5), k in 2usize..7, seed in 0u64..100) {
            let mut m = manifest(&counts);
            m.samples[0].status = crate::curate::SampleStatus::Purged;
            if m.class_counts().values().any(|c| *c < 3) {
                return Ok(());
            }
            make_folds(&mut m, k, seed, true).unwrap();
            for s in &m.samples {
                prop_assert_eq!(s.fold.is_some(), s.is_active());
                if let Some(f) = s.fold {
                    prop_assert!((1..=k as u8).contains(&f));
                }
            }
            let counts = m.class_counts();
            for (label, n) in counts {
                for f in 1..=k as u8 {
                    let got = m.active().filter(|s| s.label == label && s.fold == Some(f)).count();
                    prop_assert!((got as f64 - n as f64 / k as f64).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn oversampling_uniform(counts in proptest::collection::vec(1usize..80, 1..6)) {
            let mut m = manifest(&counts);
            for s in &mut m.samples {
                s.split = Some(Split::Train);
            }
            let plan = oversample_plan(&m, Split::Train, None).unwrap();
            let majority = *counts.iter().max().unwrap();
            let labels: BTreeMap<_, _> = m.samples.iter().map(|s| (s.sample_id.clone(), s.label)).collect();
            let mut totals: BTreeMap<u8, usize> = BTreeMap::new();
            let mut spread: BTreeMap<u8, (u32, u32)> = BTreeMap::new();
            for (id, reps) in &plan {
                let l = labels[id];
                *totals.entry(l).or_insert(0) += 1 + *reps as usize;
                let e = spread.entry(l).or_insert((u32::MAX, 0));
                *e = (e.0.min(*reps), e.1.max(*reps));
            }
            prop_assert!(totals.values().all(|t| *t == majority));
            prop_assert!(spread.values().all(|(lo, hi)| hi - lo <= 1));
        }
    }
}
