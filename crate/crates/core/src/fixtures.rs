//! Deterministic record sets with known tag prevalence, for curation demos
//! and tests.

use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::{AnnotationRecord, BinaryTagSet, QualityScore, Tag};

/// Positive counts per 10,000 objects in the public 100k annotation release.
pub const RELEASE_TAG_COUNTS: [(Tag, usize); 5] = [
    (Tag::IsMultiObject, 502),
    (Tag::IsScene, 4055),
    (Tag::IsFigure, 236),
    (Tag::IsTransparent, 233),
    (Tag::IsSingleColor, 1868),
];

/// `n` human records where each tag in `counts` is set on exactly that many
/// records, placed independently at random. Scores are uniform over the four
/// levels. Object ids are `obj-00000`, `obj-00001`, ...
pub fn prevalence_manifest(n: usize, counts: &[(Tag, usize)], seed: u64) -> Vec<AnnotationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![BinaryTagSet::default(); n];
    for &(tag, k) in counts {
        assert!(k <= n, "{k} positives for {tag} exceed {n} records");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            tags[i].set(tag, true);
        }
    }
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    tags.into_iter()
        .enumerate()
        .map(|(i, t)| {
            let score = QualityScore::from_code(rng.gen_range(0..4)).unwrap();
            let mut r = AnnotationRecord::human(format!("obj-{i:05}"), score, t, t0);
            r.annotator_id = Some(format!("ann-{}", i % 7));
            r
        })
        .collect()
}

/// The 10,000-record release-prevalence manifest.
pub fn release_manifest(seed: u64) -> Vec<AnnotationRecord> {
    prevalence_manifest(10_000, &RELEASE_TAG_COUNTS, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_exact() {
        let m = release_manifest(3);
        assert_eq!(m.len(), 10_000);
        for (tag, k) in RELEASE_TAG_COUNTS {
            assert_eq!(m.iter().filter(|r| r.tags.get(tag)).count(), k);
        }
        assert_eq!(m, release_manifest(3));
    }
}
