//! Global chronological split with largest-remainder sizing.
//!
//! All reviews are sorted once by `(timestamp, user_id, item_id)` and
//! partitioned into train/valid/test by cumulative ratio. Sizes use
//! largest-remainder rounding so they always sum to the corpus size;
//! remainder ties go to the earlier partition.

use super::{Corpus, SplitAssignment};
use crate::{Error, Result};

/// Partition sizes for `n` elements under positive ratios, via
/// largest-remainder rounding. Ties in fractional remainder are broken
/// by partition order (train before valid before test).
pub fn largest_remainder_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Config(format!(
            "split ratios must be positive finite numbers, got {:?}",
            ratios
        )));
    }
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Descending fractional remainder; index order breaks ties.
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        sizes[order[i % 3]] += 1;
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

/// Splits a corpus chronologically into train/valid/test.
pub fn temporal_split(corpus: &Corpus, ratios: [f64; 3]) -> Result<SplitAssignment> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot split an empty corpus".to_string()));
    }
    let sizes = largest_remainder_sizes(corpus.len(), ratios)?;
    let mut order: Vec<&super::Review> = corpus.reviews().iter().collect();
    order.sort_by(|a, b| {
        (a.timestamp, &a.user_id, &a.item_id).cmp(&(b.timestamp, &b.user_id, &b.item_id))
    });
    let ids: Vec<super::ReviewId> = order.iter().map(|r| r.id).collect();
    let train = ids[..sizes[0]].to_vec();
    let valid = ids[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = ids[sizes[0] + sizes[1]..].to_vec();
    Ok(SplitAssignment {
        train,
        valid,
        test,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::super::review;
    use super::*;
    use crate::RatingScale;
    use std::collections::BTreeMap;

    fn corpus(reviews: Vec<super::super::Review>) -> Corpus {
        Corpus::from_parts(reviews, BTreeMap::new(), RatingScale::one_to_ten()).unwrap()
    }

    #[test]
    fn ten_reviews_distinct_timestamps() {
        let reviews: Vec<_> = (0..10)
            .map(|i| review(i + 1, &format!("u{}", i), "item", 5, 100 + i as i64))
            .collect();
        let c = corpus(reviews);
        let s = temporal_split(&c, [8.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.valid.len(), 1);
        assert_eq!(s.test.len(), 1);
        // Latest review (timestamp 109, id 10) lands in test.
        assert_eq!(s.test, vec![10]);
        s.verify(&c).unwrap();
    }

    #[test]
    fn shared_timestamp_ties_follow_user_item_order() {
        // Five reviews at one timestamp; tie order is (user_id, item_id).
        let reviews = vec![
            review(1, "e", "i1", 5, 50),
            review(2, "a", "i2", 5, 50),
            review(3, "c", "i3", 5, 50),
            review(4, "b", "i4", 5, 50),
            review(5, "d", "i5", 5, 50),
        ];
        let c = corpus(reviews);
        let s = temporal_split(&c, [3.0, 1.0, 1.0]).unwrap();
        // Sorted by user: a(2), b(4), c(3), d(5), e(1).
        assert_eq!(s.train, vec![2, 4, 3]);
        assert_eq!(s.valid, vec![5]);
        assert_eq!(s.test, vec![1]);
    }

    #[test]
    fn boundary_ordering_holds() {
        let reviews: Vec<_> = (0..20)
            .map(|i| review(i + 1, &format!("u{}", i % 7), &format!("i{}", i), 5, (i * 13 % 17) as i64))
            .collect();
        let c = corpus(reviews);
        let s = temporal_split(&c, [8.0, 1.0, 1.0]).unwrap();
        let ts = |id| c.review(id).unwrap().timestamp;
        let max_train = s.train.iter().map(|&i| ts(i)).max().unwrap();
        let min_valid = s.valid.iter().map(|&i| ts(i)).min().unwrap();
        let min_test = s.test.iter().map(|&i| ts(i)).min().unwrap();
        assert!(max_train <= min_valid);
        assert!(min_valid <= min_test);
    }

    #[test]
    fn sizes_sum_exactly() {
        for n in [1usize, 2, 3, 9, 10, 11, 97] {
            let sizes = largest_remainder_sizes(n, [8.0, 1.0, 1.0]).unwrap();
            assert_eq!(sizes.iter().sum::<usize>(), n, "n={}", n);
        }
        // 10 under 8:1:1 is exact.
        assert_eq!(largest_remainder_sizes(10, [8.0, 1.0, 1.0]).unwrap(), [8, 1, 1]);
        // 11 under 8:1:1: exact 8.8/1.1/1.1, floors 8/1/1, and the
        // leftover goes to train (remainder .8 vs .1).
        assert_eq!(largest_remainder_sizes(11, [8.0, 1.0, 1.0]).unwrap(), [9, 1, 1]);
        // Remainder tie: n=5, ratios 1:1:1 → 1.66.. each, floors 1,1,1,
        // remainders equal → first two partitions take the extras.
        assert_eq!(largest_remainder_sizes(5, [1.0, 1.0, 1.0]).unwrap(), [2, 2, 1]);
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(largest_remainder_sizes(10, [0.0, 1.0, 1.0]).is_err());
        assert!(largest_remainder_sizes(10, [-1.0, 1.0, 1.0]).is_err());
        assert!(largest_remainder_sizes(10, [f64::NAN, 1.0, 1.0]).is_err());
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = corpus(vec![]);
        assert!(temporal_split(&c, [8.0, 1.0, 1.0]).is_err());
    }
}
