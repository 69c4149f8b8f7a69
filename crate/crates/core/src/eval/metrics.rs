use crate::error::{Error, Result};

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, with ties credited one half.
///
/// Computed from the rank sum of the positives with tied scores sharing their
/// average rank. All counts are kept as doubled integers so the result is the
/// same float the pairwise definition produces.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (twice_u, pos, neg) = twice_mann_whitney(scores, labels)?;
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

fn twice_mann_whitney(scores: &[f64], labels: &[u8]) -> Result<(u128, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("auc score {i}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("auc label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("auc needs both classes, got {pos} positives and {neg} negatives")));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum over positives of twice their 1-based average rank.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += positives * (i as u128 + 1 + j as u128);
        i = j;
    }
    let pos2 = pos as u128;
    Ok((rank_sum2 - pos2 * (pos2 + 1), pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut twice = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                p += 1;
            } else {
                n += 1;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2.0 * p as f64 * n as f64)
    }

    #[test]
    fn closed_cases() {
        let s = [0.9, 0.8, 0.1];
        assert_eq!(auc(&s, &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&s, &[0, 0, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[], &[]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[0.1, f64::NAN], &[1, 0]), Err(Error::NonFinite(_))));
        assert!(auc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..500).prop_flat_map(|n| {
            // a coarse grid forces plenty of ties
            (prop::collection::vec((0u32..40).prop_map(|v| v as f64 / 8.0), n), prop::collection::vec(0u8..2, n))
        })
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    }

    proptest! {
        #[test]
        fn equals_pairwise_oracle((s, l) in instance()) {
            prop_assert_eq!(auc(&s, &l).unwrap(), pairwise(&s, &l));
        }

        #[test]
        fn invariant_under_monotone_transforms((s, l) in instance()) {
            let a = auc(&s, &l).unwrap();
            let affine: Vec<f64> = s.iter().map(|x| 2.0 * x + 1.0).collect();
            let squashed: Vec<f64> = s.iter().map(|&x| crate::diffgraph::sigmoid(x)).collect();
            prop_assert_eq!(auc(&affine, &l).unwrap(), a);
            prop_assert_eq!(auc(&squashed, &l).unwrap(), a);
        }

        #[test]
        fn reversing_scores_complements((s, l) in instance()) {
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let sum = auc(&s, &l).unwrap() + auc(&neg, &l).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
