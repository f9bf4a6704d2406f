//! Nested-ensemble aggregation: each hierarchy level contributes a group of
//! M diffusion samples; the lower-level protocol turns samples into votes,
//! the upper level takes the mode over the union of all K groups. Ties
//! always resolve to the lowest class index.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// The M prediction vectors produced by one base learner (one level k).
#[derive(Clone, Debug)]
pub struct CandidateGroup<T> {
    pub level: usize,
    pub samples: Vec<Tensor<T>>,
}

/// Final ensemble decision for one instance.
#[derive(Clone, Debug)]
pub struct EnsembleOutput<T> {
    pub class: usize,
    pub proba: Tensor<T>,
    /// The raw K*M sample vectors, kept for interval-width and variance
    /// uncertainty measures.
    pub raw: Vec<Tensor<T>>,
}

/// Vote of a single sample: the class whose coordinate is closest to 1 in
/// squared distance, `argmax_c [-(sample - 1)^2]_c`.
pub fn vote_of<T: Scalar>(sample: &Tensor<T>) -> usize {
    let mut best = 0usize;
    let mut best_score = T::neg_infinity();
    for (c, &v) in sample.data().iter().enumerate() {
        let d = v - T::one();
        let score = -(d * d);
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    best
}

/// Lower-level protocol: per-sample votes with multiplicity preserved.
pub fn aggregate_lower<T: Scalar>(group: &CandidateGroup<T>) -> Result<Vec<usize>> {
    if group.samples.is_empty() {
        return Err(Error::numeric(format!(
            "candidate group at level {} is empty",
            group.level
        )));
    }
    Ok(group.samples.iter().map(vote_of).collect())
}

/// Upper-level protocol: mode over the union of all groups' votes.
pub fn aggregate_upper<T: Scalar>(groups: &[CandidateGroup<T>]) -> Result<usize> {
    if groups.is_empty() {
        return Err(Error::numeric("ensemble needs at least one group"));
    }
    let classes = groups[0].samples[0].len();
    let mut counts = vec![0usize; classes];
    for g in groups {
        for vote in aggregate_lower(g)? {
            counts[vote] += 1;
        }
    }
    let mut best = 0usize;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Temperature-weighted Brier probability: the mean over all samples of
/// `softmax_c(-(sample - 1)^2 / iota)`.
pub fn predict_proba<T: Scalar>(groups: &[CandidateGroup<T>], iota: f64) -> Result<Tensor<T>> {
    if iota <= 0.0 {
        return Err(Error::numeric(format!("temperature iota={iota} must be positive")));
    }
    if groups.is_empty() || groups.iter().any(|g| g.samples.is_empty()) {
        return Err(Error::numeric("predict_proba needs non-empty groups"));
    }
    let classes = groups[0].samples[0].len();
    let it = T::from_f64(iota);
    let mut acc = Tensor::<T>::zeros(&[classes]);
    let mut total = 0usize;
    for g in groups {
        for s in &g.samples {
            let scored = s.map(|v| {
                let d = v - T::one();
                -(d * d) / it
            });
            let sm = scored.softmax_rows()?;
            acc = acc.add(&sm)?;
            total += 1;
        }
    }
    Ok(acc.scale(T::from_f64(1.0 / total as f64)))
}

/// Full decision for one instance: hard-vote class, calibrated probability,
/// and the retained raw samples.
pub fn decide<T: Scalar>(groups: &[CandidateGroup<T>], iota: f64) -> Result<EnsembleOutput<T>> {
    let class = aggregate_upper(groups)?;
    let proba = predict_proba(groups, iota)?;
    let raw = groups
        .iter()
        .flat_map(|g| g.samples.iter().cloned())
        .collect();
    Ok(EnsembleOutput { class, proba, raw })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // oracle math reads clearer with indices
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![v.len()], v).unwrap()
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote_of(&Tensor::<f64>::one_hot(4, 2)), 2);
        // (0.9 - 1)^2 < (0.2 - 1)^2
        assert_eq!(vote_of(&t(vec![0.9, 0.2])), 0);
        // exact tie resolves to the lowest index
        assert_eq!(vote_of(&t(vec![0.5, 0.5])), 0);
        // coordinates above 1 count by distance, not magnitude
        assert_eq!(vote_of(&t(vec![1.5, 0.9])), 1);
    }

    #[test]
    fn lower_level_preserves_multiplicity() {
        let g = CandidateGroup {
            level: 0,
            samples: vec![Tensor::<f64>::one_hot(3, 1); 5],
        };
        assert_eq!(aggregate_lower(&g).unwrap(), vec![1; 5]);

        let mixed = CandidateGroup {
            level: 0,
            samples: vec![
                t(vec![0.9, 0.1, 0.0]),
                t(vec![0.2, 0.7, 0.1]),
                t(vec![0.1, 0.8, 0.1]),
            ],
        };
        assert_eq!(aggregate_lower(&mixed).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn empty_group_is_an_error() {
        let g = CandidateGroup::<f64> {
            level: 0,
            samples: vec![],
        };
        assert!(aggregate_lower(&g).is_err());
    }

    #[test]
    fn upper_level_unanimity_and_paper_shape() {
        // K = 5, M = 20: decision over 100 votes
        let groups: Vec<CandidateGroup<f64>> = (0..5)
            .map(|k| CandidateGroup {
                level: k,
                samples: vec![Tensor::one_hot(2, 1); 20],
            })
            .collect();
        let total: usize = groups.iter().map(|g| g.samples.len()).sum();
        assert_eq!(total, 100);
        assert_eq!(aggregate_upper(&groups).unwrap(), 1);
    }

    #[test]
    fn upper_level_matches_counting_oracle_on_random_cases() {
        let mut rng = RngStream::new(606, 0);
        for _ in 0..1000 {
            let k = 1 + (rng.next_u64() % 7) as usize;
            let m = 1 + (rng.next_u64() % 25) as usize;
            let c = 2 + (rng.next_u64() % 4) as usize;
            let groups: Vec<CandidateGroup<f64>> = (0..k)
                .map(|level| CandidateGroup {
                    level,
                    samples: (0..m).map(|_| Tensor::gaussian(&mut rng, &[c])).collect(),
                })
                .collect();
            // brute-force oracle: recount every vote by direct evaluation
            let mut counts = vec![0usize; c];
            for g in &groups {
                for s in &g.samples {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (ci, &v) in s.data().iter().enumerate() {
                        let d = (v - 1.0) * (v - 1.0);
                        if d < best_d {
                            best_d = d;
                            best = ci;
                        }
                    }
                    counts[best] += 1;
                }
            }
            let mut oracle = 0usize;
            for (ci, &n) in counts.iter().enumerate() {
                if n > counts[oracle] {
                    oracle = ci;
                }
            }
            assert_eq!(aggregate_upper(&groups).unwrap(), oracle);
        }
    }

    #[test]
    fn forced_ties_resolve_to_lowest_index() {
        // two groups, equal vote counts for classes 0 and 2
        let groups = vec![
            CandidateGroup {
                level: 0,
                samples: vec![Tensor::<f64>::one_hot(3, 2), Tensor::one_hot(3, 0)],
            },
            CandidateGroup {
                level: 1,
                samples: vec![Tensor::one_hot(3, 0), Tensor::one_hot(3, 2)],
            },
        ];
        assert_eq!(aggregate_upper(&groups).unwrap(), 0);
    }

    #[test]
    fn proba_limits_and_temperatures() {
        let groups = vec![CandidateGroup {
            level: 0,
            samples: vec![Tensor::<f64>::one_hot(3, 1); 4],
        }];
        for iota in [0.1737, 0.3162, 1.0] {
            let p = predict_proba(&groups, iota).unwrap();
            let sum: f64 = p.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.data()[1] > p.data()[0] && p.data()[1] > p.data()[2]);
        }
        // iota -> 0+ drives the one-hot class probability toward 1
        let p = predict_proba(&groups, 1e-4).unwrap();
        assert!(p.data()[1] > 1.0 - 1e-9);
        assert!(predict_proba(&groups, 0.0).is_err());
        assert!(predict_proba(&groups, -1.0).is_err());
    }

    #[test]
    fn proba_matches_scalar_recomputation() {
        let mut rng = RngStream::new(77, 0);
        let groups: Vec<CandidateGroup<f64>> = (0..2)
            .map(|level| CandidateGroup {
                level,
                samples: (0..3).map(|_| Tensor::gaussian(&mut rng, &[3])).collect(),
            })
            .collect();
        let iota = 0.3162;
        let got = predict_proba(&groups, iota).unwrap();
        let mut expect = [0.0f64; 3];
        let mut n = 0.0;
        for g in &groups {
            for s in &g.samples {
                let e: Vec<f64> = s
                    .data()
                    .iter()
                    .map(|v| (-(v - 1.0) * (v - 1.0) / iota).exp())
                    .collect();
                let z: f64 = e.iter().sum();
                for c in 0..3 {
                    expect[c] += e[c] / z;
                }
                n += 1.0;
            }
        }
        for c in 0..3 {
            assert!((got.data()[c] - expect[c] / n).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicating_groups_leaves_the_decision_unchanged() {
        let mut rng = RngStream::new(88, 0);
        let groups: Vec<CandidateGroup<f64>> = (0..3)
            .map(|level| CandidateGroup {
                level,
                samples: (0..5).map(|_| Tensor::gaussian(&mut rng, &[4])).collect(),
            })
            .collect();
        let doubled: Vec<CandidateGroup<f64>> =
            groups.iter().chain(groups.iter()).cloned().collect();
        assert_eq!(
            aggregate_upper(&groups).unwrap(),
            aggregate_upper(&doubled).unwrap()
        );
    }

    proptest! {
        #[test]
        fn vote_invariant_under_distance_shift(
            coords in prop::collection::vec(-2.0f64..2.0, 2..6),
            shift in 0.01f64..3.0,
        ) {
            // adding a constant to every squared distance preserves the argmax
            let s = t(coords.clone());
            let vote = vote_of(&s);
            let mut best = 0;
            let mut best_v = f64::INFINITY;
            for (c, &v) in coords.iter().enumerate() {
                let d = (v - 1.0) * (v - 1.0) + shift;
                if d < best_v {
                    best_v = d;
                    best = c;
                }
            }
            prop_assert_eq!(vote, best);
        }

        #[test]
        fn upper_is_invariant_to_partition_and_order(
            votes in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..24),
            cut in 1usize..3,
            seed in 0u64..500,
        ) {
            let samples: Vec<Tensor<f64>> = votes.iter().map(|v| t(v.clone())).collect();
            let one = vec![CandidateGroup { level: 0, samples: samples.clone() }];

            // random regrouping of the same multiset of samples
            let mut rng = RngStream::new(seed, 0);
            let mut permuted = samples.clone();
            rng.shuffle(&mut permuted);
            let cut_at = (permuted.len() / (cut + 1)).max(1);
            let groups: Vec<CandidateGroup<f64>> = permuted
                .chunks(cut_at)
                .enumerate()
                .map(|(level, chunk)| CandidateGroup { level, samples: chunk.to_vec() })
                .collect();
            prop_assert_eq!(aggregate_upper(&one).unwrap(), aggregate_upper(&groups).unwrap());
        }

        #[test]
        fn proba_is_a_probability_vector(
            votes in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..12),
            iota in 0.05f64..2.0,
        ) {
            let groups = vec![CandidateGroup { level: 0, samples: votes.iter().map(|v| t(v.clone())).collect() }];
            let p = predict_proba(&groups, iota).unwrap();
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        }
    }
}
