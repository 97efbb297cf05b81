mod common;

use common::scms::{build, categorical, linear, root};
use proptest::prelude::*;
use whatif_core::episode::{
    encode, episode_from_scm, episodes_from_artifact, episodes_to_artifact, generate_batch, generate_episode,
    generate_raw_episode, EncodeOptions, PriorConfig, TreatmentPolicy,
};
use whatif_core::scm::{GraphConfig, Mechanism};
use whatif_core::seed::rng_from_seed;
use whatif_core::{stats, Error};

fn chain_prior() -> PriorConfig {
    PriorConfig {
        treatment_policy: TreatmentPolicy::Node { index: 1 },
        null_effect_prob: 0.0,
        ..PriorConfig::default()
    }
}

#[test]
fn constant_effect_chain_gives_equal_targets() {
    // X -> T -> Y with binary T and Y := 2·1[T=1] + N.
    let t = categorical(
        vec![0],
        vec![
            Mechanism::Linear {
                weights: vec![0.0],
                bias: 0.0,
            },
            Mechanism::Linear {
                weights: vec![1.0],
                bias: 0.0,
            },
        ],
        1.0,
    );
    let scm = build(3, &[(0, 1), (1, 2)], vec![root(1.0), t, linear(vec![1], vec![0.0, 2.0], 0.5)]);
    for seed in 0..10 {
        let e = episode_from_scm(&scm, &chain_prior(), &mut rng_from_seed(seed)).unwrap();
        assert_eq!((e.meta.treatment, e.meta.t0, e.meta.t1), (1, 0.0, 1.0));
        assert!(e.targets.iter().all(|&v| v == e.targets[0]));
        for v in e.targets_in_outcome_units() {
            assert!((v - 2.0).abs() < 1e-5, "target {v}");
        }
    }
}

#[test]
fn continuous_treatment_is_binarised_at_quartile_midpoint() {
    let scm = build(3, &[(0, 1), (1, 2)], vec![root(1.0), linear(vec![0], vec![1.0], 1.0), linear(vec![1], vec![3.0], 0.1)]);
    let raw = whatif_core::episode::raw_episode_from_scm(&scm, &chain_prior(), &mut rng_from_seed(0)).unwrap();
    let (t0, t1) = (raw.meta.t0, raw.meta.t1);
    assert!(t0 < 0.0 && t1 > 0.0, "quartiles of a centred marginal: {t0}, {t1}");
    for &ite in &raw.targets {
        assert!((ite - 3.0 * (t1 - t0)).abs() < 1e-9);
    }
    let t = raw.context.column_values(raw.context.column_index("T").unwrap());
    assert!(t.iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(t.contains(&0.0) && t.contains(&1.0));
}

#[test]
fn zero_effect_prior_targets_vanish() {
    let prior = PriorConfig {
        null_effect_prob: 1.0,
        ..PriorConfig::default()
    };
    let episodes = generate_batch(&prior, 200, 17).unwrap();
    let targets: Vec<f64> = episodes.iter().flat_map(|e| e.targets.iter().map(|&v| v as f64)).collect();
    let mean = stats::mean(&targets);
    assert!(mean.abs() < 1e-12, "mean {mean}");
    assert!(episodes.iter().all(|e| e.meta.null_effect));
}

#[test]
fn normalization_uses_context_statistics_only() {
    let prior = PriorConfig::default();
    for seed in 0..20 {
        let raw = generate_raw_episode(&prior, &mut rng_from_seed(seed)).unwrap();
        let e = raw.encode(prior.d_max).unwrap();
        let mut shifted = raw.clone();
        let mut queries = shifted.queries.clone();
        for c in 0..queries.width() {
            if !queries.columns()[c].kind.is_categorical() {
                let values: Vec<f64> = queries.column_values(c).iter().map(|v| v * 7.0 + 100.0).collect();
                queries.replace_column(c, queries.columns()[c].kind, &values).unwrap();
            }
        }
        shifted.queries = queries;
        assert_eq!(shifted.encode(prior.d_max).unwrap().norm, e.norm);

        let y = raw.context.column_values(raw.context.column_index("Y").unwrap());
        assert_eq!(e.norm.outcome_mean, stats::mean(&y));
        let mut slot = 0;
        for name in &e.norm.columns {
            let c = raw.context.column_index(name).unwrap();
            let kind = raw.context.columns()[c].kind;
            if kind.is_categorical() {
                slot += kind.encoded_width();
                continue;
            }
            let values = raw.context.column_values(c);
            assert_eq!(e.norm.slot_mean[slot], stats::mean(&values));
            let q = raw.queries.column_index(name).unwrap();
            for r in 0..raw.queries.row_count() {
                let expected = ((raw.queries.get(r, q) - e.norm.slot_mean[slot]) / e.norm.slot_std[slot]) as f32;
                assert_eq!(e.query_x[r * e.d_max + slot], expected);
            }
            slot += 1;
        }
        assert_eq!(slot, e.covariate_dim);
    }
}

#[test]
fn context_and_queries_share_schema_and_targets_are_finite() {
    let prior = PriorConfig::default();
    for seed in 0..50 {
        let raw = generate_raw_episode(&prior, &mut rng_from_seed(seed)).unwrap();
        let context_names: Vec<&str> = raw
            .context
            .covariate_indices()
            .into_iter()
            .map(|c| raw.context.columns()[c].name.as_str())
            .collect();
        let query_names: Vec<&str> = raw.queries.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(context_names, query_names);
        assert!(raw.targets.iter().all(|t| t.is_finite()));
        assert_eq!(raw.targets.len(), prior.queries);
        let n = raw.context.row_count();
        assert!((prior.context_min..=prior.context_max).contains(&n));
    }
}

#[test]
fn same_seed_gives_byte_identical_episodes() {
    let prior = PriorConfig::default();
    let a = generate_batch(&prior, 6, 123).unwrap();
    let b = generate_batch(&prior, 6, 123).unwrap();
    let bytes_a = episodes_to_artifact(&a).unwrap().to_bytes().unwrap();
    let bytes_b = episodes_to_artifact(&b).unwrap().to_bytes().unwrap();
    assert_eq!(bytes_a, bytes_b);
    let restored = episodes_from_artifact(&whatif_core::artifact::Artifact::from_bytes(&bytes_a).unwrap()).unwrap();
    assert_eq!(restored, a);
    assert_eq!(
        generate_episode(&prior, &mut rng_from_seed(1)).unwrap(),
        generate_episode(&prior, &mut rng_from_seed(1)).unwrap()
    );
}

#[test]
fn oversized_covariates_need_truncation() {
    let prior = PriorConfig {
        graph: GraphConfig {
            min_nodes: 12,
            max_nodes: 12,
            ..GraphConfig::default()
        },
        treatment_policy: TreatmentPolicy::Node { index: 10 },
        d_max: 2,
        ..PriorConfig::default()
    };
    let raw = generate_raw_episode(&prior, &mut rng_from_seed(4)).unwrap();
    let options = EncodeOptions {
        d_max: 2,
        truncate: false,
        drop_order: raw.drop_order.clone(),
    };
    let err = encode(&raw.context, &raw.queries, Some(&raw.targets), &options, raw.meta.clone()).unwrap_err();
    assert!(matches!(err, Error::Capacity { capacity: 2, .. }), "{err:?}");
    let e = raw.encode(2).unwrap();
    assert!(e.covariate_dim <= 2);
    // Columns are dropped farthest-first, so the survivors are a suffix of the drop order.
    let mut kept = e.norm.columns.clone();
    kept.sort();
    let mut suffix = raw.drop_order[raw.drop_order.len() - kept.len()..].to_vec();
    suffix.sort();
    assert_eq!(kept, suffix);
    assert!(kept.len() < raw.drop_order.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_mask_matches_encoded_dimension(seed in any::<u64>(), d_max in 1usize..20) {
        let prior = PriorConfig { d_max, ..PriorConfig::default() };
        let e = generate_episode(&prior, &mut rng_from_seed(seed)).unwrap();
        let mask = e.validity_mask();
        prop_assert_eq!(mask.len(), d_max);
        prop_assert!(e.covariate_dim <= d_max);
        prop_assert_eq!(mask.iter().filter(|&&m| m == 0.0).count(), d_max - e.covariate_dim);
        prop_assert!(mask[..e.covariate_dim].iter().all(|&m| m == 1.0));
        for row in e.context_x.chunks(d_max).chain(e.query_x.chunks(d_max)) {
            prop_assert!(row[e.covariate_dim..].iter().all(|&v| v == 0.0));
        }
    }
}
