//! Randomized invariants.

use bnlab::batching::{normalize_with_plan, plan_cohorts, sync_moments, NormBatchPlan, Strategy as Plan, WorkerLayout};
use bnlab::experiments::{default_config, Scenario};
use bnlab::io::RunConfig;
use bnlab::net::gradcheck::{numeric_gradient, relative_error};
use bnlab::net::{MlpSpec, Network};
use bnlab::norm::{BatchCtx, BnLayer, BnMode, Cohorts};
use bnlab::stats::{aggregate_moment_matching, ema_update, precise_bn_layerwise, Aggregator, BatchMomentLog, EmaState, Population};
use bnlab::tensor::{channel_moments, concat_batch, normalize};
use bnlab::{BnError, ChannelStats, Shape4, Tensor4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn tensor(seed: u64, shape: Shape4, scale: f64, shift: f64) -> Tensor4 {
    Tensor4::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| scale * v + shift)
}

fn shape() -> impl Strategy<Value = Shape4> {
    (1usize..6, 1usize..4, 1usize..4, 1usize..4).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
}

fn net(seed: u64, input: usize, hidden: Vec<usize>) -> Network {
    Network::mlp(&MlpSpec::new(input, hidden, 3), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_self_normalizes(s in shape(), seed: u64, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        prop_assume!(s.n * s.h * s.w >= 2);
        let x = tensor(seed, s, scale, shift);
        let m = channel_moments(&x).unwrap();
        let y = channel_moments(&normalize(&x, &m, EPS).unwrap()).unwrap();
        for c in 0..s.c {
            prop_assert!(y.mean[c].abs() < 1e-9);
            prop_assert!((y.var[c] - m.var[c] / (m.var[c] + EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_moments_are_pooled_moments(a in shape(), nb in 1usize..6, seed: u64, shift in -3.0f64..3.0) {
        let x = tensor(seed, a, 1.0, 0.0);
        let y = tensor(seed ^ 1, a.with_n(nb), 2.0, shift);
        let joint = channel_moments(&concat_batch(&[x.clone(), y.clone()]).unwrap()).unwrap();
        let pooled = ChannelStats::pooled(&[channel_moments(&x).unwrap(), channel_moments(&y).unwrap()]).unwrap();
        prop_assert!(joint.max_abs_diff(&pooled) < 1e-12);
        prop_assert_eq!(joint.count, pooled.count);
    }

    #[test]
    fn equal_moments_make_split_and_concat_agree(s in shape(), seed: u64, rot in 0usize..6) {
        // a permutation of a batch has exactly its moments
        let x = tensor(seed, s, 1.5, 0.5);
        let perm: Vec<usize> = (0..s.n).map(|i| (i + rot) % s.n).collect();
        let y = x.select(&perm);
        let joint = concat_batch(&[x.clone(), y.clone()]).unwrap();
        let together = normalize(&joint, &channel_moments(&joint).unwrap(), EPS).unwrap();
        let apart = concat_batch(&[
            normalize(&x, &channel_moments(&x).unwrap(), EPS).unwrap(),
            normalize(&y, &channel_moments(&y).unwrap(), EPS).unwrap(),
        ]).unwrap();
        prop_assert!(together.max_abs_diff(&apart) < 1e-12);
    }

    #[test]
    fn reductions_are_bit_identical(s in shape(), seed: u64) {
        let x = tensor(seed, s, 3.0, 1.0);
        prop_assert_eq!(channel_moments(&x).unwrap(), channel_moments(&x.clone()).unwrap());
    }

    #[test]
    fn moment_matching_recovers_the_concatenation(k in 1usize..10, b in 1usize..8, c in 1usize..4, seed: u64) {
        let parts: Vec<Tensor4> = (0..k).map(|i| tensor(seed.wrapping_add(i as u64), Shape4::flat(b, c), 1.0 + i as f64, i as f64)).collect();
        let log = BatchMomentLog::from_entries(parts.iter().map(|p| channel_moments(p).unwrap()).collect()).unwrap();
        let oracle = channel_moments(&concat_batch(&parts).unwrap()).unwrap();
        prop_assert!(aggregate_moment_matching(&log, false).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn ema_zero_momentum_copies_and_constant_input_is_fixed(c in 1usize..5, seed: u64, momentum in 0.0f64..0.99) {
        let batch = channel_moments(&tensor(seed, Shape4::flat(5, c), 2.0, 1.0)).unwrap();
        let zero = ema_update(&EmaState::new(c, 0.0).unwrap(), &batch).unwrap();
        prop_assert_eq!(&zero.mean, &batch.mean);
        prop_assert_eq!(&zero.var, &batch.var);
        let mut s = EmaState::new(c, momentum).unwrap();
        for _ in 0..4000 {
            s.update(&batch).unwrap();
        }
        prop_assert!(s.as_stats().max_abs_diff(&batch) < 1e-9);
    }

    #[test]
    fn layerwise_estimate_ignores_batch_size(n in 2usize..24, b in 1usize..24, seed: u64) {
        let model = net(seed, 4, vec![5, 5]);
        let pop = Population::new(tensor(seed ^ 7, Shape4::flat(n, 4), 2.0, 1.0));
        let full = precise_bn_layerwise(&model, &pop, n, Aggregator::default()).unwrap();
        let small = precise_bn_layerwise(&model, &pop, b, Aggregator::default()).unwrap();
        for (x, y) in full.iter().zip(&small) {
            prop_assert!(x.max_abs_diff(y) < 1e-10);
        }
    }

    #[test]
    fn empty_batches_leave_the_ema_alone(c in 1usize..5, warm in 0usize..4, seed: u64) {
        let mut bn = BnLayer::new(c, 0.7).unwrap();
        bn.set_mode(BnMode::TrainMiniBatch);
        for i in 0..warm {
            bn.forward_simple(&tensor(seed + i as u64, Shape4::flat(3, c), 1.0, 0.5)).unwrap();
        }
        let before = bn.ema.clone();
        let err = bn.forward(&Tensor4::zeros(Shape4::flat(0, c)), &BatchCtx::single(0)).unwrap_err();
        prop_assert_eq!(err, BnError::EmptyBatch);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&bn.ema.mean), bits(&before.mean));
        prop_assert_eq!(bits(&bn.ema.var), bits(&before.var));
        prop_assert_eq!(bn.ema.update_count(), before.update_count());
    }

    #[test]
    fn population_and_frozen_modes_are_per_sample(n in 2usize..10, seed: u64, rot in 1usize..10, frozen: bool) {
        let mut model = net(seed, 4, vec![6]);
        let x = tensor(seed ^ 3, Shape4::flat(n, 4), 1.0, 0.0);
        for bn in model.bn_layers_mut() {
            bn.set_population(Some(ChannelStats::new(vec![0.3; 6], vec![2.0; 6], 100).unwrap())).unwrap();
            if frozen { bn.freeze() } else { bn.set_mode(BnMode::EvalPopulation) }
        }
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let out = model.infer(&x, &BatchCtx::single(n)).unwrap();
        let permuted = model.infer(&x.select(&perm), &BatchCtx::single(n)).unwrap();
        prop_assert!(permuted.max_abs_diff(&out.select(&perm)) == 0.0);
        // one sample alone gives the same output as inside the batch
        let alone = model.infer(&x.select(&[0]), &BatchCtx::single(1)).unwrap();
        prop_assert!(alone.max_abs_diff(&out.select(&[0])) == 0.0);
    }

    #[test]
    fn sync_normalization_equals_concatenation(sizes in prop::collection::vec(1usize..8, 1..6), c in 1usize..4, seed: u64) {
        let parts: Vec<Tensor4> = sizes.iter().enumerate()
            .map(|(i, &n)| tensor(seed.wrapping_add(i as u64), Shape4::new(n, c, 2, 1), 1.0, i as f64))
            .collect();
        let layout = WorkerLayout::new(parts.clone()).unwrap();
        let sync = normalize_with_plan(&layout, &NormBatchPlan::new(Plan::Sync), 0, EPS).unwrap();
        let joint = concat_batch(&parts).unwrap();
        let pooled = sync_moments(&parts.iter().map(|p| channel_moments(p).unwrap()).collect::<Vec<_>>()).unwrap();
        prop_assert!(sync.max_abs_diff(&normalize(&joint, &pooled, EPS).unwrap()) < 1e-12);
        prop_assert!(sync.max_abs_diff(&normalize(&joint, &channel_moments(&joint).unwrap(), EPS).unwrap()) < 1e-12);
    }

    #[test]
    fn shuffle_cohorts_partition_the_batch(sizes in prop::collection::vec(1usize..8, 1..6), seed: u64, step: u64) {
        let cp = plan_cohorts(&sizes, Plan::Shuffle { seed }, step).unwrap();
        let mut all: Vec<usize> = cp.cohorts.groups().concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..sizes.iter().sum::<usize>()).collect::<Vec<_>>());
        let mut got = cp.cohorts.sizes();
        let mut want = sizes.clone();
        got.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn ghost_over_the_whole_batch_is_per_worker(n in 1usize..12, workers in 1usize..4) {
        let sizes = vec![n; workers];
        let ghost = plan_cohorts(&sizes, Plan::Ghost { sub_batch: n }, 0).unwrap();
        let per = plan_cohorts(&sizes, Plan::PerWorker, 0).unwrap();
        prop_assert_eq!(ghost, per);
    }

    #[test]
    fn bn_backward_matches_finite_differences(n in 2usize..6, c in 1usize..3, seed: u64, cohorts in 1usize..3) {
        let x = tensor(seed, Shape4::new(n * cohorts, c, 2, 1), 1.5, 0.5);
        let w = tensor(seed ^ 9, x.shape(), 1.0, 0.0);
        let ctx = BatchCtx::with_cohorts(Cohorts::contiguous(&vec![n; cohorts]));
        let loss = |data: &[f64]| {
            let mut bn = BnLayer::new(c, 0.9).unwrap();
            let xi = Tensor4::new(x.shape(), data.to_vec()).unwrap();
            let (y, _) = bn.forward(&xi, &ctx).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut bn = BnLayer::new(c, 0.9).unwrap();
        let (_, cache) = bn.forward(&x, &ctx).unwrap();
        let analytic = bn.backward(&cache, &w).unwrap();
        let numeric = numeric_gradient(x.data(), loss);
        prop_assert!(relative_error(analytic.data(), &numeric) < 1e-5);
    }

    #[test]
    fn configs_round_trip(s in 0usize..6, seed: u64, steps in 1usize..5000, lr in 1e-4f64..1.0) {
        let mut cfg = default_config(Scenario::ALL[s]);
        cfg.seed = seed;
        cfg.sgd.steps = steps;
        cfg.sgd.lr = lr;
        let text = cfg.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json(), text);
    }
}
