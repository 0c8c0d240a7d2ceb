use genbound::bounds::{
    baseline_lipschitz, outer_root, inner_summaries, sample_table, DataMode, EstimatorConfig, SampleTable,
};
use genbound::data_io::{generate, Dataset, Family, SyntheticSpec};
use genbound::dynamics::{BetaSchedule, EtaSchedule, ScheduleSpec};
use genbound::models::{Architecture, EvalLoss, ModelSpec, Surrogate};
use genbound::numerics::{streams, LossKind, RngStream};
use genbound::subset_stats::{draw_subset, MinibatchPlan, SubsetIndex};
use proptest::prelude::*;

fn blobs(n: usize, seed: u64) -> Dataset {
    generate(&SyntheticSpec {
        family: Family::TwoBlob {
            separation: 2.0,
            dim: 3,
            noise: 1.0,
        },
        n,
        seed,
    })
    .unwrap()
}

fn softmax() -> ModelSpec {
    ModelSpec::new(Architecture::SoftmaxRegression, 3, 2, Surrogate::CrossEntropy, EvalLoss::ZeroOne).unwrap()
}

fn blob_cfg(n: usize, b: usize, steps: usize, seed: u64) -> EstimatorConfig {
    let schedule = ScheduleSpec {
        eta: EtaSchedule::Constant { eta0: 0.05 },
        beta: BetaSchedule::CappedExponential { c: 10.0, k: 20.0, cap: 500.0 },
    };
    let mut cfg = EstimatorConfig::new(n - 1, b, steps, schedule, LossKind::ZeroOne, seed);
    cfg.r_outer = 4;
    cfg.r_inner = 3;
    cfg
}

#[test]
fn sgld_bounded_invariant_under_relabeling() {
    let n = 24;
    let ds = blobs(n, 5);
    let model = softmax();
    let cfg = blob_cfg(n, 6, 30, 17);
    // π maps a position in S to its position in the relabeled dataset.
    let mut rng = RngStream::root(99);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.below(i as u64 + 1) as usize);
    }
    let mut relabeled = ds.examples().to_vec();
    for (i, &p) in perm.iter().enumerate() {
        relabeled[p] = ds.get(i).clone();
    }
    let ds_perm = Dataset::from_examples(relabeled).unwrap();

    let mut original = Vec::new();
    let mut coupled = Vec::new();
    for o in 0..cfg.r_outer {
        let root = outer_root(cfg.master_seed, o);
        let subset = draw_subset(n, cfg.m, &mut root.derive(streams::SUBSET)).unwrap();
        let plan = MinibatchPlan::draw(n, cfg.batch_size, cfg.steps, &mut root.derive(streams::MINIBATCH)).unwrap();
        let subset_perm = SubsetIndex::new(n, subset.indices().iter().map(|&i| perm[i]).collect()).unwrap();
        let plan_perm = plan.permuted(&perm).unwrap();
        original.push(inner_summaries(&model, &ds, &subset, Some(&plan), &cfg, &root, false).unwrap());
        coupled.push(inner_summaries(&model, &ds_perm, &subset_perm, Some(&plan_perm), &cfg, &root, false).unwrap());
    }
    let table = |cells| SampleTable {
        n,
        m: cfg.m,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        eta: (1..=cfg.steps).map(|t| cfg.schedule.eta(t)).collect(),
        beta: (1..=cfg.steps).map(|t| cfg.schedule.beta(t)).collect(),
        cells,
    };
    let a = table(original).sgld_bounded(&cfg).unwrap();
    let b = table(coupled).sgld_bounded(&cfg).unwrap();
    assert!(a.value > 0.0);
    assert!((a.value - b.value).abs() <= 1e-10 * a.value, "{} vs {}", a.value, b.value);

    // The library path on the original labeling reproduces the coupled value.
    let direct = sample_table(&model, DataMode::Fixed(&ds), &cfg, false).unwrap().sgld_bounded(&cfg).unwrap();
    assert_eq!(direct.value, a.value);
}

#[test]
fn lipschitz_baseline_dominates_ld_trace_form() {
    let n = 16;
    let ds = blobs(n, 8);
    let model = softmax();
    let mut cfg = blob_cfg(n, n, 40, 3);
    cfg.loss = LossKind::Subgaussian { sigma: 1.0 };
    let table = sample_table(&model, DataMode::Fixed(&ds), &cfg, true).unwrap();
    let trace = table.trace_form(&cfg).unwrap();
    let g_max = table.empirical_lipschitz().unwrap();
    let lip = baseline_lipschitz(g_max, &cfg.schedule, cfg.steps, n).unwrap();
    assert!(trace.value > 0.0);
    assert!(lip >= trace.value, "{lip} < {}", trace.value);
}

#[test]
fn first_form_below_trace_form_on_synthetic_data() {
    let spec = SyntheticSpec {
        family: Family::GaussianMean {
            mean: 0.5,
            std: 1.0,
            dim: 2,
        },
        n: 30,
        seed: 4,
    };
    let model = ModelSpec::new(Architecture::LinearRegression, 0, 2, Surrogate::Squared, EvalLoss::Squared).unwrap();
    let mut cfg = EstimatorConfig::new(20, 5, 60, ScheduleSpec::constant(0.01, 100.0), LossKind::Subgaussian { sigma: 1.0 }, 12);
    cfg.r_outer = 10;
    cfg.r_inner = 10;
    let table = sample_table(&model, DataMode::Synthetic(&spec), &cfg, true).unwrap();
    let first = table.sgld_subgauss(&cfg).unwrap();
    let trace = table.trace_form(&cfg).unwrap();
    let se = (first.std_error.powi(2) + trace.std_error.powi(2)).sqrt();
    assert!(first.value <= trace.value + 3.0 * se, "{} > {} + 3 * {se}", first.value, trace.value);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn estimates_finite_nonnegative_and_jensen_ordered(
        seed in 0u64..10_000,
        n in 8usize..20,
        b_frac in 0.1f64..1.0,
        m_frac in 0.3f64..1.0,
    ) {
        let ds = blobs(n, seed);
        let b = ((n as f64 * b_frac).ceil() as usize).clamp(1, n);
        let m = ((n as f64 * m_frac).floor() as usize).clamp(1, n - 1);
        let mut cfg = blob_cfg(n, b, 15, seed);
        cfg.m = m;
        let table = sample_table(&softmax(), DataMode::Fixed(&ds), &cfg, true).unwrap();
        let mut estimates = vec![
            table.trace_form(&cfg).unwrap(),
            table.baseline_gradnorm(&cfg).unwrap(),
        ];
        if m == n - 1 {
            estimates.push(table.sgld_bounded(&cfg).unwrap());
        }
        estimates.extend(table.jensen_estimates(&cfg).unwrap());
        for e in &estimates {
            prop_assert!(e.value.is_finite() && e.value >= 0.0);
            prop_assert!(e.std_error.is_finite() && e.std_error >= 0.0);
        }
        let j = table.jensen_triple(&cfg).unwrap();
        prop_assert!(j.mi >= j.dmi && j.dmi >= j.klb);

        let s = table.epoch_series();
        for (x, env) in s.xi_summand.iter().zip(&s.envelope) {
            prop_assert!(*x <= env * (1.0 + 1e-12) + 1e-300);
        }
    }
}
