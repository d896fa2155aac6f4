//! One adaptive step assembled from the public building blocks, plus
//! end-to-end properties of the driver.

use dnf_core::autodiff::Tensor;
use dnf_core::designer::rho;
use dnf_core::diffnet::train_surrogate;
use dnf_core::driver::{grid_points, InitialDesign};
use dnf_core::flows::{train_flow, AffineMap};
use dnf_core::mc::{gaussian_sample, lhs_sample};
use dnf_core::posterior::{default_lambda, LimitStatePosterior};
use dnf_core::problems::four_branch_g;
use dnf_core::*;

fn four_branch_data(n: usize, seed: u64) -> (Problem, Dataset) {
    let problem = make_problem("four-branch").unwrap();
    let points = lhs_sample(n, problem.domain(), seed);
    let values = problem.evaluate_many(&points).unwrap();
    let data = Dataset::from_pairs(2, points.into_iter().zip(values)).unwrap();
    (problem, data)
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 1500,
        ..TrainConfig::default()
    }
}

#[test]
fn flow_fitted_to_surrogate_posterior_proposes_points_near_the_limit_state() {
    let (problem, data) = four_branch_data(60, 3);
    let surrogate = train_surrogate(&data, &small_train()).unwrap();
    let lambda = default_lambda(&surrogate, |n| gaussian_sample(n, 2, 4), 2000).unwrap();
    assert!(!lambda.degenerate);
    let posterior = LimitStatePosterior::new(&surrogate, lambda.lambda, problem.domain()).unwrap();
    let cfg = FlowTrainConfig {
        steps: 300,
        ..FlowTrainConfig::default()
    };
    let (flow, report) = train_flow(&posterior, &cfg, AffineMap::from_box(problem.domain(), 3.0)).unwrap();
    assert!(report.last_decile_mean() < report.first_decile_mean());

    // samples from the fitted flow sit much closer to g = 0 than a uniform
    // spread over the box
    let on_flow = flow.sample(2000, 5).unwrap();
    let inside: Vec<&Vec<f64>> = on_flow.iter().filter(|x| problem.domain().contains(x)).collect();
    assert!(inside.len() > 1000, "only {} of 2000 flow samples in the box", inside.len());
    let median_abs = |xs: &mut Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        xs[xs.len() / 2]
    };
    let mut g_flow: Vec<f64> = inside.iter().map(|x| four_branch_g(x).abs()).collect();
    let mut g_box: Vec<f64> = lhs_sample(2000, problem.domain(), 6)
        .iter()
        .map(|x| four_branch_g(x).abs())
        .collect();
    let (m_flow, m_box) = (median_abs(&mut g_flow), median_abs(&mut g_box));
    assert!(m_flow < 0.25 * m_box, "median |g| {m_flow} on flow samples vs {m_box} over the box");

    let eps0 = 0.5;
    let criterion = DesignCriterion::new(CriterionKind::NfbdFg, eps0).unwrap();
    let density = problem.density().clone();
    let batch = criterion
        .select(&flow, data.inputs(), 4, problem.domain(), |x| density.log_pdf(x), 256, 7)
        .unwrap();
    assert_eq!(batch.len(), 4);
    for (k, p) in batch.points.iter().enumerate() {
        assert!(problem.domain().contains(p));
        let mut others = data.inputs().to_vec();
        others.extend(batch.points[..k].iter().cloned());
        assert!(rho(p, &others).unwrap() >= eps0);
    }
}

#[test]
fn surrogate_and_flow_checkpoints_reproduce_outputs() {
    let (_, data) = four_branch_data(30, 8);
    let surrogate = train_surrogate(
        &data,
        &TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let back = SurrogateModel::from_json(&surrogate.to_json().unwrap()).unwrap();
    let probe = Tensor::from_rows(&gaussian_sample(50, 2, 9), 2);
    assert_eq!(surrogate.evaluate_batch(&probe).unwrap(), back.evaluate_batch(&probe).unwrap());

    let flow = NormalizingFlow::random(3, 4, &[8], 4.0, 10).unwrap();
    let back = NormalizingFlow::from_json(&flow.to_json().unwrap()).unwrap();
    assert_eq!(flow.sample(100, 11).unwrap(), back.sample(100, 11).unwrap());
}

fn cheap(criterion: CriterionKind, seed: u64) -> DnfConfig {
    let mut cfg = DnfConfig {
        n0: 9,
        n_design: 3,
        n_max: 21,
        tolerance: 0.0,
        mc_samples: 5000,
        lambda_samples: 1000,
        criterion,
        seed,
        ..DnfConfig::default()
    };
    cfg.surrogate.epochs = 200;
    cfg.flow.steps = 30;
    cfg
}

#[test]
fn every_criterion_runs_within_budget_with_a_complete_trace() {
    for kind in CriterionKind::ALL {
        let problem = make_problem("iso").unwrap();
        let trace = run_dnf(&problem, &cheap(kind, 1)).unwrap();
        assert!(problem.calls() <= 21);
        assert_eq!(trace.total_calls, problem.calls());
        assert_eq!(trace.stop_reason, Some(StopReason::BudgetExhausted));
        assert_eq!(trace.iterations.len(), 4);
        let init = trace.initial.as_ref().unwrap();
        assert_eq!(init.points, grid_points(9, problem.domain()));
        let mut calls = 9;
        for it in &trace.iterations {
            calls += it.batch.len();
            assert_eq!(it.cumulative_calls, calls);
            assert_eq!(it.values.len(), it.batch.len());
            assert!((0.0..=1.0).contains(&it.p_hat));
            assert!(it.lambda > 0.0);
        }
        assert_eq!(trace.final_estimate, Some(trace.iterations.last().unwrap().p_hat));
        assert_eq!(RunTrace::from_json(&trace.to_json().unwrap()).unwrap(), trace);
    }
}

#[test]
fn seeds_change_the_run_and_lhs_start_is_honoured() {
    let run = |seed, mode| {
        let mut cfg = cheap(CriterionKind::NfbdAg, seed);
        cfg.initial_design = mode;
        run_dnf(&make_problem("four-branch").unwrap(), &cfg).unwrap()
    };
    let a = run(1, InitialDesign::Lhs);
    let b = run(2, InitialDesign::Lhs);
    assert_ne!(a.initial.as_ref().unwrap().points, b.initial.as_ref().unwrap().points);
    assert_eq!(a, run(1, InitialDesign::Lhs));
    // LHS: every one of the n0 bins per axis holds exactly one point
    let pts = &a.initial.as_ref().unwrap().points;
    for j in 0..2 {
        let mut bins: Vec<usize> = pts.iter().map(|p| ((p[j] + 10.0) / 20.0 * 9.0) as usize).collect();
        bins.sort_unstable();
        assert_eq!(bins, (0..9).collect::<Vec<_>>());
    }
}

#[test]
fn tolerance_stops_early_but_not_before_the_minimum() {
    let problem = make_problem("iso").unwrap();
    let mut cfg = cheap(CriterionKind::Nfbd, 4);
    cfg.tolerance = f64::INFINITY;
    cfg.n_max = 60;
    let trace = run_dnf(&problem, &cfg).unwrap();
    assert_eq!(trace.stop_reason, Some(StopReason::ToleranceMet));
    assert_eq!(trace.iterations.len(), cfg.min_iterations);
    assert!(problem.calls() < 60);
}
