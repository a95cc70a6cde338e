use std::sync::Arc;

use potsys::error::Error;
use potsys::estimators::{
    aipw_ate, attenuation_check, attenuation_factor, clp_decomposition, clp_fit, diff_in_means, fit_cell_linear,
    iv_wald, kernel_mu, lp_fit, Bandwidth, Coarsening, KernelConditioning, KernelOptions, KernelShape, LpOptions,
    OutcomeModel, Panel, PanelOptions, PropensityKind, PropensityModel, Residualize, Smoother,
};
use potsys::linear::LinearStructural;
use potsys::scenarios;
use potsys::simulator::{simulate_many, simulate_trajectory, Trajectory};
use potsys::system::{AssignmentDomain, DataRecord, Distribution, NewsResponse, NoiseModel, SemModel, Spaces, SystemSpec};
use proptest::prelude::*;

fn traj(rows: &[(f64, f64, f64)]) -> Trajectory {
    Trajectory {
        records: rows
            .iter()
            .enumerate()
            .map(|(i, (x, a, y))| DataRecord {
                t: i as i64 + 1,
                x: vec![*x],
                a: vec![*a],
                y: vec![*y],
            })
            .collect(),
        seed: 0,
        replication: 0,
    }
}

fn flat(h: usize) -> PanelOptions {
    PanelOptions {
        max_h: h,
        history_lags: 0,
        outcome: 0,
    }
}

fn binary_linear(horizon: usize) -> SystemSpec {
    SystemSpec {
        spaces: Spaces::new(0, 1, 1, AssignmentDomain::Binary),
        noise: NoiseModel::new(Distribution::empty(), Distribution::standard_normal(1), Distribution::standard_normal(1)),
        sem: SemModel::BinaryLinear {
            structural: LinearStructural::scalar(0.5, 2.0, 1.0),
            threshold: 0.0,
        },
        horizon,
        initial_history: vec![],
    }
}

#[test]
fn two_point_difference() {
    let p = Panel::from_trajectory(&traj(&[(0.0, 1.0, 3.0), (0.0, 0.0, 1.0)]), flat(0)).unwrap();
    let e = diff_in_means(&p, 0, &[1.0], &[0.0]).unwrap();
    assert_eq!(e.point, 2.0);
    assert!(e.stderr >= 0.0);
}

#[test]
fn empty_cell_is_an_error() {
    let p = Panel::from_trajectory(&traj(&[(0.0, 1.0, 3.0), (0.0, 1.0, 1.0)]), flat(0)).unwrap();
    assert!(matches!(diff_in_means(&p, 0, &[1.0], &[0.0]), Err(Error::EmptyCell(_))));
}

#[test]
fn panel_drops_rows_without_leads_or_history() {
    let tr = simulate_trajectory(&scenarios::news_impact(0.5, 1.0, 0.5, 10), 1, 0).unwrap();
    let p = Panel::from_trajectory(
        &tr,
        PanelOptions {
            max_h: 2,
            history_lags: 1,
            outcome: 0,
        },
    )
    .unwrap();
    assert_eq!(p.len(), 7);
    assert_eq!(p.dropped, 3);
    assert!(p.rows.iter().all(|r| r.t + 2 <= 10));
    assert!(p.check_h(3).is_err());
}

#[test]
fn panel_csv_round_trip() {
    let tr = simulate_trajectory(&scenarios::linear_confounded(30), 1, 0).unwrap();
    let opts = PanelOptions {
        max_h: 2,
        history_lags: 1,
        outcome: 0,
    };
    let p = Panel::from_trajectory(&tr, opts).unwrap();
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    let back = Panel::read_csv(buf.as_slice(), 1, opts).unwrap();
    assert_eq!(back.rows, p.rows);
}

#[test]
fn binary_linear_diff_in_means_recovers_psi() {
    let tr = simulate_trajectory(&binary_linear(100_000), 5, 0).unwrap();
    let p = Panel::from_trajectory(&tr, flat(3)).unwrap();
    for h in 0..=3 {
        let e = diff_in_means(&p, h, &[1.0], &[0.0]).unwrap();
        let want = 2.0 * 0.5f64.powi(h as i32);
        assert!((e.point - want).abs() <= 4.0 * e.stderr, "h={h}: {} ± {}", e.point, e.stderr);
    }
}

#[test]
fn exact_linear_data() {
    let rows: Vec<(f64, f64, f64)> = (0..20).map(|i| (0.0, i as f64 * 0.3 - 2.0, 3.0 * (i as f64 * 0.3 - 2.0))).collect();
    let p = Panel::from_trajectory(&traj(&rows), flat(0)).unwrap();
    let f = lp_fit(&p, 0, &LpOptions::default()).unwrap();
    assert!((f.beta[0] - 3.0).abs() < 1e-12);
    assert!(f.kappa.abs() < 1e-12);
}

#[test]
fn singular_design_is_an_error() {
    let rows: Vec<(f64, f64, f64)> = (0..20).map(|i| (1.0, 1.0, i as f64)).collect();
    let p = Panel::from_trajectory(&traj(&rows), flat(0)).unwrap();
    assert!(matches!(lp_fit(&p, 0, &LpOptions::default()), Err(Error::Singular(_))));
}

#[test]
fn confounding_bias_and_feature_adjustment() {
    let tr = simulate_trajectory(&scenarios::linear_confounded(200_000), 8, 0).unwrap();
    let p = Panel::from_trajectory(&tr, flat(1)).unwrap();
    // with α₁ = 0 the feature is the only confounder
    for h in 0..=1 {
        let psi = 2.0 * 0.5f64.powi(h as i32);
        let naive = lp_fit(&p, h, &LpOptions::default()).unwrap();
        let adj = lp_fit(
            &p,
            h,
            &LpOptions {
                features: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((naive.beta[0] - psi).abs() > 6.0 * naive.stderr[0]);
        assert!((adj.beta[0] - psi).abs() <= 4.0 * adj.stderr[0], "h={h}");
    }
}

#[test]
fn detrender_orthogonal_to_a_perp_leaves_beta() {
    let tr = simulate_trajectory(&scenarios::linear_confounded(5_000), 2, 0).unwrap();
    let p = Panel::from_trajectory(&tr, flat(2)).unwrap();
    let offset: Vec<f64> = p.rows.iter().map(|r| 1.0 + 2.5 * r.x[0]).collect();
    for residualize in [Residualize::Joint, Residualize::Fwl] {
        let base = LpOptions {
            features: true,
            residualize,
            ..Default::default()
        };
        let with = LpOptions {
            offset: Some(offset.clone()),
            ..base.clone()
        };
        let b0 = lp_fit(&p, 2, &base).unwrap().beta[0];
        let b1 = lp_fit(&p, 2, &with).unwrap().beta[0];
        assert!((b0 - b1).abs() < 1e-8);
    }
}

#[test]
fn clp_examples() {
    let const_x = traj(&[(1.0, 1.0, 2.0), (1.0, 1.0, 3.0), (1.0, 0.0, 1.0), (2.0, 0.0, 0.0)]);
    let p = Panel::from_trajectory(&const_x, flat(0)).unwrap();
    assert!(matches!(clp_fit(&p, 0, &[1.0]), Err(Error::Singular(_))));

    let rows = [(0.5, 1.0, 0.5), (1.5, 1.0, 1.5), (-2.0, 1.0, -2.0), (0.0, 0.0, 4.0), (1.0, 0.0, 1.0), (3.0, 0.0, 2.0)];
    let p = Panel::from_trajectory(&traj(&rows), flat(0)).unwrap();
    let f1 = clp_fit(&p, 0, &[1.0]).unwrap();
    assert!((f1.beta[0] - 1.0).abs() < 1e-12);
    assert!(f1.kappa.abs() < 1e-12);
    assert!(matches!(clp_fit(&p, 0, &[2.0]), Err(Error::EmptyCell(_))));
}

#[test]
fn clp_decomposition_identity() {
    let (p, _) = aipw_panel(2_000, 3);
    let f1 = clp_fit(&p, 0, &[1.0]).unwrap();
    let f0 = clp_fit(&p, 0, &[0.0]).unwrap();
    for x in [-1.0, 0.0, 0.3, 0.5, 2.0] {
        let (lhs, rhs) = clp_decomposition(&f1, &f0, &[x]);
        assert!((lhs - rhs).abs() < 1e-10);
    }
    // at each cell's own feature mean the fit returns the cell mean
    assert!((f1.predict(&f1.x_mean) - f1.y_mean).abs() < 1e-10);
}

#[test]
fn narrow_kernels_reproduce_cell_means() {
    let tr = simulate_trajectory(&scenarios::news_impact(0.5, 1.0, 0.5, 500), 4, 0).unwrap();
    let p = Panel::from_trajectory(&tr, flat(1)).unwrap();
    let opts = KernelOptions {
        kernel: KernelShape::Epanechnikov,
        bandwidth: Bandwidth::Fixed { values: vec![0.5] },
        ..Default::default()
    };
    let fit = kernel_mu(&p, 1, &opts).unwrap();
    for atom in [0.0, 1.0] {
        let cell: Vec<f64> = p.rows.iter().filter(|r| r.a[0] == atom).map(|r| r.leads[1]).collect();
        let mean = cell.iter().sum::<f64>() / cell.len() as f64;
        assert!((fit.predict_point(&[atom]).unwrap() - mean).abs() < 1e-12);
    }
    assert!(matches!(fit.predict_point(&[0.5]), Err(Error::ZeroKernelMass(_))));
}

#[test]
fn kernel_plug_in_for_quadratic_news() {
    let spec = SystemSpec {
        spaces: Spaces::new(0, 1, 1, AssignmentDomain::Binary),
        noise: NoiseModel::new(Distribution::empty(), Distribution::bernoulli(0.5), Distribution::standard_normal(1)),
        sem: SemModel::NewsImpact {
            response: NewsResponse::PartiallyLinear {
                rho: 0.5,
                zeta: vec![0.0, 0.0, 1.0],
                noise_loading: 1.0,
            },
        },
        horizon: 20_000,
        initial_history: vec![],
    };
    let tr = simulate_trajectory(&spec, 6, 0).unwrap();
    let p = Panel::from_trajectory(&tr, flat(0)).unwrap();
    let fit = kernel_mu(
        &p,
        0,
        &KernelOptions {
            kernel: KernelShape::Epanechnikov,
            bandwidth: Bandwidth::Fixed { values: vec![0.5] },
            ..Default::default()
        },
    )
    .unwrap();
    let e = fit.plug_in_ate(&p, &[1.0], &[0.0]).unwrap();
    assert!((e.point - 1.0).abs() <= 4.0 * e.stderr, "{} ± {}", e.point, e.stderr);
}

#[test]
fn constant_outcome_gives_constant_fit() {
    let rows: Vec<(f64, f64, f64)> = (0..50).map(|i| ((i as f64).sin(), (i as f64 * 0.7).cos(), 4.25)).collect();
    let p = Panel::from_trajectory(&traj(&rows), flat(0)).unwrap();
    for smoother in [Smoother::NadarayaWatson, Smoother::LocalLinear] {
        for conditioning in [KernelConditioning::AOnly, KernelConditioning::AX] {
            let fit = kernel_mu(
                &p,
                0,
                &KernelOptions {
                    conditioning,
                    smoother,
                    ..Default::default()
                },
            )
            .unwrap();
            for a in [-0.9, 0.0, 0.4] {
                assert!((fit.predict(&[a], &p.rows[3]).unwrap() - 4.25).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn perfect_compliance_reduces_to_diff_in_means() {
    let tr = simulate_trajectory(&scenarios::iv_encouragement(1.0, 2.0, 5_000), 1, 0).unwrap();
    let p = Panel::from_trajectory(&tr, flat(0)).unwrap();
    assert!(p.rows.iter().all(|r| r.a == r.x));
    let iv = iv_wald(&p, 0, &Coarsening::None, 0.01).unwrap();
    let dm = diff_in_means(&p, 0, &[1.0], &[0.0]).unwrap();
    assert!((iv.point - dm.point).abs() < 1e-10);
}

#[test]
fn zero_first_stage_is_weak() {
    let tr = simulate_trajectory(&scenarios::iv_encouragement(0.0, 2.0, 2_000), 1, 0).unwrap();
    let p = Panel::from_trajectory(&tr, flat(0)).unwrap();
    assert!(matches!(iv_wald(&p, 0, &Coarsening::None, 0.01), Err(Error::WeakFirstStage { .. })));
}

#[test]
fn iv_with_history_cells_recovers_late() {
    let tr = simulate_trajectory(&scenarios::iv_encouragement(0.5, 2.0, 200_000), 2, 0).unwrap();
    let p = Panel::from_trajectory(
        &tr,
        PanelOptions {
            max_h: 0,
            history_lags: 1,
            outcome: 0,
        },
    )
    .unwrap();
    let iv = iv_wald(&p, 0, &Coarsening::default(), 0.01).unwrap();
    assert!((iv.point - 2.0).abs() <= 4.0 * iv.stderr, "{} ± {}", iv.point, iv.stderr);
    assert_eq!(iv.cells.len(), 4);
    let custom = Coarsening::Custom(Arc::new(|r| i64::from(r.history[1] > 0.5)));
    let iv2 = iv_wald(&p, 0, &custom, 0.01).unwrap();
    assert_eq!(iv2.cells.len(), 2);
}

fn aipw_panel(n: usize, seed: u64) -> (Panel, SystemSpec) {
    let mut ls = LinearStructural::zeros((1, 1, 1, 1, 1, 1));
    ls.delta[(0, 0)] = 1.0;
    ls.alpha0[(0, 0)] = 1.0;
    ls.gamma[(0, 0)] = 1.0;
    ls.gamma0_x[(0, 0)] = 1.0;
    ls.gamma0_a[(0, 0)] = 2.0;
    ls.omega[(0, 0)] = 1.0;
    let spec = SystemSpec {
        spaces: Spaces::new(1, 1, 1, AssignmentDomain::Binary),
        noise: NoiseModel::new(
            Distribution::standard_normal(1),
            Distribution::standard_normal(1),
            Distribution::standard_normal(1),
        ),
        sem: SemModel::BinaryLinear {
            structural: ls,
            threshold: 0.0,
        },
        horizon: n,
        initial_history: vec![],
    };
    let tr = simulate_trajectory(&spec, seed, 0).unwrap();
    (
        Panel::from_trajectory(
            &tr,
            PanelOptions {
                max_h: 0,
                history_lags: 1,
                outcome: 0,
            },
        )
        .unwrap(),
        spec,
    )
}

#[test]
fn aipw_influence_curve_has_zero_mean() {
    let (p, spec) = aipw_panel(3_000, 3);
    let atoms = vec![vec![0.0], vec![1.0]];
    let props = [
        PropensityModel::new(PropensityKind::KnownFromSpec(Arc::new(spec)), atoms.clone()),
        PropensityModel::new(PropensityKind::Constant(vec![0.5, 0.5]), atoms.clone()),
        PropensityModel::logistic(&p, atoms.clone(), false).unwrap(),
        PropensityModel::empirical(&p, atoms.clone()).unwrap(),
    ];
    let outcome = fit_cell_linear(&p, 0, &atoms, false, None).unwrap();
    for prop in &props {
        let e = aipw_ate(&p, 0, &[1.0], &[0.0], &outcome, prop).unwrap();
        assert!(e.if_mean.abs() < 1e-10);
        assert!(e.estimate.stderr >= 0.0);
        for r in &p.rows {
            let raw = prop.raw(&p, r).unwrap();
            assert!((raw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..2 {
                let (c, _) = prop.prob(&p, r, k).unwrap();
                assert!((prop.clip..=1.0 - prop.clip).contains(&c));
            }
        }
    }
}

#[test]
fn aipw_with_ipw_weighted_cells_equals_plug_in() {
    let (p, spec) = aipw_panel(3_000, 4);
    let atoms = vec![vec![0.0], vec![1.0]];
    let prop = PropensityModel::new(PropensityKind::KnownFromSpec(Arc::new(spec)), atoms.clone());
    let outcome = fit_cell_linear(&p, 0, &atoms, false, Some(&prop)).unwrap();
    let e = aipw_ate(&p, 0, &[1.0], &[0.0], &outcome, &prop).unwrap();
    assert!((e.estimate.point - e.plug_in).abs() < 1e-10);
}

#[test]
fn zero_outcome_model_is_ipw() {
    let (p, _) = aipw_panel(2_000, 5);
    let atoms = vec![vec![0.0], vec![1.0]];
    let prop = PropensityModel::new(PropensityKind::Constant(vec![0.5, 0.5]), atoms);
    let e = aipw_ate(&p, 0, &[1.0], &[0.0], &OutcomeModel::Zero, &prop).unwrap();
    let ipw: f64 = p
        .rows
        .iter()
        .map(|r| if r.a[0] == 1.0 { r.leads[0] / 0.5 } else { -r.leads[0] / 0.5 })
        .sum::<f64>()
        / p.len() as f64;
    assert!((e.estimate.point - ipw).abs() < 1e-10);
    assert_eq!(e.plug_in, 0.0);
}

#[test]
fn unclipped_zero_propensity_is_a_positivity_error() {
    let (p, _) = aipw_panel(200, 6);
    let atoms = vec![vec![0.0], vec![1.0]];
    let prop = PropensityModel::new(PropensityKind::Constant(vec![1.0, 0.0]), atoms).with_clip(0.0);
    assert!(matches!(
        aipw_ate(&p, 0, &[1.0], &[0.0], &OutcomeModel::Zero, &prop),
        Err(Error::Positivity(_))
    ));
}

#[test]
fn attenuation_factor_examples() {
    assert_eq!(attenuation_factor(1.0, 1.0, 0.0).unwrap(), 1.0);
    assert_eq!(attenuation_factor(1.0, 1.0, 1.0).unwrap(), 0.5);
    assert_eq!(attenuation_factor(2.0, 1.0, 0.0).unwrap(), 0.5);
    assert!(attenuation_factor(0.0, 1.0, 0.0).is_err());
}

#[test]
fn noiseless_identity_proxy_is_unbiased() {
    let spec = scenarios::proxy_attenuation(1.0, 0.0, 20_000);
    let r = attenuation_check(&spec, 1, 3).unwrap();
    assert_eq!(r.factor, 1.0);
    assert!((r.ratio - 1.0).abs() <= 4.0 * r.stderr.max(1e-12));
}

#[test]
fn pooled_replications_use_clusters() {
    let trajs = simulate_many(&scenarios::news_impact(0.5, 1.0, 0.5, 200), 9, 20).unwrap();
    let p = Panel::from_trajectories(&trajs, flat(0)).unwrap();
    assert_eq!(p.n_replications(), 20);
    let e = diff_in_means(&p, 0, &[1.0], &[0.0]).unwrap();
    assert!((e.point - 1.0).abs() <= 4.0 * e.stderr);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binary_collapse(seed in any::<u64>(), n in 20usize..200, h in 0usize..3) {
        let tr = simulate_trajectory(&scenarios::news_impact(0.6, 1.5, 0.4, n), seed, 0).unwrap();
        let p = Panel::from_trajectory(&tr, flat(2)).unwrap();
        let dm = diff_in_means(&p, h, &[1.0], &[0.0]);
        prop_assume!(dm.is_ok());
        let lp = lp_fit(&p, h, &LpOptions::default()).unwrap();
        prop_assert!((dm.unwrap().point - lp.beta[0]).abs() <= 1e-10);
    }

    #[test]
    fn fwl_matches_joint(seed in any::<u64>(), n in 50usize..400) {
        let tr = simulate_trajectory(&scenarios::linear_confounded(n), seed, 0).unwrap();
        let p = Panel::from_trajectory(&tr, PanelOptions { max_h: 1, history_lags: 1, outcome: 0 }).unwrap();
        let joint = LpOptions { features: true, history: true, ..Default::default() };
        let fwl = LpOptions { residualize: Residualize::Fwl, ..joint.clone() };
        let a = lp_fit(&p, 1, &joint).unwrap();
        let b = lp_fit(&p, 1, &fwl).unwrap();
        prop_assert!((a.beta[0] - b.beta[0]).abs() <= 1e-8);
    }

    #[test]
    fn kernel_fit_is_permutation_invariant(seed in any::<u64>(), shift in 1usize..50) {
        let tr = simulate_trajectory(&scenarios::linear_confounded(60), seed, 0).unwrap();
        let p = Panel::from_trajectory(&tr, flat(0)).unwrap();
        let mut rows = p.rows.clone();
        let k = shift % rows.len();
        rows.rotate_left(k);
        rows.reverse();
        let q = p.with_rows(rows);
        let opts = KernelOptions { conditioning: KernelConditioning::AX, ..Default::default() };
        let f = kernel_mu(&p, 0, &opts).unwrap();
        let g = kernel_mu(&q, 0, &opts).unwrap();
        for r in p.rows.iter().take(5) {
            let a = f.predict(&r.a, r).unwrap();
            let b = g.predict(&r.a, r).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
