#![allow(clippy::needless_range_loop)]

use aet_core::fem::SolverOptions;
use aet_core::operator::{Current, CurrentSet, ForwardModel};
use aet_core::penalty::{Penalty, PenaltyKind, PenaltySpec};
use aet_core::phantom::{
    add_noise_all, currents_full, default_shapes, geometric_phantom, synthesize_data, NoiseSpec, PointLocator,
};
use aet_core::tpg::{step_size, AlgoConfig, IterState, Mode, Observations, Solver};
use aet_core::{generate_disk_mesh, ElementField, NodalField, TriMesh};
use proptest::prelude::*;

/// Centre node plus nine nodes on the circle of radius ½.
fn fan_mesh() -> TriMesh {
    let mut nodes = vec![[0.0, 0.0]];
    for k in 0..9 {
        let t = k as f64 * std::f64::consts::TAU / 9.0;
        nodes.push([0.5 * t.cos(), 0.5 * t.sin()]);
    }
    let tris = (0..9).map(|k| [0, 1 + k, 1 + (k + 1) % 9]).collect();
    TriMesh::from_parts(nodes, tris).unwrap()
}

fn desk_data(mesh: &TriMesh, delta_e: f64, seed: u64) -> (NodalField, Observations) {
    let truth = geometric_phantom(mesh, 1.0, &default_shapes()).unwrap();
    let model = ForwardModel::new(mesh, &currents_full(), SolverOptions::default()).unwrap();
    let (y, _) = model.forward(&truth).unwrap();
    let (data, delta) = add_noise_all(mesh, &y, NoiseSpec { delta_e, seed }, 2.2).unwrap();
    (truth, Observations { data, delta })
}

#[test]
fn landweber_substep_matches_dense_update() {
    let mesh = fan_mesh();
    assert_eq!(mesh.node_count(), 10);
    let currents = CurrentSet::new(vec![Current::Linear { a1: 0.6, a2: 0.8 }]).unwrap();
    let model = ForwardModel::new(&mesh, &currents, SolverOptions::default()).unwrap();
    let truth = NodalField::from_fn(&mesh, |n| 1.0 + 0.3 * mesh.nodes()[n][0] + (n == 0) as u8 as f64);
    let (y, _) = model.forward(&truth).unwrap();
    let beta = 1.3;
    let penalty = Penalty::new(&mesh, PenaltySpec::new(PenaltyKind::Quadratic, beta)).unwrap();
    let cfg = AlgoConfig { mode: Mode::Landweber, q: 3.0, ..AlgoConfig::default() };
    let mut solver = Solver::new(&model, &penalty, cfg.clone()).unwrap();
    let xi0 = NodalField::from_fn(&mesh, |n| 0.9 + 0.05 * n as f64);
    let state = IterState::from_dual(&penalty, xi0.clone()).unwrap();
    let obs = Observations { data: y.clone(), delta: vec![1e-9] };
    let (next, records, _) = solver.sweep(&state, &obs).unwrap();

    // dense reference: Jacobian columns from unit directions, adjoint as M⁻¹ Jᵀ A
    let sigma: Vec<f64> = xi0.values.iter().map(|v| beta * v).collect();
    let sigma = NodalField::new(&mesh, sigma).unwrap();
    let (h, cache) = model.forward(&sigma).unwrap();
    let (nn, nt) = (mesh.node_count(), mesh.triangle_count());
    let jac: Vec<Vec<f64>> = (0..nn)
        .map(|k| {
            let e = NodalField::from_fn(&mesh, |n| (n == k) as u8 as f64);
            model.derivative_apply(&sigma, &cache, 0, &e).unwrap().values
        })
        .collect();
    let p = cfg.q / 2.0;
    let r: Vec<f64> = (0..nt).map(|t| h[0].values[t] - y[0].values[t]).collect();
    let area = mesh.elem_area();
    let r_norm = (0..nt).map(|t| area[t] * r[t].abs().powf(p)).sum::<f64>().powf(1.0 / p);
    let j: Vec<f64> = r.iter().map(|v| v.signum() * v.abs().powf(p - 1.0)).collect();
    let grad: Vec<f64> =
        (0..nn).map(|k| (0..nt).map(|t| jac[k][t] * area[t] * j[t]).sum::<f64>() / mesh.node_mass()[k]).collect();
    let grad_norm = (0..nn).map(|k| mesh.node_mass()[k] * grad[k] * grad[k]).sum::<f64>().sqrt();
    let mu = step_size(r_norm, grad_norm, 1e-9, &cfg);
    assert!(mu > 0.0);
    assert!((records[0].residual - r_norm).abs() <= 1e-12 * r_norm);
    assert!((records[0].mu - mu).abs() <= 1e-10 * mu);
    assert_eq!(records[0].lambda, 0.0);
    for k in 0..nn {
        let expected = xi0.values[k] - mu * grad[k];
        assert!((next.xi_curr.values[k] - expected).abs() <= 1e-9 * (1.0 + expected.abs()), "node {k}");
        assert!((next.sigma.values[k] - beta * expected).abs() <= 1e-9 * (1.0 + expected.abs()));
    }
    assert_eq!(next.xi_prev, xi0);
}

#[test]
fn exact_data_at_the_truth_is_a_fixed_point() {
    let mesh = generate_disk_mesh(0.5, 0.1).unwrap();
    let truth = geometric_phantom(&mesh, 1.0, &default_shapes()).unwrap();
    let model = ForwardModel::new(&mesh, &currents_full(), SolverOptions::default()).unwrap();
    for (kind, xi) in [(PenaltyKind::Quadratic, truth.clone()), (PenaltyKind::L1, truth.map(|v| 1.0 + v))] {
        let penalty = Penalty::new(&mesh, PenaltySpec::new(kind, 1.0)).unwrap();
        let state = IterState::from_dual(&penalty, xi).unwrap();
        let (data, _) = model.forward(&state.sigma).unwrap();
        let obs = Observations { data, delta: vec![1e-12; 4] };
        let mut solver = Solver::new(&model, &penalty, AlgoConfig::default()).unwrap();
        let (next, records, _) = solver.sweep(&state, &obs).unwrap();
        assert!(records.iter().all(|r| r.mu == 0.0 && r.lambda == 0.0 && r.residual == 0.0), "{kind:?}");
        assert_eq!(next.xi_curr, state.xi_curr);
        assert_eq!(next.sigma, state.sigma);
        let out = solver.run_from(state, &obs, Some(&truth)).unwrap();
        assert!(out.converged);
        assert_eq!(out.n_delta, 0);
    }
}

#[test]
fn sweep_budget_exhaustion_is_flagged() {
    let mesh = generate_disk_mesh(0.5, 0.1).unwrap();
    let (truth, obs) = desk_data(&mesh, 0.01, 4);
    let model = ForwardModel::new(&mesh, &currents_full(), SolverOptions::default()).unwrap();
    let penalty = Penalty::new(&mesh, PenaltySpec::new(PenaltyKind::L1, 1.0)).unwrap();
    let mut solver = Solver::new(&model, &penalty, AlgoConfig { max_sweeps: 3, ..AlgoConfig::default() }).unwrap();
    let out = solver.run(&obs, Some(&truth)).unwrap();
    assert!(!out.converged);
    assert_eq!(out.n_delta, 3);
    assert_eq!(out.sweeps.len(), 3);
    assert_eq!(out.substeps.len(), 12);
    let best = out.sweeps.iter().map(|s| s.residual_sq_sum).fold(f64::INFINITY, f64::min);
    assert!(out.sweeps.last().unwrap().residual_sq_sum >= best);
}

#[test]
fn mismatched_observations_are_rejected() {
    let mesh = generate_disk_mesh(0.5, 0.2).unwrap();
    let (_, mut obs) = desk_data(&mesh, 0.01, 4);
    obs.delta.pop();
    let model = ForwardModel::new(&mesh, &currents_full(), SolverOptions::default()).unwrap();
    let penalty = Penalty::new(&mesh, PenaltySpec::new(PenaltyKind::L1, 1.0)).unwrap();
    let mut solver = Solver::new(&model, &penalty, AlgoConfig::default()).unwrap();
    let state = solver.initial_state().unwrap();
    assert!(solver.sweep(&state, &obs).is_err());
}

#[test]
fn synthetic_data_converges_under_refinement() {
    // data from a fine mesh transferred to two reconstruction meshes; the
    // discrepancy at shared points shrinks with the mesh size
    let fine = generate_disk_mesh(0.5, 1.0 / 48.0).unwrap();
    let smooth = |mesh: &TriMesh| {
        NodalField::from_fn(mesh, |n| {
            let p = mesh.nodes()[n];
            1.0 + 0.5 * (4.0 * p[0]).sin() * (3.0 * p[1]).cos()
        })
    };
    let currents = currents_full();
    let sample_gap = |h: f64| {
        let coarse = generate_disk_mesh(0.5, h).unwrap();
        let data = synthesize_data(&fine, &smooth(&fine), &currents, &coarse, SolverOptions::default()).unwrap();
        let model = ForwardModel::new(&coarse, &currents, SolverOptions::default()).unwrap();
        let (own, _) = model.forward(&smooth(&coarse)).unwrap();
        let locator = PointLocator::new(&coarse);
        let mut worst: f64 = 0.0;
        for k in 0..200 {
            let t = k as f64 * 0.1;
            let p = [0.3 * (k as f64 / 200.0) * t.cos(), 0.3 * (k as f64 / 200.0) * t.sin()];
            let (tri, _) = locator.locate(p).unwrap();
            for i in 0..4 {
                worst = worst.max((data.fields[i].values[tri] - own[i].values[tri]).abs());
            }
        }
        worst
    };
    let (a, b) = (sample_gap(1.0 / 8.0), sample_gap(1.0 / 16.0));
    assert!(b < a, "{a} then {b}");
    assert!(a < 0.2, "{a}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn skipped_substeps_record_zero_lambda_and_descend(seed in any::<u64>(), kind in 0usize..2) {
        let mesh = generate_disk_mesh(0.5, 1.0 / 10.0).unwrap();
        let (truth, obs) = desk_data(&mesh, 0.05, seed);
        let model = ForwardModel::new(&mesh, &currents_full(), SolverOptions::default()).unwrap();
        let kind = [PenaltyKind::L1, PenaltyKind::Quadratic][kind];
        let penalty = Penalty::new(&mesh, PenaltySpec::new(kind, 1.0)).unwrap();
        let cfg = AlgoConfig { max_sweeps: 300, m: 100.0, ..AlgoConfig::default() };
        let mut solver = Solver::new(&model, &penalty, cfg.clone()).unwrap();
        let out = solver.run(&obs, Some(&truth)).unwrap();
        for r in &out.substeps {
            if r.mu == 0.0 {
                prop_assert_eq!(r.lambda, 0.0);
                prop_assert!(r.residual <= cfg.tau * obs.delta[r.substep]);
            }
        }
        prop_assert_eq!(out.substeps.len(), out.sweeps.len() * 4);
        if kind == PenaltyKind::L1 {
            let d: Vec<f64> = out.sweeps.iter().filter_map(|s| s.bregman).collect();
            prop_assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-10));
        }

        let mut again = Solver::new(&model, &penalty, cfg).unwrap();
        let repeat = again.run(&obs, Some(&truth)).unwrap();
        prop_assert_eq!(&out.substeps, &repeat.substeps);
        prop_assert_eq!(&out.sigma, &repeat.sigma);
    }
}

#[test]
fn element_field_helpers_are_consistent() {
    let mesh = fan_mesh();
    let a = ElementField::from_fn(&mesh, |t| t as f64);
    let b = a.axpy(2.0, &a);
    assert_eq!(b.sub(&a), a.scale(2.0));
}
