use std::sync::Arc;

use proptest::prelude::*;
use rg_core::bounds::{certify, CertificateTable, CertifyOptions};
use rg_core::exec::Execution;
use rg_core::governor::{Governor, GovernorConfig, GovernorKind};
use rg_core::linalg::Matrix;
use rg_core::model::{Example1, LinearPlant, Plant, Polytope};
use rg_core::norms::NormSpec;
use rg_core::sim::{self, audit, run_closed_loop, GovernorChoice, Scenario};

fn table(plant: &dyn Plant, spec: &NormSpec, density: usize) -> Arc<CertificateTable> {
    let opts = CertifyOptions {
        density,
        inflation: 1.05,
        execution: Execution::Sequential,
    };
    let cells = certify(plant, spec, &[plant.command_set().clone()], &opts).unwrap();
    Arc::new(CertificateTable::new(plant.name(), spec.kind(), cells))
}

fn two_input_plant() -> Arc<dyn Plant> {
    Arc::new(
        LinearPlant::new(
            Matrix::from_rows(&[[-1.0, 0.5], [-0.3, -2.0]]),
            Matrix::identity(2),
            Polytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            Polytope::symmetric_box(&[0.4, 0.4]).unwrap(),
        )
        .unwrap(),
    )
}

fn governor(plant: Arc<dyn Plant>, s: Matrix, w_max: f64, v0: &[f64], scalar: bool) -> Governor {
    let spec = NormSpec::l2();
    let certs = table(plant.as_ref(), &spec, 11);
    let mut cfg = GovernorConfig::new(s);
    cfg.scalar_mode = scalar;
    Governor::new(plant, spec, certs, cfg, GovernorKind::Nonlinear, w_max, v0).unwrap()
}

fn example1_scenario(w: f64, v0: f64, r: f64, duration: f64) -> Scenario {
    serde_json::from_value(serde_json::json!({
        "model": {"kind": "example1"},
        "norm": {"kind": "l2"},
        "governor": {"s": [[1.0]]},
        "disturbance": {"bound": w, "shape": "ball", "channels": [0]},
        "certification": {"density": 21},
        "reference": [{"t": 0.0, "value": [r]}],
        "v0": [v0],
        "duration": duration
    }))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Scaling `S` scales the cost but leaves the minimizer in place.
    #[test]
    fn weight_scaling_leaves_the_move_unchanged(
        v0 in prop::collection::vec(-0.3f64..0.3, 2),
        r in prop::collection::vec(-0.4f64..0.4, 2),
        off in -0.5f64..0.5,
        c in 0.1f64..10.0,
        w_max in 0.0f64..0.05,
    ) {
        let s = Matrix::from_rows(&[[2.0, off], [off, 1.0]]);
        let plant = two_input_plant();
        let mut a = governor(plant.clone(), s.clone(), w_max, &v0, false);
        let mut b = governor(plant.clone(), s.scale(c), w_max, &v0, false);
        let x = plant.steady_state(&v0);
        let ra = a.step(0.0, &x, &r).unwrap();
        let rb = b.step(0.0, &x, &r).unwrap();
        prop_assert_eq!(ra.status, rb.status);
        for (p, q) in ra.dv.iter().zip(&rb.dv) {
            prop_assert!((p - q).abs() <= 1e-8, "{:?} vs {:?}", ra.dv, rb.dv);
        }
    }

    /// Every accepted move satisfies the rows it was solved under.
    #[test]
    fn accepted_moves_satisfy_their_rows(
        v0 in -0.6f64..0.6,
        refs in prop::collection::vec(-0.7f64..0.7, 6),
        jitter in prop::collection::vec(-0.02f64..0.02, 12),
        scalar in any::<bool>(),
    ) {
        let plant: Arc<dyn Plant> = Arc::new(Example1::new());
        let mut gov = governor(plant.clone(), Matrix::identity(1), 0.0, &[v0], scalar);
        for (k, r) in refs.iter().enumerate() {
            let xk = plant.steady_state(gov.command());
            let x = [xk[0] + jitter[2 * k], xk[1] + jitter[2 * k + 1]];
            let rec = gov.step(k as f64 * 0.05, &x, &[*r]).unwrap();
            if rec.status.moved() {
                let (qp, z) = gov.last_solution().unwrap();
                prop_assert!(qp.max_violation(z) <= 1e-8);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The loop never faults, keeps X, and replays bit-identically.
    #[test]
    fn closed_loop_is_feasible_safe_and_deterministic(
        w in 0.0f64..1e-2,
        v0 in -0.5f64..0.5,
        r in -0.707f64..0.707,
        seed in any::<u64>(),
    ) {
        let prep = example1_scenario(w, v0, r, 4.0).prepare(Execution::Sequential).unwrap();
        let first = run_closed_loop(&prep, GovernorChoice::RgNl, seed).unwrap();
        let report = audit(&first.trajectory, prep.plant.state_set());
        prop_assert!(report.clean(), "{:?}", report);
        let second = run_closed_loop(&prep, GovernorChoice::RgNl, seed).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        sim::write_csv(&mut a, &first).unwrap();
        sim::write_csv(&mut b, &second).unwrap();
        prop_assert!(a == b);
    }
}

/// A refined grid stays inside the coarse certificate's inflation margin
/// once the grid resolves the interior of the command set.
#[test]
fn refinement_stays_within_the_inflation_margin() {
    let plant = Example1::new();
    let spec = NormSpec::l2();
    for d in 5..=42 {
        let coarse = &table(&plant, &spec, d).cells[0];
        let fine = &table(&plant, &spec, 2 * d).cells[0];
        assert!(fine.mu_e_raw <= coarse.mu_e + 1e-12, "density {d}: mu {} vs {}", fine.mu_e_raw, coarse.mu_e);
        assert!(fine.eta_x_raw <= coarse.eta_x + 1e-12, "density {d}: eta_x");
        assert!(fine.eta_v_raw <= coarse.eta_v + 1e-12, "density {d}: eta_v");
    }
}

/// Very coarse grids can miss the supremum by more than the margin: at
/// densities 2 and 4 no sample lands near the interior maximiser of eta_x.
#[test]
fn coarse_grids_can_miss_the_supremum() {
    let plant = Example1::new();
    let spec = NormSpec::l2();
    for d in [2, 4] {
        let coarse = &table(&plant, &spec, d).cells[0];
        let fine = &table(&plant, &spec, 2 * d).cells[0];
        assert!(fine.eta_x_raw > coarse.eta_x, "density {d}");
    }
}
