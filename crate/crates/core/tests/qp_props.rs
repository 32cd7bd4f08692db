use proptest::prelude::*;
use rg_core::linalg::Matrix;
use rg_core::qp::{oracle_qp, solve_qp, QpOutcome, QpProblem};

/// `H = LLᵀ + 1e-3·I` from a raw `n×n` block, plus `m` rows.
fn build(n: usize, m: usize, raw: &[f64], feasible: bool) -> QpProblem {
    let mut it = raw.iter().copied().cycle();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = it.next().unwrap();
        }
    }
    let h = l.matmul(&l.transpose()).add(&Matrix::identity(n).scale(1e-3));
    let h = h.symmetric_part();
    let g: Vec<f64> = (0..n).map(|_| 3.0 * it.next().unwrap()).collect();
    let mut a = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = it.next().unwrap();
        }
    }
    // Feasible instances contain the origin strictly; otherwise offsets may be negative.
    let b: Vec<f64> = (0..m)
        .map(|_| {
            let v = it.next().unwrap();
            if feasible {
                v.abs() + 0.05
            } else {
                v - 0.3
            }
        })
        .collect();
    QpProblem::new(h, g, a, b).unwrap()
}

fn problem(feasible: bool) -> impl Strategy<Value = QpProblem> {
    (1usize..=5, 1usize..=10, prop::collection::vec(-1.0f64..1.0, 128))
        .prop_map(move |(n, m, raw)| build(n, m, &raw, feasible))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn active_set_matches_enumeration(p in problem(true)) {
        let fast = solve_qp(&p).unwrap();
        let slow = oracle_qp(&p).unwrap();
        let (QpOutcome::Optimal(f), QpOutcome::Optimal(s)) = (&fast, &slow) else {
            panic!("feasible instance reported infeasible: {fast:?} {slow:?}");
        };
        let gap = f.z.iter().zip(&s.z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(gap <= 1e-6, "minimizer gap {gap}");
        prop_assert!((f.objective - s.objective).abs() <= 1e-8);
        prop_assert!(p.max_violation(&f.z) <= 1e-8);
        prop_assert!(p.stationarity(&f.z, &f.active_set, &f.multipliers) <= 1e-8);
        prop_assert!(f.multipliers.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn feasibility_verdicts_agree(p in problem(false)) {
        let fast = solve_qp(&p).unwrap();
        let slow = oracle_qp(&p).unwrap();
        prop_assert_eq!(fast.is_optimal(), slow.is_optimal());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dominated_rows_do_not_move_the_minimizer(p in problem(true), row in 0usize..10, extra in 0.01f64..1.0) {
        let QpOutcome::Optimal(base) = solve_qp(&p).unwrap() else {
            panic!("feasible instance reported infeasible");
        };
        let i = row % p.m();
        let n = p.n();
        let mut a = Matrix::zeros(p.m() + 1, n);
        a.set_block(0, 0, &p.a);
        for j in 0..n {
            a[(p.m(), j)] = p.a[(i, j)];
        }
        let mut b = p.b.clone();
        b.push(p.b[i] + extra);
        let q = QpProblem::new(p.h.clone(), p.g.clone(), a, b).unwrap();
        let QpOutcome::Optimal(more) = solve_qp(&q).unwrap() else {
            panic!("adding a dominated row made the problem infeasible");
        };
        let gap = base.z.iter().zip(&more.z).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        prop_assert!(gap <= 1e-8, "gap {gap}");
    }
}
