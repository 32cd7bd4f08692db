mod common;

use common::{norm, square};
use proptest::prelude::*;
use rg_core::linalg::{dot, sym_eig_max, Matrix};

fn vals(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn log_norm_is_sublinear(kind in 0usize..4, n in 1usize..=4, w in vals(16), a in vals(16), b in vals(16), c in 0.0f64..5.0) {
        let spec = norm(kind, n, &w);
        let (a, b) = (square(n, &a), square(n, &b));
        let (ma, mb) = (spec.log_norm(&a).unwrap(), spec.log_norm(&b).unwrap());
        prop_assert!(spec.log_norm(&a.add(&b)).unwrap() <= ma + mb + 1e-10);
        let mc = spec.log_norm(&a.scale(c)).unwrap();
        prop_assert!((mc - c * ma).abs() <= 1e-10 * (1.0 + mc.abs()));
    }

    #[test]
    fn log_norm_is_bounded_by_operator_norm(kind in 0usize..4, n in 1usize..=4, w in vals(16), f in vals(16)) {
        let spec = norm(kind, n, &w);
        let f = square(n, &f);
        let (mu, op) = (spec.log_norm(&f).unwrap(), spec.op_norm(&f).unwrap());
        prop_assert!(-op - 1e-10 <= mu && mu <= op + 1e-10, "mu {mu} op {op}");
    }

    #[test]
    fn log_norm_is_the_one_sided_derivative(kind in 0usize..4, n in 1usize..=4, w in vals(16), f in vals(16)) {
        let spec = norm(kind, n, &w);
        let f = square(n, &f);
        let h = 1e-6;
        let quotient = (spec.op_norm(&Matrix::identity(n).add(&f.scale(h))).unwrap() - 1.0) / h;
        let mu = spec.log_norm(&f).unwrap();
        prop_assert!((quotient - mu).abs() <= 1e-4, "quotient {quotient} mu {mu}");
    }

    #[test]
    fn dual_support_bounds_and_is_attained(kind in 0usize..4, n in 1usize..=4, w in vals(16), a in vals(4), xs in vals(4 * 50)) {
        let spec = norm(kind, n, &w);
        let a = &a[..n];
        let h = spec.dual_support(a).unwrap();
        for x in xs.chunks(4) {
            let x = &x[..n];
            let nx = spec.vec_norm(x).unwrap();
            if nx == 0.0 {
                continue;
            }
            let unit: Vec<f64> = x.iter().map(|v| v / nx).collect();
            prop_assert!(dot(a, &unit) <= h + 1e-12 * (1.0 + h));
        }
        let best = spec.support_point(a).unwrap();
        prop_assert!(spec.vec_norm(&best).unwrap() <= 1.0 + 1e-9);
        prop_assert!((dot(a, &best) - h).abs() <= 1e-6);
    }

    #[test]
    fn largest_eigenvalue_bounds_rayleigh_quotients(n in 1usize..=6, s in vals(36), vs in vals(6 * 100)) {
        let s = square(n, &s);
        let top = sym_eig_max(&s).unwrap();
        for v in vs.chunks(6) {
            let v = &v[..n];
            let vv = dot(v, v);
            if vv < 1e-12 {
                continue;
            }
            prop_assert!(dot(v, &s.mul_vec(v)) / vv <= top + 1e-10 * (1.0 + top.abs()));
        }
    }
}
