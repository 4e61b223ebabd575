//! Property tests of invariants that hold for every admissible input.

use junction::corrector::{loglog_slope, sawtooth, BoundTerms, CorrectorConfig, ErrorRecord};
use junction::geometry::build_layout;
use junction::harness::{self, read_error_csv, Config};
use junction::homogenized::{self, HomGrid, HomResolution};
use junction::model::{Family, Nonlinearity, ProblemData};
use proptest::prelude::*;
use std::sync::Arc;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cutoff_is_even_bounded_and_monotone(tau in 0.01f64..0.5, x in -1.0f64..1.0, dx in 0.0f64..0.5) {
        let c = CorrectorConfig { tau0: tau };
        let v = c.chi(x);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, c.chi(-x));
        prop_assert!(c.chi(x.abs() + dx) <= v + 1e-15);
    }

    #[test]
    fn sawtooth_is_bounded_with_zero_mean(b in 0.0f64..1.0, x in -50.0f64..50.0) {
        prop_assert!(sawtooth(b, x).abs() <= 1.0);
        prop_assert!((sawtooth(b, x + 1.0) - sawtooth(b, x)).abs() < 1e-9);
        // ∫₀¹ Y dξ = b − 1/2 by the midpoint rule, exact for linear pieces
        let n = 1000;
        let mean: f64 = (0..n).map(|k| sawtooth(b, (k as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64;
        prop_assert!((mean - (b - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rods_stay_inside_their_period_without_overlap(
        n in 2usize..20,
        h0 in 0.3f64..0.8,
        f1 in 0.2f64..0.45,
        f2 in 0.2f64..0.45,
    ) {
        let mut p = harness::reference_geometry(n);
        p.h0 = h0;
        p.h11 = f1 * h0;
        p.h12 = f1 * h0;
        p.h21 = f2 * p.h11;
        p.h22 = f2 * p.h11;
        p.h23 = f2 * p.h12;
        p.h24 = f2 * p.h12;
        let layout = build_layout(&p.validate().unwrap());
        let eps = p.eps();
        for r in &layout.rods {
            let (lo, hi) = (r.j as f64 * eps, (r.j + 1) as f64 * eps);
            prop_assert!(r.x1.0 >= lo - 1e-12 && r.x1.1 <= hi + 1e-12);
            prop_assert!((r.x1.1 - r.x1.0 - eps * p.width(r.branch)).abs() < 1e-12);
            if let Some(parent) = r.branch.parent() {
                let q = layout.rods.iter().find(|q| q.branch == parent && q.j == r.j).unwrap();
                prop_assert!(r.x1.0 >= q.x1.0 - 1e-12 && r.x1.1 <= q.x1.1 + 1e-12);
            }
        }
        for a in &layout.rods {
            for b in &layout.rods {
                if a.branch.level == b.branch.level && (a.branch, a.j) != (b.branch, b.j) {
                    prop_assert!(a.x1.1 <= b.x1.0 + 1e-12 || b.x1.1 <= a.x1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn certified_families_are_strongly_monotone(
        lambda in 0.0f64..3.0,
        sigma in 0.1f64..2.0,
        a in -20.0f64..20.0,
        b in -20.0f64..20.0,
    ) {
        for f in [Family::TanhBlend { lambda, sigma }, Family::Saturating { sigma: sigma + lambda / 8.0, lambda, mu: 1.0 }] {
            let (c1, c2) = f.derivative_range(-20.0, 20.0).unwrap();
            let k = Nonlinearity::new(f, c1, c2);
            let d = a - b;
            let pair = (k.eval(a) - k.eval(b)) * d;
            prop_assert!(pair >= c1 * d * d - 1e-12 * (1.0 + d * d));
            prop_assert!((k.eval(a) - k.eval(b)).abs() <= c2 * d.abs() + 1e-12);
        }
    }

    #[test]
    fn loglog_fit_recovers_power_laws(c in 0.01f64..100.0, e in 0.1f64..3.0) {
        let x = [0.125, 0.0625, 0.03125, 0.015625];
        let y: Vec<f64> = x.iter().map(|v: &f64| c * v.powf(e)).collect();
        let (s, se) = loglog_slope(&x, &y);
        prop_assert!((s - e).abs() < 1e-10);
        prop_assert!(se < 1e-8);
    }

    #[test]
    fn bound_columns_decrease_with_n(rho in 0.05f64..0.95, beta in 1.1f64..3.0, n in 2usize..64) {
        let mut d = ProblemData::default_case();
        d.beta = [beta; 3];
        let p = harness::reference_geometry(n);
        let (a, b) = (BoundTerms::new(&d, &p, rho), BoundTerms::new(&d, &p.with_n(n + 1), rho));
        prop_assert!(b.eps_term < a.eps_term);
        prop_assert!(b.alpha_term < a.alpha_term);
        prop_assert!(b.beta_term < a.beta_term);
    }

    #[test]
    fn csv_rows_round_trip_bitwise(v in proptest::collection::vec(0.0f64..1e3, 8), n in 1usize..1000) {
        let rec = |n: usize| ErrorRecord {
            eps: 1.0 / n as f64,
            n,
            max_l2: v[0],
            l2h1: v[1],
            corollary_l2_body: v[2],
            corollary_l2_rods: v[3],
            bound: BoundTerms { eps_term: v[4], alpha_term: v[5], beta_term: v[6], g_term: v[7] },
        };
        let text = format!("{}\n{}\n{}\n", ErrorRecord::CSV_HEADER, rec(n).csv_row(), rec(n + 1).csv_row());
        prop_assert_eq!(read_error_csv(&text).unwrap(), vec![rec(n), rec(n + 1)]);
    }

    #[test]
    fn config_round_trips(rho in 0.01f64..0.99, workers in 1usize..16, seed in any::<u64>(), dt in 0.1f64..100.0) {
        let mut cfg = Config::default();
        cfg.sweep.rho = rho;
        cfg.sweep.workers = workers;
        cfg.seed = seed;
        cfg.time.dt_factor = dt;
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn homogenized_operator_is_monotone(seed in any::<u64>(), scale in 0.01f64..20.0) {
        use rand::{Rng, SeedableRng};
        let p = harness::reference_geometry(8);
        let grid = Arc::new(HomGrid::new(&p, &HomResolution::uniform(&p, 0.1)).unwrap());
        let sys = homogenized::assemble(grid, &ProblemData::default_case()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..sys.num_dofs()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (u, w) = (v(), v());
        let (pair, bound) = sys.monotonicity_probe(&u, &w);
        prop_assert!(pair >= bound);
    }
}
