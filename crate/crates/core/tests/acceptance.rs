//! End-to-end acceptance checks, one test per numbered criterion. Each pits a
//! Monte Carlo route against an independent oracle — a closed form, a spectral
//! or quadrature solve, or a second estimator built on different machinery —
//! at desk scale. Tolerances combine measured standard errors (3 se) with
//! explicit discretisation allowances; seeds are fixed so every run is
//! reproducible bit for bit.

use std::f64::consts::TAU;
use std::sync::OnceLock;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nsmc_core::fields::spectral;
use nsmc_core::{
    ci_velocity, coarsen_increments, existence_horizon, gaussian_increments,
    grad_pressure_mc_batch, invert_by_time_reversal, picard_init, picard_run, picard_step,
    pressure_mc_batch, pressure_mc_linear, simulate_backward_flow_with_noise, simulate_jacobian,
    solve_parabolic, verify_weak_solution, AnalyticScalar, AnalyticVector, AprioriParams, Backend,
    Domain, FlowConfig, GridSeries, NSProblem, ParabolicData, ParabolicProblem, PicardConfig,
    PicardRun, PoissonConfig, PressureSolver, ScalarField, ScalarGrid, Vec3, Vec3Grid,
    VectorField,
};

// ---------------------------------------------------------------- criterion 1

/// The scalar walk on gamma = cos x1 (periodic) must reproduce the spectral
/// solution p = cos x1: 20 points, 3 se + 2 dt_bm, n_paths = 8192,
/// dt_bm = 1e-3, t_max = 20, under 30 s.
#[test]
fn c01_pressure_walk_matches_the_periodic_cosine_oracle() {
    let t0 = Instant::now();
    let g = ScalarField::Analytic(AnalyticScalar::CosCoord { axis: 0, amplitude: 1.0 });
    let dom = Domain::PeriodicCube { side: TAU, grid_n: 16 };
    let cfg =
        PoissonConfig { n_paths: 8192, dt_bm: 1e-3, t_max: 20.0, seed: 41, antithetic: true };
    let pts = points_in_cube(20, 1);
    let res = pressure_mc_batch(&g, 0.0, &pts, &dom, &cfg).unwrap();
    for (x, r) in pts.iter().zip(&res) {
        let want = x.x.cos();
        let tol = 3.0 * r.std_err + 2.0 * cfg.dt_bm;
        assert!(
            (r.value - want).abs() <= tol,
            "p({x:?}) = {:.5} vs {want:.5}, tol {tol:.3e}",
            r.value
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    println!("c01: 20 points in {secs:.1} s");
    assert!(secs < 30.0, "cosine oracle run took {secs:.1} s (budget 30 s)");
}

// ---------------------------------------------------------------- criterion 2

/// Hessian energy identity: || D^2 N g ||^2 = || g ||^2 for zero-mean periodic
/// g, spectral route vs direct grid sum, relative 1e-8 on 10 random
/// band-limited fields, under 5 s.
#[test]
fn c02_hessian_energy_identity_holds_on_random_fields() {
    let t0 = Instant::now();
    for seed in 0..10u64 {
        let g = spectral::random_band_limited(24, TAU, 5, 1.0, 1000 + seed);
        let rep = spectral::calderon_zygmund_check(&g).unwrap();
        assert!(
            rep.rel_err <= 1e-8,
            "seed {seed}: lhs {:.12e} rhs {:.12e} rel {:.3e}",
            rep.lhs,
            rep.rhs,
            rep.rel_err
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    println!("c02: 10 fields in {secs:.2} s");
    assert!(secs < 5.0, "identity sweep took {secs:.1} s (budget 5 s)");
}

// ---------------------------------------------------------------- criterion 3

/// The gradient walk must agree with centred finite differences of the scalar
/// walk on a whole-space Gaussian source, combined 3 se at 10 points. Both
/// sides ride the same Brownian streams, so the difference is nearly
/// deterministic and the h^2 FD bias (~1e-7 here) hides inside the dt term.
#[test]
fn c03_gradient_walk_agrees_with_finite_differences_of_the_scalar_walk() {
    let g = ScalarField::Analytic(AnalyticScalar::GaussianBump {
        center: Vec3::new(0.1, -0.05, 0.0),
        width: 0.3,
        amplitude: 1.5,
    });
    let dom = Domain::WholeSpace { support_radius: 1.8 };
    let cfg =
        PoissonConfig { n_paths: 2048, dt_bm: 5e-3, t_max: 6.0, seed: 43, antithetic: true };
    let mut rng = StdRng::seed_from_u64(3);
    let pts: Vec<Vec3> = (0..10)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            )
        })
        .collect();
    let grads = grad_pressure_mc_batch(&g, 0.0, &pts, &dom, &cfg).unwrap();
    let h = 1e-3;
    for (x, gr) in pts.iter().zip(&grads) {
        for i in 0..3 {
            let mut e = Vec3::ZERO;
            e.set_comp(i, 1.0);
            let fd = pressure_mc_linear(
                &g,
                0.0,
                &[(*x + e * h, 0.5 / h), (*x - e * h, -0.5 / h)],
                &dom,
                &cfg,
            )
            .unwrap();
            let tol = 3.0 * (gr.std_err.comp(i) + fd.std_err) + 5.0 * cfg.dt_bm * h;
            assert!(
                (gr.value.comp(i) - fd.value).abs() <= tol,
                "point {x:?} axis {i}: grad {:.5e} vs fd {:.5e}, tol {tol:.3e}",
                gr.value.comp(i),
                fd.value
            );
        }
    }
}

// ---------------------------------------------------------------- criterion 4

/// Reversal roundtrip: run the backward flow, rebuild the forward flow from
/// the negated stored increments, and the return error must shrink linearly
/// in dt (log-log slope 1.0 +- 0.3 over dt in {4e-3, 2e-3, 1e-3}) on a
/// Beltrami drift with common noise across resolutions. The paired noise
/// cancels exactly, leaving the drift-evaluation mismatch, which is O(dt).
#[test]
fn c04_reversal_roundtrip_error_is_first_order_in_the_step() {
    let u = VectorField::Analytic(AnalyticVector::beltrami_unit(0.0));
    let t = 0.1;
    let x0 = [Vec3::new(1.3, 0.4, 5.2)];
    let n_paths = 48;
    let fine_steps = 100; // dt = 1e-3
    let fine = gaussian_increments(t / fine_steps as f64, fine_steps, n_paths, 91);
    let mut dts = Vec::new();
    let mut errs = Vec::new();
    for factor in [4usize, 2, 1] {
        let steps = fine_steps / factor;
        let dt = t / steps as f64;
        let noise = coarsen_increments(&fine, fine_steps, factor);
        let cfg = FlowConfig {
            sigma: 1.0,
            dt,
            n_paths,
            seed: 0,
            store_increments: true,
            escape_radius: None,
        };
        let ens = simulate_backward_flow_with_noise(&u, t, &x0, &cfg, &noise).unwrap();
        let back = invert_by_time_reversal(&u, &ens).unwrap();
        let mean_err = (0..ens.n_total_paths())
            .map(|p| (back.endpoint(p) - ens.start_of(p)).norm())
            .sum::<f64>()
            / ens.n_total_paths() as f64;
        dts.push(dt);
        errs.push(mean_err);
    }
    let slope = log_log_slope(&dts, &errs);
    println!("c04: errors {errs:?} over dts {dts:?}, slope {slope:.3}");
    assert!(
        (slope - 1.0).abs() <= 0.3,
        "roundtrip slope {slope:.3} (errors {errs:?} at {dts:?})"
    );
}

// ---------------------------------------------------------------- criterion 5

/// Divergence-free drift means the flow Jacobians are volume preserving:
/// max |det eta - 1| <= 0.02 at dt = 1e-3 over a Beltrami ensemble at
/// t = 0.1, and the deviation halves (+-30%) when dt does. Common Brownian
/// paths across the two resolutions keep the comparison deterministic.
#[test]
fn c05_jacobians_preserve_volume_and_the_defect_halves_with_dt() {
    let u = VectorField::Analytic(AnalyticVector::beltrami_unit(0.0));
    let t = 0.1;
    let starts = [Vec3::new(0.7, 2.1, 4.0), Vec3::new(3.3, 0.2, 1.5), Vec3::new(5.0, 5.0, 0.1)];
    let n_paths = 32;
    let fine_steps = 200; // dt = 5e-4
    let fine =
        gaussian_increments(t / fine_steps as f64, fine_steps, starts.len() * n_paths, 17);
    let max_defect = |factor: usize| -> f64 {
        let steps = fine_steps / factor;
        let dt = t / steps as f64;
        let noise = coarsen_increments(&fine, fine_steps, factor);
        let cfg = FlowConfig {
            sigma: 1.0,
            dt,
            n_paths,
            seed: 5,
            store_increments: true,
            escape_radius: None,
        };
        let ens = simulate_backward_flow_with_noise(&u, t, &starts, &cfg, &noise).unwrap();
        let jacs = simulate_jacobian(&u, &ens).unwrap();
        let mut worst = 0.0f64;
        for jp in &jacs {
            for eta in &jp.etas {
                worst = worst.max((eta.det() - 1.0).abs());
            }
        }
        worst
    };
    let coarse = max_defect(2); // dt = 1e-3
    assert!(coarse <= 0.02, "max |det eta - 1| = {coarse:.4e} at dt = 1e-3");
    let fine_defect = max_defect(1); // dt = 5e-4
    let ratio = fine_defect / coarse;
    println!("c05: defect {coarse:.3e} -> {fine_defect:.3e}, ratio {ratio:.3}");
    assert!(
        (0.35..=0.65).contains(&ratio),
        "halving ratio {ratio:.3} (defects {coarse:.3e} -> {fine_defect:.3e})"
    );
}

// ---------------------------------------------------------------- criterion 6

/// Zero-drift solver against the closed-form widened Gaussian (3 se at 20
/// points), plus the semigroup identity: evolving the exactly half-widened
/// data over the remaining half interval must land on the one-shot answer
/// within combined 3 se. Zero drift makes the stepping exact in law, so the
/// statistical term is the whole budget.
#[test]
fn c06_heat_solver_matches_the_widened_gaussian_and_the_semigroup_split() {
    let sigma = 1.0;
    let t = 0.2;
    let (w0, amp) = (0.6, 1.0);
    let dom = Domain::WholeSpace { support_radius: 6.0 };
    let bump = |width: f64, amplitude: f64| {
        ScalarField::Analytic(AnalyticScalar::GaussianBump {
            center: Vec3::ZERO,
            width,
            amplitude,
        })
    };
    let problem = |f0: ScalarField, t_final: f64| ParabolicProblem {
        drift: VectorField::Analytic(AnalyticVector::Zero),
        sigma,
        data: ParabolicData::Scalar { f0, source: None },
        t_final,
        domain: dom.clone(),
    };
    let mut rng = StdRng::seed_from_u64(8);
    let pts: Vec<Vec3> = (0..20)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let cfg = FlowConfig {
        sigma,
        dt: 2e-3,
        n_paths: 8192,
        seed: 119,
        store_increments: false,
        escape_radius: None,
    };

    let (one, se_one) =
        solve_parabolic(&problem(bump(w0, amp), t), &pts, &cfg).unwrap().scalar().unwrap();
    let wt2 = w0 * w0 + sigma * sigma * t;
    let mut worst = 0.0f64;
    for i in 0..pts.len() {
        let want = amp * (w0 * w0 / wt2).powf(1.5) * (-pts[i].norm_sq() / (2.0 * wt2)).exp();
        worst = worst.max((one[i] - want).abs() / se_one[i]);
        assert!(
            (one[i] - want).abs() <= 3.0 * se_one[i],
            "u({:?}) = {:.5} vs {want:.5}, 3 se {:.3e}",
            pts[i],
            one[i],
            3.0 * se_one[i]
        );
    }
    println!("c06: worst closed-form deviation {worst:.2} se over 20 points");

    // half-widened exact data, evolved over the second half with fresh streams
    let w1sq = w0 * w0 + sigma * sigma * t / 2.0;
    let a1 = amp * (w0 * w0 / w1sq).powf(1.5);
    let cfg2 = FlowConfig { seed: 29, ..cfg };
    let (two, se_two) = solve_parabolic(&problem(bump(w1sq.sqrt(), a1), t / 2.0), &pts, &cfg2)
        .unwrap()
        .scalar()
        .unwrap();
    for i in 0..pts.len() {
        let tol = 3.0 * (se_one[i] + se_two[i]);
        assert!(
            (one[i] - two[i]).abs() <= tol,
            "semigroup split at {:?}: {:.5} vs {:.5}, tol {tol:.3e}",
            pts[i],
            one[i],
            two[i]
        );
    }
}

// ---------------------------------------------------------------- criterion 7

/// Shared converged run for criteria 7 and 8: Beltrami data with nu = 1/2,
/// horizon 0.1, 16^3 grid, 4096 paths per node point.
struct SharedRun {
    run: PicardRun,
    prob: NSProblem,
    cfg: PicardConfig,
    secs: f64,
}

static BELTRAMI: OnceLock<SharedRun> = OnceLock::new();

fn beltrami_run() -> &'static SharedRun {
    BELTRAMI.get_or_init(|| {
        let prob = NSProblem {
            u0: VectorField::Analytic(AnalyticVector::beltrami_unit(0.5)),
            sigma: 1.0,
            t_final: 0.1,
            domain: Domain::PeriodicCube { side: TAU, grid_n: 16 },
        };
        let cfg = PicardConfig {
            time_grid_n: 5,
            grid_n: 16,
            n_paths: 4096,
            dt: 5e-3,
            tol: 0.15,
            k_max: 6,
            seed: 23,
            backend: Backend::PressureCoupled,
            pressure: PressureSolver::Spectral,
            ..Default::default()
        };
        let t0 = Instant::now();
        let run = picard_run(&prob, &cfg).expect("fixed-point run failed");
        SharedRun { run, prob, cfg, secs: t0.elapsed().as_secs_f64() }
    })
}

/// The iteration must converge with decreasing contraction distance, and the
/// final field must match the exact decaying solution u(t) = e^{-nu t} u0 to
/// a relative sup error of 5%. The error budget 3 se + c (dt + h^2) is
/// printed alongside (the solver CLI records the same budget in its
/// manifest); 10 minutes is the multi-core laptop runtime target, so the
/// wall time is reported rather than asserted.
#[test]
fn c07_fixed_point_run_reproduces_the_decaying_beltrami_solution() {
    let sh = beltrami_run();
    assert!(sh.run.converged, "iteration did not converge: {:?}", sh.run.history);
    let kappas: Vec<f64> = sh.run.history.iter().map(|d| d.kappa()).collect();
    assert!(kappas.len() >= 2, "too few iterations to observe contraction: {kappas:?}");
    for w in kappas.windows(2) {
        assert!(w[1] < w[0], "contraction distance not decreasing: {kappas:?}");
    }

    let st = &sh.run.state;
    let exact = AnalyticVector::beltrami_unit(0.5);
    let grid = st.u.last().unwrap();
    let n = grid.n;
    let (mut sup_err, mut sup_ref) = (0.0f64, 0.0f64);
    for (i, v) in grid.data.iter().enumerate() {
        let e = exact.eval(sh.prob.t_final, grid_node(n, grid.side, i));
        sup_err = sup_err.max((*v - e).norm());
        sup_ref = sup_ref.max(e.norm());
    }
    let rel = sup_err / sup_ref;
    let h = grid.side / n as f64;
    let budget = 3.0 * st.velocity_se + 1.0 * (sh.cfg.dt + h * h);
    println!(
        "c07: {} iterations, kappa {kappas:.3?}, sup err {sup_err:.4} (rel {rel:.4}), \
         budget {budget:.4}, {:.0} s",
        kappas.len(),
        sh.secs
    );
    assert!(rel <= 0.05, "relative sup error {rel:.4} at t = {}", sh.prob.t_final);
    assert!(sup_err <= budget, "sup error {sup_err:.4} above its budget {budget:.4}");
}

// ---------------------------------------------------------------- criterion 8

/// Weak-form residuals of the converged run sit inside their propagated
/// budgets for five divergence-free test fields (three closed-form, two
/// random band-limited projections); on the exactly sampled decaying solution
/// the residual collapses to quadrature noise below 1e-6.
#[test]
fn c08_weak_form_residuals_sit_inside_their_budgets() {
    let sh = beltrami_run();
    let n = sh.cfg.grid_n;
    let mut tests = vec![
        VectorField::Analytic(AnalyticVector::beltrami_unit(0.0)),
        VectorField::Analytic(AnalyticVector::TaylorGreen { nu: 0.0 }),
        VectorField::Analytic(AnalyticVector::Constant(Vec3::new(0.6, -0.4, 0.3))),
    ];
    for seed in [71u64, 72] {
        let comps: Vec<ScalarGrid> =
            (0..3).map(|c| spectral::random_band_limited(n, TAU, 3, 0.5, seed * 10 + c)).collect();
        let mut g = Vec3Grid::zeros(n, TAU);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = Vec3::new(comps[0].data[i], comps[1].data[i], comps[2].data[i]);
        }
        tests.push(VectorField::from_series(GridSeries::single(0.0, spectral::leray(&g))));
    }

    let report = verify_weak_solution(&sh.run.state, &sh.prob, &tests, &sh.cfg).unwrap();
    println!("c08: residuals {:?} budgets {:?}", report.residuals, report.budgets);
    for (i, (r, b)) in report.residuals.iter().zip(&report.budgets).enumerate() {
        assert!(r <= b, "test field {i}: residual {r:.3e} above budget {b:.3e}");
    }

    // exactly sampled decaying solution: every pairing is spectrally exact,
    // so only the time-quadrature error survives
    let mut exact_state = picard_init(&sh.prob, &sh.cfg).unwrap();
    let f = AnalyticVector::beltrami_unit(0.5);
    for (j, &tj) in exact_state.times.clone().iter().enumerate() {
        let g = Vec3Grid::from_fn(n, TAU, |x| f.eval(tj, x));
        exact_state.grad_u[j] = spectral::vector_gradient(&g);
        exact_state.u[j] = g;
    }
    let exact_report = verify_weak_solution(&exact_state, &sh.prob, &tests, &sh.cfg).unwrap();
    for (i, r) in exact_report.residuals.iter().enumerate() {
        assert!(*r <= 1e-6, "test field {i}: exact-field residual {r:.3e}");
    }
}

// ---------------------------------------------------------------- criterion 9

/// The two velocity routes — pressure-coupled update vs Jacobian-weighted
/// transport with projection — must agree on the short horizon t = 0.05 at 20
/// grid nodes within combined 3 se plus a scheme-bias allowance. Both routes
/// share the step and the grid, so their deterministic biases are first order
/// in dt with O(sup|u| sup|grad u|) constants; 6 dt covers the pair here.
#[test]
fn c09_both_velocity_routes_agree_on_a_short_horizon() {
    let prob = NSProblem {
        u0: VectorField::Analytic(AnalyticVector::beltrami_unit(0.5)),
        sigma: 1.0,
        t_final: 0.05,
        domain: Domain::PeriodicCube { side: TAU, grid_n: 12 },
    };
    let cfg = PicardConfig {
        time_grid_n: 3,
        grid_n: 12,
        n_paths: 2048,
        dt: 2.5e-3,
        tol: 0.2,
        k_max: 4,
        seed: 29,
        backend: Backend::PressureCoupled,
        pressure: PressureSolver::Spectral,
        ..Default::default()
    };
    let run_a = picard_run(&prob, &cfg).unwrap();
    assert!(run_a.converged, "pressure-coupled run did not converge");
    let ua = run_a.state.u.last().unwrap();

    // sample at grid nodes so interpolation drops out of the comparison
    let n = cfg.grid_n;
    let pts: Vec<Vec3> =
        (0..20).map(|s| grid_node(n, TAU, (s * 83 + 7) % (n * n * n))).collect();
    let vals_a: Vec<Vec3> = pts.iter().map(|&x| ua.trilinear(x)).collect();
    let (vals_b, se_b) = ci_velocity(&prob, &cfg, prob.t_final, &pts).unwrap();

    let se_a = run_a.state.velocity_se;
    let bias = 6.0 * cfg.dt;
    for i in 0..pts.len() {
        let tol = 3.0 * (se_a + se_b[i].max_abs()) + bias;
        let diff = (vals_a[i] - vals_b[i]).norm();
        assert!(
            diff <= tol,
            "node {:?}: routes differ by {diff:.4} (tol {tol:.4})",
            pts[i]
        );
    }
}

// --------------------------------------------------------------- criterion 10

/// Envelope horizon: with no integral-norm forcing the bound reduces to the
/// scalar quadratic ODE, whose blow-up time is exactly 1/k01; the solver must
/// hit it within 1e-2 for k01 in {0.5, 1, 2}. Larger data or couplings can
/// only shorten the horizon (checked over a 3^4 sweep), and halving the ODE
/// step moves the answer by less than 4 ds.
#[test]
fn c10_envelope_horizon_matches_riccati_and_refines_consistently() {
    for k01 in [0.5, 1.0, 2.0] {
        let p = AprioriParams { k01, beta0: 0.0, c_qm: 1.0, c1_qm: 1.0 };
        let t1 = existence_horizon(&p, 1e-3);
        assert!(
            (t1 - 1.0 / k01).abs() <= 1e-2,
            "k01 {k01}: horizon {t1:.5} vs {:.5}",
            1.0 / k01
        );
    }

    let grid = [0.5, 1.0, 2.0];
    let ds = 1e-3;
    let horizon = |k: f64, b: f64, c: f64, c1: f64| {
        existence_horizon(&AprioriParams { k01: k, beta0: b, c_qm: c, c1_qm: c1 }, ds)
    };
    // vary one parameter over the grid with the other three fixed (in
    // positional order); larger inputs can only shorten the horizon, up to
    // the bisection granularity of the detector
    let slack = 2.0 * ds;
    for &f0 in &grid {
        for &f1 in &grid {
            for &f2 in &grid {
                for axis in 0..4 {
                    let at = |v: f64| match axis {
                        0 => horizon(v, f0, f1, f2),
                        1 => horizon(f0, v, f1, f2),
                        2 => horizon(f0, f1, v, f2),
                        _ => horizon(f0, f1, f2, v),
                    };
                    let hs: Vec<f64> = grid.iter().map(|&v| at(v)).collect();
                    assert!(
                        hs[0] >= hs[1] - slack && hs[1] >= hs[2] - slack,
                        "horizon not monotone along axis {axis} at ({f0},{f1},{f2}): {hs:?}"
                    );
                }
            }
        }
    }

    let p = AprioriParams { k01: 1.0, beta0: 1.0, c_qm: 1.0, c1_qm: 1.0 };
    let (coarse, fine) = (existence_horizon(&p, ds), existence_horizon(&p, ds / 2.0));
    assert!(
        (coarse - fine).abs() <= 4.0 * ds,
        "step-halving moved the horizon {coarse:.6} -> {fine:.6} (> {})",
        4.0 * ds
    );
}

// --------------------------------------------------------------- criterion 11

/// The same seed must give byte-identical formatted output regardless of the
/// worker-pool size: every path owns a counter-derived stream and all
/// reductions are order-independent, so 1 thread and 4 threads print the
/// same rows.
#[test]
fn c11_thread_count_does_not_change_the_emitted_rows() {
    let run_once = |threads: usize| -> String {
        let pool =
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let prob = NSProblem {
                u0: VectorField::Analytic(AnalyticVector::beltrami_unit(0.5)),
                sigma: 1.0,
                t_final: 0.04,
                domain: Domain::PeriodicCube { side: TAU, grid_n: 8 },
            };
            let cfg = PicardConfig {
                time_grid_n: 3,
                grid_n: 8,
                n_paths: 192,
                dt: 4e-3,
                tol: 0.5,
                k_max: 2,
                seed: 3,
                ..Default::default()
            };
            let st = picard_step(&picard_init(&prob, &cfg).unwrap(), &prob, &cfg).unwrap();
            let mut out = String::from("kind,node,cell,x,y,z\n");
            for (j, g) in st.u.iter().enumerate() {
                for (i, v) in g.data.iter().enumerate().step_by(37) {
                    out.push_str(&format!(
                        "u,{j},{i},{:.17e},{:.17e},{:.17e}\n",
                        v.x, v.y, v.z
                    ));
                }
            }
            let g = ScalarField::Analytic(AnalyticScalar::CosCoord { axis: 1, amplitude: 0.7 });
            let dom = Domain::PeriodicCube { side: TAU, grid_n: 8 };
            let pcfg = PoissonConfig {
                n_paths: 512,
                dt_bm: 5e-3,
                t_max: 4.0,
                seed: 9,
                antithetic: true,
            };
            for r in pressure_mc_batch(&g, 0.0, &points_in_cube(5, 6), &dom, &pcfg).unwrap() {
                out.push_str(&format!("p,0,0,{:.17e},{:.17e},0\n", r.value, r.std_err));
            }
            out
        })
    };
    let single = run_once(1);
    let pooled = run_once(4);
    assert_eq!(single, pooled, "thread count changed the emitted rows");
}

// ------------------------------------------------------------------- helpers

fn points_in_cube(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.0..TAU),
            )
        })
        .collect()
}

/// Node position for a flat grid index (x-major layout).
fn grid_node(n: usize, side: f64, i: usize) -> Vec3 {
    let h = side / n as f64;
    Vec3::new((i / (n * n)) as f64 * h, ((i / n) % n) as f64 * h, (i % n) as f64 * h)
}

/// Least-squares slope of ln(err) against ln(dt).
fn log_log_slope(dts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}
