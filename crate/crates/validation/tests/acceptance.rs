//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any selected criterion fails.
//!
//! `cargo test -p selftrain-validation --test acceptance -- 3 8` runs a subset.

use selftrain::analytic::{check_perturbative_claims, compare_continuum, PerturbativeConfig, PerturbativeReport};
use selftrain::compare::{compare_theory_experiment, CompareSettings, KsTarget, SizeCell};
use selftrain::gmm::{sample_labeled, sample_unlabeled_batch, MixtureConfig};
use selftrain::hyperopt::{nelder_mead_minimize, optimize_hyperparameters, Bounds, HyperBox, HyperPoint, NelderMeadOptions};
use selftrain::losses::{LossSpec, PlLink};
use selftrain::replica::{
    effective_logit_minimize, inner_expectations_t, inner_expectations_t0, solve_trajectory, supervised_baseline, Backend,
    ConjugateParams, FixedPointOptions, Moments, QuadratureSpec, Scenario,
};
use selftrain::simulator::{assign_pseudo_labels, fit_st_step, fit_supervised, SolverOptions};
use selftrain::stats::ks_two_sample;
use selftrain_validation::{central_difference, grid_minimizer, ridge_normal_equations, sigmoid};
use std::time::Instant;

const DELTA: f64 = 0.5625;

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: String) -> Outcome {
    Outcome { pass, summary }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn gh(nodes: usize) -> QuadratureSpec {
    QuadratureSpec {
        backend: Backend::GaussHermite,
        gh_nodes: nodes,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- 1 and 2

fn macroscopics_and_distributions(run1: bool, run2: bool) -> Vec<(usize, Outcome)> {
    let base = Scenario {
        mixture: MixtureConfig::symmetric(8192, 0.5, DELTA, 0.5, 2.0, 16),
        loss: LossSpec::logistic(),
        lambda_l: 0.05,
        lambda_u: 0.05,
        bias_fixed: false,
    };
    let quad = QuadratureSpec::default();
    let opts = FixedPointOptions::default();
    let tuned = optimize_hyperparameters(&base, &HyperBox::default(), None, &quad, &opts, &NelderMeadOptions::default())
        .expect("ridge tuning runs");
    let scenario = tuned.best.apply(&base);
    println!(
        "  tuned ridge: lambda_l = {:.5}, lambda_u = {:.5}, predicted eps_g(16) = {:.5}",
        scenario.lambda_l, scenario.lambda_u, tuned.result.best_value
    );
    let settings = CompareSettings {
        cells: vec![SizeCell { n_dim: 8192, n_seeds: 10 }],
        steps: Some(vec![1, 6, 11, 16]),
        ..Default::default()
    };
    let cmp = compare_theory_experiment(&scenario, &quad, &opts, &settings, 0).expect("comparison runs");
    let mut out = Vec::new();
    if run1 {
        for r in &cmp.report.rows {
            println!(
                "  t = {:2} {:>8}: theory {:+.5} finite-size {:+.5} +- {:.5} (z = {:+.2})",
                r.t,
                format!("{:?}", r.observable),
                r.theory,
                r.mean,
                r.se,
                r.z
            );
        }
        let pass = cmp.report.rows.iter().all(|r| r.z.abs() <= settings.z_max);
        out.push((
            1,
            outcome(
                pass,
                format!(
                    "q, m, B at t in {{1, 6, 11, 16}}, N = 8192, 10 seeds: max |z| = {:.2} (limit {})",
                    cmp.report.max_abs_z, settings.z_max
                ),
            ),
        ));
    }
    if run2 {
        let ks = |target| cmp.report.ks.iter().find(|k| k.target == target).expect("KS row").statistic;
        let (kw, kl) = (ks(KsTarget::Weights), ks(KsTarget::AcceptedLogits));
        // spread over the other seeds, for context only
        let t = 16;
        let per_seed: Vec<(u64, f64, f64)> = cmp
            .traces
            .iter()
            .map(|(_, s, tr)| {
                let st = &tr.steps[t];
                (
                    *s,
                    ks_two_sample(&st.params.weights, &cmp.effective_weights),
                    ks_two_sample(&st.train_logits, &cmp.effective_logits),
                )
            })
            .collect();
        for (s, w, l) in &per_seed {
            println!("  seed {s}: KS weights {w:.4}, KS accepted logits {l:.4}, bias {:+.4}", cmp.traces.iter().find(|x| x.1 == *s).unwrap().2.steps[t].bias);
        }
        println!("  theory bias at t = 16: {:+.4}", cmp.theory.steps[t].theta.bias);
        let pass = kw < settings.ks_threshold && kl < settings.ks_threshold;
        out.push((
            2,
            outcome(
                pass,
                format!(
                    "KS at t = 16, N = 8192, first seed vs 1e6 effective draws: weights {kw:.4}, accepted logits {kl:.4} (limit {})",
                    settings.ks_threshold
                ),
            ),
        ));
    }
    out
}

// ---------------------------------------------------------------- 3

fn squared_scenario(lambda_u: f64, n_batches: usize) -> Scenario {
    Scenario {
        mixture: MixtureConfig::symmetric(1024, 0.5, DELTA, 0.5, 2.0, n_batches),
        loss: LossSpec::squared(),
        lambda_l: 0.1,
        lambda_u,
        bias_fixed: false,
    }
}

fn continuum_oracle() -> Outcome {
    // horizon 5 τ_M with τ_M = ½ (Δ/V)(α_U - 1)(Δ + V) at ρ = ½ (V = 1), α_U = 2
    let tau_big_m = 0.5 * DELTA * (DELTA + 1.0);
    let run = |lam: f64| {
        let steps = (5.0 * tau_big_m / lam).ceil() as usize;
        compare_continuum(&squared_scenario(lam, steps), &gh(20), &FixedPointOptions::default()).expect("continuum run")
    };
    let full = run(1e-3);
    let half = run(5e-4);
    let ratio = half.max_abs_dev / full.max_abs_dev;
    println!("  tau_M = {:.6} (solver {:.6})", tau_big_m, full.state.tau_big_m);
    println!("  max |M_replica - M_closed|: {:.3e} at lambda_u = 1e-3, {:.3e} at 5e-4", full.max_abs_dev, half.max_abs_dev);
    let pass = full.max_abs_dev < 5e-3 && (ratio - 0.5).abs() <= 0.3 * 0.5;
    outcome(
        pass,
        format!(
            "squared-loss continuum: max deviation {:.3e} (limit 5e-3), halving ratio {ratio:.3} (0.5 +- 30%)",
            full.max_abs_dev
        ),
    )
}

// ---------------------------------------------------------------- 4 and 5

fn perturbative(loss: LossSpec, n_batches: usize) -> PerturbativeReport {
    let cfg = PerturbativeConfig {
        mixture: MixtureConfig::symmetric(1024, 0.5, DELTA, 0.5, 2.0, n_batches),
        loss,
        lambda_l: 0.1,
        slope_grid: vec![1e-3, 2e-3, 5e-3, 1e-2],
        lambda_rate: 1e-3,
    };
    check_perturbative_claims(&cfg, &gh(20), &FixedPointOptions::default()).expect("small-ridge checks run")
}

fn check<'a>(r: &'a PerturbativeReport, name: &str) -> &'a selftrain::analytic::ClaimCheck {
    r.checks.iter().find(|c| c.claim == name).expect("check present")
}

fn exponents(ce: &PerturbativeReport) -> Outcome {
    let a = check(ce, "chihat_exponent");
    let b = check(ce, "cond_var_exponent");
    outcome(
        a.pass && b.pass,
        format!(
            "cross entropy, lambda_u in [1e-3, 1e-2]: slope of chihat {:.3} ({}), slope of q - R^2/q_prev {:.3} ({}); 2.0 +- 0.2",
            a.measured,
            verdict(a.pass),
            b.measured,
            verdict(b.pass)
        ),
    )
}

fn growth_rate(ce: &PerturbativeReport, sq: &PerturbativeReport) -> Outcome {
    for s in &ce.steps {
        println!(
            "  cross entropy t = {}: dM {:.4e} vs C M(1-M) lambda {:.4e} (rel. {:.3})",
            s.t, s.delta_big_m, s.predicted, s.rel_residual
        );
    }
    let ce_fit = check(ce, "delta_m_vs_rate");
    let sq_fit = check(sq, "delta_m_vs_rate");
    let stated = check(sq, "squared_rate_closed_form");
    let tau = check(sq, "squared_rate_vs_tau_m");
    println!(
        "  squared: mean rate {:.5}; 1/tau_M = {:.5} ({}, info)",
        tau.measured,
        tau.expected,
        verdict(tau.pass)
    );
    outcome(
        ce_fit.pass && sq_fit.pass && stated.pass,
        format!(
            "dM vs C M(1-M) lambda at 1e-3: worst rel. {:.3} CE, {:.3} squared (limit 0.1); squared C {:.5} vs 2V/((a-1)(D+V)) = {:.5} ({}, 5%)",
            ce_fit.measured,
            sq_fit.measured,
            stated.measured,
            stated.expected,
            verdict(stated.pass)
        ),
    )
}

// ---------------------------------------------------------------- 6

fn heuristics() -> Outcome {
    let t_max = 256;
    let mixture = MixtureConfig::symmetric(1024, 0.2, DELTA, 0.5, 2.0, t_max);
    let quad = gh(20);
    let opts = FixedPointOptions {
        damping: 0.8,
        ..Default::default()
    };
    let nm = NelderMeadOptions {
        x_tol: 1e-4,
        f_tol: 1e-7,
        max_eval: 150,
    };
    let naive = Scenario {
        mixture,
        loss: LossSpec::logistic(),
        lambda_l: 0.05,
        lambda_u: 0.01,
        bias_fixed: false,
    };
    let mut loss = LossSpec::logistic();
    loss.pl_link = PlLink::AnnealedSigmoid;
    loss.anneal_rate = 0.05;
    let heur = Scenario {
        loss,
        bias_fixed: true,
        ..naive
    };
    // naive ST only loses accuracy here and its error sits on a flat plateau at ε = ρ
    // for λ_U above ~1e-3, so a single start stalls; take the best of several
    let naive_opt = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&lu| {
            let init = HyperPoint { lambda_u: lu, ..HyperPoint::of(&naive) };
            optimize_hyperparameters(&naive, &HyperBox::default(), Some(init), &quad, &opts, &nm).expect("naive tuning runs")
        })
        .min_by(|a, b| a.result.best_value.total_cmp(&b.result.best_value))
        .expect("three starts");
    let hbox = HyperBox {
        active: [true, true, false, true],
        ..Default::default()
    };
    let heur_opt = optimize_hyperparameters(&heur, &hbox, Some(HyperPoint::of(&heur)), &quad, &opts, &nm).expect("heuristic tuning runs");

    // supervised reference on α_L + T α_U labeled points, ridge tuned on (0, 0.1]
    let alpha = mixture.alpha_l + t_max as f64 * mixture.alpha_u;
    let sl = |l: f64| {
        supervised_baseline(&mixture, &LossSpec::logistic(), l, alpha, &quad, &opts)
            .ok()
            .filter(|s| s.converged)
            .map_or(f64::INFINITY, |s| s.eps_g)
    };
    let b = Bounds::new(vec![1e-8], vec![0.1]).unwrap();
    let sl_opt = nelder_mead_minimize(|x| sl(x[0]), &b, &[0.05], &nm).expect("baseline tuning runs");
    let eps_sl = sl_opt.best_value;

    let r_naive = naive_opt.result.best_value / eps_sl;
    let r_heur = heur_opt.result.best_value / eps_sl;
    let p = heur_opt.best;
    println!(
        "  naive: lambda = ({:.4}, {:.4}), eps_g = {:.5}; heuristics: lambda = ({:.4}, {:.4}), a = {:.4}, eps_g = {:.5}",
        naive_opt.best.lambda_l,
        naive_opt.best.lambda_u,
        naive_opt.result.best_value,
        p.lambda_l,
        p.lambda_u,
        p.anneal_rate,
        heur_opt.result.best_value
    );
    println!("  supervised reference at alpha = {alpha}: lambda = {:.4}, eps_g = {eps_sl:.5}", sl_opt.best[0]);
    let (dn, dh) = ((1.0 - r_naive).abs(), (1.0 - r_heur).abs());
    outcome(
        dn >= 2.0 * dh,
        format!(
            "rho = 0.2, T = 256: |1 - ratio| naive {dn:.4}, annealing + bias fixing {dh:.4} (need factor >= 2, got {:.2})",
            dn / dh
        ),
    )
}

// ---------------------------------------------------------------- 7

fn selection_benefit() -> Outcome {
    let base = Scenario {
        mixture: MixtureConfig::symmetric(1024, 0.5, DELTA, 0.125, 16.0, 1),
        loss: LossSpec::logistic(),
        lambda_l: 0.05,
        lambda_u: 0.05,
        bias_fixed: false,
    };
    let quad = gh(80);
    // the default η = 0.5 oscillates near λ_L = 0.1 once selection is on
    let opts = FixedPointOptions {
        damping: 0.2,
        ..Default::default()
    };
    let nm = NelderMeadOptions::default();
    let plain = optimize_hyperparameters(&base, &HyperBox::default(), None, &quad, &opts, &nm).expect("tuning without selection runs");
    let hbox = HyperBox {
        active: [true, true, true, false],
        ..Default::default()
    };
    let mut init = plain.best;
    init.pls_threshold = 1.5;
    let sel = optimize_hyperparameters(&base, &hbox, Some(init), &quad, &opts, &nm).expect("tuning with selection runs");
    let (e0, e1) = (plain.result.best_value, sel.result.best_value);
    let reduction = 1.0 - e1 / e0;
    println!(
        "  Gamma = 0: lambda = ({:.4}, {:.4}), eps_g = {e0:.5}; tuned Gamma = {:.4}: lambda = ({:.3e}, {:.4}), eps_g = {e1:.5}",
        plain.best.lambda_l, plain.best.lambda_u, sel.best.pls_threshold, sel.best.lambda_l, sel.best.lambda_u
    );
    outcome(
        reduction > 0.3 && sel.best.pls_threshold > 0.0,
        format!("rho = 0.5, alpha = (0.125, 16), T = 1: selection lowers eps_g by {:.1}% (need > 30%)", 100.0 * reduction),
    )
}

// ---------------------------------------------------------------- 8

fn conj_se(mom: &Moments, alpha: f64, delta: f64) -> [f64; 4] {
    [alpha * delta * mom.se[1], alpha * delta * mom.se[2], alpha * mom.se[3], alpha * delta * mom.se[4]]
}

fn conj_arr(c: &ConjugateParams) -> [f64; 4] {
    [c.qhat, c.chihat, c.mhat, c.rhat.unwrap_or(0.0)]
}

fn oracles() -> Outcome {
    let mut fails = Vec::new();

    // effective one-point minimizer vs a 1e-6 grid
    let logistic = LossSpec::logistic();
    let mut worst_u: f64 = 0.0;
    for &(chi, delta, ht, h) in &[(0.3, 1.2, -0.4, 1.0), (2.0, DELTA, 3.0, 0.1), (0.05, DELTA, -2.5, 1.7), (5.0, 1.0, 0.2, -4.0)] {
        let (u, _) = effective_logit_minimize(&logistic, chi, delta, ht, h, 1.0, 1).unwrap();
        worst_u = worst_u.max((u - grid_minimizer(chi, delta, sigmoid(ht), h)).abs());
    }
    let mut sel = logistic;
    sel.pls_threshold = 1.0;
    let (u_rej, _) = effective_logit_minimize(&sel, 1.0, DELTA, 0.5, 0.3, 1.0, 1).unwrap();
    if worst_u > 1e-6 || u_rej != 0.0 {
        fails.push(format!("minimizer off grid by {worst_u:.1e}"));
    }
    println!("  effective minimizer vs grid: max |du| = {worst_u:.2e}");

    // Gauss-Hermite vs 1e6-draw Monte Carlo on the conjugates, Γ = 0
    let mc = QuadratureSpec {
        backend: Backend::MonteCarlo,
        mc_samples: 1_000_000,
        seed: 11,
        ..Default::default()
    };
    let mut worst_z: f64 = 0.0;
    for loss in [LossSpec::logistic(), LossSpec::squared()] {
        let sc = Scenario {
            mixture: MixtureConfig::symmetric(1024, 0.35, DELTA, 0.5, 2.0, 1),
            loss,
            lambda_l: 0.05,
            lambda_u: 0.05,
            bias_fixed: false,
        };
        let tr = solve_trajectory(&sc, &gh(80), &FixedPointOptions::default()).unwrap();
        let (th0, th1) = (&tr.steps[0].theta, &tr.steps[1].theta);
        let mix = &sc.mixture;
        let pairs = [
            (
                inner_expectations_t0(th0, &loss, mix, &gh(80)).unwrap(),
                inner_expectations_t0(th0, &loss, mix, &mc).unwrap(),
                mix.alpha_l,
                mix.delta_l,
                3,
            ),
            (
                inner_expectations_t(th0, th1, &loss, mix, &gh(80), 1).unwrap(),
                inner_expectations_t(th0, th1, &loss, mix, &mc, 1).unwrap(),
                mix.alpha_u,
                mix.delta_u,
                4,
            ),
        ];
        for ((g, _), (m, mm), alpha, delta, k) in pairs {
            let se = conj_se(&mm, alpha, delta);
            let (a, b) = (conj_arr(&g), conj_arr(&m));
            for i in 0..k {
                let tol = (3.0 * se[i]).max(1e-12 * (1.0 + a[i].abs()));
                worst_z = worst_z.max((a[i] - b[i]).abs() / tol * 3.0);
                if (a[i] - b[i]).abs() > tol {
                    fails.push(format!("conjugate {i} GH {} vs MC {} (+- {})", a[i], b[i], se[i]));
                }
            }
        }
    }
    println!("  Gauss-Hermite vs Monte Carlo: max |diff| / SE = {worst_z:.2}");

    // finite-size squared fits vs the normal equations
    let mix = MixtureConfig::symmetric(48, 0.4, DELTA, 3.0, 4.0, 1);
    let squared = {
        let mut s = LossSpec::squared();
        s.pls_threshold = 0.4;
        s
    };
    let n = mix.n_dim;
    let labeled = sample_labeled(&mix, 21).unwrap();
    let sup = fit_supervised(&labeled, &squared, 0.2, SolverOptions::default()).unwrap().params;
    let rows: Vec<&[f64]> = (0..labeled.len()).map(|i| labeled.features().row(i)).collect();
    let targets: Vec<f64> = labeled.labels().unwrap().iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }).collect();
    let sol = ridge_normal_equations(&rows, &targets, 0.2);
    let mut worst_fit = (0..n).map(|j| (sup.weights[j] - sol[j]).abs()).fold((sup.bias - sol[n]).abs(), f64::max);
    let batch = sample_unlabeled_batch(&mix, 1, 21).unwrap();
    let (labels, mask) = assign_pseudo_labels(&sup, &batch, &squared, 1).unwrap();
    let step = fit_st_step(&batch, &labels, &mask, &sup, &squared, 0.3, false, SolverOptions::default()).unwrap().params;
    let kept: Vec<usize> = (0..batch.len()).filter(|&i| sup.logit(batch.features().row(i)).abs() > 0.4 * sup.q_bar().sqrt()).collect();
    let rows: Vec<&[f64]> = kept.iter().map(|&i| batch.features().row(i)).collect();
    let targets: Vec<f64> = kept.iter().map(|&i| sup.logit(batch.features().row(i))).collect();
    let sol = ridge_normal_equations(&rows, &targets, 0.3);
    worst_fit = (0..n).map(|j| (step.weights[j] - sol[j]).abs()).fold(worst_fit.max((step.bias - sol[n]).abs()), f64::max);
    if worst_fit > 1e-8 || kept.len() == batch.len() {
        fails.push(format!("ridge fits off by {worst_fit:.1e}"));
    }
    println!("  squared fits vs normal equations: max |diff| = {worst_fit:.2e} ({} of {} pseudo-labeled points kept)", kept.len(), batch.len());

    // derivative bundles vs central differences
    let h = 1e-5;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + b.abs());
    let mut worst_d: f64 = 0.0;
    let mut annealed = LossSpec::logistic();
    annealed.pl_link = PlLink::AnnealedSigmoid;
    annealed.anneal_rate = 0.3;
    for spec in [LossSpec::logistic(), LossSpec::squared(), annealed] {
        for y in [0u8, 1] {
            for j in -12..=12 {
                let x = j as f64 * 0.41 + 0.003;
                let b = spec.derivs_labeled(y, x);
                let fd2 = central_difference(|x| spec.eval_l_labeled(y, x).unwrap(), x, h);
                let fd22 = central_difference(|x| spec.derivs_labeled(y, x).d2, x, h);
                worst_d = worst_d.max((b.d2 - fd2).abs()).max((b.d22 - fd22).abs());
                if !close(b.d2, fd2) || !close(b.d22, fd22) {
                    fails.push(format!("labeled derivatives at x = {x}"));
                }
            }
        }
        let gamma = 1.7;
        for i in -8..=8 {
            for j in -8..=8 {
                let (hp, x) = (i as f64 * 0.6 + 0.011, j as f64 * 0.55 - 0.004);
                let f = |hp: f64, x: f64| spec.eval_l_unlabeled(hp, x, gamma, 1.0).unwrap();
                let d2 = |hp: f64, x: f64| spec.derivs_unlabeled(hp, x, gamma, 1.0).unwrap().d2;
                let b = spec.derivs_unlabeled(hp, x, gamma, 1.0).unwrap();
                let fd2 = central_difference(|x| f(hp, x), x, h);
                let fd22 = central_difference(|x| d2(hp, x), x, h);
                let fd12 = central_difference(|hp| d2(hp, x), hp, h);
                worst_d = worst_d.max((b.d2 - fd2).abs()).max((b.d22 - fd22).abs()).max((b.d12 - fd12).abs());
                if !close(b.d2, fd2) || !close(b.d22, fd22) || !close(b.d12, fd12) {
                    fails.push(format!("unlabeled derivatives at ({hp}, {x})"));
                }
            }
        }
    }
    println!("  derivative bundles vs central differences: max |diff| = {worst_d:.2e}");

    for f in &fails {
        println!("  mismatch: {f}");
    }
    outcome(
        fails.is_empty(),
        format!(
            "oracles: minimizer {worst_u:.1e} (1e-6), GH vs MC within 3 SE, fits {worst_fit:.1e} (1e-8), derivatives {worst_d:.1e} (1e-6 rel.)"
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: usize| picked.is_empty() || picked.contains(&k);
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut record = |k: usize, o: Outcome, t0: Instant| {
        println!("criterion {k}: {} {} [{:.0} s]", verdict(o.pass), o.summary, t0.elapsed().as_secs_f64());
        results.push((k, o, t0.elapsed().as_secs_f64()));
    };

    if want(1) || want(2) {
        let t0 = Instant::now();
        for (k, o) in macroscopics_and_distributions(want(1), want(2)) {
            record(k, o, t0);
        }
    }
    if want(3) {
        let t0 = Instant::now();
        record(3, continuum_oracle(), t0);
    }
    if want(4) || want(5) {
        let t0 = Instant::now();
        let ce = perturbative(LossSpec::logistic(), 5);
        if want(4) {
            record(4, exponents(&ce), t0);
        }
        if want(5) {
            let sq = perturbative(LossSpec::squared(), 5);
            record(5, growth_rate(&ce, &sq), t0);
        }
    }
    if want(6) {
        let t0 = Instant::now();
        record(6, heuristics(), t0);
    }
    if want(7) {
        let t0 = Instant::now();
        record(7, selection_benefit(), t0);
    }
    if want(8) {
        let t0 = Instant::now();
        record(8, oracles(), t0);
    }

    println!();
    println!("acceptance summary:");
    for (k, o, _) in &results {
        println!("  criterion {k}: {}", verdict(o.pass));
    }
    let failed = results.iter().filter(|(_, o, _)| !o.pass).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
