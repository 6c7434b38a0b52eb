//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run with
//! `cargo test -p ffgvi-core --test acceptance`.

use std::time::{Duration, Instant};

use ffgvi_core::bfe::{ell_gamma, local_z_objective};
use ffgvi_core::engine::{infer, predictive, InferenceConfig};
use ffgvi_core::exponential_families::{
    gaussian_mgf, Belief, GammaBelief, GaussianBelief, LogGammaMessage, LogNormalMessage, Message, MvGaussianBelief,
    Value,
};
use ffgvi_core::factor_rules::{
    explink_message, gamma_node_message, normal_message, softdot_message, ExpPort, GammaNodeInputs, GammaPort,
    NormalInputs, NormalPort, PositiveMoments, ScalarMoments, SoftdotInputs, SoftdotPort, VecMoments,
};
use ffgvi_core::fixed_point::{
    fixed_point_map_gamma, fixed_point_map_z, solve_gamma_edge, solve_gaussian_edge, stationarity_residual,
    SolverConfig,
};
use ffgvi_core::graph::{Factorization, FactorGraph, FamilyConstraint, LineType, NodeKind};
use ffgvi_core::models::{
    build_decision_tree, build_depth0, default_posterior, depth2_posterior, fit, metrics, predict, synthetic,
    xor_experts, Fitted, ModelKind, Posterior, PrecisionSpec, SyntheticSpec, TreeSpec,
};
use ffgvi_core::nalgebra::{DMatrix, DVector, Matrix2};
use ffgvi_core::oracle::{
    brute_force_edge_min, expect, expect_mv, fit_gamma, fit_gaussian, fit_mv_gaussian, pushforward_density,
    GridSpec, QuadratureSpec,
};
use ffgvi_core::special::ln_gamma;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

type Outcome = Result<(bool, String), String>;
type Check = (&'static str, u64, fn() -> Outcome);

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300).max(a.abs()).max(1e-12)
}

fn run(id: usize, title: &str, limit: Duration, f: fn() -> Outcome) -> bool {
    let t = Instant::now();
    let result = f();
    let elapsed = t.elapsed();
    let (ok, detail) = match result {
        Ok((ok, d)) => (ok, d),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = elapsed <= limit;
    let pass = ok && in_time;
    let timing = if in_time {
        format!("{:.2}s <= {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())
    } else {
        format!("{:.2}s exceeds {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())
    };
    println!("criterion {id:>2} [{}] {title}: {detail} ({timing})", if pass { "PASS" } else { "FAIL" });
    pass
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1 and 2

fn xor_truth(x1: f64, x2: f64) -> f64 {
    if (x1 > 0.5) != (x2 > 0.5) {
        1.0
    } else {
        0.0
    }
}

fn criterion_1() -> Outcome {
    let corners: Vec<Vec<f64>> = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
        .iter()
        .map(|&(a, b)| vec![a, b, 1.0])
        .collect();
    // expert 1 dominates (0,0) and (1,1), expert 2 dominates (0,1) and (1,0)
    let expected = [0usize, 1, 1, 0];
    let sharp = depth2_posterior(&xor_experts(2000.0), &corners, 5).map_err(err)?;
    let dominant: Vec<usize> = sharp.iter().map(|p| p.dominant).collect();
    let soft = depth2_posterior(&xor_experts(500.0), &corners, 5).map_err(err)?;
    let worst = soft.iter().map(|p| (p.mean - xor_truth(p.phi[0], p.phi[1])).abs()).fold(0.0, f64::max);
    let ok = dominant == expected && worst < 0.1;
    Ok((ok, format!("dominant experts {:?} (expected {:?}), max |mean - truth| at tau=500 = {worst:.2e} (< 0.1)",
        dominant.iter().map(|d| d + 1).collect::<Vec<_>>(), expected.iter().map(|d| d + 1).collect::<Vec<_>>())))
}

fn off_boundary_grid() -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for a in 0..21 {
        for b in 0..21 {
            let (x1, x2) = (a as f64 / 20.0, b as f64 / 20.0);
            if a != 10 && b != 10 {
                pts.push(vec![x1, x2, 1.0]);
            }
        }
    }
    pts
}

fn criterion_2() -> Outcome {
    let grid = off_boundary_grid();
    let mean_std = |tau: f64| -> Result<f64, String> {
        let pts = depth2_posterior(&xor_experts(tau), &grid, 5).map_err(err)?;
        Ok(pts.iter().map(|p| p.std).sum::<f64>() / pts.len() as f64)
    };
    let soft = mean_std(10.0)?;
    let sharp = mean_std(500.0)?;
    Ok((soft > sharp, format!("mean std over {} points: tau=10 {soft:.4e} > tau=500 {sharp:.4e}", grid.len())))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    // worked instance: G(1,1), residuals {1, -1, 2}
    let preds = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
    let targets = [1.0, -1.0, 2.0];
    let unit = PrecisionSpec::Learned(GammaBelief::new(1.0, 1.0).map_err(err)?);
    let built = build_depth0(&preds, Some(&targets), &[unit]).map_err(err)?;
    let m = infer(&built.graph, &InferenceConfig::with_sweeps(2)).map_err(err)?;
    let g = match m.get(built.experts[0].gamma.unwrap()).and_then(|b| b.as_belief()) {
        Some(Belief::Gamma(g)) => g,
        other => return Err(format!("unexpected marginal {other:?}")),
    };
    let mut worst = (g.alpha() - 2.5).abs().max((g.beta() - 4.0).abs());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..25 {
        let n = rng.gen_range(1..4);
        let mm = rng.gen_range(1..7);
        let preds = DMatrix::from_fn(n, mm, |_, _| rng.gen_range(-3.0..3.0));
        let targets: Vec<f64> = (0..mm).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let priors: Vec<GammaBelief> = (0..n)
            .map(|_| GammaBelief::new(rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let specs: Vec<PrecisionSpec> = priors.iter().map(|p| PrecisionSpec::Learned(*p)).collect();
        let built = build_depth0(&preds, Some(&targets), &specs).map_err(err)?;
        let m = infer(&built.graph, &InferenceConfig::with_sweeps(2)).map_err(err)?;
        for (i, p) in priors.iter().enumerate() {
            let ss: f64 = (0..mm).map(|j| (targets[j] - preds[(i, j)]).powi(2)).sum();
            let (a, b) = (p.alpha() + 0.5 * mm as f64, p.beta() + 0.5 * ss);
            match m.get(built.experts[i].gamma.unwrap()).and_then(|b| b.as_belief()) {
                Some(Belief::Gamma(g)) => worst = worst.max(rel(g.alpha(), a)).max(rel(g.beta(), b)),
                other => return Err(format!("unexpected marginal {other:?}")),
            }
        }
    }
    Ok((worst <= 1e-10, format!("G(1,1)+{{1,-1,2}} -> G({}, {}); worst relative error over 25 instances {worst:.1e} (<= 1e-10)", g.alpha(), g.beta())))
}

// ---------------------------------------------------------------- 4

fn random_mv(rng: &mut ChaCha8Rng, d: usize) -> MvGaussianBelief {
    let mean = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.5..0.5));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.1..0.6);
    MvGaussianBelief::from_moments(mean, cov).expect("positive definite")
}

fn random_gamma(rng: &mut ChaCha8Rng) -> GammaBelief {
    GammaBelief::new(rng.gen_range(1.0..6.0), rng.gen_range(0.5..3.0)).expect("feasible gamma")
}

fn random_gauss(rng: &mut ChaCha8Rng) -> GaussianBelief {
    GaussianBelief::from_moments(rng.gen_range(-2.0..2.0), rng.gen_range(0.1..1.5)).expect("feasible gaussian")
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut c = DMatrix::zeros(n + m, n + m);
    c.view_mut((0, 0), (n, n)).copy_from(a);
    c.view_mut((n, n), (m, m)).copy_from(b);
    c
}

const GH: QuadratureSpec = QuadratureSpec { kind: ffgvi_core::oracle::QuadratureKind::GaussHermite, order: 48 };

fn laguerre() -> QuadratureSpec {
    QuadratureSpec::laguerre(64)
}

fn gauss_params(m: &Message) -> Result<(f64, f64), String> {
    match m {
        Message::Gaussian(g) => Ok(g.moments()),
        other => Err(format!("gaussian expected, got {}", other.family())),
    }
}

fn gamma_params(m: &Message) -> Result<(f64, f64), String> {
    match m {
        Message::Gamma(g) => Ok((g.alpha(), g.beta())),
        other => Err(format!("gamma expected, got {}", other.family())),
    }
}

fn mv_params(m: &Message) -> Result<(DVector<f64>, DMatrix<f64>), String> {
    match m {
        Message::MvGaussian(g) => Ok((g.xi().clone(), g.lambda().clone())),
        other => Err(format!("multivariate gaussian expected, got {}", other.family())),
    }
}

fn mat_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1e-12)
}

fn vec_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1e-12)
}

/// Worst relative gap between each VMP rule and the exponentiated expected
/// log-factor computed by quadrature.
fn vmp_rules_vs_quadrature(instances: usize) -> Result<(f64, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let d = 2;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for _ in 0..instances {
        let qw = random_mv(&mut rng, d);
        let qphi = random_mv(&mut rng, d);
        let qtau = random_gamma(&mut rng);
        let qz = random_gauss(&mut rng);
        let (wm, wc) = (qw.mean().map_err(err)?, qw.cov().map_err(err)?);
        let (pm, pc) = (qphi.mean().map_err(err)?, qphi.cov().map_err(err)?);
        let joint_mean = DVector::from_iterator(2 * d, wm.iter().chain(pm.iter()).copied());
        let joint_cov = block_diag(&wc, &pc);
        let inputs = SoftdotInputs {
            q_w: Some(VecMoments::try_from(&qw).map_err(err)?),
            q_phi: Some(VecMoments::try_from(&qphi).map_err(err)?),
            q_tau: Some(PositiveMoments::from(&qtau)),
            q_z: Some(ScalarMoments::from(&qz)),
        };
        let log_f = |z: f64, w: &[f64], phi: &[f64], tau: f64| {
            let dot: f64 = w.iter().zip(phi).map(|(a, b)| a * b).sum();
            0.5 * tau.ln() - half_ln_2pi - 0.5 * tau * (z - dot).powi(2)
        };
        let tau_b = Belief::Gamma(qtau);
        // toward z
        let lm = |z: f64| -> f64 {
            expect(
                &|tau| expect_mv(&|x| log_f(z, &x.as_slice()[..d], &x.as_slice()[d..], tau), &joint_mean, &joint_cov, 6).unwrap(),
                &tau_b,
                laguerre(),
            )
            .unwrap()
        };
        let (m, v) = fit_gaussian(&lm, 0.0, 1.0);
        let (rm, rv) = gauss_params(&softdot_message(SoftdotPort::Z, &inputs).map_err(err)?)?;
        worst = worst.max(rel(rm, m)).max(rel(rv, v));
        // toward w and phi
        for port in [SoftdotPort::W, SoftdotPort::Phi] {
            let other = if port == SoftdotPort::W { &qphi } else { &qw };
            let (om, oc) = (other.mean().map_err(err)?, other.cov().map_err(err)?);
            let z_b = Belief::Gaussian(qz);
            let lm = |x: &DVector<f64>| -> f64 {
                expect(
                    &|tau| {
                        expect(
                            &|z| expect_mv(&|o| log_f(z, x.as_slice(), o.as_slice(), tau), &om, &oc, 6).unwrap(),
                            &z_b,
                            GH,
                        )
                        .unwrap()
                    },
                    &tau_b,
                    laguerre(),
                )
                .unwrap()
            };
            let (xi, lambda) = fit_mv_gaussian(&lm, d, 1.0);
            let (rxi, rl) = mv_params(&softdot_message(port, &inputs).map_err(err)?)?;
            worst = worst.max(vec_rel(&rxi, &xi)).max(mat_rel(&rl, &lambda));
        }
        // toward tau
        let z_b = Belief::Gaussian(qz);
        let lm = |tau: f64| -> f64 {
            expect(
                &|z| expect_mv(&|x| log_f(z, &x.as_slice()[..d], &x.as_slice()[d..], tau), &joint_mean, &joint_cov, 6).unwrap(),
                &z_b,
                GH,
            )
            .unwrap()
        };
        let (a, b) = fit_gamma(&lm);
        let (ra, rb) = gamma_params(&softdot_message(SoftdotPort::Tau, &inputs).map_err(err)?)?;
        worst = worst.max(rel(ra, a)).max(rel(rb, b));

        // normal factor
        let (qy, qmu) = (random_gauss(&mut rng), random_gauss(&mut rng));
        let qt = random_gamma(&mut rng);
        let inputs = NormalInputs {
            q_y: Some(ScalarMoments::from(&qy)),
            q_mu: Some(ScalarMoments::from(&qmu)),
            q_tau: Some(PositiveMoments::from(&qt)),
            joint_residual_sq: None,
        };
        let log_n = |y: f64, mu: f64, tau: f64| 0.5 * tau.ln() - half_ln_2pi - 0.5 * tau * (y - mu).powi(2);
        let (yb, mub, tb) = (Belief::Gaussian(qy), Belief::Gaussian(qmu), Belief::Gamma(qt));
        let to_y = |y: f64| expect(&|t| expect(&|mu| log_n(y, mu, t), &mub, GH).unwrap(), &tb, laguerre()).unwrap();
        let to_mu = |mu: f64| expect(&|t| expect(&|y| log_n(y, mu, t), &yb, GH).unwrap(), &tb, laguerre()).unwrap();
        let to_tau = |t: f64| expect(&|y| expect(&|mu| log_n(y, mu, t), &mub, GH).unwrap(), &yb, GH).unwrap();
        let (m, v) = fit_gaussian(&to_y, 0.0, 1.0);
        let (rm, rv) = gauss_params(&normal_message(NormalPort::Y, &inputs).map_err(err)?)?;
        worst = worst.max(rel(rm, m)).max(rel(rv, v));
        let (m, v) = fit_gaussian(&to_mu, 0.0, 1.0);
        let (rm, rv) = gauss_params(&normal_message(NormalPort::Mu, &inputs).map_err(err)?)?;
        worst = worst.max(rel(rm, m)).max(rel(rv, v));
        let (a, b) = fit_gamma(&to_tau);
        let (ra, rb) = gamma_params(&normal_message(NormalPort::Tau, &inputs).map_err(err)?)?;
        worst = worst.max(rel(ra, a)).max(rel(rb, b));

        // gamma factor with clamped shape
        let alpha = rng.gen_range(0.5..4.0);
        let (qg, qb) = (random_gamma(&mut rng), random_gamma(&mut rng));
        let inputs = GammaNodeInputs {
            alpha_clamp: alpha,
            q_beta: Some(PositiveMoments::from(&qb)),
            q_gamma: Some(PositiveMoments::from(&qg)),
        };
        let log_g = |g: f64, b: f64| alpha * b.ln() - ln_gamma(alpha) + (alpha - 1.0) * g.ln() - b * g;
        let (gb, bb) = (Belief::Gamma(qg), Belief::Gamma(qb));
        let to_g = |g: f64| expect(&|b| log_g(g, b), &bb, laguerre()).unwrap();
        let to_b = |b: f64| expect(&|g| log_g(g, b), &gb, laguerre()).unwrap();
        let (a, b) = fit_gamma(&to_g);
        let (ra, rb) = gamma_params(&gamma_node_message(GammaPort::Gamma, &inputs).map_err(err)?)?;
        worst = worst.max(rel(ra, a)).max(rel(rb, b));
        let (a, b) = fit_gamma(&to_b);
        let (ra, rb) = gamma_params(&gamma_node_message(GammaPort::Beta, &inputs).map_err(err)?)?;
        worst = worst.max(rel(ra, a)).max(rel(rb, b));
        checks += 9;
    }
    Ok((worst, checks))
}

/// Exp-link belief propagation in both directions against change-of-variables quadrature.
fn explink_vs_pushforward(points: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for k in 0..points {
        if k % 2 == 0 {
            let g = random_gauss(&mut rng);
            let ln = match explink_message(ExpPort::Gamma, &Message::Gaussian(g)).map_err(err)? {
                Message::LogNormal(ln) => ln,
                other => return Err(format!("log-normal expected, got {}", other.family())),
            };
            let z = g.mean() + g.var().sqrt() * rng.gen_range(-2.0..2.0);
            let x = z.exp();
            let base = |z: f64| g.log_density(z).exp();
            let oracle = pushforward_density(&base, &|z: f64| z.exp(), z, x, x);
            worst = worst.max(rel(ln.log_density(x).exp(), oracle));
        } else {
            let g = random_gamma(&mut rng);
            let lg = match explink_message(ExpPort::Z, &Message::Gamma(g)).map_err(err)? {
                Message::LogGamma(lg) => lg,
                other => return Err(format!("log-gamma expected, got {}", other.family())),
            };
            let x = g.mean() * rng.gen_range(0.3..2.0);
            let z = x.ln();
            let base = |x: f64| if x > 0.0 { g.log_density(x).exp() } else { 0.0 };
            let oracle = pushforward_density(&base, &|x: f64| x.ln(), x, 1.0 / x, z);
            worst = worst.max(rel(lg.log_density(z).exp(), oracle));
        }
    }
    Ok(worst)
}

fn criterion_4() -> Outcome {
    let (worst_vmp, checks) = vmp_rules_vs_quadrature(20)?;
    let worst_bp = explink_vs_pushforward(50)?;
    let ok = worst_vmp <= 1e-6 && worst_bp <= 1e-6;
    Ok((ok, format!("{checks} VMP rule checks, worst rel {worst_vmp:.1e}; 50 exp-link BP points, worst rel {worst_bp:.1e} (<= 1e-6)")))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let cfg = SolverConfig::default();
    let mut details = Vec::new();
    let mut ok = true;

    let conj = GaussianBelief::from_moments(0.0, 1.0).map_err(err)?;
    let lg = LogGammaMessage::new(1.0, 1.0).map_err(err)?;
    let sol = solve_gaussian_edge(&conj, &lg, &conj, &cfg).map_err(err)?;
    let (m, v) = match sol.belief {
        Belief::Gaussian(g) => g.moments(),
        _ => return Err("gaussian solution expected".into()),
    };
    let ((om, ov), _) = brute_force_edge_min((&Message::Gaussian(conj), &Message::LogGamma(lg)), &GridSpec::gaussian_default()).map_err(err)?;
    let gap_z = (m - om).abs().max((v - ov).abs());
    ok &= gap_z <= 1e-3;
    details.push(format!("z edge (m, v) = ({m:.5}, {v:.5}) vs grid ({om:.5}, {ov:.5}), gap {gap_z:.1e}"));

    let gconj = GammaBelief::new(2.0, 1.0).map_err(err)?;
    let ln = LogNormalMessage::new(0.0, 1.0).map_err(err)?;
    let gsol = solve_gamma_edge(&gconj, &ln, &gconj, &cfg).map_err(err)?;
    let (a, b) = match gsol.belief {
        Belief::Gamma(g) => (g.alpha(), g.beta()),
        _ => return Err("gamma solution expected".into()),
    };
    let ((oa, ob), _) = brute_force_edge_min((&Message::Gamma(gconj), &Message::LogNormal(ln)), &GridSpec::gamma_default()).map_err(err)?;
    let gap_g = rel(a, oa).max(rel(b, ob));
    ok &= gap_g <= 1e-3;
    details.push(format!("gamma edge (a, b) = ({a:.5}, {b:.5}) vs grid ({oa:.5}, {ob:.5}), rel gap {gap_g:.1e}"));

    // stationarity at every returned solution, over a batch of random instances
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_res: f64 = 0.0;
    let mut solves = 0;
    for _ in 0..20 {
        let conj = random_gauss(&mut rng);
        let lg = LogGammaMessage::new(rng.gen_range(0.3..3.0), rng.gen_range(0.3..4.0)).map_err(err)?;
        let s = solve_gaussian_edge(&conj, &lg, &conj, &cfg).map_err(err)?;
        if let Belief::Gaussian(q) = s.belief {
            worst_res = worst_res.max(stationarity_residual(&s.belief, &fixed_point_map_z(&q, &conj, &lg).map_err(err)?).map_err(err)?);
        }
        let gconj = random_gamma(&mut rng);
        let ln = LogNormalMessage::new(rng.gen_range(-1.0..1.5), rng.gen_range(0.1..2.0)).map_err(err)?;
        let s = solve_gamma_edge(&gconj, &ln, &gconj, &cfg).map_err(err)?;
        if let Belief::Gamma(q) = s.belief {
            worst_res = worst_res.max(stationarity_residual(&s.belief, &fixed_point_map_gamma(&q, &gconj, &ln).map_err(err)?).map_err(err)?);
        }
        solves += 2;
    }
    for q in [&sol.belief, &gsol.belief] {
        let mapped = match q {
            Belief::Gaussian(g) => fixed_point_map_z(g, &conj, &lg),
            Belief::Gamma(g) => fixed_point_map_gamma(g, &gconj, &ln),
            _ => unreachable!(),
        };
        worst_res = worst_res.max(stationarity_residual(q, &mapped.map_err(err)?).map_err(err)?);
    }
    ok &= worst_res <= 1e-4;
    details.push(format!("worst stationarity residual over {} solutions {worst_res:.1e}", solves + 2));

    // analytic gradients vs central differences
    let mut worst_grad: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..20 {
        let q = random_gauss(&mut rng);
        let conj = random_gauss(&mut rng);
        let lg = LogGammaMessage::new(rng.gen_range(0.3..3.0), rng.gen_range(0.3..4.0)).map_err(err)?;
        let (_, g) = local_z_objective(&q, &conj, &lg).map_err(err)?;
        let eta = q.natural();
        for k in 0..2 {
            let mut ep = eta;
            let mut em = eta;
            ep[k] += h;
            em[k] -= h;
            let fp = local_z_objective(&GaussianBelief::from_natural(ep[0], ep[1]).map_err(err)?, &conj, &lg).map_err(err)?.0;
            let fm = local_z_objective(&GaussianBelief::from_natural(em[0], em[1]).map_err(err)?, &conj, &lg).map_err(err)?.0;
            let fd = (fp - fm) / (2.0 * h);
            worst_grad = worst_grad.max((fd - g[k]).abs() / g[k].abs().max(1.0));
        }
        let q = random_gamma(&mut rng);
        let gconj = random_gamma(&mut rng);
        let ln = LogNormalMessage::new(rng.gen_range(-1.0..1.5), rng.gen_range(0.1..2.0)).map_err(err)?;
        let (_, g) = ell_gamma(&q, &gconj, &ln).map_err(err)?;
        let eta = q.natural();
        for k in 0..2 {
            let mut ep = eta;
            let mut em = eta;
            ep[k] += h;
            em[k] -= h;
            let fp = ell_gamma(&GammaBelief::from_natural(ep[0], ep[1]).map_err(err)?, &gconj, &ln).map_err(err)?.0;
            let fm = ell_gamma(&GammaBelief::from_natural(em[0], em[1]).map_err(err)?, &gconj, &ln).map_err(err)?.0;
            let fd = (fp - fm) / (2.0 * h);
            worst_grad = worst_grad.max((fd - g[k]).abs() / g[k].abs().max(1.0));
        }
    }
    ok &= worst_grad <= 1e-5;
    details.push(format!("worst gradient gap over 40 points {worst_grad:.1e}"));
    Ok((ok, details.join("; ")))
}

// ---------------------------------------------------------------- 6

fn hessian_fd(f: &dyn Fn(f64, f64) -> f64, x: f64, y: f64, h: f64) -> Matrix2<f64> {
    let fxx = (f(x + h, y) - 2.0 * f(x, y) + f(x - h, y)) / (h * h);
    let fyy = (f(x, y + h) - 2.0 * f(x, y) + f(x, y - h)) / (h * h);
    let fxy = (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h)) / (4.0 * h * h);
    Matrix2::new(fxx, fxy, fxy, fyy)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_fisher: f64 = 0.0;
    let mut worst_mgf: f64 = 0.0;
    for _ in 0..20 {
        let g = random_gauss(&mut rng);
        let eta = g.natural();
        let a = |e1: f64, e2: f64| GaussianBelief::from_natural(e1, e2).unwrap().log_partition();
        let fd = hessian_fd(&a, eta[0], eta[1], 1e-4);
        let f = g.fisher();
        worst_fisher = worst_fisher.max((f - fd).abs().max() / f.abs().max());

        let q = random_gamma(&mut rng);
        let eta = q.natural();
        let a = |e1: f64, e2: f64| GammaBelief::from_natural(e1, e2).unwrap().log_partition();
        let fd = hessian_fd(&a, eta[0], eta[1], 1e-4);
        let f = q.fisher();
        worst_fisher = worst_fisher.max((f - fd).abs().max() / f.abs().max());

        let mgf = gaussian_mgf(&g).map_err(err)?;
        let quad = expect(&|z: f64| z.exp(), &Belief::Gaussian(g), QuadratureSpec::hermite(64)).map_err(err)?;
        worst_mgf = worst_mgf.max(rel(mgf, quad));
    }
    let g = GaussianBelief::from_moments(0.3, 0.7).map_err(err)?;
    let quad = expect(&|z: f64| z.exp(), &Belief::Gaussian(g), QuadratureSpec::hermite(64)).map_err(err)?;
    worst_mgf = worst_mgf.max(rel(gaussian_mgf(&g).map_err(err)?, quad));
    let ok = worst_fisher <= 1e-5 && worst_mgf <= 1e-10;
    Ok((ok, format!("Fisher vs finite-difference Hessian worst rel {worst_fisher:.1e} (<= 1e-5); MGF vs quadrature worst rel {worst_mgf:.1e} (<= 1e-10)")))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let kinds = [ModelKind::Static, ModelKind::Pge, ModelKind::PgeDiag, ModelKind::Noisy, ModelKind::NoisyDiag];
    let mut worst = f64::NEG_INFINITY;
    let mut runs = 0;
    for seed in 0..25u64 {
        let s = synthetic(&SyntheticSpec { seed, n_experts: 3, n_obs: 40, dim: 3, heteroscedastic: seed % 2 == 0 }).map_err(err)?;
        for kind in kinds {
            let prior = default_posterior(kind, 3, 4);
            let f = fit(kind, &s.data, &prior, &InferenceConfig::with_sweeps(5)).map_err(err)?;
            for w in f.bfe_trace.windows(2) {
                worst = worst.max(w[1] - w[0]);
            }
            runs += 1;
        }
    }
    Ok((worst <= 1e-6, format!("{runs} runs (5 models x 25 seeds), largest per-sweep BFE increase {worst:.2e} (<= 1e-6)")))
}

// ---------------------------------------------------------------- 8

/// Noisy prediction graph with point precisions: `pred_i ~ N(yhat_i, 1/kappa_i)`,
/// `y ~ N(pred_i, 1/gamma_i)` with `q(y, pred_i)` joint and `y` free.
fn point_noisy_predictive(yhat: &[f64], kappa: &[f64], gamma: &[f64]) -> Result<GaussianBelief, String> {
    let mut g = FactorGraph::new();
    let n = yhat.len();
    let (sl, sf) = (LineType::Solid, FamilyConstraint::Gaussian);
    let eq = g.add_equality(n.max(2) + 1, sl);
    for i in 0..n {
        let noise = g.add_factor(NodeKind::NormalFactor);
        let lk = g.add_factor(NodeKind::NormalFactor);
        g.set_factorization(lk, Factorization::Structured(vec![vec!["y".into(), "mu".into()]]));
        let e = g.add_edge(sl, sf, format!("yhat{i}"));
        g.connect(noise, "mu", e).map_err(err)?;
        g.observe(e, Value::Scalar(yhat[i])).map_err(err)?;
        let e = g.add_edge(LineType::Dashed, FamilyConstraint::Gamma, format!("kappa{i}"));
        g.connect(noise, "tau", e).map_err(err)?;
        g.clamp(e, Value::Scalar(kappa[i])).map_err(err)?;
        let e = g.add_edge(LineType::Dashed, FamilyConstraint::Gamma, format!("gamma{i}"));
        g.connect(lk, "tau", e).map_err(err)?;
        g.clamp(e, Value::Scalar(gamma[i])).map_err(err)?;
        let e = g.add_edge(sl, sf, format!("pred{i}"));
        g.connect(noise, "y", e).map_err(err)?;
        g.connect(lk, "mu", e).map_err(err)?;
        let e = g.add_edge(sl, sf, format!("y#{i}"));
        g.connect(lk, "y", e).map_err(err)?;
        g.connect_index(eq, i, e).map_err(err)?;
    }
    for k in n..n.max(2) + 1 {
        let e = g.add_edge(sl, sf, format!("y#{k}"));
        g.connect_index(eq, k, e).map_err(err)?;
        g.unity(e).map_err(err)?;
    }
    let y = g.edge_by_label("y#0").expect("target edge");
    let m = infer(&g, &InferenceConfig::with_sweeps(3)).map_err(err)?;
    match predictive(&g, &m, y).map_err(err)? {
        Belief::Gaussian(b) => Ok(b),
        other => Err(format!("gaussian predictive expected, got {}", other.family())),
    }
}

fn criterion_8() -> Outcome {
    let mut worst: f64 = 0.0;
    let single = point_noisy_predictive(&[1.5], &[4.0], &[4.0])?;
    worst = worst.max((single.var() - 0.5).abs());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let n = rng.gen_range(1..4);
        let yhat: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let kappa: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..10.0)).collect();
        let gamma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..10.0)).collect();
        let b = point_noisy_predictive(&yhat, &kappa, &gamma)?;
        let precision: f64 = kappa.iter().zip(&gamma).map(|(k, g)| 1.0 / (1.0 / k + 1.0 / g)).sum();
        worst = worst.max((b.var() - 1.0 / precision).abs());
    }
    // learned kappa on identical data: PGE's fitted trust gates, with the
    // kappa posteriors learned by the noisy fit, read out through the noisy graph
    let s = synthetic(&SyntheticSpec { seed: 8, n_experts: 3, n_obs: 150, dim: 3, heteroscedastic: true }).map_err(err)?;
    let train = s.data.subset(0..100).map_err(err)?;
    let test = s.data.subset(100..150).map_err(err)?;
    let fit_cfg = InferenceConfig::with_sweeps(5);
    let pred_cfg = InferenceConfig::with_sweeps(3);
    let pge = fit(ModelKind::Pge, &train, &default_posterior(ModelKind::Pge, 3, 4), &fit_cfg).map_err(err)?;
    let noisy = fit(ModelKind::Noisy, &train, &default_posterior(ModelKind::Noisy, 3, 4), &fit_cfg).map_err(err)?;
    let (Posterior::Gated(gates), Posterior::Gated(noisy_post)) = (&pge.posterior, &noisy.posterior) else {
        return Err("gated posteriors expected".into());
    };
    let mut shared = gates.clone();
    for (e, n) in shared.experts.iter_mut().zip(&noisy_post.experts) {
        e.kappa = n.kappa;
    }
    let with_kappa = Fitted { kind: ModelKind::Noisy, posterior: Posterior::Gated(shared), bfe_trace: Vec::new() };
    let base = predict(&pge, &test, &pred_cfg).map_err(err)?;
    let wide = predict(&with_kappa, &test, &pred_cfg).map_err(err)?;
    let above = base.beliefs.iter().zip(&wide.beliefs).filter(|(p, n)| n.var() > p.var()).count();
    let count = base.beliefs.len();
    // separately fitted noisy model, averaged over the test points
    let own = predict(&noisy, &test, &pred_cfg).map_err(err)?;
    let avg = |b: &[GaussianBelief]| b.iter().map(|b| b.var()).sum::<f64>() / b.len() as f64;
    let (v_pge, v_noisy) = (avg(&base.beliefs), avg(&own.beliefs));
    let v_shared = avg(&wide.beliefs);
    let ok = worst <= 1e-10 && v_shared > v_pge && v_noisy > v_pge;
    Ok((ok, format!("point precisions: worst |var - harmonic sum of (1/kappa + 1/gamma)| {worst:.1e} (<= 1e-10); learned kappa: mean predictive variance noisy {v_noisy:.4} and noisy with PGE gates {v_shared:.4} > PGE {v_pge:.4} (pointwise larger at {above}/{count})")))
}

// ---------------------------------------------------------------- 9

fn tree() -> TreeSpec {
    let leaf = |c: f64| Box::new(TreeSpec::Leaf { w: vec![0.0, 0.0, c] });
    TreeSpec::Split {
        v: vec![100.0, 0.0, -50.0],
        left: Box::new(TreeSpec::Split { v: vec![0.0, 100.0, -50.0], left: leaf(4.0), right: leaf(3.0) }),
        right: Box::new(TreeSpec::Split { v: vec![0.0, 100.0, -50.0], left: leaf(2.0), right: leaf(1.0) }),
    }
}

fn criterion_9() -> Outcome {
    let tree = tree();
    let mut phi = Vec::new();
    for a in 0..10 {
        for b in 0..10 {
            phi.push(vec![0.05 + 0.1 * a as f64, 0.05 + 0.1 * b as f64, 1.0]);
        }
    }
    let (g, outs) = build_decision_tree(&tree, &phi, 2000.0).map_err(err)?;
    let m = infer(&g, &InferenceConfig::with_sweeps(5)).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (p, &e) in phi.iter().zip(&outs) {
        let (mean, _) = m.get(e).ok_or("missing output marginal")?.mean_var().map_err(err)?;
        worst = worst.max((mean - tree.eval(p)).abs());
    }
    Ok((worst < 0.05, format!("4-leaf tree, 100 grid points, max |mean - target| {worst:.2e} (< 0.05)")))
}

// ---------------------------------------------------------------- 10

fn nll_gap(seed: u64, heteroscedastic: bool) -> Result<f64, String> {
    let s = synthetic(&SyntheticSpec { seed, n_experts: 3, n_obs: 250, dim: 5, heteroscedastic }).map_err(err)?;
    let train = s.data.subset(0..200).map_err(err)?;
    let test = s.data.subset(200..250).map_err(err)?;
    let targets: Vec<f64> = test.targets.as_ref().unwrap().iter().copied().collect();
    let mut nll = Vec::new();
    for kind in [ModelKind::Static, ModelKind::Pge] {
        let f = fit(kind, &train, &default_posterior(kind, 3, 6), &InferenceConfig::with_sweeps(5)).map_err(err)?;
        let p = predict(&f, &test, &InferenceConfig::with_sweeps(3)).map_err(err)?;
        nll.push(metrics(&p.beliefs, &targets).map_err(err)?.nll);
    }
    Ok(nll[1] - nll[0])
}

fn paired_t(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    mean / (sd / n.sqrt())
}

fn criterion_10() -> Outcome {
    let het: Vec<f64> = (0..10).map(|s| nll_gap(s, true)).collect::<Result<_, _>>()?;
    let hom: Vec<f64> = (0..10).map(|s| nll_gap(s, false)).collect::<Result<_, _>>()?;
    let crit = StudentsT::new(0.0, 1.0, 9.0).map_err(err)?.inverse_cdf(0.975);
    let (t_het, t_hom) = (paired_t(&het), paired_t(&hom));
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let ok = mean(&het) < 0.0 && t_het < -crit && t_hom.abs() < crit;
    Ok((ok, format!(
        "NLL(PGE) - NLL(static): heteroscedastic mean {:.3}, t = {t_het:.2} (< -{crit:.2}); homoscedastic mean {:.3}, |t| = {:.2} (< {crit:.2})",
        mean(&het), mean(&hom), t_hom.abs()
    )))
}

fn main() {
    let secs = Duration::from_secs;
    let criteria: [Check; 10] = [
        ("XOR sharp routing", 10, criterion_1),
        ("routing-uncertainty ordering", 30, criterion_2),
        ("conjugate exactness", 5, criterion_3),
        ("rule catalog vs quadrature", 60, criterion_4),
        ("fixed-point correctness", 60, criterion_5),
        ("Fisher and MGF checks", 10, criterion_6),
        ("BFE monotonicity", 120, criterion_7),
        ("noisy-prediction variance additivity", 30, criterion_8),
        ("decision-tree expressiveness", 30, criterion_9),
        ("dynamic vs static trust", 120, criterion_10),
    ];
    let mut failed = 0;
    for (k, (title, limit, f)) in criteria.into_iter().enumerate() {
        if !run(k + 1, title, secs(limit), f) {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
