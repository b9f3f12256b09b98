//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use valueshift::cli::{self, PipelineMetrics, TuningRecord};
use valueshift::domain::{BcmParams, ValueProfile};
use valueshift::dynamics::{bcm_pair_update, simulate_users, spread, GroupScheme, InteractionMode};
use valueshift::io::{self, SigmaDistribution, SynthSpec};
use valueshift::labeling::{label_sigma, label_sigma_oracle};
use valueshift::pso::{default_space, optimize, DimensionKind, PsoConfig, SearchSpace};
use valueshift::regress::{cross_validate, fit, Family, Kernel, RegressorSpec, Samples};

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > limit => Err(format!("{msg}; took {took:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(msg) => println!("PASS  {name}: {msg} ({took:.2?})"),
            Err(msg) => {
                self.failures += 1;
                println!("FAIL  {name}: {msg} ({took:.2?})");
            }
        }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bcm_gate_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    let mut gated_in = 0;
    for _ in 0..100_000 {
        let v_i: f64 = rng.random();
        let v_j: f64 = rng.random();
        let mu = rng.random_range(1e-6..=0.5);
        let sigma: f64 = rng.random();
        let p = BcmParams::new(mu, sigma).map_err(|e| e.to_string())?;
        let out = bcm_pair_update(v_i, v_j, &p).map_err(|e| e.to_string())?;
        let gap = (v_j - v_i).abs();
        let ok = if gap > sigma {
            out.to_bits() == v_i.to_bits()
        } else {
            gated_in += 1;
            ((v_j - out).abs() - (1.0 - mu) * gap).abs() <= 1e-12
        };
        if !ok || !(0.0..=1.0).contains(&out) {
            failures += 1;
        }
    }
    ensure(failures == 0, || format!("{failures} failing cases"))?;
    Ok(format!("100000 cases ({gated_in} gated in), 0 failures"))
}

fn consensus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let users: Vec<ValueProfile> = (0..6)
        .map(|_| ValueProfile { scores: std::array::from_fn(|_| rng.random()) })
        .collect();
    let p = BcmParams::new(0.4, 1.0).unwrap();
    let traces = simulate_users(users, &p, InteractionMode::Symmetric, GroupScheme::Sequential, 50);
    let sums: Vec<[f64; 5]> = traces
        .iter()
        .map(|t| std::array::from_fn(|d| t.snapshot.iter().map(|u| u.scores[d]).sum()))
        .collect();
    for w in sums.windows(2) {
        for d in 0..5 {
            let drift = (w[1][d] - w[0][d]).abs();
            ensure(drift <= 1e-12, || format!("sum drifted by {drift:e} in one step"))?;
        }
    }
    let s: Vec<f64> = traces.iter().map(|t| spread(&t.snapshot)).collect();
    // per-step contraction ratios while the spread is well above rounding
    let ratios: Vec<f64> = s.windows(2).take_while(|w| w[0] > 1e-9).map(|w| w[1] / w[0]).collect();
    ensure(ratios.len() >= 10, || format!("spread collapsed after {} steps", ratios.len()))?;
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    // geometric: a uniform per-step contraction factor bounded away from 1
    ensure(worst <= 0.9, || format!("per-step spread ratio reached {worst}"))?;
    let rate = (s[ratios.len()] / s[0]).powf(1.0 / ratios.len() as f64);
    Ok(format!(
        "spread {:.3e} -> {:.3e}, mean ratio {rate:.4}, worst ratio {worst:.4}",
        s[0], s[50]
    ))
}

fn labeling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let delta = 0.01;
    let (mut compared, mut round_trips) = (0, 0);
    while compared < 10_000 {
        let v_i: f64 = rng.random();
        let v_j: f64 = rng.random();
        let mu = rng.random_range(0.05..=0.5);
        let gap = (v_j - v_i).abs();
        if gap == 0.0 {
            continue;
        }
        let true_sigma: f64 = rng.random();
        let noiseless = rng.random_bool(0.8);
        let v_next = if noiseless {
            bcm_pair_update(v_i, v_j, &BcmParams::new(mu, true_sigma).unwrap()).unwrap()
        } else {
            rng.random()
        };
        let label = label_sigma(v_i, v_j, v_next, mu, delta);
        let oracle = label_sigma_oracle(v_i, v_j, v_next, mu, 1e-3).map_err(|e| e.to_string())?;
        ensure((label - oracle).abs() <= 1e-3 + delta, || {
            format!("v_i={v_i} v_j={v_j} next={v_next} mu={mu}: label {label} oracle {oracle}")
        })?;
        compared += 1;
        if noiseless && gap <= true_sigma {
            let p = BcmParams::new(mu, label).unwrap();
            let back = bcm_pair_update(v_i, v_j, &p).unwrap();
            ensure(back.to_bits() == v_next.to_bits(), || {
                format!("round trip v_i={v_i} v_j={v_j} mu={mu}: {back} != {v_next}")
            })?;
            round_trips += 1;
        }
    }
    Ok(format!("{compared} tuples agree, {round_trips} exact round trips"))
}

fn rastrigin(x: &[f64]) -> f64 {
    10.0 * x.len() as f64
        + x.iter()
            .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos())
            .sum::<f64>()
}

fn pso_sanity() -> Outcome {
    let space = SearchSpace::new(vec![
        valueshift::pso::Dimension::continuous("x", -5.0, 5.0),
        valueshift::pso::Dimension::continuous("y", -5.0, 5.0),
    ])
    .unwrap();
    let mut sphere_worst = 0.0f64;
    let mut rastrigin_ok = 0;
    let mut rastrigin_bests = Vec::new();
    for seed in 0..10 {
        let c = PsoConfig { num_particles: 30, num_generations: 100, seed, ..Default::default() };
        for (name, f) in [("sphere", &(|x: &[f64]| x.iter().map(|v| v * v).sum::<f64>()) as &(dyn Fn(&[f64]) -> f64 + Sync)), ("rastrigin", &rastrigin)] {
            let out = optimize(&space, &c, f).map_err(|e| e.to_string())?;
            let mut prev = out.initial_best_fitness;
            for h in &out.history {
                ensure(h.best_fitness <= prev, || format!("{name} seed {seed}: history increased"))?;
                prev = h.best_fitness;
            }
            if name == "sphere" {
                sphere_worst = sphere_worst.max(out.best_fitness);
            } else {
                rastrigin_bests.push(out.best_fitness);
                if out.best_fitness < 1.0 {
                    rastrigin_ok += 1;
                }
            }
        }
    }
    ensure(sphere_worst < 1e-3, || format!("sphere worst best {sphere_worst:e}"))?;
    ensure(rastrigin_ok >= 8, || format!("rastrigin < 1 on {rastrigin_ok}/10 seeds: {rastrigin_bests:?}"))?;
    Ok(format!("sphere worst {sphere_worst:.2e}; rastrigin < 1 on {rastrigin_ok}/10 seeds"))
}

/// Smooth stand-in for validation MSE over the SVR space.
fn surrogate(space: &SearchSpace, pos: &[f64]) -> f64 {
    match valueshift::pso::decode_spec(Family::Svr, space, pos).unwrap() {
        RegressorSpec::Svr { kernel: Kernel::Rbf { gamma }, c, .. } => {
            0.05 + (gamma.ln() - 0.8f64.ln()).powi(2) / 50.0 + ((c - 37.0) / 99.0).powi(2)
        }
        RegressorSpec::Svr { kernel: Kernel::Linear, c, .. } => 0.12 + ((c - 64.0) / 99.0).powi(2),
        RegressorSpec::Svr { kernel: Kernel::Polynomial { degree, coef0 }, c, .. } => {
            0.08 + 0.02 * (degree as f64 - 3.0).powi(2) + ((c - 12000.0) / 19000.0).powi(2) + (coef0 - 0.35).powi(2)
        }
        other => panic!("unexpected spec {other:?}"),
    }
}

/// Exhaustive grid at `res` per normalised dimension, honouring activation.
fn grid_best(space: &SearchSpace, res: f64) -> f64 {
    let steps = (1.0 / res).round() as usize;
    let axes: Vec<Vec<f64>> = space
        .dimensions
        .iter()
        .map(|d| match &d.kind {
            DimensionKind::Continuous { lo, hi } => (0..=steps).map(|k| lo + (hi - lo) * k as f64 / steps as f64).collect(),
            DimensionKind::Integer { lo, hi } => {
                let mut v: Vec<f64> = (0..=steps)
                    .map(|k| (*lo as f64 + (*hi - *lo) as f64 * k as f64 / steps as f64).round())
                    .collect();
                v.dedup();
                v
            }
            DimensionKind::Categorical { choices } => (0..choices.len()).map(|i| i as f64).collect(),
        })
        .collect();
    let mut best = f64::INFINITY;
    let mut pos = vec![0.0; axes.len()];
    fn walk(space: &SearchSpace, axes: &[Vec<f64>], k: usize, pos: &mut Vec<f64>, best: &mut f64) {
        if k == axes.len() {
            *best = best.min(surrogate(space, pos));
            return;
        }
        if !space.is_active(k, pos) {
            // inactive: one representative value is enough
            pos[k] = axes[k][0];
            walk(space, axes, k + 1, pos, best);
            return;
        }
        for &v in &axes[k] {
            pos[k] = v;
            walk(space, axes, k + 1, pos, best);
        }
    }
    walk(space, &axes, 0, &mut pos, &mut best);
    best
}

fn pso_vs_grid() -> Outcome {
    let space = default_space(Family::Svr);
    let grid = grid_best(&space, 0.05);
    let mut bests = Vec::new();
    for seed in 0..10 {
        let c = PsoConfig { num_particles: 30, num_generations: 100, seed, ..Default::default() };
        let out = optimize(&space, &c, |p: &[f64]| surrogate(&space, p)).map_err(|e| e.to_string())?;
        bests.push(out.best_fitness);
    }
    let limit = grid * 1.05;
    let passed = bests.iter().filter(|&&b| b <= limit).count();
    let worst = bests.iter().copied().fold(0.0, f64::max);
    let msg = format!("PSO (30x100) within 1.05 x grid best {grid:.5} on {passed}/10 seeds, worst {worst:.5}");
    ensure(passed == 10, || msg.clone())?;
    Ok(msg)
}

fn regressor_correctness() -> Outcome {
    // linear-kernel SVR on y = 2x
    let x: Vec<Vec<f64>> = (0..=10).map(|i| vec![i as f64 / 10.0]).collect();
    let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0]).collect();
    let s = Samples::new(x.clone(), y.clone()).unwrap();
    let m = fit(&s, &RegressorSpec::svr(Kernel::Linear, 100.0)).map_err(|e| e.to_string())?;
    let mut svr_err = 0.0f64;
    for k in 0..=100 {
        let v = k as f64 / 100.0;
        svr_err = svr_err.max((m.predict(&[v]).unwrap() - 2.0 * v).abs());
    }
    ensure(svr_err <= 0.02, || format!("linear SVR max error {svr_err}"))?;

    // ElasticNet at alpha = 0 against a least-squares oracle
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 60;
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|r| 0.3 + 1.5 * r[0] - 0.7 * r[1] + 0.2 * r[2] + rng.random_range(-0.1..0.1))
        .collect();
    let design = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] });
    let beta = design
        .clone()
        .svd(true, true)
        .solve(&DVector::from_vec(ys.clone()), 1e-14)
        .map_err(|e| e.to_string())?;
    let enet = fit(
        &Samples::new(xs.clone(), ys).unwrap(),
        &RegressorSpec::ElasticNet { alpha: 0.0, l1_ratio: 0.5, tol: 1e-12 },
    )
    .map_err(|e| e.to_string())?;
    let mut en_err = 0.0f64;
    for r in &xs {
        let ls = beta[0] + beta[1] * r[0] + beta[2] * r[1] + beta[3] * r[2];
        en_err = en_err.max((enet.predict(r).unwrap() - ls).abs());
    }
    ensure(en_err <= 1e-6, || format!("ElasticNet vs least squares {en_err:e}"))?;

    // GP near-interpolation
    let gx: Vec<Vec<f64>> = (0..25).map(|i| vec![i as f64 / 24.0, ((i * 7) % 25) as f64 / 24.0]).collect();
    let gy: Vec<f64> = gx.iter().map(|r| (3.0 * r[0]).sin() + r[1] * r[1]).collect();
    let gp = fit(
        &Samples::new(gx.clone(), gy.clone()).unwrap(),
        &RegressorSpec::GaussianProcess { kernel: Kernel::Rbf { gamma: 1.0 }, alpha: 1e-10, normalize_y: false },
    )
    .map_err(|e| e.to_string())?;
    let gp_err = gx
        .iter()
        .zip(&gy)
        .map(|(r, t)| (gp.predict(r).unwrap() - t).abs())
        .fold(0.0, f64::max);
    ensure(gp_err <= 1e-6, || format!("GP interpolation error {gp_err:e}"))?;
    Ok(format!("SVR max err {svr_err:.2e}, ElasticNet vs LS {en_err:.1e}, GP interp {gp_err:.1e}"))
}

const E2E_SEED: u64 = 1;

fn e2e_spec() -> SynthSpec {
    SynthSpec {
        num_networks: 50,
        alters_per_network: 5,
        num_segments: 20,
        sigma: SigmaDistribution::Uniform { lo: 0.1, hi: 0.9 },
        noise_sd: 0.005,
        seed: E2E_SEED,
        ..Default::default()
    }
}

fn run_cli_pipeline(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let args = [
        "valueshift", "pipeline", "--synth", "--networks", "50", "--alters", "5", "--segments", "20",
        "--sigma-lo", "0.1", "--sigma-hi", "0.9", "--noise", "0.005", "--holdout-last", "--seed",
        &E2E_SEED.to_string(), "--out", out.to_str().unwrap(),
    ];
    let code = cli::run(args);
    ensure(code == 0, || format!("pipeline exited with {code}"))?;
    Ok(start.elapsed())
}

fn read_metrics(dir: &Path) -> Result<PipelineMetrics, String> {
    let text = fs::read_to_string(dir.join(cli::METRICS_FILE)).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn end_to_end(dir: &Path, took: Duration) -> Outcome {
    ensure(took < Duration::from_secs(300), || format!("pipeline took {took:.1?}"))?;
    let m = read_metrics(dir)?;
    let p = PsoConfig::default();
    ensure((p.num_particles, p.num_generations, p.phi1, p.phi2) == (10, 15, 1.5, 2.0), || "PSO defaults changed".into())?;
    ensure(m.mu == 0.4, || format!("mu {}", m.mu))?;
    ensure(m.test_mse < 0.01, || format!("SVR test MSE {}", m.test_mse))?;
    let f = m.forecast.as_ref().ok_or("no forecast summary")?;
    ensure(f.fraction_within >= 0.9, || {
        format!("{}/{} forecasts within 0.02 of the held-out segment", f.within_tolerance, f.pairs)
    })?;

    // against the generator's noise-free next segment
    let corpus = io::generate_synthetic(&e2e_spec()).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(dir.join(cli::FORECAST_FILE)).map_err(|e| e.to_string())?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let (mut within, mut total) = (0, 0);
    for row in rdr.records() {
        let row = row.map_err(|e| e.to_string())?;
        let net = corpus.latent.iter().find(|n| n.ego_id() == &row[0]).ok_or("unknown ego")?;
        let dim: valueshift::domain::ValueDimension = row[1].parse().map_err(|e: valueshift::Error| e.to_string())?;
        let seg: u32 = row[2].parse().map_err(|_| "bad segment")?;
        let predicted: f64 = row[4].parse().map_err(|_| "bad forecast")?;
        let truth = net.profile(0, seg).ok_or("segment missing")?.get(dim);
        total += 1;
        if (predicted - truth).abs() <= 0.02 {
            within += 1;
        }
    }
    ensure(total == 250, || format!("{total} forecast pairs, expected 250"))?;
    ensure(within * 10 >= total * 9, || format!("{within}/{total} within 0.02 of the latent truth"))?;
    Ok(format!(
        "test MSE {:.2e}; {}/{} forecasts within 0.02 of observed, {within}/{total} of latent; pipeline {took:.1?}",
        m.test_mse, f.within_tolerance, f.pairs
    ))
}

fn cv_ranking(dir: &Path) -> Outcome {
    let d = io::parse_dataset_csv(&fs::read_to_string(dir.join(cli::DATASET_FILE)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let tuning: Vec<TuningRecord> =
        serde_json::from_str(&fs::read_to_string(dir.join(cli::TUNING_FILE)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    for family in Family::ALL {
        let spec = &tuning.iter().find(|t| t.family == family).ok_or("family missing")?.spec;
        let r = cross_validate(&d, spec, 10, 10, E2E_SEED, Some(cli::DEFAULT_MAX_TRAIN)).map_err(|e| e.to_string())?;
        ensure(r.fold_mses.len() == 100, || "expected 100 fold scores".into())?;
        scores.push((family, r.mean_mse));
    }
    let table: Vec<String> = scores.iter().map(|(f, m)| format!("{f} {m:.3e}")).collect();
    let svr = scores[0].1;
    ensure(scores[1..].iter().all(|(_, m)| svr <= *m), || format!("SVR not lowest: {}", table.join(", ")))?;
    Ok(table.join(", "))
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let mut names: Vec<String> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != cli::MANIFEST_FILE)
        .collect();
    names.sort();
    for n in &names {
        let x = fs::read(a.join(n)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        ensure(x == y, || format!("{n} differs between runs"))?;
    }
    ensure(names.iter().any(|n| n == cli::METRICS_FILE), || "no metrics written".into())?;
    Ok(format!("{} artifacts byte-identical across two runs", names.len()))
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.check("bcm gate suite", Duration::from_secs(1), bcm_gate_suite);
    suite.check("consensus", Duration::from_secs(1), consensus);
    suite.check("labeling oracle equivalence", Duration::from_secs(10), labeling_oracle);
    suite.check("pso sanity", Duration::from_secs(5), pso_sanity);
    suite.check("pso vs grid oracle", Duration::from_secs(30), pso_vs_grid);
    suite.check("regressor correctness", Duration::from_secs(5), regressor_correctness);

    let tmp = tempfile::tempdir().expect("temp dir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = run_cli_pipeline(&a);
    suite.check("end-to-end sigma recovery", Duration::from_secs(300), || end_to_end(&a, first.clone()?));
    suite.check("cv ranking", Duration::from_secs(600), || cv_ranking(&a));
    suite.check("determinism", Duration::from_secs(600), || {
        run_cli_pipeline(&b)?;
        determinism(&a, &b)
    });

    if suite.failures > 0 {
        println!("{} criterion(s) failed", suite.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
