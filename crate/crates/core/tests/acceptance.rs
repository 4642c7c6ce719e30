//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p nnorder --test acceptance`.

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;

use nnorder::densities::{GaussianSpec, PopulationPair, Region};
use nnorder::experiment::{row_curves, run_table1, table1_table};
use nnorder::config::ExperimentConfig;
use nnorder::kselect::BootstrapPlan;
use nnorder::knn::{IndexKind, NeighborIndex};
use nnorder::risk::{
    argmin_first, bayes_risk, replicate_error_curves, ErrorDesign, McPlan, QuadratureGrid,
};
use nnorder::sampling::{
    draw_binomial_training, draw_poisson_training, sample_poisson_count, split_stream, Label,
};
use nnorder::theory::{
    expansion_for_pair, find_boundary, regret_expansion, theoretical_kopt, unit_ball_volume,
    ExpansionReport,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn pair_1d(mu: f64, nu: f64) -> PopulationPair {
    PopulationPair::new(
        GaussianSpec::isotropic(vec![-0.5], 1.0).unwrap(),
        GaussianSpec::isotropic(vec![0.5], 1.0).unwrap(),
        mu,
        nu,
    )
    .unwrap()
}

fn pair_2d(corr: f64, mu: f64, nu: f64) -> PopulationPair {
    PopulationPair::new(
        GaussianSpec::bivariate([0.5, -0.5], corr).unwrap(),
        GaussianSpec::bivariate([-0.5, 0.5], corr).unwrap(),
        mu,
        nu,
    )
    .unwrap()
}

struct Row {
    name: &'static str,
    pair: PopulationPair,
    bayes: f64,
    k_opt: usize,
    err_kopt: f64,
}

fn table1_rows() -> Vec<Row> {
    let row = |name, pair, bayes, k_opt, err_kopt| Row {
        name,
        pair,
        bayes,
        k_opt,
        err_kopt,
    };
    vec![
        row("d=1 (100,100)", pair_1d(100.0, 100.0), 0.3072, 103, 0.3119),
        row("d=1 (100,200)", pair_1d(100.0, 200.0), 0.2685, 61, 0.2735),
        row("d=2 (100,100) rho=0", pair_2d(0.0, 100.0, 100.0), 0.2371, 71, 0.2444),
        row("d=2 (100,100) rho=0.5", pair_2d(0.5, 100.0, 100.0), 0.1566, 39, 0.1654),
        row("d=2 (100,200) rho=0", pair_2d(0.0, 100.0, 200.0), 0.2125, 45, 0.2199),
        row("d=2 (100,200) rho=0.5", pair_2d(0.5, 100.0, 200.0), 0.1430, 27, 0.1514),
    ]
}

fn region(d: usize) -> Region {
    Region::cube(d, -2.5, 2.5).unwrap()
}

fn design(pair: &PopulationPair) -> ErrorDesign {
    let res = if pair.dim() == 1 { 201 } else { 101 };
    ErrorDesign::for_region(pair, &region(pair.dim()), res, 0, 0).unwrap()
}

fn bayes(pair: &PopulationPair) -> f64 {
    let grid = QuadratureGrid::standard(&region(pair.dim()), 251).unwrap();
    bayes_risk(pair, &grid).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for r in table1_rows() {
        let v = bayes(&r.pair);
        worst = worst.max((v - r.bayes).abs());
        notes.push(format!("{v:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 5e-4 && secs < 10.0,
        format!("Bayes risks [{}], max |diff| {worst:.2e}, {secs:.1}s", notes.join(", ")),
    )
}

fn criterion_2() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for (i, r) in table1_rows().iter().enumerate() {
        let plan = McPlan::poisson(100, 2000 + i as u64);
        let curves = replicate_error_curves(&r.pair, &design(&r.pair), &[r.k_opt], plan).unwrap();
        let est = curves.estimates()[0];
        let se = (r.err_kopt * (1.0 - r.err_kopt) / 100.0).sqrt();
        let ok = (est.err - r.err_kopt).abs() <= 3.0 * se;
        pass &= ok;
        notes.push(format!("{} k={} {:.4} vs {:.4}{}", r.name, r.k_opt, est.err, r.err_kopt, if ok { "" } else { " (!)" }));
    }
    outcome(pass, notes.join("; "))
}

fn criterion_3() -> Outcome {
    let pair = pair_1d(100.0, 100.0);
    let fractions = [1.0 / 3.0, 0.5, 2.0 / 3.0];
    let plans: Vec<BootstrapPlan> = fractions.iter().map(|&r| BootstrapPlan::new(r, 100).unwrap()).collect();
    let k_grid: Vec<usize> = (1..=150).collect();
    let curves = row_curves(&pair, &design(&pair), &k_grid, McPlan::poisson(100, 3000), &plans).unwrap();
    let grid = curves.grid_estimates();
    let best = grid[argmin_first(grid.iter().map(|e| e.err)).unwrap()];
    let errs: Vec<(f64, f64)> = (0..plans.len()).map(|ri| {
        let (e, k) = curves.chosen_estimate(ri);
        (e.err, k)
    }).collect();
    let gap = errs[0].0 - best.err;
    let hi = errs.iter().map(|e| e.0).fold(f64::MIN, f64::max);
    let lo = errs.iter().map(|e| e.0).fold(f64::MAX, f64::min);
    let spread = hi - lo;
    outcome(
        gap.abs() < 0.01 && spread < 0.01,
        format!(
            "k_opt={} err {:.4}; k_tilde mean/err r=1/3 {:.1}/{:.4}, r=1/2 {:.1}/{:.4}, r=2/3 {:.1}/{:.4}; gap {gap:.4}, spread {spread:.4}",
            best.k, best.err, errs[0].1, errs[0].0, errs[1].1, errs[1].0, errs[2].1, errs[2].0
        ),
    )
}

fn grid_kopt(pair: &PopulationPair, k_grid: &[usize], n_sets: usize, seed: u64) -> (usize, f64) {
    let est = replicate_error_curves(pair, &design(pair), k_grid, McPlan::poisson(n_sets, seed))
        .unwrap()
        .estimates();
    let b = est[argmin_first(est.iter().map(|e| e.err)).unwrap()];
    (b.k, b.err)
}

fn criterion_4() -> Outcome {
    let k_grid: Vec<usize> = (1..=200).collect();
    let (k1, e1) = grid_kopt(&pair_2d(0.5, 100.0, 200.0), &k_grid, 100, 4000);
    let (k2, e2) = grid_kopt(&pair_2d(0.5, 400.0, 800.0), &k_grid, 100, 4000);
    let ratio = k2 as f64 / k1 as f64;
    outcome(
        (2.0..=3.3).contains(&ratio),
        format!("k_opt {k1} (err {e1:.4}) -> {k2} (err {e2:.4}), ratio {ratio:.2} (theory {:.2})", 4f64.powf(4.0 / 6.0)),
    )
}

fn criterion_5() -> Outcome {
    let mut worst_psi: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    let mut nodes = 0;
    for r in table1_rows() {
        let b = find_boundary(&r.pair, &region(r.pair.dim()), 201).unwrap();
        for g in b.geometry() {
            worst_psi = worst_psi.max((g.a - g.psi1).abs() / g.a);
            worst_h = worst_h.max((g.a - 4.0 * g.h * g.rho_dot_norm()).abs() / g.a);
            nodes += 1;
        }
    }
    let sym = expansion_for_pair(&pair_1d(100.0, 100.0), &region(1), 201).unwrap();
    let mut rng = split_stream(5000, 0);
    let mut kopt_fail = 0;
    for _ in 0..50 {
        let d = rng.random_range(1..=4usize);
        let c1 = rng.random_range(0.05..1.0);
        let c2 = rng.random_range(0.01..1.0);
        let nu: f64 = rng.random_range(100.0..5000.0);
        let rep = ExpansionReport { c1, c2, a_d: unit_ball_volume(d), dim: d, degenerate: false };
        let k = theoretical_kopt(&rep, nu, d).unwrap();
        let grid = (1..=nu.ceil() as usize)
            .min_by(|a, b| regret_expansion(&rep, *a, nu, d).total_cmp(&regret_expansion(&rep, *b, nu, d)))
            .unwrap();
        if grid.abs_diff(k) > 1 {
            kopt_fail += 1;
        }
    }
    let pass = worst_psi < 1e-6
        && worst_h < 1e-6
        && sym.c2 < 1e-12
        && (sym.c1 - 0.352057).abs() <= 1e-5
        && kopt_fail == 0;
    outcome(
        pass,
        format!(
            "{nodes} nodes, max rel |a-psi1| {worst_psi:.1e}, |a-4h|rho'|| {worst_h:.1e}; symmetric C1 {:.6} C2 {:.1e}; k_opt grid mismatches {kopt_fail}/50",
            sym.c1, sym.c2
        ),
    )
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in &idx[i..=j] {
            out[*t] = avg;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_6() -> Outcome {
    let pair = pair_1d(100.0, 200.0);
    let report = expansion_for_pair(&pair, &region(1), 201).unwrap();
    let k_theory = theoretical_kopt(&report, 200.0, 1).unwrap();
    let k_grid: Vec<usize> = (1..=200).collect();
    let est = replicate_error_curves(&pair, &design(&pair), &k_grid, McPlan::poisson(500, 6000))
        .unwrap()
        .estimates();
    let k_mc = est[argmin_first(est.iter().map(|e| e.err)).unwrap()].k;
    let ratio = k_mc as f64 / k_theory as f64;
    let bayes_risk = bayes(&pair);
    let (mut mc, mut th) = (Vec::new(), Vec::new());
    for e in est.iter().filter(|e| (10..=150).contains(&e.k)) {
        mc.push(e.err - bayes_risk);
        th.push(regret_expansion(&report, e.k, 200.0, 1));
    }
    let rho = spearman(&mc, &th);
    outcome(
        (0.5..=2.0).contains(&ratio) && rho > 0.7,
        format!(
            "MC argmin k={k_mc}, theory k={k_theory} (C1 {:.4}, C2 {:.4}), ratio {ratio:.2}; Spearman {rho:.3}",
            report.c1, report.c2
        ),
    )
}

fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn ks_critical_01(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n * m) as f64).sqrt()
}

fn criterion_7() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = split_stream(7000, 0);

    // kd-tree against brute force
    let mut mismatches = 0;
    for case in 0..1000 {
        let d = [1, 2, 16][case % 3];
        let n = rng.random_range(1..400usize);
        let k = rng.random_range(1..=n);
        // coarse lattice coordinates force plenty of distance ties
        let pts: Vec<f64> = (0..n * d).map(|_| rng.random_range(-8..8) as f64 * 0.25).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-10..10) as f64 * 0.25).collect();
        let kd = NeighborIndex::build(&pts, d, IndexKind::KdTree).unwrap();
        let bf = NeighborIndex::build(&pts, d, IndexKind::BruteForce).unwrap();
        if kd.k_nearest(&z, k).unwrap() != bf.k_nearest(&z, k).unwrap() {
            mismatches += 1;
        }
    }
    pass &= mismatches == 0;
    notes.push(format!("kd-tree mismatches {mismatches}/1000"));

    // analytic gradients against central differences
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let d = [1, 2, 3][case % 3];
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; d * d];
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|t| a[i * d + t] * a[j * d + t]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
            }
        }
        let spec = GaussianSpec::new(mean.clone(), cov).unwrap();
        let z: Vec<f64> = mean.iter().map(|m| m + rng.random_range(-1.5..1.5)).collect();
        let (_, grad) = spec.pdf_gradient(&z).unwrap();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-3 * spec.pdf(&z));
        for j in 0..d {
            let h = 1e-5;
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += h;
            zm[j] -= h;
            let fd = (spec.pdf(&zp) - spec.pdf(&zm)) / (2.0 * h);
            worst = worst.max((fd - grad[j]).abs() / scale);
        }
    }
    pass &= worst < 1e-5;
    notes.push(format!("gradient max rel err {worst:.1e}"));

    // generator moments at 3 sigma
    let n = 20_000;
    let mut moments_ok = true;
    for mean in [0.5, 7.0, 45.0, 300.0] {
        let xs: Vec<f64> = (0..n).map(|_| sample_poisson_count(mean, &mut rng) as f64).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        moments_ok &= (m - mean).abs() <= 3.0 * (mean / n as f64).sqrt();
        // var of the sample variance: (mu4 - sigma^4 (n-3)/(n-1)) / n, mu4 = m(1+3m)
        let var_v = (mean * (1.0 + 3.0 * mean) - mean * mean * (n as f64 - 3.0) / (n as f64 - 1.0)) / n as f64;
        moments_ok &= (v - mean).abs() <= 3.0 * var_v.sqrt();
    }
    let pair = pair_1d(30.0, 20.0);
    let mut counts = Vec::new();
    for s in 0..4000u64 {
        let set = draw_binomial_training(&pair, 50, &mut split_stream(7100, s)).unwrap();
        counts.push(set.count(Label::X) as f64);
    }
    let m = counts.iter().sum::<f64>() / counts.len() as f64;
    moments_ok &= (m - 30.0).abs() <= 3.0 * (50.0 * 0.6 * 0.4 / counts.len() as f64).sqrt();
    pass &= moments_ok;
    notes.push(format!("moments {}", if moments_ok { "ok" } else { "off" }));

    // Poisson conditioned on N = T against Binomial(T)
    let pair = pair_1d(6.0, 4.0);
    let t = 10;
    let (mut pois_x, mut pois_z) = (Vec::new(), Vec::new());
    let mut s = 0u64;
    while pois_x.len() < 3000 {
        let set = draw_poisson_training(&pair, &mut split_stream(7200, s));
        s += 1;
        if set.len() == t {
            pois_x.push(set.count(Label::X) as f64);
            pois_z.push(set.point(0)[0]);
        }
    }
    let (mut bin_x, mut bin_z) = (Vec::new(), Vec::new());
    for s in 0..3000u64 {
        let set = draw_binomial_training(&pair, t, &mut split_stream(7300, s)).unwrap();
        bin_x.push(set.count(Label::X) as f64);
        bin_z.push(set.point(0)[0]);
    }
    let crit = ks_critical_01(3000, 3000);
    let dx = ks_statistic(&mut pois_x, &mut bin_x);
    let dz = ks_statistic(&mut pois_z, &mut bin_z);
    pass &= dx < crit && dz < crit;
    notes.push(format!("KS counts {dx:.3}, first point {dz:.3} (crit {crit:.3})"));

    // byte-identical pipeline reruns, in-process and through the binary
    let cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    let a = table1_table(&run_table1(&cfg, None).unwrap()).to_csv();
    let b = table1_table(&run_table1(&cfg, None).unwrap()).to_csv();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let run = |sub: &str, out: &str, extra: &[&str]| {
        let status = Command::new(env!("CARGO_BIN_EXE_nnorder"))
            .args(["--config", cfg_path.to_str().unwrap(), "--out"])
            .arg(dir.path().join(out))
            .args(extra)
            .arg(sub)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(dir.path().join(out).join(format!("{sub}.csv"))).unwrap()
    };
    let c1 = run("table1", "one", &[]);
    let c2 = run("table1", "two", &["--workers", "1"]);
    let same = a == b && c1 == c2 && c1 == a.as_bytes();
    pass &= same;
    notes.push(format!("reruns {}", if same { "byte-identical" } else { "differ" }));

    outcome(pass, notes.join("; "))
}

const TINY: &str = r#"
name = "determinism"
seed = 11
n_training_sets = 6

[quadrature]
resolution = 51
design_resolution = 31

[k_grid]
start = 1
stop = 30

[bootstrap]
r = [0.5]
b = 8

[[rows]]
mu = 40
nu = 40
f = { mean = [0.5, -0.5], covariance = [1.0, 0.5, 0.5, 1.0] }
g = { mean = [-0.5, 0.5], covariance = [1.0, 0.5, 0.5, 1.0] }
"#;

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 Bayes-risk quadrature", criterion_1),
        ("2 desk-scale Err-hat at k_opt", criterion_2),
        ("3 bootstrap k selection", criterion_3),
        ("4 scaling law d=2", criterion_4),
        ("5 theory identities", criterion_5),
        ("6 expansion vs simulation", criterion_6),
        ("7 property suites", criterion_7),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.starts_with(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {tag} ({:.1}s) {}", start.elapsed().as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
