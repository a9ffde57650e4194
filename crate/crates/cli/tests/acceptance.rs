//! One test per acceptance criterion. Each writes a single PASS/FAIL line to
//! stderr (uncaptured) before asserting.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noisylab::correction::{
    original_pencil_loss, reverse_ce, soft_label_gradient, BatchView, NetworkLoss, SoftLabelTable,
};
use noisylab::dataio::{write_ric, RawImage, RicClass};
use noisylab::embeddings::{MatrixKind, SimilarityMatrix};
use noisylab::filtering::{bimodal_fixture, filter, fit_gmm2, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use noisylab::math::softmax;
use noisylab::metrics::{accuracy, cumulative_difference, imbalanced_fixture, map};
use noisylab::noisegen::{closed_noise_rate, generate, log_closed_noise_rate, solve_tau_closed, NoisySpec};
use noisylab::trainer::{ablation_table, blobs_fixture, BlobsConfig, Method, Protocol, Subset};

use common::*;

fn report(name: &str, ok: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{name}: {detail}");
}

fn random_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Fourth-order central difference.
fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn count_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    let mut done = 0;
    while done < 50 {
        let n = rng.random_range(2..=10);
        let m = rng.random_range(1..=6);
        let k = 10 * rng.random_range(1..=5);
        let xk = rng.random_range(0..=k / 2);
        let yk = rng.random_range(0..=k / 2);
        let spec = NoisySpec {
            x: xk as f64 / k as f64,
            y: yk as f64 / k as f64,
            n,
            m,
            k,
            tau_open: 0.1,
            seed: rng.random(),
        };
        if spec.validate().is_err() {
            continue;
        }
        let base = random_vectors(n, 6, &mut rng);
        let open = random_vectors(m, 6, &mut rng);
        let closed = SimilarityMatrix::from_vectors(&base, &base, MatrixKind::Closed).unwrap();
        let open_sim = SimilarityMatrix::from_vectors(&open, &base, MatrixKind::Open).unwrap();
        let ds = generate(&spec, &closed, Some(&open_sim), &vec![2 * k; n], &vec![n * k; m]).unwrap();
        let c = ds.counts();
        let nk = n * k;
        let expect = (nk - xk * n - yk * n, xk * n, yk * n);
        if (c.clean, c.open, c.closed) != expect || ds.open_counts_per_class().iter().any(|&o| o != xk) {
            failures.push(format!("{spec:?}"));
        }
        done += 1;
    }
    let t = start.elapsed();
    report(
        "count identities",
        failures.is_empty() && t < Duration::from_secs(10),
        &format!("50 specs, {} mismatches, {:.2?} (< 10 s)", failures.len(), t),
    );
}

#[test]
fn temperature_search_and_monotonicity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for i in 0..50 {
        let n = [5, 10, 20][i % 3];
        let v = random_vectors(n, 8, &mut rng);
        let closed = SimilarityMatrix::from_vectors(&v, &v, MatrixKind::Closed).unwrap();
        let x = rng.random_range(0.0..0.5);
        let y = rng.random_range(0.02..(1.0 - x) * (1.0 - 1.0 / n as f64) * 0.95);
        let target = y / (1.0 - x);
        let tau = solve_tau_closed(&closed, target, 1e-6).unwrap();
        worst = worst.max((closed_noise_rate(&closed, tau).unwrap() - target).abs());

        let grid: Vec<f64> = (0..100).map(|g| 10f64.powf(-3.0 + 6.0 * g as f64 / 99.0)).collect();
        let logs: Vec<f64> = grid
            .iter()
            .map(|&t| log_closed_noise_rate(&closed, t).unwrap())
            .collect();
        let rates: Vec<f64> = grid.iter().map(|&t| closed_noise_rate(&closed, t).unwrap()).collect();
        violations += logs
            .windows(2)
            .filter(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
            .count();
        violations += rates.windows(2).filter(|w| w[1] < w[0]).count();
    }
    let t = start.elapsed();
    report(
        "temperature search",
        worst <= 1e-4 && violations == 0 && t < Duration::from_secs(5),
        &format!("max |r - target| = {worst:.2e} (<= 1e-4), {violations} monotonicity violations on a 100-point grid, {t:.2?} (< 5 s)"),
    );
}

#[test]
fn gradient_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_soft = 0.0f64;
    let mut worst_net = 0.0f64;
    for _ in 0..100 {
        let c = rng.random_range(2..=20);
        let f = softmax(&(0..c).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>());
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();

        // Soft-label logits: d/dz of -sum f ln softmax(z).
        let g = soft_label_gradient(&f, &z);
        for i in 0..c {
            let num = fd(
                |t| {
                    let mut zz = z.clone();
                    zz[i] = t;
                    reverse_ce(&f, &softmax(&zz))
                },
                z[i],
                1e-3,
            );
            worst_soft = worst_soft.max(rel(g[i], num));
        }

        // Network logits s with f = softmax(s), soft label fixed.
        let s: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let table = SoftLabelTable::from_predictions(&[0], &[softmax(&z)]).unwrap();
        let batch = BatchView::new(vec![0], vec![softmax(&s)], vec![0]).unwrap();
        let NetworkLoss { grad_logits, .. } = noisylab::correction::network_loss_and_grad(&batch, &table).unwrap();
        let y = table.soft_label(0);
        for i in 0..c {
            let num = fd(
                |t| {
                    let mut ss = s.clone();
                    ss[i] = t;
                    reverse_ce(&softmax(&ss), &y)
                },
                s[i],
                1e-3,
            );
            worst_net = worst_net.max(rel(grad_logits[0][i], num));
        }
    }
    let t = start.elapsed();
    report(
        "gradient oracles",
        worst_soft <= 1e-5 && worst_net <= 1e-5 && t < Duration::from_secs(5),
        &format!("max rel err soft {worst_soft:.2e}, network {worst_net:.2e} (<= 1e-5), {t:.2?} (< 5 s)"),
    );
}

#[test]
fn batch_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = 7;
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..c)).collect();
    let preds: Vec<Vec<f64>> = (0..8)
        .map(|_| softmax(&(0..c).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>()))
        .collect();
    let mut whole = SoftLabelTable::from_hard_labels(&labels, c, 10.0).unwrap();
    let mut single = whole.clone();
    let all: Vec<usize> = (0..8).collect();
    for _ in 0..3 {
        whole
            .update(
                &BatchView::new(all.clone(), preds.clone(), labels.clone()).unwrap(),
                0.5,
            )
            .unwrap();
        for j in 0..8 {
            single
                .update(
                    &BatchView::new(vec![j], vec![preds[j].clone()], vec![labels[j]]).unwrap(),
                    0.5,
                )
                .unwrap();
        }
    }
    let batch_diff = (0..8)
        .flat_map(|j| {
            whole
                .logits(j)
                .iter()
                .zip(single.logits(j))
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);

    let mut eq_diff = 0.0f64;
    for _ in 0..50 {
        let c = rng.random_range(2..=20);
        let f = softmax(&(0..c).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>());
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y_hat = rng.random_range(0..c);
        let g = soft_label_gradient(&f, &z);
        for i in 0..c {
            let num = fd(
                |t| {
                    let mut zz = z.clone();
                    zz[i] = t;
                    original_pencil_loss(&f, &softmax(&zz), y_hat, 0.0, 1.0, c).unwrap()
                },
                z[i],
                1e-3,
            );
            eq_diff = eq_diff.max((num - g[i] / c as f64).abs());
        }
    }
    report(
        "batch semantics",
        batch_diff <= 1e-12 && eq_diff <= 1e-8,
        &format!("B=1 vs B=8 max diff {batch_diff:.2e} (<= 1e-12); original loss at alpha=0, beta=1 vs reverse CE / c max diff {eq_diff:.2e} (<= 1e-8)"),
    );
}

#[test]
fn mixture_filtering() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut decreases = 0;
    let mut worst_step = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(20..400);
        let split = rng.random_range(0.1..0.9);
        let gap = rng.random_range(0.0..3.0);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let base = if rng.random::<f64>() < split { 0.0 } else { gap };
                base + rng.random_range(-0.5..0.5) * rng.random_range(0.1..1.0)
            })
            .collect();
        let model = fit_gmm2(&values, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        for w in model.log_likelihood.windows(2) {
            worst_step = worst_step.min(w[1] - w[0]);
            decreases += usize::from(w[1] < w[0] - 1e-9);
        }
    }
    let (values, is_low) = bimodal_fixture(2000, 6);
    let model = fit_gmm2(&values, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
    let d = filter(&values, &model, 0.5).unwrap();
    let low = is_low.iter().filter(|&&l| l).count() as f64;
    let high = is_low.len() as f64 - low;
    let kept_low = (0..values.len()).filter(|&j| is_low[j] && d.keep[j]).count() as f64 / low;
    let dropped_high = (0..values.len()).filter(|&j| !is_low[j] && !d.keep[j]).count() as f64 / high;
    report(
        "mixture filtering",
        decreases == 0 && kept_low >= 0.95 && dropped_high >= 0.95,
        &format!("{decreases} log-likelihood decreases beyond 1e-9 over 20 fits (most negative step {worst_step:.1e}); bimodal fixture keeps {:.1}% low, drops {:.1}% high (>= 95%)", 100.0 * kept_low, 100.0 * dropped_high),
    );
}

#[test]
fn map_versus_accuracy() {
    let (a, b) = imbalanced_fixture();
    let (acc_a, acc_b) = (accuracy(&a).unwrap(), accuracy(&b).unwrap());
    let (map_a, map_b) = (map(&a).unwrap().map, map(&b).unwrap().map);
    let cd = cumulative_difference(&a, &b, &a.class_sizes()).unwrap();
    let n = a.len() as f64;
    let expected_total = (n * (acc_a - acc_b)).round() as i64;
    let exact = cd.total() == expected_total && (n * (acc_a - acc_b) - expected_total as f64).abs() < 1e-9;
    let gap_acc = 100.0 * (acc_a - acc_b).abs();
    let gap_map = 100.0 * (map_b - map_a);
    report(
        "mAP vs accuracy",
        gap_acc <= 0.1 && gap_map >= 2.0 && exact,
        &format!(
            "accuracy A {:.2} B {:.2} (gap {gap_acc:.2} <= 0.1), mAP A {:.2} B {:.2} (B - A = {gap_map:.2} >= 2), curve ends at {} = N*dAcc",
            100.0 * acc_a,
            100.0 * acc_b,
            100.0 * map_a,
            100.0 * map_b,
            cd.total()
        ),
    );
}

#[test]
fn ablation_ordering() {
    let start = Instant::now();
    let fixture = blobs_fixture(&BlobsConfig::default()).unwrap();
    let seeds = [0, 1, 2, 3, 4];
    let rows = ablation_table(&fixture, &Protocol::default(), &seeds).unwrap();
    let t = start.elapsed();
    let clean_only = Subset {
        clean: true,
        open: false,
        closed: false,
    };
    let find = |keep: Subset, method: Method| {
        rows.iter()
            .find(|r| r.keep == keep && r.method == method)
            .expect("row present")
            .mean
    };
    let ff0 = find(Subset::ALL, Method::FilterCorrect { p_e: 0.0 });
    let ff = find(Subset::ALL, Method::FilterCorrect { p_e: 0.5 });
    let clean = find(clean_only, Method::PlainCe);
    let noisy = find(Subset::ALL, Method::PlainCe);
    let recovered = (ff - noisy) / (clean - noisy);
    let ok =
        ff > ff0 && clean >= ff && ff >= noisy && recovered >= 0.5 && t < Duration::from_secs(600 * seeds.len() as u64);
    report(
        "ablation ordering",
        ok,
        &format!(
            "p_e=0.5 {:.2} vs p_e=0 {:.2}; clean CE {:.2} >= F&F {:.2} >= all CE {:.2}; recovered {:.0}% of the gap (>= 50%); {:.1?} for 5 seeds",
            100.0 * ff,
            100.0 * ff0,
            100.0 * clean,
            100.0 * ff,
            100.0 * noisy,
            100.0 * recovered,
            t
        ),
    );
}

#[test]
fn cli_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let g = GenInputs::write(root, 6, 4, 40, 40);
    let ric = root.join("pool.ric");
    let classes: Vec<RicClass> = (0..3u32)
        .map(|c| RicClass {
            class_id: c,
            images: (0..4).map(|i| RawImage::solid(c as u8, i, 7)).collect(),
        })
        .collect();
    std::fs::write(&ric, write_ric(&classes)).unwrap();
    let values = root.join("values.txt");
    let (v, _) = bimodal_fixture(300, 1);
    std::fs::write(&values, v.iter().map(|x| format!("{x}\n")).collect::<String>()).unwrap();

    let out = |name: &str| root.join(name);
    let mut runs: Vec<(String, Vec<String>)> = Vec::new();
    let s = |x: &std::path::Path| p(x).to_string();
    let mut gen = g.args(&out("gen")).iter().map(|a| a.to_string()).collect::<Vec<_>>();
    gen.extend(["--x", "0.25", "--y", "0.25", "--k", "20"].map(String::from));
    runs.push(("gen".into(), gen));
    runs.push((
        "convert-check".into(),
        ["convert-check", "--input", &s(&ric), "--out-dir", &s(&out("check"))]
            .map(String::from)
            .to_vec(),
    ));
    let mut train = ["train", "--pe", "0.5", "--out-dir", &s(&out("train"))]
        .map(String::from)
        .to_vec();
    train.extend(QUICK_PROTOCOL.iter().map(|a| a.to_string()));
    runs.push(("train".into(), train));
    let scores = out("train").join("test_scores.json");
    let labels = out("train").join("test_labels.json");
    runs.push((
        "eval".into(),
        [
            "eval",
            "--pred",
            &s(&scores),
            "--pred",
            &s(&scores),
            "--labels",
            &s(&labels),
            "--out-dir",
            &s(&out("eval")),
        ]
        .map(String::from)
        .to_vec(),
    ));
    let mut ablate = ["ablate", "--seeds", "1", "--out-dir", &s(&out("ablate"))]
        .map(String::from)
        .to_vec();
    ablate.extend(QUICK_PROTOCOL.iter().map(|a| a.to_string()));
    runs.push(("ablate".into(), ablate));
    runs.push((
        "gmm-inspect".into(),
        ["gmm-inspect", "--input", &s(&values), "--out-dir", &s(&out("gmm"))]
            .map(String::from)
            .to_vec(),
    ));

    let mut failures = Vec::new();
    for (name, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let res = run(&args);
        if code(&res) != 0 {
            failures.push(format!("{name}: exit {} {}", code(&res), stderr(&res)));
            continue;
        }
        let first = std::path::PathBuf::from(args[args.iter().position(|a| *a == "--out-dir").unwrap() + 1]);
        if let Err(e) = rerun_matches(&first, &out(&format!("{name}-rerun"))) {
            failures.push(format!("{name}: {e}"));
        }
    }
    report(
        "CLI determinism",
        failures.is_empty(),
        &format!(
            "{} of 6 commands rerun byte-identically from run.json {failures:?}",
            6 - failures.len()
        ),
    );
}
