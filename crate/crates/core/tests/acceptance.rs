//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memematch::cart::{fit_tree, TreeParams};
use memematch::config::{BlankModelChoice, RunConfig};
use memematch::corpus::{generate_corpus, load_index, MANIFEST};
use memematch::evalharness::stats::{mann_whitney_u, wilcoxon_signed, PMethod};
use memematch::evalharness::{EvalReport, Task};
use memematch::hashembed::phash;
use memematch::imgcore::{resize_bilinear, to_grayscale, RasterImage};
use memematch::keypoints::{match_distances, Descriptor256};
use memematch::pipeline::{self, image_rep, load_blank_filter, BlankSummary};
use memematch::simfeat::{pair_features, FeatureOptions, ImageRep, Measure, TaskContexts};
use memematch::hashembed::EmbeddingProvider;

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

// ---------- criterion 1 ----------

/// Newest unit-test executable of the library in the deps directory.
fn lib_test_binary() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    for entry in std::fs::read_dir(&deps).ok()? {
        let path = entry.ok()?.path();
        let name = path.file_name()?.to_str()?.to_string();
        let Some(hash) = name.strip_prefix("memematch-") else {
            continue;
        };
        if hash.len() != 16 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            continue;
        }
        let t = path.metadata().ok()?.modified().ok()?;
        if best.as_ref().map_or(true, |(bt, _)| t > *bt) {
            best = Some((t, path));
        }
    }
    best.map(|b| b.1)
}

fn criterion_1() -> Outcome {
    let Some(bin) = lib_test_binary() else {
        return outcome(false, "library test binary not found; run `cargo test --workspace`");
    };
    let list = match Command::new(&bin).args(["--list", "--format", "terse"]).output() {
        Ok(o) => String::from_utf8_lossy(&o.stdout).into_owned(),
        Err(e) => return outcome(false, format!("cannot list tests: {e}")),
    };
    let count = list.lines().filter(|l| l.ends_with(": test")).count();
    let start = Instant::now();
    let run = Command::new(&bin).args(["--test-threads", "1", "-q"]).output();
    let elapsed = start.elapsed();
    let ok = run.as_ref().is_ok_and(|o| o.status.success());
    outcome(
        ok && count >= 60 && elapsed < Duration::from_secs(180),
        format!("{count} unit/property tests, all passed: {ok}, runtime {:.1}s (< 180s)", elapsed.as_secs_f64()),
    )
}

// ---------- criterion 2 ----------

fn brute_hamming(a: &Descriptor256, b: &Descriptor256) -> u32 {
    let mut d = 0;
    for i in 0..256 {
        if a.bit(i) != b.bit(i) {
            d += 1;
        }
    }
    d
}

fn oracle_2a(rng: &mut ChaCha8Rng) -> bool {
    for _ in 0..200 {
        let desc = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Descriptor256> {
            (0..n).map(|_| Descriptor256([rng.gen(), rng.gen(), rng.gen(), rng.gen()])).collect()
        };
        let nm = rng.gen_range(0..40);
        let nr = rng.gen_range(0..40);
        let m = desc(rng, nm);
        let r = desc(rng, nr);
        let want: Vec<u32> = if r.is_empty() {
            Vec::new()
        } else {
            m.iter()
                .map(|a| r.iter().map(|b| brute_hamming(a, b)).min().unwrap())
                .collect()
        };
        if match_distances(&m, &r) != want {
            return false;
        }
    }
    true
}

/// Orthonormal 2-D DCT-II by direct summation, low 8x8 block, median split.
fn oracle_phash(img: &RasterImage) -> u64 {
    let g = resize_bilinear(&to_grayscale::<f64>(img), 32, 32).unwrap();
    let n = 32.0f64;
    let mut block = Vec::with_capacity(64);
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for y in 0..32 {
                for x in 0..32 {
                    s += g.get(x, y)
                        * ((std::f64::consts::PI * (2 * y + 1) as f64 * u as f64) / (2.0 * n)).cos()
                        * ((std::f64::consts::PI * (2 * x + 1) as f64 * v as f64) / (2.0 * n)).cos();
                }
            }
            let cu = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let cv = if v == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let c = cu * cv * s;
            block.push(if c.abs() < 1e-9 { 0.0 } else { c });
        }
    }
    let mut sorted = block.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;
    block
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &c)| if c > median { acc | 1 << (63 - i) } else { acc })
}

fn oracle_2b(rng: &mut ChaCha8Rng) -> bool {
    (0..50).all(|_| {
        let (w, h) = (rng.gen_range(8..120), rng.gen_range(8..120));
        let data = (0..w * h * 3).map(|_| rng.gen()).collect();
        let img = RasterImage::new(w, h, 3, data).unwrap();
        phash(&img).0 == oracle_phash(&img)
    })
}

fn two_sided(le: u64, ge: u64, total: u64) -> f64 {
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

fn enumerate_mwu(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let u_of = |g1: &[f64], g2: &[f64]| g1.iter().map(|x| g2.iter().filter(|y| x > *y).count()).sum::<usize>();
    let observed = u_of(a, b);
    let (mut le, mut ge, mut total) = (0, 0, 0);
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (g1, g2): (Vec<f64>, Vec<f64>) = {
            let mut g1 = Vec::new();
            let mut g2 = Vec::new();
            for (i, v) in pooled.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    g1.push(*v)
                } else {
                    g2.push(*v)
                }
            }
            (g1, g2)
        };
        let u = u_of(&g1, &g2);
        total += 1;
        le += (u <= observed) as u64;
        ge += (u >= observed) as u64;
    }
    two_sided(le, ge, total)
}

fn enumerate_wilcoxon(d: &[f64]) -> f64 {
    let n = d.len();
    let mut abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let rank_of = |v: f64| abs.iter().position(|&a| a == v.abs()).unwrap() + 1;
    let w = |signs: &dyn Fn(usize) -> bool| (0..n).filter(|&i| signs(i)).map(|i| rank_of(d[i])).sum::<usize>();
    let observed = w(&|i| d[i] > 0.0);
    let (mut le, mut ge) = (0, 0);
    for mask in 0u64..1 << n {
        let s = w(&|i| mask >> i & 1 == 1);
        le += (s <= observed) as u64;
        ge += (s >= observed) as u64;
    }
    two_sided(le, ge, 1 << n)
}

fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    while v.len() < n {
        let x: f64 = rng.gen_range(-100.0..100.0);
        if !v.contains(&x) && !v.contains(&-x) && x != 0.0 {
            v.push(x);
        }
    }
    v
}

fn oracle_2c(rng: &mut ChaCha8Rng) -> bool {
    for n1 in 1..=8 {
        for n2 in 1..=8 {
            for _ in 0..2 {
                let v = distinct(rng, n1 + n2);
                let r = mann_whitney_u(&v[..n1], &v[n1..]).unwrap();
                if r.method != PMethod::Exact || (r.p_two_sided - enumerate_mwu(&v[..n1], &v[n1..])).abs() > 1e-12 {
                    return false;
                }
            }
        }
    }
    for n in 1..=12 {
        for _ in 0..5 {
            let d = distinct(rng, n);
            let zeros = vec![0.0; n];
            let r = wilcoxon_signed(&d, &zeros).unwrap();
            if r.method != PMethod::Exact || (r.p_two_sided - enumerate_wilcoxon(&d)).abs() > 1e-12 {
                return false;
            }
        }
    }
    true
}

fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

fn oracle_2d(rng: &mut ChaCha8Rng) -> bool {
    for _ in 0..100 {
        let n = rng.gen_range(4..60);
        let k = rng.gen_range(2..4);
        let x: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..25) as f64) * 0.5).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let impurity = |thr: f64| {
            let mut l = vec![0; k];
            let mut r = vec![0; k];
            for i in 0..n {
                if x[i] <= thr {
                    l[y[i]] += 1
                } else {
                    r[y[i]] += 1
                }
            }
            let (nl, nr) = (l.iter().sum::<usize>() as f64, r.iter().sum::<usize>() as f64);
            (nl * gini(&l) + nr * gini(&r)) / n as f64
        };
        let mut values = x.clone();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let best = values
            .windows(2)
            .map(|w| impurity((w[0] + w[1]) / 2.0))
            .fold(f64::INFINITY, f64::min);
        let xs: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let tree = fit_tree(&xs, &y, TreeParams::default()).unwrap();
        let root = &tree.nodes[0];
        let pure = y.iter().all(|&c| c == y[0]);
        match &root.split {
            None => {
                if !(pure || values.len() < 2) {
                    return false;
                }
            }
            Some(s) => {
                if (impurity(s.threshold) - best).abs() > 1e-12 {
                    return false;
                }
            }
        }
    }
    true
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = oracle_2a(&mut rng);
    let b = oracle_2b(&mut rng);
    let c = oracle_2c(&mut rng);
    let d = oracle_2d(&mut rng);
    outcome(
        a && b && c && d,
        format!("(a) match_distances {a}, (b) pHash {b}, (c) exact MWU/Wilcoxon {c}, (d) CART root split {d}"),
    )
}

// ---------- full runs ----------

struct Run {
    cfg: RunConfig,
    total: Duration,
    featurize: Duration,
    blank: BlankSummary,
    report: EvalReport,
}

fn full_run(dir: &Path, jobs: usize) -> memematch::Result<Run> {
    let mut cfg = RunConfig::default();
    cfg.corpus = dir.join("data");
    cfg.out = dir.join("out");
    cfg.jobs = jobs;
    let cfg2 = cfg.clone();
    pipeline::with_jobs(jobs, move || {
        let cfg = cfg2;
        let start = Instant::now();
        generate_corpus(&cfg.corpus, &cfg.corpus_params)?;
        let blank = pipeline::train_blank(&cfg, None)?;
        let t = Instant::now();
        pipeline::featurize(&cfg, false)?;
        let featurize = t.elapsed();
        let report = pipeline::evaluate(&cfg)?;
        Ok(Run {
            cfg,
            total: start.elapsed(),
            featurize,
            blank,
            report,
        })
    })?
}

// ---------- criterion 3 ----------

fn criterion_3(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let index = load_index(&cfg.corpus).unwrap();
    let filter = load_blank_filter(&cfg.out.join(pipeline::BLANK_MODEL_FILE)).unwrap();
    let provider = EmbeddingProvider::BuiltIn;
    let reps: Vec<ImageRep> = index
        .iter()
        .map(|row| image_rep(&cfg.corpus, &row.path, cfg, &provider, &filter).unwrap())
        .collect();
    let pool: Vec<&ImageRep> = reps.iter().collect();
    let sample = &pool[..100];
    let ctx = TaskContexts::build(sample, &pool).unwrap();
    let opts = FeatureOptions::default();
    let mut failures = 0;
    let mut single = 0;
    for m in sample {
        let f = |measure| pair_features("self", measure, m, m, &ctx, &opts).unwrap().features;
        let mut ok = true;
        for w in [Measure::EmbedW, Measure::HashW] {
            ok &= f(w) == vec![0.0, 1.0];
        }
        ok &= match_distances(&m.descriptors, &m.descriptors).iter().all(|&d| d == 0);
        let n = m.segments.len() as f64;
        for s in [Measure::EmbedS, Measure::HashS] {
            let v = f(s);
            if m.segments.len() == 1 {
                ok &= v == vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
            } else {
                // distinct panels of one image are not at distance 0 from each other
                ok &= v[1] == 0.0 && v[4] == 1.0 && v[6] == n && v[7] == n;
            }
        }
        single += (m.segments.len() == 1) as usize;
        failures += (!ok) as usize;
    }
    outcome(
        failures == 0,
        format!("100 reference images, {failures} failures ({single} single-segment, full literal vector)"),
    )
}

// ---------- criterion 4 ----------

fn criterion_4(report: &EvalReport) -> [Outcome; 3] {
    let d = |t, m| report.distribution(t, m).unwrap();
    let mut a_ok = true;
    let mut a_detail = Vec::new();
    for m in Measure::ALL {
        let (tm, mm) = (d(Task::Tm, m).mean, d(Task::Mm, m).mean);
        let p = report.mann_whitney.iter().find(|e| e.measure == m).map_or(1.0, |e| e.p_value);
        a_ok &= tm > mm && p < 0.01;
        a_detail.push(format!("{m} TM {tm:.3} > MM {mm:.3} p={p:.1e}"));
    }
    let mut b_ok = true;
    let mut b_detail = Vec::new();
    for (s, w) in [(Measure::EmbedS, Measure::EmbedW), (Measure::HashS, Measure::HashW)] {
        let (ms, mw) = (d(Task::Mm, s).mean, d(Task::Mm, w).mean);
        let p = report.wilcoxon.iter().find(|e| e.a == s && e.b == w).map_or(1.0, |e| e.p_value);
        b_ok &= ms > mw && p < 0.05;
        b_detail.push(format!("{s} {ms:.3} > {w} {mw:.3} p={p:.1e}"));
    }
    let top = d(Task::Tm, Measure::EmbedW).median;
    let mut c_detail = Vec::new();
    let mut c_ok = true;
    for m in Measure::ALL {
        let med = d(Task::Tm, m).median;
        c_ok &= top >= med;
        c_detail.push(format!("{m} {med:.3}"));
    }
    [
        outcome(a_ok, a_detail.join("; ")),
        outcome(b_ok, b_detail.join("; ")),
        outcome(c_ok, format!("TM medians: {}", c_detail.join(", "))),
    ]
}

// ---------- criterion 6 / 7 ----------

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn artifacts(run: &Run) -> Vec<PathBuf> {
    let o = &run.cfg.out;
    vec![
        run.cfg.corpus.join(MANIFEST),
        o.join(pipeline::FEATURES_FILE),
        o.join("features.jsonl.meta.json"),
        o.join(pipeline::DESCRIPTORS_FILE),
        o.join(pipeline::BLANK_MODEL_FILE),
        o.join(pipeline::REPORT_JSON),
    ]
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("1 (invariant suite)", criterion_1());
    report("2 (oracle equivalences)", criterion_2());

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let run_a = full_run(dir_a.path(), 1).expect("single-threaded pipeline run");
    let run_b = full_run(dir_b.path(), 8).expect("8-worker pipeline run");
    assert_eq!(run_a.cfg.blank_model, BlankModelChoice::Auto);

    report("3 (self-similarity)", criterion_3(&run_a));
    let [a, b, c] = criterion_4(&run_a.report);
    report("4a (TM above MM, MWU p < 0.01)", a);
    report("4b (segment above whole on MM, Wilcoxon p < 0.05)", b);
    report("4c (Embed-W top median on TM)", c);
    report(
        "5 (blank filter non-blank precision >= 0.85)",
        outcome(
            run_a.blank.cv_precision >= 0.85,
            format!(
                "{} segments, CV non-blank precision {:.4} at alpha {:.4}",
                run_a.blank.segments, run_a.blank.cv_precision, run_a.blank.alpha
            ),
        ),
    );
    let identical: Vec<bool> = artifacts(&run_a)
        .iter()
        .zip(artifacts(&run_b))
        .map(|(x, y)| same_bytes(x, &y))
        .collect();
    let all_same = identical.iter().all(|&s| s);
    report(
        "6 (determinism)",
        outcome(all_same, format!("manifest, caches, model and report byte-identical across runs: {identical:?}")),
    );
    let speedup = run_a.featurize.as_secs_f64() / run_b.featurize.as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    report(
        "7 (performance envelope)",
        outcome(
            run_a.total < Duration::from_secs(900) && speedup >= 4.0 && all_same,
            format!(
                "single-threaded pipeline {:.1}s (< 900s); featurize 1 worker {:.1}s vs 8 workers {:.1}s, speedup {speedup:.2}x (>= 4x) on {cores} logical core(s); identical results {all_same}",
                run_a.total.as_secs_f64(),
                run_a.featurize.as_secs_f64(),
                run_b.featurize.as_secs_f64()
            ),
        ),
    );

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
