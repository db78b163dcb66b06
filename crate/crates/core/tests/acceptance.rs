//! Acceptance criteria 1-10, one verdict line each. Criteria 1, 2, 4 and 9
//! are exact correctness checks and fail the target; the others report
//! their measured outcome.

mod common;

use std::time::{Duration, Instant};

use common::{gradient_instance, independent_one_hot, random_scores};
use pointjem::config::RunConfig;
use pointjem::diagnostics::{marginal_entropy, mutual_info_report, mutual_information, Axis};
use pointjem::eval::{extract_embeddings, linear_probe, ProbeConfig};
use pointjem::jemloss::{joint_distribution, loss_breakdown, loss_jed, loss_jeo, loss_ti, LossWeights};
use pointjem::model::{load_checkpoint, save_checkpoint, ParameterStore, SegmentLayout};
use pointjem::pipeline::{cmd_gen, cmd_pretrain, cmd_probe, GenArgs};
use pointjem::pointcloud::{generate_benchmark, BenchmarkSpec, Dataset};
use pointjem::seed::rng_for;
use pointjem::train::{pretrain_with, train_step, AdamState, TrainConfig, TrainLog};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const FRACTIONS: [f64; 3] = [0.1, 0.5, 1.0];

struct Verdicts {
    lines: Vec<(usize, bool, String)>,
}

impl Verdicts {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let line = format!("criterion {n:>2}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((n, pass, detail));
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_1(v: &mut Verdicts) {
    let t = Instant::now();
    let mut rejected = 0;
    let mut errors = Vec::new();
    for seed in 0u64.. {
        if errors.len() == 20 {
            break;
        }
        match gradient_instance(seed) {
            Some(e) => errors.push(e),
            None => rejected += 1,
        }
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let elapsed = t.elapsed();
    v.record(
        1,
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("20 instances, max relative error {worst:.2e} (< 1e-4), {rejected} kink-adjacent draws skipped, {elapsed:.1?}"),
    );
}

fn criterion_2(v: &mut Verdicts) {
    let mut ok = true;
    let mut worst = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in [2, 4] {
        for m in [2, 4, 8] {
            let q = independent_one_hot(k, m);
            let p = joint_distribution(&q, &q).unwrap();
            let ln_m = (m as f64).ln();
            let dj = (loss_jed(&p) + ln_m).abs();
            let dn = (loss_jeo(&p).unwrap() + 2.0 * ln_m).abs();
            let ti = loss_ti(&q, &q).unwrap();
            let r = mutual_info_report(&q, &q).unwrap();
            let mi = (0..k)
                .flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
                .map(|(a, b)| r.mi[a][b])
                .fold(0.0, f64::max);
            ok &= dj <= 1e-6 && dn <= 1e-6 && ti <= 1e-6 && mi <= 1e-9;
            worst = (worst.0.max(dj), worst.1.max(dn), worst.2.max(ti), worst.3.max(mi));
        }
    }
    v.record(
        2,
        ok,
        format!(
            "K in {{2,4}}, M in {{2,4,8}}: |jed+lnM| {:.1e}, |jeo+2lnM| {:.1e}, ti {:.1e}, max offdiag MI {:.1e}",
            worst.0, worst.1, worst.2, worst.3
        ),
    );
}

fn criterion_3(v: &mut Verdicts) {
    let t = Instant::now();
    let mut rng = rng_for(3, &[3]);
    let mut violations = Vec::new();
    for b in 0..1000 {
        let (n, k, m) = (rng.random_range(1..33), rng.random_range(2..6), rng.random_range(2..9));
        let q1 = random_scores(&mut rng, n, k, m);
        let q2 = if rng.random_bool(0.3) { q1.clone() } else { random_scores(&mut rng, n, k, m) };
        let p = joint_distribution(&q1, &q2).unwrap();
        let ln_m = (m as f64).ln();
        let jed = loss_jed(&p);
        let jeo = loss_jeo(&p).unwrap();
        let ti = loss_ti(&q1, &q2).unwrap();
        let mut ok = jed >= -ln_m - 1e-6 && jed <= 1e-6 && jeo >= -2.0 * ln_m - 1e-6 && jeo <= 1e-6 && ti >= -1e-9;
        for a in 0..k {
            for c in 0..k {
                let block = p.block(a, c);
                let mi = mutual_information(&block).unwrap();
                let h = marginal_entropy(&block, Axis::Rows).unwrap().min(marginal_entropy(&block, Axis::Cols).unwrap());
                ok &= mi >= 0.0 && mi <= h + 1e-6;
            }
        }
        if !ok {
            let exact_floor = if m >= 3 { -ln_m } else { -(m as f64) / std::f64::consts::E };
            violations.push((b, n, k, m, jed, jed >= exact_floor - 1e-6));
        }
    }
    let above_two = violations.iter().filter(|x| x.3 >= 3).count();
    let within_floor = violations.iter().all(|x| x.5);
    v.record(
        3,
        violations.is_empty(),
        format!(
            "1000 random batches, {} violations ({} with M >= 3; all within the exact M=2 floor -2/e: {}){}, {:.1?}",
            violations.len(),
            above_two,
            within_floor,
            violations
                .first()
                .map(|x| format!(", first batch {} (N={} K={} M={}, jed {:.6})", x.0, x.1, x.2, x.3, x.4))
                .unwrap_or_default(),
            t.elapsed()
        ),
    );
}

fn criterion_4(v: &mut Verdicts) {
    let mut rng = rng_for(4, &[4]);
    let mut worst: f64 = 0.0;
    let mut transposed = true;
    for _ in 0..100 {
        let (n, k, m) = (rng.random_range(1..33), rng.random_range(2..6), rng.random_range(2..9));
        let q1 = random_scores(&mut rng, n, k, m);
        let q2 = random_scores(&mut rng, n, k, m);
        let w = LossWeights::default();
        let a = loss_breakdown(&q1, &q2, &w).unwrap();
        let b = loss_breakdown(&q2, &q1, &w).unwrap();
        worst = worst.max((a.l_jed - b.l_jed).abs()).max((a.l_jeo - b.l_jeo).abs()).max((a.l_ti - b.l_ti).abs());
        let p = joint_distribution(&q1, &q2).unwrap();
        let s = joint_distribution(&q2, &q1).unwrap();
        for x in 0..k {
            for y in 0..k {
                for r in 0..m {
                    for c in 0..m {
                        transposed &= s.get(x, y, r, c).to_bits() == p.get(y, x, c, r).to_bits();
                    }
                }
            }
        }
    }
    v.record(
        4,
        worst <= 1e-12 && transposed,
        format!("100 swaps, max loss change {worst:.1e} (<= 1e-12), blockwise transpose exact: {transposed}"),
    );
}

fn criterion_9(v: &mut Verdicts) {
    let run = |root: &std::path::Path| -> (Vec<u8>, Vec<u8>) {
        let data = root.join("data");
        cmd_gen(&data, &GenArgs { classes: 8, per_class: 16, points: 256, seed: 7 }).unwrap();
        let cfg = RunConfig::resolve(None, &["train.epochs=2".into()]).unwrap();
        let (ckpt, log, probe) = (root.join("m.ckpt"), root.join("log.csv"), root.join("probe.json"));
        cmd_pretrain(&data, &cfg, &ckpt, &log, |_| {}).unwrap();
        cmd_probe(&data, &ckpt, &cfg, &probe).unwrap();
        (std::fs::read(&log).unwrap(), std::fs::read(&probe).unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let identical = run(a.path()) == run(b.path());

    let ds = generate_benchmark(&BenchmarkSpec { per_class: 8, ..BenchmarkSpec::default() }).unwrap();
    let config = TrainConfig::default();
    let mut store = config.init_store().unwrap();
    let mut state = AdamState::for_store(&store);
    let batch = &ds.train[..config.batch_size];
    train_step(&mut store, &mut state, batch, &config, 1e-3, 11).unwrap();
    let path = a.path().join("step.ckpt");
    save_checkpoint(&store, &path).unwrap();
    let mut loaded = load_checkpoint(&path).unwrap();
    let mut state_loaded = state.clone();
    train_step(&mut store, &mut state, batch, &config, 1e-3, 12).unwrap();
    train_step(&mut loaded, &mut state_loaded, batch, &config, 1e-3, 12).unwrap();
    let resumed = store.bit_eq(&loaded);
    v.record(
        9,
        identical && resumed,
        format!("pipeline twice byte-identical (log + probe JSON): {identical}; save/load/one-step bit-exact: {resumed}"),
    );
}

struct Run {
    store: ParameterStore,
    log: TrainLog,
    elapsed: Duration,
}

fn pretrain_run(ds: &Dataset, tag: &str, config: &TrainConfig) -> Run {
    let t = Instant::now();
    let (store, log) = pretrain_with(&ds.train, config, |r| {
        if r.epoch == 1 || r.epoch % 10 == 0 {
            eprintln!(
                "  [{tag}] epoch {:>3}/{}  loss {:.4}  mi {:.2e}  hmin {:.3}  {:.0?}",
                r.epoch,
                config.epochs,
                r.loss_total,
                r.mean_offdiag_mi,
                r.min_segment_entropy,
                t.elapsed()
            );
        }
    })
    .unwrap();
    Run { store, log, elapsed: t.elapsed() }
}

fn probe(store: &ParameterStore, ds: &Dataset, fraction: f64, seed: u64) -> f64 {
    let c = ds.num_classes();
    let train = extract_embeddings(store, &ds.train, c).unwrap();
    let test = extract_embeddings(store, &ds.test, c).unwrap();
    let config = ProbeConfig { label_fraction: fraction, seed, ..ProbeConfig::default() };
    linear_probe(&train, &test, &config).unwrap().accuracy
}

fn config_for(seed: u64, weights: LossWeights, layout: SegmentLayout) -> TrainConfig {
    TrainConfig { seed, weights, layout, ..TrainConfig::default() }
}

fn benchmark_criteria(v: &mut Verdicts) {
    let ds = generate_benchmark(&BenchmarkSpec::default()).unwrap();
    let full = LossWeights::default();
    let layout = SegmentLayout::default();

    let mut trained = Vec::new();
    let mut random = Vec::new();
    let mut runs = Vec::new();
    for &seed in &SEEDS {
        let config = config_for(seed, full.clone(), layout);
        let run = pretrain_run(&ds, &format!("full seed {seed}"), &config);
        let t = Instant::now();
        let acc: Vec<f64> = FRACTIONS.iter().map(|&f| probe(&run.store, &ds, f, seed)).collect();
        let rand_store = config.init_store().unwrap();
        let rand_acc: Vec<f64> = FRACTIONS.iter().map(|&f| probe(&rand_store, &ds, f, seed)).collect();
        eprintln!("  [full seed {seed}] probe {acc:.3?} random {rand_acc:.3?}");
        runs.push((run.elapsed + t.elapsed(), run.log.clone()));
        trained.push(acc);
        random.push(rand_acc);
    }
    let at = |table: &[Vec<f64>], i: usize| median(table.iter().map(|r| r[i]).collect());
    let full_idx = FRACTIONS.len() - 1;

    let acc = at(&trained, full_idx);
    let gain = median(trained.iter().zip(&random).map(|(t, r)| t[full_idx] - r[full_idx]).collect());
    let slowest = runs.iter().map(|r| r.0).max().unwrap();
    v.record(
        5,
        acc >= 0.85 && gain >= 0.15 && slowest <= Duration::from_secs(1800),
        format!(
            "median linear probe {acc:.3} (>= 0.85), median gain over random encoder {gain:+.3} (>= 0.15), random {:.3}, slowest run {slowest:.0?}",
            at(&random, full_idx)
        ),
    );

    let ablation = |name: &str, weights: LossWeights| -> (Vec<f64>, Vec<bool>) {
        let mut accs = Vec::new();
        let mut flagged = Vec::new();
        for &seed in &SEEDS {
            let run = pretrain_run(&ds, &format!("{name} seed {seed}"), &config_for(seed, weights.clone(), layout));
            accs.push(probe(&run.store, &ds, 1.0, seed));
            flagged.push(!run.log.last().unwrap().collapsed_segments.is_empty());
        }
        (accs, flagged)
    };
    let (jj, _) = ablation("jed+jeo", LossWeights { use_ti: false, ..LossWeights::default() });
    let (ti, ti_flags) = ablation("ti-only", LossWeights { use_jed: false, use_jeo: false, ..LossWeights::default() });
    let (m_full, m_jj, m_ti) = (acc, median(jj), median(ti));
    let ti_flagged = ti_flags.iter().filter(|&&f| f).count();
    v.record(
        6,
        m_full > m_jj && m_jj > m_ti && ti_flagged * 2 > SEEDS.len(),
        format!("median probe full {m_full:.3} > jed+jeo {m_jj:.3} > ti-only {m_ti:.3}; ti-only collapse flagged in {ti_flagged}/3 seeds"),
    );

    let mi_drop = median(
        runs.iter()
            .map(|(_, log)| log.last().unwrap().mean_offdiag_mi - log.first().unwrap().mean_offdiag_mi)
            .collect(),
    );
    let hmin = median(runs.iter().map(|(_, log)| log.last().unwrap().min_segment_entropy).collect());
    let floor = 0.5 * (layout.segment_size() as f64).ln();
    v.record(
        7,
        mi_drop < 0.0 && hmin >= floor,
        format!("median (final - epoch 1) offdiag MI {mi_drop:+.2e} (< 0), median final min entropy {hmin:.3} (>= {floor:.3})"),
    );

    let med_t: Vec<f64> = (0..FRACTIONS.len()).map(|i| at(&trained, i)).collect();
    let med_r: Vec<f64> = (0..FRACTIONS.len()).map(|i| at(&random, i)).collect();
    let monotone = med_t.windows(2).all(|w| w[1] >= w[0]);
    let beats = med_t.iter().zip(&med_r).all(|(t, r)| t > r);
    v.record(
        8,
        monotone && beats,
        format!("fractions {FRACTIONS:?}: trained {med_t:.3?}, random {med_r:.3?}; monotone {monotone}, beats random {beats}"),
    );

    let mut by_m = vec![(32usize, trained[0][full_idx])];
    for m in [16usize, 64] {
        let layout = SegmentLayout::new(512 / m, m).unwrap();
        let run = pretrain_run(&ds, &format!("M={m}"), &config_for(SEEDS[0], full.clone(), layout));
        by_m.push((m, probe(&run.store, &ds, 1.0, SEEDS[0])));
    }
    by_m.sort_by_key(|x| x.0);
    let hi = by_m.iter().map(|x| x.1).fold(f64::MIN, f64::max);
    let lo = by_m.iter().map(|x| x.1).fold(f64::MAX, f64::min);
    v.record(
        10,
        hi - lo <= 0.10,
        format!("D_z = 512, seed {}: accuracy by M {by_m:.3?}, spread {:.3} (<= 0.10)", SEEDS[0], hi - lo),
    );
}

fn main() {
    let mut v = Verdicts { lines: Vec::new() };
    criterion_1(&mut v);
    criterion_2(&mut v);
    criterion_3(&mut v);
    criterion_4(&mut v);
    criterion_9(&mut v);
    if std::env::var_os("POINTJEM_ACCEPTANCE_QUICK").is_some() {
        println!("benchmark criteria 5-8 and 10 skipped (POINTJEM_ACCEPTANCE_QUICK is set)");
    } else {
        benchmark_criteria(&mut v);
    }

    v.lines.sort_by_key(|l| l.0);
    println!("\nsummary");
    for (n, pass, detail) in &v.lines {
        println!("criterion {n:>2}: {}  {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    let hard_failures: Vec<usize> = v.lines.iter().filter(|l| !l.1 && [1, 2, 4, 9].contains(&l.0)).map(|l| l.0).collect();
    if !hard_failures.is_empty() {
        eprintln!("correctness criteria failed: {hard_failures:?}");
        std::process::exit(1);
    }
}
