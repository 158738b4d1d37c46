//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{all_configs, max_abs_diff, random_array, randomize, shapes_net, toy_arch, ReferenceNet};
use ecmt_core::autograd::Graph;
use ecmt_core::data::{calibration_batches, gen_synthetic_mtl, split, DatasetSpec, HoldoutSplit, MtlDataset, SplitSpec, TrainSplit};
use ecmt_core::evaluation::*;
use ecmt_core::hv::{hypervolume_exact, hypervolume_mc};
use ecmt_core::predictor::*;
use ecmt_core::search::*;
use ecmt_core::slimnet::*;
use ecmt_core::train::*;
use ecmt_core::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUITE_SAMPLES: usize = 2000;
const VALIDATION_SAMPLES: usize = 500;
const PIPELINE_SEEDS: [u64; 3] = [20, 21, 22];
const KD_LAMBDA: f64 = 20.0;

type Check = (bool, String);

struct Suite {
    train: TrainSplit,
    holdout: HoldoutSplit,
    validation: MtlDataset,
    calib: Vec<Array>,
}

struct Run {
    seed: u64,
    net: SuperNet,
    kd_max: f64,
    elapsed: Duration,
}

fn suite() -> Suite {
    let spec = DatasetSpec::shapes(SUITE_SAMPLES);
    let ds = gen_synthetic_mtl(&spec, 1).unwrap();
    let (train, holdout) = split(&ds, &SplitSpec { train_fraction: 0.9, seed: 2 }).unwrap();
    let validation = gen_synthetic_mtl(&DatasetSpec::shapes(VALIDATION_SAMPLES), 99).unwrap();
    let calib = calibration_batches(&train, 32, 8).unwrap();
    Suite { train, holdout, validation, calib }
}

fn train_run(s: &Suite, lambda: f64, seed: u64) -> Run {
    let t = Instant::now();
    let mut net = SuperNet::new(Architecture::shapes(DatasetSpec::shapes(1).tasks()), WidthList::from_min(0.6).unwrap(), seed).unwrap();
    let recipe = TrainingRecipe { lambda, seed, ..Default::default() };
    let rep = train_supernet(&mut net, &s.train, &recipe, TrainOptions { audit_kd: true }).unwrap();
    Run { seed, net, kd_max: rep.kd_teacher_grad_max.unwrap_or(0.0), elapsed: t.elapsed() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
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

fn gradient_correctness() -> Check {
    let t = Instant::now();
    let res = common::op_gradchecks(20, 42);
    let secs = t.elapsed().as_secs_f64();
    let worst = res.iter().map(|r| r.1).fold(0.0, f64::max);
    (worst < 1e-6 && secs < 10.0 && res.len() == 16, format!("{} ops, worst rel err {worst:.2e}, {secs:.2}s", res.len()))
}

fn slimming_correctness() -> Check {
    let mut net = shapes_net(WidthList::from_min(0.2).unwrap(), 1);
    randomize(&mut net, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_array(&mut rng, &[5, 1, 8, 8]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let cfg = net.sample_config(&mut rng);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &cfg, &batch, NormMode::Batch).unwrap();
        let (z, outs) = ReferenceNet::extract(&net, &cfg).forward(&batch);
        worst = worst.max(max_abs_diff(g.value(out.z).data(), &z.v));
        for (o, r) in out.outputs.iter().zip(&outs) {
            worst = worst.max(max_abs_diff(g.value(*o).data(), &r.v));
        }
    }
    let mut dedicated = shapes_net(WidthList::new(vec![1.0]).unwrap(), 9);
    dedicated.load_params(net.params().ids().map(|id| (net.params().name(id).to_string(), net.params().value(id).clone())).collect()).unwrap();
    let run = |n: &SuperNet| {
        let mut g = Graph::new();
        let out = n.forward(&mut g, &n.uniform_config(1.0), &batch, NormMode::Batch).unwrap();
        out.outputs.iter().map(|&o| g.value(o).clone()).collect::<Vec<Array>>()
    };
    let bitwise = run(&net) == run(&dedicated);
    (worst < 1e-12 && bitwise, format!("50 configs max abs diff {worst:.2e}, full width bitwise {bitwise}"))
}

fn cost_model() -> Check {
    let mut net = SuperNet::new(toy_arch(), WidthList::from_min(0.6).unwrap(), 0).unwrap();
    randomize(&mut net, 1);
    let sample = random_array(&mut ChaCha8Rng::seed_from_u64(2), &[1, 2, 4, 4]);
    let configs = all_configs(&net);
    let mut exact = 0;
    let mut monotone = true;
    for cfg in &configs {
        let (_, _, mults) = ReferenceNet::extract(&net, cfg).forward_counting(&sample);
        let macs = net.count_macs(cfg).unwrap();
        exact += usize::from(macs == mults);
        let v = encode_config(cfg);
        for i in 0..v.len() {
            if v[i] < 1.0 {
                let mut up = v.clone();
                up[i] = ((v[i] * 10.0).round() + 1.0) / 10.0;
                let up = decode_config(&up, net.encoder_layer_count(), &net.decoder_layer_counts()).unwrap();
                monotone &= net.count_macs(&up).unwrap() >= macs;
            }
        }
    }
    (exact == configs.len() && monotone, format!("{exact}/{} configs exact, monotone {monotone}", configs.len()))
}

fn preference_widths() -> Check {
    let w = WidthList::from_min(0.6).unwrap();
    let table = decoder_widths(&[0.0, 0.3, 0.5, 1.0], &w) == vec![0.6, 0.7, 0.8, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = 0;
    for _ in 0..1000 {
        let prefs: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
        let d = decoder_widths(&normalize_prefs(&prefs), &w);
        let mono = (0..3).all(|i| (0..3).all(|j| prefs[i] > prefs[j] || d[i] <= d[j]));
        ok += usize::from(mono && d[preferred_task(&prefs)] == 1.0);
    }
    (table && ok == 1000, format!("hand table {table}, {ok}/1000 monotone with argmax at max"))
}

fn mutation_rule() -> Check {
    let net = shapes_net(WidthList::from_min(0.6).unwrap(), 0);
    let with = |enc: &[f64]| {
        let mut c = net.uniform_config(0.6);
        c.encoder = enc.to_vec();
        c
    };
    let cfg = with(&[0.6, 0.8, 0.8]);
    let macs = net.count_macs(&cfg).unwrap();
    let top = with(&[1.0, 1.0, 1.0]);
    let fixtures = [
        mutate(&net, &cfg, 0, macs + 1, 0.1).unwrap().encoder == vec![0.7, 0.8, 0.8],
        mutate(&net, &cfg, 1, macs - 1, 0.1).unwrap().encoder == vec![0.6, 0.7, 0.8],
        mutate(&net, &cfg, 0, macs - 1, 0.1).unwrap() == cfg,
        mutate(&net, &cfg, 2, macs, 0.1).unwrap() == cfg,
        mutate(&net, &top, 2, u64::MAX, 0.1).unwrap() == top,
        mutate(&net, &cfg, net.encoder_layer_count(), macs, 0.1).is_err(),
    ];
    let passed = fixtures.iter().filter(|f| **f).count();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (hi, _) = net.extremes();
    let max_macs = net.count_macs(&hi).unwrap();
    let mut on_grid = 0;
    for _ in 0..1000 {
        let c = net.sample_config(&mut rng);
        let m = mutate(&net, &c, rng.random_range(0..net.encoder_layer_count()), rng.random_range(0..=max_macs), 0.1).unwrap();
        on_grid += usize::from(m.ratios().all(|r| net.widths().contains(r)));
    }
    (passed == fixtures.len() && on_grid == 1000, format!("{passed}/{} fixtures, {on_grid}/1000 mutants on grid", fixtures.len()))
}

fn search_feasibility() -> Check {
    let net = shapes_net(WidthList::from_min(0.6).unwrap(), 0);
    let predictor = Predictor::new(net.slimmable_layer_count(), net.task_count(), 3).unwrap();
    let (hi, _) = net.extremes();
    let max_macs = net.count_macs(&hi).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut feasible, mut identical) = (0, 0);
    for i in 0..100 {
        let prefs: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
        let floor = net.count_macs(&preference_config(&net, &prefs, 0.6)).unwrap();
        let query = PreferenceQuery { budget_macs: rng.random_range(floor..=max_macs), preferences: prefs };
        let cfg = SearchConfig { seed: i, ..Default::default() };
        let a = search(&net, &predictor, &query, &cfg).unwrap();
        let b = search(&net, &predictor, &query, &cfg).unwrap();
        feasible += usize::from(net.count_macs(&a.config).unwrap() <= query.budget_macs);
        identical += usize::from(serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&b).unwrap());
    }
    (feasible == 100 && identical == 100, format!("{feasible}/100 within budget, {identical}/100 byte-identical reruns"))
}

fn hypervolume_checks() -> Check {
    let t = Instant::now();
    let fixture = hypervolume_exact(&[vec![1.0, 3.0], vec![2.0, 2.0], vec![3.0, 1.0]], &[4.0, 4.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random_points = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..6).map(|_| (0..3).map(|_| rng.random_range(0.0..4.0)).collect()).collect() };
    let mut noop = 0;
    for _ in 0..100 {
        let pts = random_points(&mut rng);
        let base = hypervolume_exact(&pts, &[4.0; 3]).unwrap();
        let anchor = pts[rng.random_range(0..pts.len())].clone();
        let mut more = pts;
        more.push(anchor.iter().map(|v| v + rng.random_range(0.0..1.0)).collect());
        noop += usize::from((hypervolume_exact(&more, &[4.0; 3]).unwrap() - base).abs() <= 1e-12 * base);
    }
    let mut within = 0;
    for _ in 0..20 {
        let pts = random_points(&mut rng);
        let exact = hypervolume_exact(&pts, &[4.0; 3]).unwrap();
        let est = hypervolume_mc(&pts, &[4.0; 3], 1_000_000, &mut rng).unwrap();
        within += usize::from((est.hv - exact).abs() <= 3.0 * est.stderr);
    }
    let secs = t.elapsed().as_secs_f64();
    (
        fixture == 6.0 && noop == 100 && within == 20 && secs < 30.0,
        format!("fixture {fixture}, {noop}/100 dominated no-ops, {within}/20 MC within 3 SE, {secs:.1}s"),
    )
}

fn kd_trend(s: &Suite, with_kd: &[Run]) -> Check {
    let t = Instant::now();
    let without: Vec<Run> = PIPELINE_SEEDS.iter().map(|&seed| train_run(s, 0.0, seed)).collect();
    let lo_loss = |r: &Run| {
        let (_, lo) = r.net.extremes();
        evaluate_subnet(&r.net, &lo, &s.validation, &s.calib).unwrap().losses.iter().sum::<f64>()
    };
    let on: Vec<f64> = with_kd.iter().map(lo_loss).collect();
    let off: Vec<f64> = without.iter().map(lo_loss).collect();
    let (m_on, m_off) = (median(on.clone()), median(off.clone()));
    let kd_max = with_kd.iter().map(|r| r.kd_max).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64() + with_kd.iter().map(|r| r.elapsed.as_secs_f64()).sum::<f64>();
    (
        m_on < m_off && kd_max < 1e-15 && secs < 900.0,
        format!("smallest-config median loss {m_on:.4} (lambda {KD_LAMBDA}) vs {m_off:.4} (lambda 0), per seed {on:.4?} vs {off:.4?}; teacher KD grad max {kd_max:.1e}; {secs:.0}s"),
    )
}

fn fit_predictor(s: &Suite, run: &Run) -> (Predictor, PredictorReport) {
    let records = collect_pairs(&run.net, DEFAULT_PAIRS, &s.holdout, &s.calib, run.seed).unwrap();
    train_predictor(&records, &PredictorHyper { seed: run.seed, ..Default::default() }).unwrap()
}

fn search_vs_random_trend(s: &Suite, runs: &[Run], predictors: &[Predictor]) -> Check {
    let mut rates = Vec::new();
    for (run, p) in runs.iter().zip(predictors) {
        let budget = mid_budget(&run.net).unwrap();
        let prefs = dirichlet_sample(&[DEFAULT_ALPHA_CLASSIFICATION; 3], DEFAULT_PREFERENCE_COUNT, &mut ChaCha8Rng::seed_from_u64(run.seed)).unwrap();
        let setup = SweepSetup {
            data: &s.validation,
            calib: &s.calib,
            reference: vec![DEFAULT_REFERENCE_LOSS; 3],
            search: SearchConfig { seed: run.seed, ..Default::default() },
            marginal_bins: 5,
        };
        rates.push(search_vs_random(&run.net, p, budget, &prefs, &setup, run.seed + 1000).unwrap().win_rate);
    }
    let m = median(rates.clone());
    (m >= 0.6, format!("median win rate {m:.2} over seeds {PIPELINE_SEEDS:?}, per seed {rates:?}"))
}

fn predictor_quality(s: &Suite, run: &Run, p: &Predictor, rep: &PredictorReport) -> Check {
    let ratios: Vec<f64> = rep.holdout_l1.iter().zip(&rep.baseline_l1).map(|(l, b)| l / b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed + 500);
    let configs: Vec<WidthConfig> = (0..50).map(|_| run.net.sample_config(&mut rng)).collect();
    let predicted: Vec<Vec<f64>> = configs.iter().map(|c| p.predict(c).unwrap()).collect();
    let measured: Vec<Vec<f64>> = configs.iter().map(|c| evaluate_subnet(&run.net, c, &s.validation, &s.calib).unwrap().losses).collect();
    let rho: Vec<f64> = (0..3)
        .map(|t| {
            let a: Vec<f64> = predicted.iter().map(|v| v[t]).collect();
            let b: Vec<f64> = measured.iter().map(|v| v[t]).collect();
            spearman(&a, &b)
        })
        .collect();
    (
        ratios.iter().all(|r| *r <= 0.8) && rho.iter().all(|r| *r >= 0.6),
        format!("seed {}: holdout/baseline L1 {ratios:.3?}, Spearman over 50 configs {rho:.3?}", run.seed),
    )
}

fn protocol_fidelity() -> Check {
    let h = PredictorHyper::default();
    let r = TrainingRecipe::default();
    let s = SearchConfig::default();
    let ok = DEFAULT_PREFERENCE_COUNT == 20
        && (h.epochs, h.lr, h.batch_size) == (150, 1e-3, 16)
        && r.b == 4
        && s.eta == 0.1
        && s.eta == WIDTH_STEP;
    (ok, format!("prefs {DEFAULT_PREFERENCE_COUNT}, predictor {}/{}/{}, b {}, eta {}", h.epochs, h.lr, h.batch_size, r.b, s.eta))
}

fn core_only() -> Check {
    let manifest = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/Cargo.toml")).unwrap();
    let deps = manifest.split("[dependencies]").nth(1).unwrap_or("");
    let clean = ["ecmt-cli", "axum", "tokio", "tower"].iter().all(|d| !deps.contains(d));
    (clean, "core crate builds and runs these checks with no cli, service or UI dependency".into())
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        (false, format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut report = |name, check: Check| {
        println!("{} {name}: {}", if check.0 { "PASS" } else { "FAIL" }, check.1);
        results.push((name, check));
    };
    report("gradient correctness", guarded(gradient_correctness));
    report("slimming correctness", guarded(slimming_correctness));
    report("cost model", guarded(cost_model));
    report("preference width rule", guarded(preference_widths));
    report("mutation rule", guarded(mutation_rule));
    report("search feasibility", guarded(search_feasibility));
    report("hypervolume", guarded(hypervolume_checks));

    let s = suite();
    let runs: Vec<Run> = PIPELINE_SEEDS.iter().map(|&seed| train_run(&s, KD_LAMBDA, seed)).collect();
    report("distillation trend", guarded(|| kd_trend(&s, &runs)));
    let fitted: Vec<(Predictor, PredictorReport)> = runs.iter().map(|r| fit_predictor(&s, r)).collect();
    let predictors: Vec<Predictor> = fitted.iter().map(|f| f.0.clone()).collect();
    report("search vs random", guarded(|| search_vs_random_trend(&s, &runs, &predictors)));
    report("predictor quality", guarded(|| predictor_quality(&s, &runs[0], &fitted[0].0, &fitted[0].1)));
    report("protocol defaults", guarded(protocol_fidelity));
    report("core-only build", guarded(core_only));

    let failed = results.iter().filter(|r| !r.1 .0).count();
    println!("acceptance: {}/{} passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
