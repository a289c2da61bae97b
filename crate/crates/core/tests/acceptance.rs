//! Acceptance run: one pass/fail line per criterion. Trainings are shared
//! between the learning, behavior, ensemble and attention checks.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use v1t_core::attention_analysis::{center_of_mass, emit_heatmap, mean_map, pupil_attention_correlation, rollout_trials};
use v1t_core::config::{RunConfig, TrainConfig};
use v1t_core::dataio::{generate_synthetic, prepare, Dataset, PreparedData, Split, SynthConfig};
use v1t_core::evaluation::{evaluate, noise_ceiling, single_trial_correlation};
use v1t_core::gradcheck_suite::{format_table, run_component_checks};
use v1t_core::model::{Head, Model, MouseSpec};
use v1t_core::readout::census;
use v1t_core::tensorcore::{Rng, Tensor};
use v1t_core::training::{fit, poisson_loss, schedule_step, Action, Ensemble, FitOptions, ScheduleState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Tiny core used for every training run: d=32, two blocks.
fn bench_cfg(seed: u64, extra: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    let base = [
        "embed_dim=32", "num_blocks=2", "num_heads=4", "mlp_size=64", "patch_size=8", "patch_stride=8",
        // L1 strength matched to a 100-neuron summed loss
        "l1_core=0.0015",
    ];
    for kv in base.iter().chain(extra) {
        cfg.apply_override(kv).unwrap();
    }
    cfg.seed = seed;
    cfg
}

struct Trained {
    model: Model,
    test: f64,
    val: f64,
    elapsed: Duration,
}

struct Bench {
    ds: Dataset,
    data: PreparedData,
}

impl Bench {
    fn new() -> Bench {
        let (ds, _) = generate_synthetic(&SynthConfig::default()).unwrap();
        let data = prepare(&ds, &RunConfig::default().preprocess).unwrap();
        Bench { ds, data }
    }

    fn train(&self, label: &str, cfg: RunConfig) -> Trained {
        let t = Instant::now();
        let specs = MouseSpec::from_prepared(&self.data);
        let mut model = Model::new(&cfg, (self.data.channels, self.data.height, self.data.width), &specs).unwrap();
        let report = fit(&mut model, &self.data, &FitOptions::default()).unwrap();
        let test = evaluate(&model, &self.data, Split::Test, cfg.correlation).unwrap().mean;
        let val = evaluate(&model, &self.data, Split::Val, cfg.correlation).unwrap().mean;
        let elapsed = t.elapsed();
        eprintln!(
            "  trained {label:<24} seed {} epochs {:>3} test {test:.4} val {val:.4} ({:.0}s)",
            cfg.seed,
            report.curves.len(),
            elapsed.as_secs_f64()
        );
        Trained { model, test, val, elapsed }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let rows = run_component_checks(7).unwrap();
    let elapsed = t.elapsed();
    eprint!("{}", format_table(&rows));
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = rows.len() == 11 && rows.iter().all(|r| r.passes()) && elapsed < Duration::from_secs(120);
    outcome(pass, format!("{} components, worst rel. error {worst:.2e} (< 1e-4), {:.1}s (< 120s)", rows.len(), elapsed.as_secs_f64()))
}

fn equation_fidelity() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut loss_err: f64 = 0.0;
    let mut corr_err: f64 = 0.0;
    for _ in 0..1000 {
        let shape = vec![2 + rng.below(20), 1 + rng.below(8)];
        let r = random_counts(&mut rng, shape.clone());
        let o = random_rates(&mut rng, shape);
        let got = poisson_loss(&r, &o, 1e-8).unwrap();
        let want = poisson_oracle(r.data(), o.data(), 1e-8);
        loss_err = loss_err.max((got - want).abs() / want.abs().max(1.0));
        let got = single_trial_correlation(&r, &o).unwrap().mean;
        corr_err = corr_err.max((got - correlation_oracle(&r, &o)).abs());
    }
    let mut argmin_err: f64 = 0.0;
    for _ in 0..1000 {
        let r = 0.05 + 10.0 * rng.uniform();
        let f = |o: f64| poisson_loss(&Tensor::from_vec(vec![1], vec![r]), &Tensor::from_vec(vec![1], vec![o]), 0.0).unwrap();
        argmin_err = argmin_err.max((golden_section(f, 1e-6, r + 20.0, 1e-9) - r).abs());
    }
    let pass = loss_err <= 1e-10 && corr_err <= 1e-10 && argmin_err < 1e-4;
    outcome(
        pass,
        format!("loss err {loss_err:.1e}, correlation err {corr_err:.1e} (1000 instances, ≤ 1e-10); argmin err {argmin_err:.1e} (< 1e-4)"),
    )
}

fn schedule_fidelity() -> Outcome {
    let cfg = TrainConfig::default();
    let reference = ReferenceSchedule {
        patience: 10,
        factor: 0.3,
        max_reductions: 2,
        max_epochs: cfg.max_epochs,
        tol: cfg.improvement_tol,
    };
    let mut rng = Rng::new(77);
    let mut mismatches = 0;
    let (mut reductions, mut stops) = (0, 0);
    for _ in 0..500 {
        let len = 10 + rng.below(240);
        let losses = scripted_losses(&mut rng, len);
        let expected = reference.replay(cfg.initial_lr, &losses);
        let mut state = ScheduleState::new(&cfg);
        let mut ok = true;
        for (i, &(event, lr, best_epoch)) in expected.iter().enumerate() {
            let action = schedule_step(&mut state, losses[i], &cfg);
            let want = match event {
                RefEvent::Continue => Action::Continue,
                RefEvent::Reduce => Action::ReduceLr,
                RefEvent::Stop => Action::Stop,
            };
            ok &= action == want && state.lr == lr && state.best_epoch == best_epoch;
        }
        mismatches += usize::from(!ok);
        reductions += expected.iter().filter(|e| e.0 == RefEvent::Reduce).count();
        stops += usize::from(expected.last().is_some_and(|e| e.0 == RefEvent::Stop) && expected.len() < cfg.max_epochs);
    }
    outcome(
        mismatches == 0 && cfg.patience == 10 && cfg.lr_decay == 0.3 && cfg.max_reductions == 2,
        format!("{mismatches} mismatches on 500 sequences ({reductions} reductions, {stops} patience stops)"),
    )
}

struct Runs {
    v1t: Vec<Trained>,
    ablated: Vec<Trained>,
    linear: Vec<Trained>,
    extra: Vec<Trained>,
    shifter_free: Option<Trained>,
}

fn learning(bench: &Bench, runs: &Runs) -> Outcome {
    let first = &runs.v1t[0];
    let report = evaluate(&first.model, &bench.data, Split::Test, first.model.cfg.correlation).unwrap();
    let mut ratios = Vec::new();
    for (m, rec) in report.mice.iter().zip(&bench.ds.mice) {
        let ceiling = noise_ceiling(rec, Split::Test).unwrap().expect("synthetic rates");
        ratios.push((m.correlation, ceiling, m.correlation / ceiling));
    }
    let pass = ratios.iter().all(|r| r.2 >= 0.6) && first.elapsed < Duration::from_secs(30 * 60);
    let per_mouse: Vec<String> = ratios.iter().map(|r| format!("{:.3}/{:.3}={:.0}%", r.0, r.1, 100.0 * r.2)).collect();
    outcome(
        pass,
        format!("test corr / noise ceiling {} (≥ 60%), {:.1} min (< 30)", per_mouse.join(", "), first.elapsed.as_secs_f64() / 60.0),
    )
}

fn behavior_value(runs: &Runs) -> Outcome {
    let diffs = |other: &[Trained]| median(runs.v1t.iter().zip(other).map(|(a, b)| a.test - b.test).collect());
    let (da, dl) = (diffs(&runs.ablated), diffs(&runs.linear));
    let tests = |v: &[Trained]| v.iter().map(|t| format!("{:.3}", t.test)).collect::<Vec<_>>().join("/");
    outcome(
        da >= 0.03 && dl >= 0.03,
        format!(
            "median gain over behavior-ablated {da:+.3}, over linear {dl:+.3} (≥ 0.03); v1t {} ablated {} linear {}",
            tests(&runs.v1t),
            tests(&runs.ablated),
            tests(&runs.linear)
        ),
    )
}

fn ensemble_property(bench: &Bench, runs: Runs) -> (Outcome, Runs) {
    let Runs { v1t, ablated, linear, extra, shifter_free } = runs;
    let scored: Vec<(f64, Model)> = v1t.into_iter().chain(extra).map(|t| (t.val, t.model)).collect();
    let member_median = median(scored.iter().map(|s| s.0).collect());
    let cfg = scored[0].1.cfg.clone();
    let ens = Ensemble::select(scored, 5).unwrap();
    let val = evaluate(&ens, &bench.data, Split::Val, cfg.correlation).unwrap().mean;
    let o = outcome(
        val >= member_median,
        format!("5-member validation corr {val:.4} vs median member {member_median:.4}"),
    );
    (o, Runs { v1t: Vec::new(), ablated, linear, extra: Vec::new(), shifter_free })
}

fn attention_structure(bench: &Bench, run: &Trained) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for pm in &bench.data.mice {
        let rec = &pm.record;
        let idx = rec.indices(Split::Test);
        let maps = rollout_trials(&run.model, &rec.id, rec, &idx, true).unwrap();
        let coms: Vec<(f64, f64)> = maps.iter().map(|m| center_of_mass(m).unwrap()).collect();
        let pupil: Vec<(f64, f64)> = idx.iter().map(|&t| (rec.pupil_center.get(&[t, 0]), rec.pupil_center.get(&[t, 1]))).collect();
        let mean = mean_map(&maps).unwrap();
        let (r, c) = center_of_mass(&mean).unwrap();
        let frac = |v: f64, n: usize| (v + 0.5) / n as f64;
        let central = |f: f64| (1.0 / 3.0..=2.0 / 3.0).contains(&f);
        let (fr, fc) = (frac(r, mean.rows), frac(c, mean.cols));
        let corr = pupil_attention_correlation(&coms, &pupil).unwrap();
        let (x, y) = (corr.x.expect("x variance"), corr.y.expect("y variance"));
        let ok = central(fr) && central(fc) && x.corr > 0.0 && x.p_value < 0.01 && y.corr > 0.0 && y.p_value < 0.01;
        pass &= ok;
        parts.push(format!(
            "mouse {}: CoM at ({fr:.2}, {fc:.2}) of {}×{} grid, r_x {:.2} (p {:.0e}), r_y {:.2} (p {:.0e})",
            rec.id, mean.rows, mean.cols, x.corr, x.p_value, y.corr, y.p_value
        ));
    }
    outcome(pass, parts.join("; "))
}

fn readout_efficiency() -> Outcome {
    let cfg = RunConfig::default();
    let (ds, _) = generate_synthetic(&SynthConfig::default()).unwrap();
    let data = prepare(&ds, &cfg.preprocess).unwrap();
    let model = Model::new(&cfg, (data.channels, data.height, data.width), &MouseSpec::from_prepared(&data)).unwrap();
    let grid = model.grid().expect("patch grid");
    let d = cfg.core.tokenizer.embed_dim;
    let mut pass = true;
    let mut parts = Vec::new();
    for head in &model.heads {
        let Head::Gaussian(readout) = &head.head else {
            return outcome(false, "default model has no Gaussian readout");
        };
        let c = census(readout, &model.params, grid).unwrap();
        pass &= c.per_neuron == d + 3 && c.ratio() < 0.05;
        parts.push(format!("mouse {}: {} per neuron (d={d}), {} total vs {} dense = {:.2}%", head.id, c.per_neuron, c.total, c.dense_alternative, 100.0 * c.ratio()));
    }
    outcome(pass, parts.join("; "))
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, base, out);
        } else {
            out.push((p.strip_prefix(base).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
}

fn determinism_run(data: &PreparedData, dir: &Path) {
    let cfg = bench_cfg(9, &["max_epochs=3"]);
    let mut model = Model::new(&cfg, (data.channels, data.height, data.width), &MouseSpec::from_prepared(data)).unwrap();
    let report = fit(&mut model, data, &FitOptions::default()).unwrap();
    model.save(&dir.join("checkpoint"), report.best_epoch, report.best_val_loss).unwrap();
    let ids: Vec<&str> = data.mice.iter().map(|m| m.record.id.as_str()).collect();
    fs::write(dir.join("curves.csv"), report.curves_csv(&ids)).unwrap();
    evaluate(&model, data, Split::Test, cfg.correlation).unwrap().write(&dir.join("metrics"), "v1t").unwrap();
    for pm in &data.mice {
        let rec = &pm.record;
        let idx: Vec<usize> = rec.indices(Split::Test).into_iter().take(3).collect();
        for (m, &t) in rollout_trials(&model, &rec.id, rec, &idx, true).unwrap().iter().zip(&idx) {
            emit_heatmap(m, &rec.image(t).index_first(0), &dir.join("heatmaps"), &format!("{}_{t}", rec.id)).unwrap();
        }
    }
}

fn determinism() -> Outcome {
    let mut s = SynthConfig::default();
    for kv in ["n_neurons=20", "n_train=80", "n_val=20", "n_test_images=5", "n_repeats=3"] {
        let (k, v) = kv.split_once('=').unwrap();
        s.set(k, v).unwrap();
    }
    let (ds, _) = generate_synthetic(&s).unwrap();
    let data = prepare(&ds, &RunConfig::default().preprocess).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    determinism_run(&data, a.path());
    determinism_run(&data, b.path());
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    collect_files(a.path(), a.path(), &mut fa);
    collect_files(b.path(), b.path(), &mut fb);
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let heatmaps = names.iter().filter(|n| n.ends_with(".pgm") || n.ends_with(".ppm")).count();
    let pass = fa.len() == fb.len() && differing.is_empty() && heatmaps > 0 && names.iter().any(|n| n.ends_with("params.f32"));
    outcome(
        pass,
        format!("{} files compared (checkpoint, curves, metrics, {heatmaps} heatmaps), {} differ", fa.len(), differing.len()),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    }
}

fn main() {
    // cargo passes harness flags such as `--test-threads`; listing must not train
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "gradient integrity", guarded(gradient_integrity)));
    results.push((2, "equation fidelity", guarded(equation_fidelity)));
    results.push((3, "schedule fidelity", guarded(schedule_fidelity)));

    eprintln!("training benchmark models (this takes a while)...");
    let bench = Bench::new();
    let trained = catch_unwind(AssertUnwindSafe(|| {
        let seeds = [0u64, 1, 2];
        let v1t = seeds.iter().map(|&s| bench.train("v1t", bench_cfg(s, &[]))).collect();
        let ablated = seeds.iter().map(|&s| bench.train("v1t, behavior ablated", bench_cfg(s, &["bmlp=disabled"]))).collect();
        let linear = seeds.iter().map(|&s| bench.train("linear", bench_cfg(s, &["mode=linear"]))).collect();
        let extra = [3u64, 4].iter().map(|&s| bench.train("v1t", bench_cfg(s, &[]))).collect();
        let shifter_free = Some(bench.train("v1t, no shifter", bench_cfg(0, &["shifter=false"])));
        Runs { v1t, ablated, linear, extra, shifter_free }
    }));
    match trained {
        Ok(runs) => {
            results.push((4, "learning capability", guarded(|| learning(&bench, &runs))));
            results.push((5, "behavior-module value", guarded(|| behavior_value(&runs))));
            let (o, runs) = ensemble_property(&bench, runs);
            results.push((6, "ensemble property", o));
            let sf = runs.shifter_free.as_ref().expect("shifter-free run");
            results.push((7, "attention structure", guarded(|| attention_structure(&bench, sf))));
        }
        Err(_) => {
            for (n, name) in [(4, "learning capability"), (5, "behavior-module value"), (6, "ensemble property"), (7, "attention structure")] {
                results.push((n, name, outcome(false, "training failed")));
            }
        }
    }
    results.push((8, "readout efficiency", guarded(readout_efficiency)));
    results.push((9, "determinism", guarded(determinism)));

    println!();
    for (n, name, o) in &results {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed in {:.1} min", results.len() - failed, results.len(), started.elapsed().as_secs_f64() / 60.0);
    if failed > 0 {
        std::process::exit(1);
    }
}
