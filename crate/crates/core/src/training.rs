//! Poisson objective, AdamW with L1 penalties, the plateau schedule and the
//! multi-mouse training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, TrainConfig};
use crate::dataio::{MouseRecord, PreparedData, Split};
use crate::error::{Error, Result};
use crate::evaluation::{single_trial_correlation, Predictor};
use crate::model::{Model, MouseSpec, TrialInput};
use crate::nn::{GradBuffer, ParamKind, ParamSet, Session};
use crate::tensorcore::{Rng, Tensor};

/// `Σ (o+ε) − (r+ε)·log(o+ε)` over every trial and neuron.
pub fn poisson_loss(r: &Tensor, o: &Tensor, eps: f64) -> Result<f64> {
    if r.shape() != o.shape() {
        return Err(Error::Dimension(format!(
            "poisson_loss: {:?} vs {:?}",
            r.shape(),
            o.shape()
        )));
    }
    if o.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("poisson_loss: predictions must be > 0".into()));
    }
    Ok(o
        .data()
        .iter()
        .zip(r.data())
        .map(|(&o, &r)| (o + eps) - (r + eps) * (o + eps).ln())
        .sum())
}

/// L1 coefficient applied to parameters of `kind`.
fn l1_coefficient(kind: ParamKind, cfg: &TrainConfig) -> f64 {
    match kind {
        ParamKind::CoreWeight => cfg.l1_core,
        ParamKind::ReadoutWeight => cfg.l1_readout,
        _ => 0.0,
    }
}

/// Value of the L1 penalty over all parameters.
pub fn l1_penalty(params: &ParamSet, cfg: &TrainConfig) -> f64 {
    params
        .iter()
        .map(|(_, e)| l1_coefficient(e.kind, cfg) * e.value.data().iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

/// AdamW moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW step on every trainable parameter.
///
/// The L1 subgradient `λ·sign(θ)` is added to the data gradient; weight
/// decay is decoupled and only applies to kinds that decay. Values are
/// rounded to f32 afterwards so checkpoints round-trip exactly.
pub fn optimizer_step(params: &mut ParamSet, grads: &GradBuffer, state: &mut AdamState, cfg: &TrainConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (i, e) in params.entries_mut().enumerate() {
        if !e.kind.trainable() {
            continue;
        }
        let l1 = l1_coefficient(e.kind, cfg);
        let decay = if e.kind.decays() { cfg.weight_decay } else { 0.0 };
        let g = grads.grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, p) in e.value.data_mut().iter_mut().enumerate() {
            let gk = g[k] + if *p > 0.0 { l1 } else if *p < 0.0 { -l1 } else { 0.0 };
            m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * gk;
            v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * gk * gk;
            *p -= lr * decay * *p;
            *p -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.adam_eps);
        }
    }
    params.quantize_f32();
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Continue,
    ReduceLr,
    Stop,
}

/// Plateau schedule on the validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub lr: f64,
    pub best: f64,
    pub best_epoch: usize,
    pub epoch: usize,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl ScheduleState {
    pub fn new(cfg: &TrainConfig) -> Self {
        ScheduleState {
            lr: cfg.initial_lr,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// True when the last call to [`schedule_step`] set a new best.
    pub fn improved(&self) -> bool {
        self.best_epoch == self.epoch
    }
}

/// Record one epoch's validation loss and decide what happens next.
///
/// An epoch improves when it beats the best loss by more than
/// `improvement_tol` (relative). After `patience` non-improving epochs the
/// learning rate is multiplied by `lr_decay`; once `max_reductions`
/// reductions have been spent, the next exhausted patience window stops
/// training. Reaching `max_epochs` also stops.
pub fn schedule_step(state: &mut ScheduleState, val_loss: f64, cfg: &TrainConfig) -> Action {
    state.epoch += 1;
    let threshold = if state.best.is_finite() {
        state.best - cfg.improvement_tol * state.best.abs()
    } else {
        f64::INFINITY
    };
    if val_loss < threshold {
        state.best = val_loss;
        state.best_epoch = state.epoch;
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
    }
    let mut action = Action::Continue;
    if state.bad_epochs >= cfg.patience {
        state.bad_epochs = 0;
        if state.reductions < cfg.max_reductions {
            state.reductions += 1;
            state.lr *= cfg.lr_decay;
            action = Action::ReduceLr;
        } else {
            action = Action::Stop;
        }
    }
    if state.epoch >= cfg.max_epochs {
        action = Action::Stop;
    }
    action
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Validation correlation per mouse.
    pub val_corr: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Print one line per epoch to stderr.
    pub verbose: bool,
    /// Write the best checkpoint here whenever it improves.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs regardless of the schedule.
    pub epoch_limit: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Mean over mice of the validation correlation at the best epoch.
    pub best_val_corr: f64,
    pub curves: Vec<EpochRecord>,
}

impl FitReport {
    pub fn curves_csv(&self, mouse_ids: &[&str]) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr");
        for id in mouse_ids {
            write!(out, ",val_corr_{id}").unwrap();
        }
        out.push('\n');
        for r in &self.curves {
            write!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
            for c in &r.val_corr {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn diverged(epoch: usize, mouse: &str, msg: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        mouse: mouse.to_string(),
        msg: msg.into(),
    }
}

/// Summed loss and gradients of one mouse's batch.
fn batch_gradients(
    model: &Model,
    mouse: usize,
    rec: &MouseRecord,
    trials: &[usize],
    rng: &mut Rng,
    eps: f64,
    grads: &mut GradBuffer,
) -> Result<f64> {
    let mut total = 0.0;
    for &t in trials {
        let mut s = Session::new(&model.params, rng, true);
        let y = model.trial_output(&mut s, mouse, TrialInput::from_record(rec, t))?;
        let target = Tensor::new(vec![rec.n_neurons()], rec.responses.row(t).to_vec())?;
        let loss = s.graph.poisson_loss(y, &target, eps)?;
        total += s.graph.value(loss).item();
        let g = s.graph.backward(loss)?;
        s.accumulate_grads(&g, grads);
    }
    Ok(total)
}

/// Validation loss summed over mice and the per-mouse correlations.
fn validate(model: &Model, data: &PreparedData, eps: f64) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut corr = Vec::with_capacity(data.mice.len());
    for pm in &data.mice {
        let rec = &pm.record;
        let idx = rec.indices(Split::Val);
        let o = model.predict(&rec.id, rec, &idx)?;
        let r = rec.responses.gather_first(&idx)?;
        loss += poisson_loss(&r, &o, eps)?;
        corr.push(if idx.len() >= 2 { single_trial_correlation(&r, &o)?.mean } else { 0.0 });
    }
    Ok((loss, corr))
}

/// Train `model` in place and leave it at the best validation checkpoint.
///
/// Each epoch visits every mouse's training trials once in shuffled
/// batches; mice with fewer batches cycle so that every optimizer step
/// sees one batch from each mouse.
pub fn fit(model: &mut Model, data: &PreparedData, opts: &FitOptions) -> Result<FitReport> {
    let cfg = model.cfg.train.clone();
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mouse_slots: Vec<usize> = data
        .mice
        .iter()
        .map(|pm| model.mouse_index(&pm.record.id))
        .collect::<Result<_>>()?;
    for pm in &data.mice {
        if pm.record.indices(Split::Train).is_empty() || pm.record.indices(Split::Val).is_empty() {
            return Err(Error::InsufficientData(format!(
                "mouse {} needs train and validation trials",
                pm.record.id
            )));
        }
    }
    let mut rng = Rng::new(model.cfg.seed).fork(2);
    let mut adam = AdamState::new(&model.params);
    let mut sched = ScheduleState::new(&cfg);
    let mut best_params = model.params.clone();
    let mut best_corr = f64::NAN;
    let mut curves = Vec::new();

    loop {
        let epoch = sched.epoch + 1;
        let batches: Vec<Vec<Vec<usize>>> = data
            .mice
            .iter()
            .map(|pm| {
                let mut idx = pm.record.indices(Split::Train);
                rng.shuffle(&mut idx);
                idx.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
            })
            .collect();
        let steps = batches.iter().map(Vec::len).max().unwrap_or(0);
        let mut train_loss = 0.0;
        for step in 0..steps {
            let mut grads = model.params.zero_grads();
            let mut step_loss = l1_penalty(&model.params, &cfg);
            for (k, pm) in data.mice.iter().enumerate() {
                let b = &batches[k][step % batches[k].len()];
                let l = batch_gradients(model, mouse_slots[k], &pm.record, b, &mut rng, cfg.eps, &mut grads)
                    .map_err(|e| match e {
                        Error::NonFinite(m) | Error::Domain(m) => diverged(epoch, &pm.record.id, m),
                        other => other,
                    })?;
                if !l.is_finite() {
                    return Err(diverged(epoch, &pm.record.id, format!("training loss {l}")));
                }
                step_loss += l;
            }
            if !grads.all_finite() {
                return Err(diverged(epoch, "all", "non-finite gradient"));
            }
            optimizer_step(&mut model.params, &grads, &mut adam, &cfg, sched.lr);
            train_loss += step_loss;
        }
        let (val_loss, val_corr) = validate(model, data, cfg.eps).map_err(|e| match e {
            Error::NonFinite(m) | Error::Domain(m) => diverged(epoch, "validation", m),
            other => other,
        })?;
        if !val_loss.is_finite() {
            return Err(diverged(epoch, "validation", format!("validation loss {val_loss}")));
        }
        let lr = sched.lr;
        let action = schedule_step(&mut sched, val_loss, &cfg);
        if sched.improved() {
            best_params = model.params.clone();
            best_corr = val_corr.iter().sum::<f64>() / val_corr.len() as f64;
            if let Some(dir) = &opts.checkpoint_dir {
                model.save(dir, epoch, val_loss)?;
            }
        }
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  train {train_loss:>12.3}  val {val_loss:>12.3}  corr {:.4}  lr {lr:.2e}",
                val_corr.iter().sum::<f64>() / val_corr.len() as f64
            );
        }
        curves.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            val_corr,
        });
        let limit_hit = opts.epoch_limit.is_some_and(|l| epoch >= l);
        if action == Action::Stop || limit_hit {
            break;
        }
    }
    model.params = best_params;
    Ok(FitReport {
        best_epoch: sched.best_epoch,
        best_val_loss: sched.best,
        best_val_corr: best_corr,
        curves,
    })
}

/// Average of several models' predictions.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Model>,
    /// Validation correlation of each kept member.
    pub scores: Vec<f64>,
}

impl Ensemble {
    /// `ensemble.txt` plus one checkpoint directory per member.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = format!("members={}\n", self.members.len());
        for (i, (m, score)) in self.members.iter().zip(&self.scores).enumerate() {
            let name = format!("member_{i:02}");
            m.save(&dir.join(&name), 0, *score)?;
            writeln!(index, "{name}.val_corr={score}").unwrap();
        }
        let p = dir.join(ENSEMBLE_INDEX);
        std::fs::write(&p, index).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Ensemble> {
        let p = dir.join(ENSEMBLE_INDEX);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut members = Vec::new();
        let mut scores = Vec::new();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            if let Some(name) = k.strip_suffix(".val_corr") {
                let (model, _, _) = Model::load(&dir.join(name))?;
                members.push(model);
                scores.push(v.parse().map_err(|_| Error::load(&p, format!("bad score for {name}")))?);
            }
        }
        if members.is_empty() {
            return Err(Error::load(&p, "ensemble lists no members"));
        }
        Ok(Ensemble { members, scores })
    }

    pub fn is_ensemble_dir(dir: &Path) -> bool {
        dir.join(ENSEMBLE_INDEX).is_file()
    }

    /// Keep the `n_keep` models with the highest validation correlation.
    pub fn select(mut trained: Vec<(f64, Model)>, n_keep: usize) -> Result<Ensemble> {
        if n_keep == 0 || n_keep > trained.len() {
            return Err(Error::Config(format!("cannot keep {n_keep} of {} models", trained.len())));
        }
        trained.sort_by(|a, b| b.0.total_cmp(&a.0));
        trained.truncate(n_keep);
        Ok(Ensemble {
            scores: trained.iter().map(|t| t.0).collect(),
            members: trained.into_iter().map(|t| t.1).collect(),
        })
    }
}

const ENSEMBLE_INDEX: &str = "ensemble.txt";

impl Predictor for Ensemble {
    fn predict(&self, mouse_id: &str, rec: &MouseRecord, trials: &[usize]) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for m in &self.members {
            let y = m.predict(mouse_id, rec, trials)?;
            match &mut acc {
                Some(a) => a.add_assign(&y),
                None => acc = Some(y),
            }
        }
        let mut out = acc.ok_or_else(|| Error::Config("empty ensemble".into()))?;
        out.scale_assign(1.0 / self.members.len() as f64);
        Ok(out)
    }
}

/// Train `n_train` models with seeds `cfg.seed + i` and keep the `n_keep`
/// with the highest validation correlation.
pub fn train_ensemble(
    cfg: &RunConfig,
    data: &PreparedData,
    n_train: usize,
    n_keep: usize,
    opts: &FitOptions,
) -> Result<Ensemble> {
    if n_keep == 0 || n_keep > n_train {
        return Err(Error::Config(format!("cannot keep {n_keep} of {n_train} models")));
    }
    let specs = MouseSpec::from_prepared(data);
    let mut trained = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        let mut model = Model::new(&c, (data.channels, data.height, data.width), &specs)?;
        let report = fit(&mut model, data, &FitOptions { checkpoint_dir: None, ..opts.clone() })?;
        trained.push((report.best_val_corr, model));
    }
    Ensemble::select(trained, n_keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tcfg(patience: usize, max_reductions: usize) -> TrainConfig {
        TrainConfig {
            patience,
            max_reductions,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poisson_worked_example() {
        let r = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]);
        let o = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]);
        let l = poisson_loss(&r, &o, 0.0).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reduces_on_tenth_bad_epoch_then_stops() {
        let cfg = tcfg(10, 2);
        let mut s = ScheduleState::new(&cfg);
        for v in [5.0, 4.0, 3.0] {
            assert_eq!(schedule_step(&mut s, v, &cfg), Action::Continue);
        }
        for k in 1..=10 {
            let a = schedule_step(&mut s, 3.0, &cfg);
            assert_eq!(a, if k == 10 { Action::ReduceLr } else { Action::Continue });
        }
        assert!((s.lr - 0.0016 * 0.3).abs() < 1e-15);
        let actions: Vec<Action> = (0..20).map(|_| schedule_step(&mut s, 3.0, &cfg)).collect();
        assert_eq!(actions[9], Action::ReduceLr);
        assert_eq!(actions[19], Action::Stop);
        assert_eq!(s.reductions, 2);
        assert_eq!(s.best_epoch, 3);
    }

    #[test]
    fn l1_pulls_towards_zero() {
        let mut p = ParamSet::new();
        let id = p.add("w", ParamKind::CoreWeight, Tensor::from_vec(vec![2], vec![0.5, -0.5]));
        let grads = p.zero_grads();
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        optimizer_step(&mut p, &grads, &mut st, &cfg, 0.01);
        let v = p.get(id).data();
        assert!(v[0] < 0.5 && v[1] > -0.5);
        assert!((v[0] - (0.5 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn biases_skip_decay_and_l1() {
        let mut p = ParamSet::new();
        let id = p.add("b", ParamKind::Bias, Tensor::from_vec(vec![1], vec![0.5]));
        let mut st = AdamState::new(&p);
        let g = p.zero_grads();
        optimizer_step(&mut p, &g, &mut st, &TrainConfig::default(), 0.1);
        assert_eq!(p.get(id).data()[0], 0.5);
    }

    /// Per-trial, per-mouse accumulation is the gradient of the summed loss.
    #[test]
    fn accumulated_gradients_match_fused_loss() {
        use crate::dataio::{generate_synthetic, prepare, SynthConfig};
        let mut sc = SynthConfig::default();
        for (k, v) in [("n_neurons", "4"), ("n_train", "8"), ("n_val", "2"), ("n_test_images", "2"), ("n_repeats", "2")] {
            sc.set(k, v).unwrap();
        }
        let (ds, _) = generate_synthetic(&sc).unwrap();
        let mut cfg = RunConfig::default();
        for kv in ["embed_dim=6", "num_blocks=1", "num_heads=2", "mlp_size=6", "patch_stride=8"] {
            cfg.apply_override(kv).unwrap();
        }
        let data = prepare(&ds, &cfg.preprocess).unwrap();
        let model = Model::new(&cfg, (data.channels, data.height, data.width), &MouseSpec::from_prepared(&data)).unwrap();
        let batches: [&[usize]; 2] = [&[0, 3, 5], &[1, 2]];

        let mut rng = Rng::new(9);
        let mut acc = model.params.zero_grads();
        let mut acc_loss = 0.0;
        for (m, b) in batches.iter().enumerate() {
            acc_loss += batch_gradients(&model, m, &data.mice[m].record, b, &mut rng, 1e-8, &mut acc).unwrap();
        }

        // one graph over every trial; the same stream order gives the same noise
        let mut rng = Rng::new(9);
        let mut fused = model.params.zero_grads();
        let mut s = Session::new(&model.params, &mut rng, true);
        let mut total: Option<crate::tensorcore::Var> = None;
        for (m, b) in batches.iter().enumerate() {
            let rec = &data.mice[m].record;
            for &t in *b {
                let y = model.trial_output(&mut s, m, TrialInput::from_record(rec, t)).unwrap();
                let target = Tensor::new(vec![rec.n_neurons()], rec.responses.row(t).to_vec()).unwrap();
                let l = s.graph.poisson_loss(y, &target, 1e-8).unwrap();
                total = Some(match total {
                    Some(acc) => s.graph.add(acc, l).unwrap(),
                    None => l,
                });
            }
        }
        let total = total.unwrap();
        let fused_loss = s.graph.value(total).item();
        let g = s.graph.backward(total).unwrap();
        s.accumulate_grads(&g, &mut fused);
        assert!((acc_loss - fused_loss).abs() < 1e-10);
        for (a, f) in acc.grads.iter().zip(&fused.grads) {
            for (x, y) in a.data().iter().zip(f.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
