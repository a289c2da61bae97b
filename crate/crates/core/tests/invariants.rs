use v1t_core::config::RunConfig;
use v1t_core::dataio::{generate_synthetic, prepare, PreparedData, Split, SynthConfig};
use v1t_core::evaluation::{evaluate, Predictor};
use v1t_core::model::{Model, MouseSpec};
use v1t_core::training::{fit, Ensemble, FitOptions};

fn small_data() -> PreparedData {
    let mut s = SynthConfig::default();
    for kv in ["n_mice=2", "n_neurons=8", "n_train=40", "n_val=12", "n_test_images=4", "n_repeats=3", "height=18", "width=32"] {
        let (k, v) = kv.split_once('=').unwrap();
        s.set(k, v).unwrap();
    }
    let (ds, _) = generate_synthetic(&s).unwrap();
    prepare(&ds, &tiny_cfg(0).preprocess).unwrap()
}

fn tiny_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in ["num_blocks=1", "embed_dim=8", "num_heads=2", "mlp_size=8", "target_h=18", "target_w=32", "max_epochs=2"] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.seed = seed;
    cfg
}

fn trained(data: &PreparedData, seed: u64) -> Model {
    let cfg = tiny_cfg(seed);
    let mut m = Model::new(&cfg, (data.channels, data.height, data.width), &MouseSpec::from_prepared(data)).unwrap();
    fit(&mut m, data, &FitOptions::default()).unwrap();
    m
}

fn test_trials(data: &PreparedData) -> Vec<usize> {
    data.mice[0].record.indices(Split::Test)
}

#[test]
fn checkpoint_reload_reproduces_predictions_exactly() {
    let data = small_data();
    let model = trained(&data, 1);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), 2, 0.5).unwrap();
    let (back, epoch, metric) = Model::load(dir.path()).unwrap();
    assert_eq!((epoch, metric), (2, 0.5));
    let rec = &data.mice[0].record;
    let a = model.predict(&rec.id, rec, &test_trials(&data)).unwrap();
    let b = back.predict(&rec.id, rec, &test_trials(&data)).unwrap();
    assert_eq!(a.data(), b.data());
    let again = tempfile::tempdir().unwrap();
    back.save(again.path(), 2, 0.5).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("params.f32")).unwrap(),
        std::fs::read(again.path().join("params.f32")).unwrap()
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = small_data();
    let a = trained(&data, 4);
    let b = trained(&data, 4);
    let c = trained(&data, 5);
    let flat = |m: &Model| -> Vec<f64> { m.params.iter().flat_map(|(_, e)| e.value.data().to_vec()).collect() };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn predictions_are_positive_rates() {
    let data = small_data();
    let model = trained(&data, 2);
    for pm in &data.mice {
        let rec = &pm.record;
        let y = model.predict(&rec.id, rec, &rec.indices(Split::Test)).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v.is_finite()));
    }
}

#[test]
fn ensemble_averages_members_and_keeps_the_best() {
    let data = small_data();
    let members: Vec<(f64, Model)> = (0..3).map(|s| (s as f64 * 0.1, trained(&data, 10 + s))).collect();
    let rec = &data.mice[1].record;
    let idx = test_trials(&data);
    let outs: Vec<_> = members.iter().map(|(_, m)| m.predict(&rec.id, rec, &idx).unwrap()).collect();
    let ens = Ensemble::select(members, 2).unwrap();
    assert_eq!(ens.scores, vec![0.2, 0.1]);
    let y = ens.predict(&rec.id, rec, &idx).unwrap();
    for k in 0..y.len() {
        let want = (outs[2].data()[k] + outs[1].data()[k]) / 2.0;
        assert!((y.data()[k] - want).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path()).unwrap();
    assert!(Ensemble::is_ensemble_dir(dir.path()));
    let back = Ensemble::load(dir.path()).unwrap();
    assert_eq!(back.scores, ens.scores);
    assert_eq!(back.predict(&rec.id, rec, &idx).unwrap().data(), y.data());
    assert!(Ensemble::select(Vec::new(), 1).is_err());
}

#[test]
fn evaluation_report_covers_every_mouse() {
    let data = small_data();
    let model = trained(&data, 3);
    let report = evaluate(&model, &data, Split::Test, model.cfg.correlation).unwrap();
    assert_eq!(report.mice.len(), 2);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 + 1, "header, mice, average");
    let mean = report.mice.iter().map(|m| m.correlation).sum::<f64>() / 2.0;
    assert!((report.mean - mean).abs() < 1e-12);
}
