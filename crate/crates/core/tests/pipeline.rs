use ign::classification::NewtonConfig;
use ign::datasets::{gen_blobs, gen_sin_wave, split, Normalizer, TaskKind, DEFAULT_NOISE_STD};
use ign::model::{IgnParameters, ModelConfig};
use ign::persist::{Heads, ModelFile};
use ign::regression::{predict, CovarianceMode};
use ign::trainer::{train, train_with_checkpoints, CheckpointPolicy, TrainConfig};
use ign::IgnError;

fn small(input_dim: usize, m: usize) -> ModelConfig {
    let mut c = ModelConfig::new(input_dim);
    c.hidden = vec![8, 8];
    c.feature_dim = 3;
    c.num_inducing = m;
    c
}

#[test]
fn trained_model_survives_a_save_and_load() {
    let ds = gen_sin_wave(120, DEFAULT_NOISE_STD, 2).unwrap();
    let (tr, te) = split(&ds, 0.6, 2).unwrap();
    let nz = Normalizer::fit(&tr);
    let tr = nz.apply(&tr).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        seed: 2,
        ..TrainConfig::default()
    };
    let mc = small(1, 6);
    let (params, _) = train(TaskKind::Regression, IgnParameters::init(&mc, 2).unwrap(), &tr, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ModelFile::new(TaskKind::Regression, mc, Heads::Single { params: params.clone() }, Some(nz)).save(&path).unwrap();
    let loaded = ModelFile::load(&path).unwrap();
    let x = loaded.prepare_inputs(&te.x).unwrap();
    let a = predict(&params, &x, CovarianceMode::Diag, false).unwrap();
    let b = predict(loaded.heads.all()[0], &x, CovarianceMode::Diag, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn model_file_with_wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let params = IgnParameters::init(&small(1, 2), 0).unwrap();
    ModelFile::new(TaskKind::Regression, small(1, 2), Heads::Single { params }, None).save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":99");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(ModelFile::load(&path), Err(IgnError::Schema(_))));
}

#[test]
fn repeated_newton_failure_diverges_and_keeps_last_good_parameters() {
    let ds = gen_blobs(60, 2, 6.0, 3).unwrap();
    let mc = small(2, 4);
    let init = IgnParameters::init(&mc, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let policy = CheckpointPolicy {
        dir: dir.path().to_path_buf(),
        every: 0,
        template: ModelFile::new(TaskKind::Classification, mc, Heads::OneVsAll { heads: vec![] }, None),
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 20,
        newton: NewtonConfig {
            max_iter: 1,
            tol: 1e-300,
        },
        ..TrainConfig::default()
    };
    let err = train_with_checkpoints(TaskKind::Classification, init.clone(), &ds, &cfg, Some(&policy)).unwrap_err();
    let IgnError::Diverged { epoch, checkpoint, .. } = &err else {
        panic!("expected divergence, got {err}");
    };
    assert_eq!(*epoch, 0);
    let saved = ModelFile::load(checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(saved.heads.all()[0], &init);
    assert!(err.to_string().contains("last-good.json"));
}

#[test]
fn periodic_checkpoints_are_written() {
    let ds = gen_sin_wave(40, DEFAULT_NOISE_STD, 5).unwrap();
    let mc = small(1, 3);
    let dir = tempfile::tempdir().unwrap();
    let policy = CheckpointPolicy {
        dir: dir.path().to_path_buf(),
        every: 2,
        template: ModelFile::new(TaskKind::Regression, mc.clone(), Heads::OneVsAll { heads: vec![] }, None),
    };
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let p = IgnParameters::init(&mc, 5).unwrap();
    train_with_checkpoints(TaskKind::Regression, p, &ds, &cfg, Some(&policy)).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["epoch-00002.json", "epoch-00004.json"]);
}
