use textseg::checkpoint::{transfer_init, Checkpoint};
use textseg::datasynth::{generate, Sample, SourcePool, SynthConfig};
use textseg::labelcodec::OverlapPolicy;
use textseg::losses::{LossKind, LossSpec};
use textseg::models::{Architecture, Model, SspConfig};
use textseg::trainer::{evaluate_model, train, TrainConfig};
use textseg::Error;

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig { train: n, val: 0, test: 0, seed, ..SynthConfig::toy() };
    let pool = SourcePool::procedural(cfg.printed_sources, cfg.handwritten_sources, cfg.size, seed);
    generate(&pool, &cfg).unwrap().into_iter().map(|(_, s)| s).collect()
}

#[test]
fn fusion_loss_decreases_on_eight_samples() {
    let data = samples(8, 2);
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), 2).unwrap();
    let cfg = TrainConfig { epochs: 200, max_steps: Some(200), lr_patience: 200, ..TrainConfig::default() };
    let out = train(&mut model, &data, &data[..2], &cfg, |_| {}).unwrap();
    assert_eq!(out.step_losses.len(), 200);
    let first = out.step_losses[0];
    let last = *out.step_losses.last().unwrap();
    assert!(last < first, "{first} → {last}");
    assert!(out.log.iter().all(|e| e.lr == 1e-3));
}

#[test]
fn same_seed_same_curve() {
    let data = samples(4, 5);
    let run = || {
        let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), 5).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 2, seed: 5, ..TrainConfig::default() };
        let out = train(&mut model, &data, &data[..1], &cfg, |_| {}).unwrap();
        (out.step_losses, out.best.to_bytes(), out.last.to_bytes())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.len(), 6);
    assert_eq!(a, b);
}

#[test]
fn divergence_is_reported() {
    let data = samples(2, 1);
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), 1).unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 1, lr0: 1e38, ..TrainConfig::default() };
    match train(&mut model, &data, &data, &cfg, |_| {}) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.step_losses)),
    }
}

#[test]
fn log_and_checkpoint_contents() {
    let data = samples(4, 3);
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(3), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        loss: LossSpec::new(LossKind::Wce, 3).unwrap(),
        overlap_policy: OverlapPolicy::ToHt,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train(&mut model, &data, &data[..2], &cfg, |e| seen.push(e.clone())).unwrap();
    assert_eq!(seen, out.log);
    assert_eq!(out.log.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(out.log.iter().all(|e| e.val_mean_iou.is_some() && e.train_loss.is_finite()));
    let best_epoch = out.best.scalar("train.epoch").unwrap() as usize;
    let best_val = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[best_epoch - 1].val_loss, best_val);
    assert_eq!(out.best.scalar("adam.t"), Some(best_epoch as f32));
    assert_eq!(out.last.scalar("adam.t"), Some(3.0));
    assert!(out.best.optimizer_record("adam.m.mfm.head.weight").is_some());

    // The last checkpoint is the model as it stands.
    assert_eq!(Checkpoint::from_store(model.store()).params, out.last.params);
    let (val_loss, _) = evaluate_model(&model, &data[..2], &cfg.loss, cfg.overlap_policy).unwrap();
    assert_eq!(val_loss, out.log[2].val_loss);
}

#[test]
fn class_count_mismatch_is_config_error() {
    let data = samples(2, 0);
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), 0).unwrap();
    let cfg = TrainConfig { loss: LossSpec::new(LossKind::Ce, 3).unwrap(), ..TrainConfig::default() };
    assert!(matches!(train(&mut model, &data, &data, &cfg, |_| {}), Err(Error::Config(_))));
    assert!(matches!(train(&mut model, &data, &[], &TrainConfig::default(), |_| {}), Err(Error::Usage(_))));
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(2, 4);
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), 4).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let out = train(&mut model, &data, &data, &cfg, |_| {}).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    out.last.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(matches!(Checkpoint::load(&dir.path().join("none.ckpt")), Err(Error::MissingArtifact(_))));
}

#[test]
fn transfer_copies_ssp_and_only_ssp() {
    let Architecture::Mfm { ssp, .. } = Architecture::toy_mfm(4) else { unreachable!() };
    let source = Model::<f32>::new(&Architecture::Ssp(ssp), 10).unwrap();
    let ckpt = Checkpoint::from_store(source.store());
    let mut mfm = Model::<f32>::new(&Architecture::toy_mfm(4), 11).unwrap();
    let before = Checkpoint::from_store(mfm.store());
    transfer_init(&mut mfm, &ckpt).unwrap();
    let after = Checkpoint::from_store(mfm.store());
    for r in &after.params {
        if r.name.starts_with("ssp.") {
            assert_eq!(Some(r), ckpt.param(&r.name));
        } else {
            assert_eq!(Some(r), before.param(&r.name));
        }
    }

    let deeper = Model::<f32>::new(&Architecture::Ssp(SspConfig { depth: 3, base_channels: 8, ..SspConfig::light(4) }), 0)
        .unwrap();
    match transfer_init(&mut mfm, &Checkpoint::from_store(deeper.store())) {
        Err(Error::Architecture(msg)) => assert!(msg.contains("ssp.enc2.a.conv.weight"), "{msg}"),
        other => panic!("expected architecture error, got {:?}", other),
    }
}
