use nfseg::data::{decode_label_image, generate_synthetic, render_mask, write_mask, DatasetSplit};
use nfseg::decoders::Strategy;
use nfseg::fields::CodeSource;
use nfseg::harness::{
    compare, evaluate, log_csv, train_on, Checkpoint, ExperimentConfig, StopReason, COMPARE_CSV_HEADER, LOG_HEADER,
};
use nfseg::Error;

fn tiny(strategy: Strategy, source: CodeSource) -> (ExperimentConfig, DatasetSplit) {
    let mut cfg = ExperimentConfig::desk();
    cfg.model.strategy = strategy;
    cfg.model.code_source = source;
    cfg.model.hidden = 16;
    cfg.data.train_count = 4;
    cfg.data.val_count = 2;
    cfg.data.test_count = 2;
    cfg.training.batch_size = 2;
    cfg.training.points = 64;
    cfg.training.max_epochs = 2;
    let data = cfg.dataset().unwrap();
    (cfg, data)
}

#[test]
fn training_is_deterministic() {
    let (cfg, data) = tiny(Strategy::Film, CodeSource::Combined);
    let a = train_on(&cfg, &data, |_| {}).unwrap();
    let b = train_on(&cfg, &data, |_| {}).unwrap();
    assert_eq!(log_csv(&a.log), log_csv(&b.log));
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert!(log_csv(&a.log).starts_with(LOG_HEADER));
}

#[test]
fn zero_learning_rate_keeps_trainable_parameters() {
    let (mut cfg, data) = tiny(Strategy::Concat, CodeSource::Local);
    cfg.training.lr = 0.0;
    cfg.training.max_epochs = 1;
    let out = train_on(&cfg, &data, |_| {}).unwrap();
    let fresh = nfseg::harness::SegmentationModel::new(&cfg).unwrap();
    let p = &out.best.model.params;
    for id in p.ids().filter(|&id| p.is_trainable(id)) {
        assert_eq!(p.get(id).data(), fresh.params.get(id).data(), "{}", p.name(id));
    }
    // Running statistics still move.
    let moved = p
        .ids()
        .filter(|&id| !p.is_trainable(id))
        .any(|id| p.get(id).data() != fresh.params.get(id).data());
    assert!(moved);
}

#[test]
fn best_checkpoint_has_the_highest_logged_validation_iou() {
    let (mut cfg, data) = tiny(Strategy::Concat, CodeSource::Global);
    cfg.training.max_epochs = 4;
    let out = train_on(&cfg, &data, |_| {}).unwrap();
    let best = out.log.iter().filter_map(|r| r.val_iou).fold(f64::MIN, f64::max);
    assert_eq!(out.best.best_val_iou, best);
    assert_eq!(out.stop, StopReason::MaxEpochs);
    assert_eq!(out.log.iter().filter(|r| r.val_iou.is_some()).count(), 4);
}

#[test]
fn step_limit_and_patience_stop_training() {
    let (mut cfg, data) = tiny(Strategy::Concat, CodeSource::Global);
    cfg.training.max_steps = 3;
    cfg.training.max_epochs = 50;
    let out = train_on(&cfg, &data, |_| {}).unwrap();
    assert_eq!((out.steps, out.stop), (3, StopReason::MaxSteps));

    cfg.training.max_steps = 0;
    cfg.training.lr = 0.0;
    cfg.training.early_stop_patience = 2;
    let out = train_on(&cfg, &data, |_| {}).unwrap();
    assert_eq!(out.stop, StopReason::EarlyStopping);
    assert!(out.log.iter().filter(|r| r.val_iou.is_some()).count() <= 4);
}

#[test]
fn checkpoint_bytes_round_trip_and_reject_corruption() {
    let (cfg, data) = tiny(Strategy::CrossAttention, CodeSource::Tokens);
    let out = train_on(&cfg, &data, |_| {}).unwrap();
    let bytes = out.best.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.config, cfg);
    assert_eq!(back.epoch, out.best.epoch);
    let a = evaluate(&out.best, &data.test).unwrap();
    let b = evaluate(&back, &data.test).unwrap();
    assert_eq!(a.confusion, b.confusion);

    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.best.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Load { .. })));
}

#[test]
fn predicted_mask_png_decodes_to_the_same_classes() {
    let s = generate_synthetic(4, 64, 64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.png");
    write_mask(&path, &s.mask, 64, 64).unwrap();
    let img = image::open(&path).unwrap().to_rgb8();
    assert_eq!(img, render_mask(&s.mask, 64, 64).unwrap());
    assert_eq!(decode_label_image(&img, &path).unwrap(), s.mask);
}

#[test]
fn comparison_report_has_one_row_per_run_and_cell() {
    let (mut cfg, _) = tiny(Strategy::Concat, CodeSource::Global);
    cfg.training.max_epochs = 1;
    cfg.compare.sizes = vec![64];
    cfg.compare.strategies = vec!["concat:global".into(), "film:global".into()];
    let cmp = compare(&cfg, &[3, 4], |_| {}).unwrap();
    assert_eq!(cmp.runs.len(), 4);
    let csv = cmp.csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], COMPARE_CSV_HEADER);
    // 4 runs and 2 median rows.
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert_eq!(lines.iter().filter(|l| l.contains(",median,")).count(), 2);
    let table = cmp.table();
    assert!(table.contains("Concat") && table.contains("FiLM"), "{table}");
    assert!(table.contains("64"), "{table}");
}
