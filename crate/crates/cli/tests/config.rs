use std::path::PathBuf;

use point2vec::pretraining::Mode;
use point2vec::{Error, MaskStrategy};
use point2vec_cli::RunConfig;

fn shipped(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn full_scale_file_matches_hyperparameter_tables() {
    let c = shipped("full.json");
    let e = &c.model.encoder;
    assert_eq!((e.depth, e.dim, e.heads, e.drop_path), (12, 384, 6, 0.0));
    assert_eq!(c.model.pointnet.first, [128, 256]);
    assert_eq!(c.model.pointnet.second, [512, 384]);

    let p = &c.pretrain;
    assert_eq!(p.mode, Mode::Point2vec);
    assert_eq!(p.mask_strategy, MaskStrategy::Random);
    assert_eq!(p.mask_ratio, 0.65);
    assert_eq!(p.target_layers, 6);
    assert_eq!(p.decoder_depth(), Some(4));
    assert_eq!(p.batch_size(), 512);
    assert_eq!(p.lr(), 1e-3);
    assert_eq!((p.epochs, p.warmup_epochs), (800, 80));
    assert_eq!(p.optimizer.weight_decay, 0.05);
    assert_eq!(
        (p.ema.tau_start, p.ema.tau_end, p.ema.warmup_epochs),
        (0.9998, 0.99999, 200)
    );

    let k = &c.classification;
    assert_eq!(
        (k.epochs, k.batch_size, k.warmup_epochs, k.freeze_epochs),
        (150, 32, 10, 100)
    );
    assert_eq!(
        (k.lr, k.scratch_lr, k.optimizer.weight_decay),
        (3e-4, 1e-3, 0.05)
    );
    assert_eq!(
        (k.label_smoothing, k.head_dropout, k.drop_path),
        (0.2, 0.5, 0.2)
    );
    assert_eq!(k.head_hidden, vec![256, 256]);
    assert_eq!((k.points, k.centers, k.group_size), (1024, 64, 32));

    let s = &c.part_segmentation;
    assert_eq!((s.epochs, s.batch_size, s.warmup_epochs), (300, 16, 10));
    assert_eq!((s.lr, s.head_dropout, s.drop_path), (2e-4, 0.5, 0.2));
    assert_eq!(s.head_hidden, vec![512, 256]);
    assert_eq!((s.points, s.centers, s.group_size), (2048, 128, 32));
}

#[test]
fn full_scale_file_agrees_with_built_in_defaults() {
    let mut c = shipped("full.json");
    // mode-dependent values are spelled out in the file
    c.pretrain.decoder_depth = None;
    c.pretrain.batch_size = None;
    c.pretrain.lr = None;
    assert_eq!(c, RunConfig::default());
}

#[test]
fn data2vec_mode_defaults() {
    let c = RunConfig::parse(r#"{"pretrain": {"mode": "data2vec_pc"}}"#).unwrap();
    assert_eq!(
        (
            c.pretrain.batch_size(),
            c.pretrain.lr(),
            c.pretrain.decoder_depth()
        ),
        (2048, 2e-3, None)
    );
}

#[test]
fn desk_schedule_is_scaled() {
    let c = shipped("desk.json");
    let p = &c.pretrain;
    assert_eq!((p.batch_size(), p.epochs, p.ema.warmup_epochs), (32, 30, 8));
    assert_eq!((p.ema.tau_start, p.ema.tau_end), (0.9998, 0.99999));
    let seg = shipped("desk-partseg.json");
    assert_eq!(seg.model.encoder.depth, 12);
    assert_eq!(
        (
            seg.pretrain.batch_size(),
            seg.pretrain.epochs,
            seg.pretrain.ema.warmup_epochs
        ),
        (32, 30, 8)
    );
}

#[test]
fn decoder_keys_rejected_in_data2vec_mode() {
    let text = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/full.json"),
    )
    .unwrap()
    .replace(r#""mode": "point2vec""#, r#""mode": "data2vec_pc""#);
    match RunConfig::parse(&text) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "pretrain.decoder_depth"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn relative_manifest_resolves_beside_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"data": {"manifest": "data/manifest.json"}}"#).unwrap();
    let c = RunConfig::load(&path).unwrap();
    assert_eq!(c.data.manifest, Some(dir.path().join("data/manifest.json")));
}
