use capsgan_core::datasets::{make_synthetic, SyntheticSpec};
use capsgan_core::gan::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    CheckpointError, GanConfig, GanModel, Variant, CHECKPOINT_VERSION,
};
use capsgan_core::Tensor;

fn data() -> Tensor {
    let spec = SyntheticSpec {
        samples_per_mode: 20,
        ..SyntheticSpec::default()
    };
    make_synthetic(&spec, 7).unwrap().to_signed()
}

fn trained(variant: Variant) -> GanModel {
    let mut cfg = GanConfig::synthetic(variant, 3);
    cfg.batch_size = 8;
    let mut m = GanModel::new(cfg).unwrap();
    m.train(&data(), 4, |_, _| {}).unwrap();
    m
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Capsule, Variant::Convolutional] {
        let m = trained(variant);
        let path = dir.path().join(format!("{variant}.ckpt"));
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.iteration, 4);
        assert_eq!((back.g_opt.step, back.d_opt.step), (4, 4));
        assert!(same_bits(
            &back.generate(16, 5).unwrap(),
            &m.generate(16, 5).unwrap()
        ));
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&m));
    }
}

#[test]
fn every_corrupted_byte_is_caught() {
    let bytes = encode_checkpoint(&trained(Variant::Capsule));
    // step through the file, skipping most payload bytes to keep this quick
    let mut pos = 0;
    while pos < bytes.len() {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        let err = decode_checkpoint(&bad).unwrap_err();
        match pos {
            0..=7 => assert!(matches!(err, CheckpointError::BadMagic), "{pos}: {err}"),
            8..=11 => assert!(
                matches!(err, CheckpointError::Version { .. }),
                "{pos}: {err}"
            ),
            12..=19 => assert!(
                matches!(
                    err,
                    CheckpointError::Truncated { .. } | CheckpointError::Malformed(_)
                ),
                "{pos}: {err}"
            ),
            _ => assert!(
                matches!(err, CheckpointError::Checksum { .. }),
                "{pos}: {err}"
            ),
        }
        pos += if pos < 64 { 1 } else { 97 };
    }
}

#[test]
fn truncation_is_its_own_error() {
    let bytes = encode_checkpoint(&trained(Variant::Capsule));
    for keep in [0, 3, 8, 15, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..keep]).unwrap_err();
        assert!(
            matches!(err, CheckpointError::Truncated { .. }),
            "{keep}: {err}"
        );
    }
}

#[test]
fn unknown_version_is_rejected() {
    let mut bytes = encode_checkpoint(&trained(Variant::Capsule));
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match decode_checkpoint(&bytes) {
        Err(CheckpointError::Version { found, supported }) => {
            assert_eq!(
                (found, supported),
                (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION)
            )
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn loader_checks_the_expected_config() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained(Variant::Capsule);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();

    let conv = GanConfig::synthetic(Variant::Convolutional, 3);
    match load_checkpoint_for(&path, &conv) {
        Err(CheckpointError::VariantMismatch { expected, found }) => {
            assert_eq!(
                (expected, found),
                (Variant::Convolutional, Variant::Capsule)
            )
        }
        other => panic!("{other:?}"),
    }
    let mut other_seed = m.config.clone();
    other_seed.seed = 99;
    assert!(matches!(
        load_checkpoint_for(&path, &other_seed),
        Err(CheckpointError::ConfigMismatch)
    ));
    assert_eq!(load_checkpoint_for(&path, &m.config).unwrap(), m);
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_checkpoint(dir.path().join("absent.ckpt")).unwrap_err();
    assert!(matches!(err, CheckpointError::Io { .. }), "{err}");
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let x = data();
    let mut cfg = GanConfig::synthetic(Variant::Capsule, 11);
    cfg.batch_size = 8;
    let mut straight = GanModel::new(cfg.clone()).unwrap();
    let full = straight.train(&x, 9, |_, _| {}).unwrap();

    let mut first = GanModel::new(cfg).unwrap();
    let a = first.train(&x, 4, |_, _| {}).unwrap();
    let mut resumed = decode_checkpoint(&encode_checkpoint(&first)).unwrap();
    let b = resumed.train(&x, 5, |_, _| {}).unwrap();

    let joined: Vec<f64> = a.d_loss.iter().chain(&b.d_loss).copied().collect();
    assert_eq!(joined, full.d_loss);
    assert_eq!(resumed, straight);
}
