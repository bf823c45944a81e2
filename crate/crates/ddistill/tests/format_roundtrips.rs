//! Byte-level contracts for the on-disk formats: IDX, CIFAR binary, model
//! checkpoints, synthetic image sets, and soft-label sets.

use std::fs;
use std::path::Path;

use ddistill::checkpoint::{fingerprint, load_checkpoint, save_checkpoint};
use ddistill::data::{
    load_cifar_binary, load_idx_images, load_idx_labels, write_cifar_binary, write_idx_images,
    write_idx_labels, CifarVariant, NormStats,
};
use ddistill::softlabel::{load_softlabels, save_softlabels, SoftLabelManifest, SoftLabelSet};
use ddistill::synthset::{load_synthset, save_synthset, SynthManifest, SynthSet};
use ddistill_core::augment::CropParams;
use ddistill_core::nn::{Architecture, CheckpointMeta, ModelSpec, Network};
use ddistill_core::rng::{purpose, stream_rng};

fn tmpdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

// IDX image header: magic 0x00000803, then count/height/width, all u32
// big-endian, then row-major u8 pixels.
#[test]
fn idx_image_bytes_match_layout() {
    let dir = tmpdir();
    let path = dir.path().join("img.idx");
    let images: Vec<f32> = vec![0.0, 1.0, 0.5, 0.25, 0.75, 0.1];
    write_idx_images(&path, &images, 2, 3).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[0..4], &[0, 0, 8, 3]);
    assert_eq!(&bytes[4..8], 1u32.to_be_bytes().as_slice());
    assert_eq!(&bytes[8..12], 2u32.to_be_bytes().as_slice());
    assert_eq!(&bytes[12..16], 3u32.to_be_bytes().as_slice());
    assert_eq!(bytes.len(), 16 + 6);
    assert_eq!(bytes[16], 0);
    assert_eq!(bytes[17], 255);
    assert_eq!(bytes[18], (0.5f32 * 255.0).round() as u8);
}

#[test]
fn idx_label_bytes_match_layout() {
    let dir = tmpdir();
    let path = dir.path().join("lab.idx");
    write_idx_labels(&path, &[3, 0, 9]).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[0..4], &[0, 0, 8, 1]);
    assert_eq!(&bytes[4..8], 3u32.to_be_bytes().as_slice());
    assert_eq!(&bytes[8..], &[3, 0, 9]);
    assert_eq!(load_idx_labels(&path).unwrap(), vec![3, 0, 9]);
}

// Through one u8 quantization the values are stable: load(write(load(x)))
// equals load(x) bit for bit.
#[test]
fn idx_image_roundtrip_is_stable_after_quantization() {
    let dir = tmpdir();
    let a = dir.path().join("a.idx");
    let b = dir.path().join("b.idx");
    let images: Vec<f32> = (0..28 * 28 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
    write_idx_images(&a, &images, 28, 28).unwrap();
    let (loaded, h, w) = load_idx_images(&a).unwrap();
    assert_eq!((h, w), (28, 28));
    write_idx_images(&b, &loaded, 28, 28).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn idx_rejects_bad_magic_truncation_and_trailing_bytes() {
    let dir = tmpdir();
    let path = dir.path().join("img.idx");
    write_idx_images(&path, &[0.5; 4], 2, 2).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[3] = 1;
    fs::write(&path, &bad).unwrap();
    let err = load_idx_images(&path).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");

    fs::write(&path, &good[..good.len() - 1]).unwrap();
    let err = load_idx_images(&path).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");

    let mut long = good.clone();
    long.push(0);
    fs::write(&path, &long).unwrap();
    let err = load_idx_images(&path).unwrap_err().to_string();
    assert!(err.contains("trailing"), "{err}");

    let lab = dir.path().join("lab.idx");
    write_idx_labels(&lab, &[1]).unwrap();
    let mut bytes = fs::read(&lab).unwrap();
    bytes[3] = 3;
    fs::write(&lab, &bytes).unwrap();
    let err = load_idx_labels(&lab).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

// CIFAR binary row: one label byte, then 3072 pixel bytes channel-planar.
#[test]
fn cifar_row_layout_and_roundtrip() {
    let dir = tmpdir();
    let path = dir.path().join("train.bin");
    let n = 3;
    let mut images = vec![0.0f32; n * 3072];
    for (i, v) in images.iter_mut().enumerate() {
        *v = ((i * 7) % 256) as f32 / 255.0;
    }
    let labels = vec![2u32, 0, 9];
    write_cifar_binary(&path, &images, &labels, CifarVariant::C10).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), n * 3073);
    assert_eq!(bytes[0], 2);
    assert_eq!(bytes[3073], 0);
    assert_eq!(bytes[2 * 3073], 9);
    assert_eq!(bytes[1], 0);
    assert_eq!(bytes[2], (7.0f32 / 255.0 * 255.0).round() as u8);

    let (loaded, got_labels) = load_cifar_binary(&path, CifarVariant::C10).unwrap();
    assert_eq!(got_labels, labels);
    let rewrite = dir.path().join("again.bin");
    write_cifar_binary(&rewrite, &loaded, &got_labels, CifarVariant::C10).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&rewrite).unwrap());
}

#[test]
fn cifar_rejects_truncation_and_out_of_range_labels() {
    let dir = tmpdir();
    let path = dir.path().join("train.bin");
    write_cifar_binary(&path, &[0.5; 3072], &[1], CifarVariant::C10).unwrap();
    let good = fs::read(&path).unwrap();

    fs::write(&path, &good[..good.len() - 10]).unwrap();
    assert!(load_cifar_binary(&path, CifarVariant::C10).is_err());

    let mut bad = good.clone();
    bad[0] = 10;
    fs::write(&path, &bad).unwrap();
    assert!(load_cifar_binary(&path, CifarVariant::C10).is_err());
}

// The 100-class rows carry a coarse byte (fine/5) before the fine label.
#[test]
fn cifar100_rows_have_coarse_and_fine_bytes() {
    let dir = tmpdir();
    let path = dir.path().join("train.bin");
    write_cifar_binary(&path, &[0.25; 2 * 3072], &[37, 99], CifarVariant::C100).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 2 * 3074);
    assert_eq!((bytes[0], bytes[1]), (7, 37));
    assert_eq!((bytes[3074], bytes[3075]), (19, 99));
    let (_, labels) = load_cifar_binary(&path, CifarVariant::C100).unwrap();
    assert_eq!(labels, vec![37, 99]);

    write_cifar_binary(&path, &[0.25; 3072], &[150], CifarVariant::C100).unwrap();
    assert!(load_cifar_binary(&path, CifarVariant::C100).is_err());
}

fn small_net(seed: u64) -> (ModelSpec, Network<f32>) {
    let spec = ModelSpec::new(Architecture::parse("convnet_bn_3").unwrap(), 1, 8, 8, 4);
    let mut rng = stream_rng(seed, purpose::MODEL_INIT, 0);
    let net = Network::init(&spec, &mut rng, false).unwrap();
    (spec, net)
}

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        stage: "squeeze".into(),
        dataset: "unit".into(),
        seed: 7,
        epochs: 1,
        val_top1: 0.5,
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tmpdir();
    let path = dir.path().join("net.ckpt");
    let (spec, net) = small_net(3);
    save_checkpoint(&path, &net, meta()).unwrap();
    let ckpt = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ckpt.spec, spec);
    assert_eq!(ckpt.meta.stage, "squeeze");
    assert_eq!(ckpt.meta.seed, 7);

    let flat: Vec<f32> = net.params().iter().flat_map(|t| t.to_vec()).collect();
    let stored: Vec<f32> = ckpt.params.iter().flatten().copied().collect();
    assert_eq!(flat.len(), stored.len());
    for (a, b) in flat.iter().zip(stored.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    // Same bytes in, same bytes out.
    let copy = dir.path().join("copy.ckpt");
    let net2 = Network::from_checkpoint(&ckpt, false).unwrap();
    save_checkpoint(&copy, &net2, ckpt.meta.clone()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&copy).unwrap());
    assert_eq!(fingerprint(&path).unwrap(), fingerprint(&copy).unwrap());
}

#[test]
fn checkpoint_rejects_bad_magic_dtype_and_trailing_bytes() {
    let dir = tmpdir();
    let path = dir.path().join("net.ckpt");
    let (_, net) = small_net(4);
    save_checkpoint(&path, &net, meta()).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");

    fs::write(&path, &good).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
    assert!(err.contains("dtype") || err.contains("f32"), "{err}");

    let mut long = good.clone();
    long.push(9);
    fs::write(&path, &long).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
    assert!(err.contains("trailing"), "{err}");

    fs::write(&path, &good[..good.len() - 2]).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
}

fn sample_synth() -> SynthSet<f32> {
    let classes = 3;
    let ipc = 2;
    let pixels = 1 * 4 * 4;
    let n = classes * ipc;
    let manifest = SynthManifest {
        version: ddistill::synthset::VERSION,
        dtype: "f32".into(),
        dataset: "unit".into(),
        classes,
        ipc,
        channels: 1,
        height: 4,
        width: 4,
        labels: (0..n as u32).map(|g| g % classes as u32).collect(),
        norm: NormStats { mean: vec![0.5], std: vec![0.25] },
        teacher_fingerprint: "cafe".into(),
        teacher_val_top1: 0.9,
        seed: 11,
        config_hash: "abc123abc123".into(),
        blob: ddistill::synthset::BLOB_NAME.into(),
    };
    let images: Vec<f32> = (0..n * pixels).map(|i| (i as f32 * 0.37).sin()).collect();
    SynthSet { manifest, images }
}

#[test]
fn synthset_roundtrip_is_bit_exact() {
    let dir = tmpdir();
    let set = sample_synth();
    save_synthset(dir.path(), &set).unwrap();
    let loaded = load_synthset::<f32>(dir.path()).unwrap();
    assert_eq!(loaded.manifest.labels, set.manifest.labels);
    assert_eq!(loaded.images.len(), set.images.len());
    for (a, b) in set.images.iter().zip(loaded.images.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // Previews are written as one PPM contact sheet per class.
    for class in 0..set.manifest.classes {
        let ppm = dir.path().join("previews").join(format!("class_{class:03}.ppm"));
        let head = fs::read(&ppm).unwrap();
        assert_eq!(&head[..3], b"P6\n");
    }
}

#[test]
fn synthset_rejects_dtype_blob_and_label_corruption() {
    let dir = tmpdir();
    let set = sample_synth();
    save_synthset(dir.path(), &set).unwrap();

    assert!(load_synthset::<f64>(dir.path()).is_err());

    let blob = dir.path().join(ddistill::synthset::BLOB_NAME);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_synthset::<f32>(dir.path()).is_err());
    fs::write(&blob, &bytes).unwrap();
    assert!(load_synthset::<f32>(dir.path()).is_ok());

    let manifest_path = dir.path().join(ddistill::synthset::MANIFEST_NAME);
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest["labels"][0] = serde_json::json!(99);
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    assert!(load_synthset::<f32>(dir.path()).is_err());
}

fn sample_labels() -> SoftLabelSet {
    let manifest = SoftLabelManifest {
        version: ddistill::softlabel::VERSION,
        epochs: 2,
        images: 3,
        classes: 4,
        view_height: 8,
        view_width: 8,
        temperature: 2.0,
        crop_lower: 0.3,
        crop_upper: 1.0,
        flip: true,
        teacher_fingerprint: "beef".into(),
        seed: 5,
        config_hash: "fedcba987654".into(),
        blob: ddistill::softlabel::BLOB_NAME.into(),
    };
    let mut set = SoftLabelSet::new(manifest);
    for r in 0..6u32 {
        let crop = CropParams {
            top: r,
            left: r + 1,
            height: 4 + r,
            width: 5 + r,
            flip: r % 2 == 0,
        };
        let base = r as f32;
        let probs = [base, base + 0.25, base + 0.5, base + 0.75];
        set.push(crop, &probs).unwrap();
    }
    set
}

#[test]
fn softlabel_roundtrip_preserves_records() {
    let dir = tmpdir();
    let set = sample_labels();
    assert!(set.is_complete());
    save_softlabels(dir.path(), &set).unwrap();
    let loaded = load_softlabels(dir.path()).unwrap();
    assert_eq!(loaded.manifest.epochs, 2);
    // record(epoch, image) indexes epoch-major.
    let (crop, probs) = loaded.record(1, 2);
    assert_eq!((crop.top, crop.left, crop.height, crop.width, crop.flip), (5, 6, 9, 10, false));
    assert_eq!(probs, &[5.0, 5.25, 5.5, 5.75]);
    let (crop0, _) = loaded.record(0, 0);
    assert_eq!((crop0.top, crop0.flip), (0, true));

    // Byte layout: per record 5 u32 LE then classes f32 LE.
    let bytes = fs::read(dir.path().join(ddistill::softlabel::BLOB_NAME)).unwrap();
    assert_eq!(bytes.len(), 6 * (5 * 4 + 4 * 4));
    assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 0);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0.0);
}

#[test]
fn softlabel_rejects_wrong_blob_length_and_incomplete_push() {
    let dir = tmpdir();
    let set = sample_labels();
    save_softlabels(dir.path(), &set).unwrap();
    let blob = dir.path().join(ddistill::softlabel::BLOB_NAME);
    let mut bytes = fs::read(&blob).unwrap();
    bytes.push(0);
    fs::write(&blob, &bytes).unwrap();
    assert!(load_softlabels(dir.path()).is_err());

    let mut partial = SoftLabelSet::new(sample_labels().manifest.clone());
    partial
        .push(CropParams { top: 0, left: 0, height: 2, width: 2, flip: false }, &[0.25; 4])
        .unwrap();
    assert!(!partial.is_complete());
    assert!(save_softlabels(dir.path(), &partial).is_err());

    let wrong_probs = partial.push(
        CropParams { top: 0, left: 0, height: 2, width: 2, flip: false },
        &[0.5; 3],
    );
    assert!(wrong_probs.is_err());
}

#[test]
fn fingerprint_tracks_content_not_name() {
    let dir = tmpdir();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    fs::write(&a, b"same bytes").unwrap();
    fs::write(&b, b"same bytes").unwrap();
    assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    fs::write(&b, b"same bytez").unwrap();
    assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    assert_eq!(fingerprint(&a).unwrap().len(), 16);
    assert!(fingerprint(Path::new("/nonexistent/x.bin")).is_err());
}
