use dornet_core::depthio::{synth_scene, DegradationSpec, Kernel};
use dornet_core::fusion::ModelConfig;
use dornet_core::nn::ParamStore;
use dornet_core::train::{Checkpoint, Trainer, TrainConfig, BIN_FILE, MANIFEST_FILE};
use dornet_core::{CheckpointError, Error, Tensor};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig { steps: 2, batch_size: 1, lr: 1e-3, ..TrainConfig::default() };
    cfg.model = ModelConfig { c_feat: 4, c_deg: 4, c_code: 8, t_doft: 1, scale: 2, gen_hidden: 8, wgen_hidden: 4, ..ModelConfig::default() };
    cfg.data.hr_size = 16;
    cfg
}

fn trained() -> Checkpoint {
    let mut t = Trainer::new(&tiny()).unwrap();
    t.step().unwrap();
    t.step().unwrap();
    t.checkpoint()
}

fn ckpt_err(r: dornet_core::Result<Checkpoint>) -> CheckpointError {
    match r {
        Err(Error::Checkpoint(e)) => e,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn round_trip_reproduces_forward_bitwise() {
    let ck = trained();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, ck);

    let spec = DegradationSpec { blur_kernel: Kernel::isotropic(5, 1.0).unwrap(), scale: 2, noise_std: 0.0, hole_rate: 0.0, seed: 9 };
    let s = synth_scene(9, 16, &spec).unwrap();
    let a = Trainer::from_checkpoint(&ck).unwrap();
    let b = Trainer::from_checkpoint(&back).unwrap();
    let pa = a.model.predict(&a.params, &s.lr_depth, &s.rgb).unwrap();
    let pb = b.model.predict(&b.params, &s.lr_depth, &s.rgb).unwrap();
    let bits = |m: &dornet_core::depthio::DepthMap| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&pa.d_hr), bits(&pb.d_hr));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let mut straight = Trainer::new(&tiny()).unwrap();
    for _ in 0..3 {
        straight.step().unwrap();
    }
    let mut resumed = Trainer::from_checkpoint(&trained()).unwrap();
    resumed.step().unwrap();
    assert_eq!(resumed.params, straight.params);
}

#[test]
fn manifest_counts_params_and_moments() {
    let ck = trained();
    let m = ck.manifest();
    let n = ck.params.len();
    assert!(m.lines().any(|l| l == format!("tensors {}", 3 * n)));
    assert!(m.lines().any(|l| l == "step 2"));
    assert_eq!(m.lines().filter(|l| l.starts_with("adam.m/")).count(), n);
}

#[test]
fn truncated_file_is_rejected() {
    let ck = trained();
    let bytes = ck.to_bytes();
    let man = ck.manifest();
    for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
        let e = ckpt_err(Checkpoint::from_parts(&bytes[..cut], &man));
        assert!(matches!(e, CheckpointError::Truncated | CheckpointError::ChecksumMismatch(_)), "cut {cut}: {e:?}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(ckpt_err(Checkpoint::from_parts(&bad, &man)), CheckpointError::BadMagic);
}

#[test]
fn truncated_file_on_disk_leaves_no_state() {
    let ck = trained();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let path = dir.path().join(BIN_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn flipped_payload_bit_fails_checksum() {
    let ck = trained();
    let mut bytes = ck.to_bytes();
    // land inside the payload of the largest parameter
    let big = ck.params.tensors().iter().max_by_key(|t| t.len()).unwrap();
    let needle: Vec<u8> = big.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let at = bytes.windows(needle.len()).position(|w| w == needle.as_slice()).unwrap() + needle.len() / 2;
    bytes[at] ^= 0x10;
    let e = ckpt_err(Checkpoint::from_parts(&bytes, &ck.manifest()));
    assert!(matches!(e, CheckpointError::ChecksumMismatch(_)), "{e:?}");
}

#[test]
fn edited_manifest_checksum_names_the_tensor() {
    let ck = trained();
    let name = ck.params.name(0).to_string();
    let man: String = ck
        .manifest()
        .lines()
        .map(|l| {
            if l.starts_with(&format!("{name} ")) {
                let mut f: Vec<String> = l.split_whitespace().map(String::from).collect();
                f[2] = "0".repeat(64);
                f.join(" ")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    assert_eq!(ckpt_err(Checkpoint::from_parts(&ck.to_bytes(), &man)), CheckpointError::ChecksumMismatch(name));
}

fn rebuilt(ck: &Checkpoint, edit: impl Fn(&str, &Tensor<f32>) -> Option<Tensor<f32>>) -> Checkpoint {
    let mut params = ParamStore::default();
    for (n, t) in ck.params.names().iter().zip(ck.params.tensors()) {
        if let Some(t) = edit(n, t) {
            params.push(n.clone(), t);
        }
    }
    Checkpoint { params, ..ck.clone() }
}

#[test]
fn missing_tensor_is_named() {
    let ck = trained();
    let victim = ck.params.name(3).to_string();
    let broken = rebuilt(&ck, |n, t| (n != victim).then(|| t.clone()));
    let e = ckpt_err(Checkpoint::from_parts(&broken.to_bytes(), &broken.manifest()));
    assert_eq!(e, CheckpointError::MissingTensor(victim));
}

#[test]
fn shape_mismatch_is_reported() {
    let ck = trained();
    let victim = ck.params.name(0).to_string();
    let broken = rebuilt(&ck, |n, t| Some(if n == victim { Tensor::zeros(&[t.len() + 1]) } else { t.clone() }));
    match ckpt_err(Checkpoint::from_parts(&broken.to_bytes(), &broken.manifest())) {
        CheckpointError::ShapeMismatch { name, expected, .. } => {
            assert_eq!(name, victim);
            assert_eq!(expected, ck.params.tensors()[0].shape());
        }
        e => panic!("{e:?}"),
    }
}

#[test]
fn manifest_file_is_required() {
    let ck = trained();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}
