mod common;

use common::tiny;
use prs_core::ScheduleKind;
use prs_harness::{checkpoint, Error, TrainState};

fn saved() -> (tempfile::TempDir, std::path::PathBuf, TrainState) {
    let s = TrainState::new(tiny(ScheduleKind::PrsLinear, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    checkpoint::save(&s, &p).unwrap();
    (dir, p, s)
}

#[test]
fn truncated_file_is_a_checkpoint_error() {
    let (_d, p, _) = saved();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    let err = checkpoint::load(&p).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    assert!(err.to_string().contains("truncated"), "{err}");
}

#[test]
fn foreign_tensor_file_is_rejected() {
    let (d, _, _) = saved();
    let p = d.path().join("plain.bin");
    let t = prs_core::Tensor::zeros(vec![2]);
    prs_core::store::write(&p, &serde_json::json!({"kind": "weights"}), &[("x", &t)]).unwrap();
    let err = checkpoint::load(&p).unwrap_err();
    assert!(
        err.to_string().contains("not a training checkpoint"),
        "{err}"
    );
}

#[test]
fn missing_or_misshapen_tensors_are_reported() {
    let (_d, p, _) = saved();
    let mut f = prs_core::store::read(&p).unwrap();
    let header = f.header.clone();

    let mut bad_version = header.clone();
    bad_version["format_version"] = 99.into();
    let refs: Vec<(&str, &prs_core::Tensor)> =
        f.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    prs_core::store::write(&p, &bad_version, &refs).unwrap();
    assert!(checkpoint::load(&p)
        .unwrap_err()
        .to_string()
        .contains("unsupported checkpoint version"));

    let removed = f.tensors.remove(0).0;
    let refs: Vec<(&str, &prs_core::Tensor)> =
        f.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    prs_core::store::write(&p, &header, &refs).unwrap();
    let err = checkpoint::load(&p).unwrap_err().to_string();
    assert!(
        err.contains("missing tensor") && err.contains(&removed),
        "{err}"
    );

    let mut f = prs_core::store::read(&p).unwrap();
    let (name, t) = &mut f.tensors[0];
    *t = prs_core::Tensor::zeros(vec![t.numel() + 1]);
    let name = name.clone();
    let mut tensors = vec![(removed.clone(), prs_core::Tensor::zeros(vec![1]))];
    tensors.extend(f.tensors);
    let refs: Vec<(&str, &prs_core::Tensor)> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    prs_core::store::write(&p, &header, &refs).unwrap();
    let err = checkpoint::load(&p).unwrap_err().to_string();
    assert!(err.contains("extents"), "{err} ({name})");
}

#[test]
fn round_trip_is_exact_at_initialisation() {
    let (_d, p, s) = saved();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(back.config, s.config);
    assert_eq!(back.model.layouts(), s.model.layouts());
    let a = prs_core::store::read(&p).unwrap();
    checkpoint::save(&back, &p).unwrap();
    let b = prs_core::store::read(&p).unwrap();
    assert_eq!(a, b);
}
