mod common;

use std::io::Write;
use std::path::PathBuf;

use rwgcn_core::io::{
    checkpoint_to_bytes, load_checkpoint, load_config, parse_clip, parse_clip_file, read_clips_jsonl, save_checkpoint,
    serialize_clip, to_tensor,
};
use rwgcn_core::{Error, Variant};
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn read(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

#[derive(Deserialize)]
struct TensorFixture {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[test]
fn canonical_documents_round_trip_byte_for_byte() {
    for name in ["two_people.canonical.json", "minimal.canonical.json"] {
        let text = read(name);
        let record = parse_clip(&text, name).unwrap();
        assert_eq!(serialize_clip(&record), text, "{name}");
    }
}

#[test]
fn pretty_document_canonicalizes() {
    let pretty = parse_clip_file(&fixture("two_people.json")).unwrap();
    assert_eq!(serialize_clip(&pretty), read("two_people.canonical.json"));
}

#[test]
fn tensor_matches_hand_fixture() {
    let record = parse_clip_file(&fixture("two_people.json")).unwrap();
    let clip = to_tensor(&record, 2).unwrap();
    let expected: TensorFixture = serde_json::from_str(&read("two_people.tensor.json")).unwrap();
    assert_eq!(clip.data.shape(), expected.shape.as_slice());
    assert_eq!(clip.data.data(), expected.data.as_slice());
    assert_eq!(clip.fps, 30.0);
}

#[test]
fn single_person_fills_only_slot_zero() {
    let record = parse_clip(&read("minimal.canonical.json"), "m").unwrap();
    let mut record = record;
    record.frames[0].people[0].keypoints[2] = [0.5, -0.25];
    let clip = to_tensor(&record, 3).unwrap();
    assert_eq!(clip.data.get(&[0, 0, 0, 2]), 0.5);
    assert_eq!(clip.data.get(&[0, 1, 0, 2]), -0.25);
    for slot in 1..3 {
        assert!(clip.data.slice_outer(slot).unwrap().data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn distinct_records_give_distinct_tensors() {
    let base = parse_clip(&read("minimal.canonical.json"), "m").unwrap();
    let mut seen = Vec::new();
    for j in 0..18 {
        for slot in 0..2 {
            let mut r = base.clone();
            r.frames[0].people[0].slot = slot;
            r.frames[0].people[0].keypoints[j] = [1.0, 0.0];
            seen.push(to_tensor(&r, 2).unwrap().data);
        }
    }
    for i in 0..seen.len() {
        for k in i + 1..seen.len() {
            assert_ne!(seen[i], seen[k]);
        }
    }
}

#[test]
fn jsonl_stream_of_fixtures() {
    let line = read("two_people.canonical.json");
    let text = format!("{line}\n{}\n", read("minimal.canonical.json"));
    let clips = read_clips_jsonl(text.as_bytes(), "stream").unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(clips[0].label, Some(1));
    assert_eq!(clips[1].label, None);
}

#[test]
fn parse_errors_name_path_and_field() {
    let text = read("two_people.canonical.json").replacen("\"slot\":1", "\"slot\":0", 1);
    match parse_clip(&text, "dup.json") {
        Err(Error::Parse { path, field, .. }) => {
            assert!(path.starts_with("dup.json"), "{path}");
            assert!(path.contains("frames[0].people[1]"), "{path}");
            assert_eq!(field, "slot");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let mut r = common::rng(3);
    let mut net = common::small_net(4, 3);
    common::open_gates(&mut net, Variant::SemanticControl, &mut r);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(checkpoint_to_bytes(&back), std::fs::read(&path).unwrap());
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io(_))
    ));
}

#[test]
fn config_file_loads_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    let mut f = std::fs::File::create(&good).unwrap();
    writeln!(
        f,
        "variant = \"cf\"\n[window]\nwindow_len = 10\n[noise]\nframe_drop_p = 0.2"
    )
    .unwrap();
    let cfg = load_config(&good).unwrap();
    assert_eq!(cfg.variant, Some(Variant::Control));
    assert_eq!(cfg.window.window_len, Some(10));
    assert_eq!(cfg.noise.frame_drop_p, Some(0.2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[window]\nstride = 3\n").unwrap();
    let err = load_config(&bad).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("bad.toml"), "{err}");
}
