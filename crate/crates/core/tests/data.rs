use std::collections::HashSet;

use unclip::data::{
    box_downsample, generate_dataset, generate_unique, load_dataset, render_hr, save_dataset, Scene, Tokenizer,
    CONTEXT_LENGTH,
};
use unclip::Error;

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("unclip-data-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate_dataset(50, 3), generate_dataset(50, 3));
    assert_ne!(generate_dataset(50, 3), generate_dataset(50, 4));
    // Record i does not depend on n.
    assert_eq!(generate_dataset(10, 3)[..], generate_dataset(50, 3)[..10]);
}

#[test]
fn records_satisfy_invariants() {
    for r in generate_dataset(1000, 0) {
        assert_eq!(r.image.shape(), &[3, 16, 16]);
        assert_eq!(r.image_hr.shape(), &[3, 32, 32]);
        assert!(r.image.data().iter().chain(r.image_hr.data()).all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(r.image, box_downsample(&r.image_hr));
        assert_eq!(r.image_hr, render_hr(&r.scene));
        r.scene.validate().unwrap();
        assert_eq!(r.caption.ids.len(), CONTEXT_LENGTH);
        assert!(r.caption.ids.iter().all(|&i| i < Tokenizer.vocab_size()));
        assert_eq!(Tokenizer.encode(&r.scene.caption()).unwrap(), r.caption);
        assert_eq!(Tokenizer.decode(&r.caption).unwrap(), r.scene.caption());
    }
}

#[test]
fn distinct_scenes_get_distinct_captions() {
    let mut by_caption = std::collections::HashMap::new();
    for r in generate_dataset(3000, 1) {
        let mut s = r.scene.clone();
        s.background = unclip::data::Background::Black;
        if let Some(prev) = by_caption.insert(r.scene.caption(), s.clone()) {
            assert_eq!(prev, s, "two scenes share caption {}", r.scene.caption());
        }
    }
}

#[test]
fn unique_generation_has_no_duplicates() {
    let exclude: HashSet<String> = generate_dataset(20, 9).iter().map(|r| r.caption_text()).collect();
    let recs = generate_unique(300, 5, &exclude).unwrap();
    let caps: HashSet<String> = recs.iter().map(|r| r.caption_text()).collect();
    assert_eq!(caps.len(), 300);
    assert!(caps.is_disjoint(&exclude));
}

#[test]
fn file_roundtrip_is_bitwise() {
    let d = generate_dataset(100, 2);
    let p = tmp("rt.ucld");
    save_dataset(&p, &d).unwrap();
    let back = load_dataset(&p).unwrap();
    assert_eq!(back.len(), 100);
    for (a, b) in d.iter().zip(&back) {
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a, b);
    }
}

#[test]
fn empty_dataset_roundtrip() {
    let p = tmp("empty.ucld");
    save_dataset(&p, &[]).unwrap();
    assert!(load_dataset(&p).unwrap().is_empty());
}

#[test]
fn corrupt_and_truncated_files_rejected() {
    let p = tmp("bad.ucld");
    save_dataset(&p, &generate_dataset(3, 0)).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] = b'X';
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Format { .. })));
    bytes[0] = b'U';
    bytes[4] = 9;
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Format { .. })));
    bytes[4] = 1;
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Format { .. })));
}

#[test]
fn scene_rendering_is_pure() {
    let mut r = unclip::rng::stream(0, "t");
    let s = Scene::random(&mut r);
    assert_eq!(render_hr::<f32>(&s), render_hr::<f32>(&s.clone()));
}
