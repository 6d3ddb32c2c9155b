use std::collections::HashSet;

use protoguide_core::SamplerSpec;
use protoguide_data::synthetic::{write_dataset, Pattern};
use protoguide_data::*;

fn dataset(root: &std::path::Path) {
    let classes = [("ramp_h", Pattern::HorizontalRamp), ("ramp_v", Pattern::VerticalRamp), ("flat", Pattern::Solid(90))];
    write_dataset(root, &classes, 10, 8, 3).unwrap();
}

#[test]
fn manifest_embeddings_and_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("images");
    dataset(&root);
    let m = build_manifest(&root, 6, 3, 1, "synthetic").unwrap();
    assert_eq!(m.class_names, ["flat", "ramp_h", "ramp_v"]);
    assert_eq!(m.split(Split::Train).count(), 18);
    let train: HashSet<_> = m.split(Split::Train).map(|r| &r.path).collect();
    assert!(m.split(Split::Holdout).all(|r| !train.contains(&r.path)));
    assert_eq!(m, build_manifest(&root, 6, 3, 1, "synthetic").unwrap());
    assert_ne!(m, build_manifest(&root, 6, 3, 2, "synthetic").unwrap());

    let path = tmp.path().join("manifest.json");
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);

    let encoder = PooledGridEncoder::new(3, 2);
    let cache = tmp.path().join("cache");
    let first = extract_embeddings(&m, Some(Split::Train), &encoder, &cache, 8).unwrap();
    assert_eq!((first.rows.len(), first.dim), (18, 12));
    // flat images are identical, so only the first of them is encoded
    assert_eq!((first.encoded, first.cache_hits), (13, 5));
    let again = extract_embeddings(&m, None, &encoder, &cache, 8).unwrap();
    assert_eq!(again.rows.len(), 27);
    assert!(again.cache_hits >= 18);
    let train_rows: Vec<_> = again.rows.iter().zip(&m.records).filter(|(_, r)| r.split == Split::Train).map(|(v, _)| v.clone()).collect();
    assert_eq!(train_rows, first.rows);

    // rows hold four quadrant means per channel: equal for the flat class,
    // rising left to right for the horizontal ramp
    let flat = &first.rows[first.labels.iter().position(|&l| l == 0).unwrap()];
    assert!(flat.chunks(4).all(|q| q.iter().all(|&v| (v - q[0]).abs() < 1e-12)));
    let ramp = &first.rows[first.labels.iter().position(|&l| l == 1).unwrap()];
    assert!(ramp[1] > ramp[0] && ramp[3] > ramp[2]);

    assert!(matches!(build_manifest(&root, 8, 3, 1, "x"), Err(DataError::InsufficientImages { .. })));
    assert!(matches!(build_manifest(&tmp.path().join("no"), 1, 1, 1, "x"), Err(DataError::MissingRoot(_))));
}

#[test]
fn samples_to_annotations_and_back() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut entries = Vec::new();
    for (class_id, name) in ["a", "b"].iter().enumerate() {
        for index in 0..3 {
            let img = protoguide_core::ImageTensor::filled([3, 4, 4], class_id as f64 - 0.5);
            let path = format!("{name}/{index:04}.png");
            std::fs::create_dir_all(dir.join(name)).unwrap();
            save_png(&dir.join(&path), &img).unwrap();
            entries.push(SampleEntry { path, class_id, class_name: name.to_string(), index });
        }
    }
    let set = SampleSet {
        schema_version: 1,
        run_id: "r".into(),
        mode: "prototype_guided".into(),
        checkpoint: "diffusion/prototype_guided/checkpoints/epoch_000001.json".into(),
        seed: 0,
        sampler: SamplerSpec::default(),
        class_names: vec!["a".into(), "b".into()],
        entries,
    };
    set.save(&dir.join("samples.json")).unwrap();
    let set = SampleSet::load(&dir.join("samples.json")).unwrap();
    let back = load_and_normalize(&set.resolve(dir, &set.entries[4]), 4).unwrap();
    assert!(back.data().iter().all(|&v| (v - 0.5).abs() < 0.01));

    let criteria = vec!["shape".to_string(), "texture".to_string()];
    let export = export_annotations(&set, dir, &criteria).unwrap();
    export.save(&dir.join("tasks.json")).unwrap();
    let export = AnnotationExport::load(&dir.join("tasks.json")).unwrap();
    assert_eq!(export.tasks.len(), 6);
    let answers = r#"[
        {"id": 0, "choice": "plausible", "criteria": ["shape"]},
        {"id": 1, "choice": "implausible"},
        {"id": 3, "choice": "plausible", "criteria": ["shape", "texture"]}
    ]"#;
    std::fs::write(dir.join("done.json"), answers).unwrap();
    let done = load_completed(&dir.join("done.json")).unwrap();
    let stats = import_annotations(&export, &done).unwrap();
    assert_eq!(stats.len(), 2);
    assert_eq!((stats[0].annotated, stats[0].plausible), (2, 1));
    assert_eq!(stats[0].fraction, 50.0);
    assert_eq!(stats[1].fraction, 100.0);
}
