//! End-to-end data pipeline: synth corpus on disk, manifest validation,
//! window iteration with label joins, and budget subsampling.

use std::collections::BTreeSet;

use tacrep_core::data::{
    count_selected, iterate_windows, load_manifest, split_by_budget, split_manifest,
    synth_generate, validate_manifest, SynthConfig, WindowMode,
};

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        n_sequences: 4,
        frames_per_sequence: 30,
        noise_sigma: 0.01,
        seed,
        resolution: (32, 32),
        ..Default::default()
    }
}

#[test]
fn synth_to_disk_roundtrip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, labels) = synth_generate(&small_cfg(5), dir.path()).unwrap();
    validate_manifest(&manifest).unwrap();
    assert_eq!(manifest.sequences.len(), 4);
    assert_eq!(labels.iter().map(Vec::len).sum::<usize>(), 120);

    let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    validate_manifest(&loaded).unwrap();
    assert_eq!(loaded.sequences.len(), 4);
}

#[test]
fn synth_disk_determinism() {
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    synth_generate(&small_cfg(9), da.path()).unwrap();
    synth_generate(&small_cfg(9), db.path()).unwrap();
    for s in 0..4 {
        for f in [0usize, 7, 29] {
            let pa = da
                .path()
                .join(format!("sequences/seq_{s:04}/frame_{f:06}.png"));
            let pb = db
                .path()
                .join(format!("sequences/seq_{s:04}/frame_{f:06}.png"));
            assert_eq!(
                std::fs::read(&pa).unwrap(),
                std::fs::read(&pb).unwrap(),
                "png bytes differ for seq {s} frame {f}"
            );
        }
        let la = std::fs::read(da.path().join(format!("sequences/seq_{s:04}/labels.csv"))).unwrap();
        let lb = std::fs::read(db.path().join(format!("sequences/seq_{s:04}/labels.csv"))).unwrap();
        assert_eq!(la, lb);
    }
}

#[test]
fn window_iteration_counts_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = synth_generate(&small_cfg(2), dir.path()).unwrap();

    // one pair window per frame
    let windows: Vec<_> = iterate_windows(&manifest, WindowMode::Pair, 5)
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    assert_eq!(windows.len(), 120);
    for item in &windows {
        assert_eq!(item.window.n_channels(), 6);
    }

    // clip mode: 4 frames each
    let clips: Vec<_> = iterate_windows(&manifest, WindowMode::Clip, 5)
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    assert_eq!(clips.len(), 120);
    for item in &clips {
        assert_eq!(item.window.n_frames(), 4);
    }

    // labels joined by nearest timestamp: brute-force join oracle
    let labels = tacrep_core::data::read_label_csv(
        &dir.path().join("sequences/seq_0000/labels.csv"),
    )
    .unwrap();
    for item in windows.iter().take(30) {
        let anchor_ts = (item.window.anchor_index as f64 * 1e6 / 60.0) as i64;
        let brute = labels
            .iter()
            .min_by_key(|r| (r.timestamp_us - anchor_ts).abs())
            .unwrap();
        assert_eq!(item.label.timestamp_us, brute.timestamp_us);
    }
}

#[test]
fn empty_manifest_yields_no_windows() {
    let dir = tempfile::tempdir().unwrap();
    let (mut manifest, _) = synth_generate(&small_cfg(3), dir.path()).unwrap();
    manifest.sequences.clear();
    let n = iterate_windows(&manifest, WindowMode::Pair, 5).count();
    assert_eq!(n, 0);
}

#[test]
fn sharded_streams_partition_windows() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = synth_generate(&small_cfg(4), dir.path()).unwrap();
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for worker in 0..3 {
        for item in iterate_windows(&manifest, WindowMode::Pair, 5).sharded(worker, 3) {
            let item = item.unwrap();
            seen.insert((item.sequence_id.clone(), item.window.anchor_index));
            total += 1;
        }
    }
    assert_eq!(total, 120);
    assert_eq!(seen.len(), 120);
}

#[test]
fn budget_split_is_deterministic_nested_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = synth_generate(&small_cfg(7), dir.path()).unwrap();

    let b10a = split_by_budget(&manifest, 0.1, 42).unwrap();
    let b10b = split_by_budget(&manifest, 0.1, 42).unwrap();
    assert_eq!(b10a.selected_windows, b10b.selected_windows);

    let b10c = split_by_budget(&manifest, 0.1, 43).unwrap();
    assert_ne!(b10a.selected_windows, b10c.selected_windows);

    // nesting: 1/100 subset of the 1/10 subset of the 1/3 subset
    let sets: Vec<BTreeSet<(String, usize)>> = [0.01, 0.1, 1.0 / 3.0]
        .iter()
        .map(|&f| {
            let m = split_by_budget(&manifest, f, 42).unwrap();
            m.selected_windows
                .unwrap()
                .into_iter()
                .flat_map(|(sid, v)| v.into_iter().map(move |t| (sid.clone(), t)))
                .collect()
        })
        .collect();
    assert!(sets[0].is_subset(&sets[1]), "1/100 not nested in 1/10");
    assert!(sets[1].is_subset(&sets[2]), "1/10 not nested in 1/3");

    // counting: ~1/10 of 120 windows, allowing per-stratum ceil rounding
    let n = count_selected(&b10a).unwrap();
    assert!((12..=24).contains(&n), "selected {n}");

    // iteration respects the selection
    let from_stream = iterate_windows(&b10a, WindowMode::Pair, 5).count();
    assert_eq!(from_stream, n);
}

#[test]
fn manifest_split_partitions_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = synth_generate(&small_cfg(8), dir.path()).unwrap();
    let (train, val, test) = split_manifest(&manifest, 0.25, 0.25, 7).unwrap();
    assert_eq!(
        train.sequences.len() + val.sequences.len() + test.sequences.len(),
        4
    );
    let mut ids = BTreeSet::new();
    for m in [&train, &val, &test] {
        for s in &m.sequences {
            assert!(ids.insert(s.sequence_id.clone()), "sequence in two splits");
        }
    }
}
