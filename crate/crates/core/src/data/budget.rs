//! Labeled-data budget subsampling for label-efficiency sweeps.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::rng_for;

use super::manifest::{load_sequence, DatasetManifest};

/// Deterministic stratified subsample of labeled windows.
///
/// Every labeled example is keyed by its classification labels (slip state,
/// grasp outcome, textile id when present; a single stratum otherwise).
/// Within each stratum the examples are put through one seeded permutation
/// and the subset is its prefix, so smaller budgets nest inside larger ones
/// drawn with the same seed.
pub fn split_by_budget(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("budget fraction must be in (0, 1]"));
    }
    if fraction == 1.0 {
        return Ok(manifest.clone());
    }

    // stratum key -> [(sequence_id, anchor)]
    let mut strata: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    for seq in &manifest.sequences {
        let loaded = load_sequence(manifest, seq)?;
        for t in 0..loaded.frames.len() {
            if !manifest.is_selected(&seq.sequence_id, t) {
                continue;
            }
            let period_us = (1e6 / loaded.fps) as i64;
            let label = super::manifest::join_label(
                &loaded.labels,
                loaded.frames[t].timestamp_us,
                period_us,
            )?;
            let key = format!(
                "slip={:?}|grasp={:?}|textile={:?}",
                label.slip.map(|s| s.0),
                label.grasp_success,
                label.textile_id
            );
            strata
                .entry(key)
                .or_default()
                .push((seq.sequence_id.clone(), t));
        }
    }

    let mut selected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut total = 0usize;
    for (key, mut items) in strata {
        items.sort();
        let mut rng = rng_for(seed, &format!("budget|{key}"), 0);
        for i in (1..items.len()).rev() {
            let j = rng.random_range(0..=i);
            items.swap(i, j);
        }
        let take = ((items.len() as f64) * fraction).ceil() as usize;
        for (sid, t) in items.into_iter().take(take) {
            selected.entry(sid).or_default().push(t);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("budget subsampling selected no examples"));
    }
    for v in selected.values_mut() {
        v.sort_unstable();
    }
    let mut out = manifest.clone();
    out.selected_windows = Some(selected);
    Ok(out)
}

/// Count the selected windows of a manifest (all frames when unrestricted).
pub fn count_selected(manifest: &DatasetManifest) -> Result<usize> {
    match &manifest.selected_windows {
        Some(map) => Ok(map.values().map(|v| v.len()).sum()),
        None => {
            let mut n = 0;
            for seq in &manifest.sequences {
                n += super::manifest::resolve_glob(&manifest.root_path, &seq.frame_glob)?.len();
            }
            Ok(n)
        }
    }
}


#[cfg(test)]
mod tests {
    // end-to-end budget behavior is covered in the data integration tests,
    // where a synthetic corpus provides real label files
    use super::*;

    #[test]
    fn rejects_bad_fraction() {
        let m = DatasetManifest {
            root_path: ".".into(),
            sequences: vec![],
            sensor_profiles: Default::default(),
            split: super::super::manifest::Split::Train,
            selected_windows: None,
        };
        assert!(split_by_budget(&m, 0.0, 1).is_err());
        assert!(split_by_budget(&m, 1.5, 1).is_err());
    }

    #[test]
    fn fraction_one_is_identity() {
        let m = DatasetManifest {
            root_path: ".".into(),
            sequences: vec![],
            sensor_profiles: Default::default(),
            split: super::super::manifest::Split::Train,
            selected_windows: None,
        };
        let out = split_by_budget(&m, 1.0, 9).unwrap();
        assert!(out.selected_windows.is_none());
    }
}
