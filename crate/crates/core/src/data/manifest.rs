//! Dataset manifests: a JSON index of frame sequences, sensor profiles and
//! label files, plus lazy window iteration with timestamp-joined labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng_for;

use super::io::{load_png, read_label_csv, LabelRow};
use super::types::{SensorProfile, TactileFrame, TactileWindow, WindowMode};
use super::window::{make_clip_window, make_pair_window, subtract_reference};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One recorded sequence: a directory of PNG frames plus label CSVs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub sequence_id: String,
    pub sensor_id: String,
    /// Glob (single `*` wildcard) for frame files, relative to the root.
    pub frame_glob: String,
    pub label_files: Vec<String>,
    /// Frame index known to be contact-free, used as background reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_contact_frame: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root_path: PathBuf,
    pub sequences: Vec<SequenceEntry>,
    pub sensor_profiles: BTreeMap<String, SensorProfile>,
    pub split: Split,
    /// Budget subsampling: selected window anchors per sequence id. Absent
    /// means all windows are selected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_windows: Option<BTreeMap<String, Vec<usize>>>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Is a window anchored at `frame` of `seq` part of this manifest's
    /// (possibly budget-restricted) selection?
    pub fn is_selected(&self, sequence_id: &str, anchor: usize) -> bool {
        match &self.selected_windows {
            None => true,
            Some(map) => map
                .get(sequence_id)
                .map(|v| v.binary_search(&anchor).is_ok())
                .unwrap_or(false),
        }
    }
}

/// Resolve a single-`*` glob against the manifest root.
pub(crate) fn resolve_glob(root: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let full = root.join(pattern);
    let parent = full
        .parent()
        .ok_or_else(|| Error::Manifest(format!("bad glob {pattern}")))?;
    let fname = full
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Manifest(format!("bad glob {pattern}")))?;
    let (prefix, suffix) = match fname.split_once('*') {
        Some((p, s)) => (p.to_string(), s.to_string()),
        None => (fname.to_string(), String::new()),
    };
    let mut out = Vec::new();
    if !parent.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(parent)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(&prefix) && name.ends_with(&suffix) && name.len() >= prefix.len() + suffix.len()
        {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Load a manifest; `root_path` is resolved relative to the manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut m: DatasetManifest = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    if m.root_path.is_relative() {
        m.root_path = dir.join(&m.root_path);
    }
    Ok(m)
}

/// Check referential integrity: label files exist, every sequence has at
/// least one frame, sensor profiles resolve.
pub fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    for seq in &m.sequences {
        if !m.sensor_profiles.contains_key(&seq.sensor_id) {
            return Err(Error::Manifest(format!(
                "sequence {} references unknown sensor {}",
                seq.sequence_id, seq.sensor_id
            )));
        }
        let frames = resolve_glob(&m.root_path, &seq.frame_glob)?;
        if frames.is_empty() {
            return Err(Error::Manifest(format!(
                "sequence {} has no frames (glob {})",
                seq.sequence_id, seq.frame_glob
            )));
        }
        for lf in &seq.label_files {
            let p = m.root_path.join(lf);
            if !p.exists() {
                return Err(Error::DanglingReference(p));
            }
        }
    }
    for (id, prof) in &m.sensor_profiles {
        prof.validate()
            .map_err(|e| Error::Manifest(format!("sensor {id}: {e}")))?;
        if let Some(bg) = &prof.background_path {
            let p = m.root_path.join(bg);
            if !p.exists() {
                return Err(Error::DanglingReference(p));
            }
        }
    }
    Ok(())
}

/// Background reference for a sequence: the flagged no-contact frame when
/// present, otherwise the per-pixel median of the first 10 frames.
pub fn select_background(frames: &[TactileFrame], no_contact: Option<usize>) -> Result<Array3<f64>> {
    if frames.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if let Some(idx) = no_contact {
        if idx >= frames.len() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: frames.len(),
            });
        }
        return Ok(frames[idx].pixels.clone());
    }
    let n = frames.len().min(10);
    let dim = frames[0].pixels.dim();
    let mut out = Array3::<f64>::zeros(dim);
    let mut vals = vec![0.0f64; n];
    for y in 0..dim.0 {
        for x in 0..dim.1 {
            for c in 0..dim.2 {
                for (i, v) in vals.iter_mut().enumerate() {
                    *v = frames[i].pixels[[y, x, c]];
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out[[y, x, c]] = if n % 2 == 1 {
                    vals[n / 2]
                } else {
                    0.5 * (vals[n / 2 - 1] + vals[n / 2])
                };
            }
        }
    }
    Ok(out)
}

/// A fully materialized sequence: background-subtracted frames plus labels.
pub(crate) struct LoadedSequence {
    pub frames: Vec<TactileFrame>,
    pub labels: Vec<LabelRow>,
    pub fps: f64,
}

pub(crate) fn load_sequence(m: &DatasetManifest, seq: &SequenceEntry) -> Result<LoadedSequence> {
    let profile = m
        .sensor_profiles
        .get(&seq.sensor_id)
        .ok_or_else(|| Error::Manifest(format!("unknown sensor {}", seq.sensor_id)))?;
    let paths = resolve_glob(&m.root_path, &seq.frame_glob)?;
    if paths.is_empty() {
        return Err(Error::Manifest(format!(
            "sequence {} has no frames",
            seq.sequence_id
        )));
    }
    let period_us = (1e6 / profile.fps) as i64;
    let mut frames = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let img = load_png(p)?;
        frames.push(TactileFrame::new(
            img,
            i as i64 * period_us,
            seq.sensor_id.clone(),
            seq.sequence_id.clone(),
            i,
        )?);
    }
    let bg = select_background(&frames, seq.no_contact_frame)?;
    for f in &mut frames {
        f.pixels = subtract_reference(&f.pixels, &bg)?;
    }
    let mut labels = Vec::new();
    for lf in &seq.label_files {
        labels.extend(read_label_csv(&m.root_path.join(lf))?);
    }
    labels.sort_by_key(|r| r.timestamp_us);
    Ok(LoadedSequence {
        frames,
        labels,
        fps: profile.fps,
    })
}

/// Nearest-timestamp label for a frame; errors when the closest label is
/// more than one frame period away.
pub(crate) fn join_label(labels: &[LabelRow], ts_us: i64, period_us: i64) -> Result<LabelRow> {
    if labels.is_empty() {
        return Err(Error::Manifest("sequence has no labels".into()));
    }
    let idx = labels.partition_point(|r| r.timestamp_us < ts_us);
    let mut best: Option<&LabelRow> = None;
    for cand in [idx.checked_sub(1), Some(idx)].into_iter().flatten() {
        if let Some(r) = labels.get(cand) {
            match best {
                None => best = Some(r),
                Some(b) => {
                    if (r.timestamp_us - ts_us).abs() < (b.timestamp_us - ts_us).abs() {
                        best = Some(r);
                    }
                }
            }
        }
    }
    let best = best.unwrap();
    if (best.timestamp_us - ts_us).abs() > period_us {
        return Err(Error::Manifest(format!(
            "label/frame misalignment: {} vs {} exceeds one period",
            best.timestamp_us, ts_us
        )));
    }
    Ok(best.clone())
}

/// Lazy stream of `(window, label)` pairs over all sequences of a manifest.
///
/// Sequences are loaded one at a time; the stream can be sharded by worker
/// index, which partitions windows round-robin over their global ordinal.
pub struct WindowStream<'a> {
    manifest: &'a DatasetManifest,
    mode: WindowMode,
    stride: usize,
    seq_idx: usize,
    frame_idx: usize,
    current: Option<LoadedSequence>,
    ordinal: usize,
    shard: Option<(usize, usize)>,
}

impl<'a> WindowStream<'a> {
    /// Restrict this stream to windows whose ordinal is congruent to
    /// `worker` modulo `n_workers`.
    pub fn sharded(mut self, worker: usize, n_workers: usize) -> Self {
        assert!(n_workers > 0 && worker < n_workers);
        self.shard = Some((worker, n_workers));
        self
    }

    fn advance(&mut self) -> Result<Option<WindowItem>> {
        loop {
            if self.current.is_none() {
                if self.seq_idx >= self.manifest.sequences.len() {
                    return Ok(None);
                }
                let seq = &self.manifest.sequences[self.seq_idx];
                self.current = Some(load_sequence(self.manifest, seq)?);
                self.frame_idx = 0;
            }
            let loaded = self.current.as_ref().unwrap();
            let seq_entry = &self.manifest.sequences[self.seq_idx];
            if self.frame_idx >= loaded.frames.len() {
                self.current = None;
                self.seq_idx += 1;
                continue;
            }
            let t = self.frame_idx;
            self.frame_idx += 1;

            if !self.manifest.is_selected(&seq_entry.sequence_id, t) {
                continue;
            }
            let ord = self.ordinal;
            self.ordinal += 1;
            if let Some((w, n)) = self.shard {
                if ord % n != w {
                    continue;
                }
            }
            let window = match self.mode {
                WindowMode::Pair => make_pair_window(&loaded.frames, t, self.stride, loaded.fps)?,
                WindowMode::Clip => make_clip_window(&loaded.frames, t, loaded.fps)?,
            };
            let period_us = (1e6 / loaded.fps) as i64;
            let label = join_label(&loaded.labels, loaded.frames[t].timestamp_us, period_us)?;
            return Ok(Some(WindowItem {
                window,
                label,
                sequence_id: seq_entry.sequence_id.clone(),
            }));
        }
    }
}

/// One streamed sample: a window, its joined label, and provenance.
#[derive(Clone, Debug)]
pub struct WindowItem {
    pub window: TactileWindow,
    pub label: LabelRow,
    pub sequence_id: String,
}

impl<'a> Iterator for WindowStream<'a> {
    type Item = Result<WindowItem>;

    fn next(&mut self) -> Option<Self::Item> {
        self.advance().transpose()
    }
}

/// Stream windows (one anchor per frame) with timestamp-aligned labels.
pub fn iterate_windows(
    manifest: &DatasetManifest,
    mode: WindowMode,
    stride: usize,
) -> WindowStream<'_> {
    WindowStream {
        manifest,
        mode,
        stride,
        seq_idx: 0,
        frame_idx: 0,
        current: None,
        ordinal: 0,
        shard: None,
    }
}

/// Partition a manifest into train/val/test sub-manifests by sequence, with
/// a deterministic seeded shuffle.
pub fn split_manifest(
    m: &DatasetManifest,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    if !(0.0..1.0).contains(&val_frac)
        || !(0.0..1.0).contains(&test_frac)
        || val_frac + test_frac >= 1.0
    {
        return Err(Error::invalid("split fractions out of range"));
    }
    let mut order: Vec<usize> = (0..m.sequences.len()).collect();
    let mut rng = rng_for(seed, "split-manifest", 0);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let n = order.len();
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_val = ((n as f64) * val_frac).round() as usize;
    let take = |idxs: &[usize], split: Split| -> DatasetManifest {
        let mut mm = m.clone();
        mm.split = split;
        mm.sequences = idxs.iter().map(|&i| m.sequences[i].clone()).collect();
        mm
    };
    let test_idx: Vec<usize> = order[..n_test].to_vec();
    let val_idx: Vec<usize> = order[n_test..n_test + n_val].to_vec();
    let train_idx: Vec<usize> = order[n_test + n_val..].to_vec();
    Ok((
        take(&train_idx, Split::Train),
        take(&val_idx, Split::Val),
        take(&test_idx, Split::Test),
    ))
}
