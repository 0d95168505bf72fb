//! Tactile data handling: frames, temporal windows, dataset manifests,
//! labeled-data budget splits, and the synthetic corpus generator.

mod budget;
mod io;
mod manifest;
mod synth;
mod types;
mod window;

pub use budget::{count_selected, split_by_budget};
pub use io::{load_png, read_label_csv, save_png, write_label_csv, LabelRow};
pub use manifest::{
    iterate_windows, load_manifest, select_background, split_manifest, validate_manifest,
    DatasetManifest, SequenceEntry, Split, WindowItem, WindowStream,
};
pub use synth::{render_sequence, synth_generate, synth_generate_in_memory, SynthConfig};
pub use types::{
    Indenter, SensorProfile, SensorType, TactileFrame, TactileWindow, WindowData, WindowMode,
};
pub use window::{make_clip_window, make_pair_window, resize_for_encoder, subtract_background};
