//! Drum-class datasets, a synthetic drum kit, SGD training and evaluation.

mod dataset;
mod labels;
mod synth;
mod trainer;

pub use dataset::{
    featurize_audio, featurize_entries, load_dataset, parse_manifest, DatasetManifest, FeatureSet,
    ManifestEntry, ManifestLine, Split,
};
pub use labels::DrumClass;
pub use synth::{
    spectral_centroid, synthesize_clip, synthesize_hit, synthesize_toy_dataset, SynthConfig,
};
pub use trainer::{
    evaluate, train, train_with_progress, EpochMetrics, Evaluation, TrainConfig, TrainOutcome,
    TrainReport, DEFAULT_GRAD_CLIP,
};
