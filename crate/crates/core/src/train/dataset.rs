use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use super::DrumClass;
use crate::audio::{fit_frames, mel_power_spectrogram, wav, AudioBuffer, MelConfig, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Split(format!(
                "unknown split {other:?}; expected \"train\" or \"val\""
            ))),
        }
    }
}

/// One line of a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub path: String,
    pub label: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when relative.
    pub wav_path: PathBuf,
    pub label: DrumClass,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Per-class counts for one split, in class-index order.
    pub fn class_histogram(&self, split: Option<Split>) -> [usize; DrumClass::COUNT] {
        let mut h = [0; DrumClass::COUNT];
        for e in &self.entries {
            if split.is_none_or(|s| s == e.split) {
                h[e.label.index()] += 1;
            }
        }
        h
    }

    /// Class-name -> count summary.
    pub fn summary(&self) -> BTreeMap<String, [usize; 2]> {
        let mut out = BTreeMap::new();
        for c in DrumClass::ALL {
            out.insert(c.name().to_string(), [0, 0]);
        }
        for e in &self.entries {
            let slot = out.get_mut(e.label.name()).unwrap();
            slot[(e.split == Split::Val) as usize] += 1;
        }
        out
    }

    pub fn to_jsonl(&self, base: &Path) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let path = e.wav_path.strip_prefix(base).unwrap_or(&e.wav_path);
            let line = ManifestLine {
                path: path.to_string_lossy().into_owned(),
                label: e.label.name().to_string(),
                split: match e.split {
                    Split::Train => "train".into(),
                    Split::Val => "val".into(),
                },
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        out
    }
}

/// Parses manifest text; relative paths are resolved against `base`. File
/// existence is not checked here.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut seen: HashMap<PathBuf, Split> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine = serde_json::from_str(line)
            .map_err(|e| Error::InvalidConfig(format!("manifest line {}: {e}", lineno + 1)))?;
        let label: DrumClass = raw.label.parse().map_err(|_| {
            Error::Label(format!(
                "manifest line {}: unknown label {:?}; valid labels are {}",
                lineno + 1,
                raw.label,
                DrumClass::valid_names()
            ))
        })?;
        let split: Split = raw.split.parse()?;
        let p = PathBuf::from(&raw.path);
        let wav_path = if p.is_absolute() { p } else { base.join(p) };
        if let Some(prev) = seen.get(&wav_path) {
            if *prev != split {
                return Err(Error::Split(format!(
                    "{} appears in both the train and val splits",
                    wav_path.display()
                )));
            }
        }
        seen.insert(wav_path.clone(), split);
        entries.push(ManifestEntry {
            wav_path,
            label,
            split,
        });
    }
    Ok(DatasetManifest { entries })
}

/// Reads and validates a JSON-lines manifest. Every missing file is reported
/// at once.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(format!("reading manifest {}", manifest_path.display()), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    let missing: Vec<PathBuf> = manifest
        .entries
        .iter()
        .filter(|e| !e.wav_path.is_file())
        .map(|e| e.wav_path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let h = manifest.class_histogram(None);
    log::info!(
        "loaded {} entries: {}",
        manifest.entries.len(),
        DrumClass::ALL
            .iter()
            .map(|c| format!("{}={}", c.name(), h[c.index()]))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(manifest)
}

/// Network-ready examples: each input is a max-normalized `1 x n_mels x
/// frames` spectrogram, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, input: Vec<f32>, label: usize) {
        assert_eq!(input.len(), self.input_shape.iter().product::<usize>());
        self.inputs.push(input);
        self.labels.push(label);
    }
}

/// Front-end used for training and classification: default STFT/Mel
/// settings, fixed width, per-example max normalization.
pub fn featurize_audio(audio: &AudioBuffer, target_frames: usize) -> Result<Vec<f32>> {
    let spec = mel_power_spectrogram(audio, &StftConfig::default(), &MelConfig::default())?;
    Ok(fit_frames(&spec, target_frames).to_normalized_f32())
}

pub fn featurize_entries(entries: &[&ManifestEntry], target_frames: usize) -> Result<FeatureSet> {
    let mut set = FeatureSet {
        input_shape: [1, MelConfig::default().n_mels, target_frames],
        ..Default::default()
    };
    for e in entries {
        let audio = wav::read_wav(&e.wav_path)?;
        set.push(featurize_audio(&audio, target_frames)?, e.label.index());
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(path: &str, label: &str, split: &str) -> String {
        format!("{{\"path\":\"{path}\",\"label\":\"{label}\",\"split\":\"{split}\"}}\n")
    }

    #[test]
    fn histogram_one_per_class() {
        let text: String = DrumClass::ALL
            .iter()
            .map(|c| line(&format!("{c}.wav"), c.name(), "train"))
            .collect();
        let m = parse_manifest(&text, Path::new("/data")).unwrap();
        assert_eq!(m.class_histogram(None), [1; 7]);
        assert_eq!(m.entries[0].wav_path, PathBuf::from("/data/tom.wav"));
    }

    #[test]
    fn unknown_label() {
        let err = parse_manifest(&line("a.wav", "cymbal", "train"), Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Label(_)));
        let msg = err.to_string();
        assert!(
            msg.contains("cymbal") && msg.contains("open_hat") && msg.contains("closed_hat"),
            "{msg}"
        );
    }

    #[test]
    fn duplicate_across_splits() {
        let text = line("a.wav", "kick", "train") + &line("a.wav", "kick", "val");
        assert!(matches!(
            parse_manifest(&text, Path::new(".")),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn missing_files_are_all_listed() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(
            &manifest,
            line("x.wav", "kick", "train") + &line("y.wav", "tom", "val"),
        )
        .unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::MissingFiles(ref v) if v.len() == 2));
        assert!(msg.contains("x.wav") && msg.contains("y.wav"));
    }
}
