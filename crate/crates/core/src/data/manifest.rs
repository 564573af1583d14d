//! Dataset manifests: UTF-8 key-value headers plus a sample list.
//!
//! ```text
//! split = test
//! seed = 42
//! t_s = 256
//! ...
//! [samples]
//! <index> <label> <defect_kind> <relative_dir>
//! ```
//!
//! Sample directories are resolved relative to the manifest file and must
//! each contain `sensor_raw.phmt`, `feat_video.phmt`, `feat_audio.phmt`, and
//! `feat_image.phmt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::synth::SampleRecord;
use crate::data::tensor_file::read_tensor;
use crate::data::{DefectKind, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntry {
    pub index: usize,
    pub label: Label,
    pub defect_kind: DefectKind,
    pub rel_dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub t_s: usize,
    pub c_s: usize,
    pub m_angles: usize,
    pub n_video: usize,
    pub n_audio: usize,
    pub n_image: usize,
    pub feat_dim: usize,
    /// Path of the frozen text anchor, relative to the manifest.
    pub text_anchor: String,
    /// Optional pointers to sibling splits (written for train manifests).
    pub val_manifest: Option<String>,
    pub test_manifest: Option<String>,
    pub entries: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn defect_histogram(&self) -> BTreeMap<DefectKind, usize> {
        let mut h = BTreeMap::new();
        for kind in DefectKind::ALL {
            h.insert(kind, 0usize);
        }
        for e in &self.entries {
            *h.get_mut(&e.defect_kind).unwrap() += 1;
        }
        h
    }
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "split = {}", m.split);
    let _ = writeln!(s, "samples = {}", m.entries.len());
    let _ = writeln!(s, "seed = {}", m.seed);
    let _ = writeln!(s, "t_s = {}", m.t_s);
    let _ = writeln!(s, "c_s = {}", m.c_s);
    let _ = writeln!(s, "m_angles = {}", m.m_angles);
    let _ = writeln!(s, "n_video = {}", m.n_video);
    let _ = writeln!(s, "n_audio = {}", m.n_audio);
    let _ = writeln!(s, "n_image = {}", m.n_image);
    let _ = writeln!(s, "feat_dim = {}", m.feat_dim);
    let _ = writeln!(s, "text_anchor = {}", m.text_anchor);
    if let Some(v) = &m.val_manifest {
        let _ = writeln!(s, "val_manifest = {v}");
    }
    if let Some(v) = &m.test_manifest {
        let _ = writeln!(s, "test_manifest = {v}");
    }
    for (kind, count) in m.defect_histogram() {
        let _ = writeln!(s, "defect_{} = {count}", kind.as_str());
    }
    let _ = writeln!(s, "[samples]");
    for e in &m.entries {
        let _ = writeln!(
            s,
            "{} {} {} {}",
            e.index,
            e.label.as_str(),
            e.defect_kind.as_str(),
            e.rel_dir
        );
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let mut header = BTreeMap::new();
    let mut entries = Vec::new();
    let mut in_samples = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[samples]" {
            in_samples = true;
            continue;
        }
        if !in_samples {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("manifest line {} is not key = value", lineno + 1))
            })?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest sample line {} malformed",
                    lineno + 1
                )));
            }
            entries.push(SampleEntry {
                index: parts[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad sample index '{}'", parts[0])))?,
                label: Label::parse(parts[1])?,
                defect_kind: DefectKind::parse(parts[2])?,
                rel_dir: parts[3].to_string(),
            });
        }
    }
    let get = |k: &str| -> Result<String> {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Data(format!("manifest missing key '{k}'")))
    };
    let get_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Data(format!("manifest key '{k}' is not an integer")))
    };
    let declared: usize = get_usize("samples")?;
    if declared != entries.len() {
        return Err(Error::Data(format!(
            "manifest declares {declared} samples but lists {}",
            entries.len()
        )));
    }
    Ok(DatasetManifest {
        split: get("split")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Data("manifest seed is not an integer".into()))?,
        t_s: get_usize("t_s")?,
        c_s: get_usize("c_s")?,
        m_angles: get_usize("m_angles")?,
        n_video: get_usize("n_video")?,
        n_audio: get_usize("n_audio")?,
        n_image: get_usize("n_image")?,
        feat_dim: get_usize("feat_dim")?,
        text_anchor: get("text_anchor")?,
        val_manifest: header.get("val_manifest").cloned(),
        test_manifest: header.get("test_manifest").cloned(),
        entries,
    })
}

/// A manifest joined with its loaded sample tensors and text anchor.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
    pub text_anchor: crate::tensor::Tensor<f32>,
    pub dir: PathBuf,
}

/// Loads a manifest and every sample it references, validating existence and
/// shape uniformity against the declared modality shapes.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Data("manifest has no parent directory".into()))?
        .to_path_buf();

    let anchor_path = dir.join(&manifest.text_anchor);
    let text_anchor = read_tensor(&anchor_path)?.expect_f32()?;
    let norm: f64 = text_anchor
        .data()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Data(format!(
            "text anchor is not unit-norm (|e| = {norm})"
        )));
    }

    let mut samples = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let sdir = dir.join(&e.rel_dir);
        let sensor_raw = read_tensor(&sdir.join("sensor_raw.phmt"))?.expect_f32()?;
        let feat_video = read_tensor(&sdir.join("feat_video.phmt"))?.expect_f32()?;
        let feat_audio = read_tensor(&sdir.join("feat_audio.phmt"))?.expect_f32()?;
        let feat_image = read_tensor(&sdir.join("feat_image.phmt"))?.expect_f32()?;
        let expect = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
            if got != want {
                return Err(Error::Data(format!(
                    "sample {}: {name} has shape {got:?}, manifest declares {want:?}",
                    e.index
                )));
            }
            Ok(())
        };
        expect("sensor_raw", sensor_raw.shape(), &[manifest.t_s, manifest.c_s])?;
        expect(
            "feat_video",
            feat_video.shape(),
            &[manifest.n_video, manifest.feat_dim],
        )?;
        expect(
            "feat_audio",
            feat_audio.shape(),
            &[manifest.n_audio, manifest.feat_dim],
        )?;
        expect(
            "feat_image",
            feat_image.shape(),
            &[manifest.m_angles, manifest.n_image, manifest.feat_dim],
        )?;
        samples.push(SampleRecord {
            sensor_raw,
            feat_video,
            feat_audio,
            feat_image,
            defect_kind: e.defect_kind,
        });
    }
    if manifest.split == "train" {
        if let Some(bad) = samples.iter().position(|s| s.defect_kind != DefectKind::None) {
            return Err(Error::Data(format!(
                "training split contains a non-normal sample at position {bad}"
            )));
        }
    }
    Ok(Dataset {
        manifest,
        samples,
        text_anchor,
        dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, SynthConfig};

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            n_train: 3,
            n_val: 2,
            n_test: 4,
            feat_dim: 8,
            n_video: 4,
            n_audio: 4,
            n_image: 4,
            text_dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generate_write_read_round_trip() {
        let dir = std::env::temp_dir().join(format!("procres-manifest-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let gen = generate_dataset(&tiny_cfg(), &dir).unwrap();
        let ds = load_dataset(&gen.test_manifest).unwrap();
        assert_eq!(ds.manifest.len(), 4);
        assert_eq!(ds.samples.len(), 4);
        assert_eq!(ds.manifest.split, "test");
        let back = read_manifest(&gen.test_manifest).unwrap();
        assert_eq!(back, ds.manifest);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let base = std::env::temp_dir().join(format!("procres-det-{}", std::process::id()));
        let (d1, d2) = (base.join("a"), base.join("b"));
        let _ = std::fs::remove_dir_all(&base);
        let g1 = generate_dataset(&tiny_cfg(), &d1).unwrap();
        let g2 = generate_dataset(&tiny_cfg(), &d2).unwrap();
        // Compare every generated file byte for byte.
        let m1 = std::fs::read(&g1.test_manifest).unwrap();
        let m2 = std::fs::read(&g2.test_manifest).unwrap();
        assert_eq!(m1, m2);
        for sample in ["sample_0000", "sample_0003"] {
            for file in ["sensor_raw.phmt", "feat_image.phmt"] {
                let p1 = d1.join("test").join(sample).join(file);
                let p2 = d2.join("test").join(sample).join(file);
                assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
            }
        }
        std::fs::remove_dir_all(&base).unwrap();
    }

    #[test]
    fn train_split_is_all_normal() {
        let dir = std::env::temp_dir().join(format!("procres-train-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let gen = generate_dataset(&tiny_cfg(), &dir).unwrap();
        let ds = load_dataset(&gen.train_manifest).unwrap();
        assert!(ds
            .samples
            .iter()
            .all(|s| s.defect_kind == DefectKind::None));
        assert!(ds.manifest.val_manifest.is_some());
        assert!(ds.manifest.test_manifest.is_some());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
