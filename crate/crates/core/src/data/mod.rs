//! Dataset types, file formats, synthesis, and sensor-space transforms.

pub mod manifest;
pub mod pointcloud;
pub mod synth;
pub mod tensor_file;

pub use manifest::{load_dataset, DatasetManifest, SampleEntry};
pub use pointcloud::sensors_to_pseudo_pointcloud;
pub use synth::{
    add_sensor_noise, generate_dataset, inject_defect, GeneratedDataset, SampleRecord,
    SynthConfig, SynthWorld,
};
pub use tensor_file::{read_tensor, write_tensor};

use crate::error::{Error, Result};

/// Sensor time bins per sample. Fixed for a dataset and declared in its
/// manifest.
pub const T_S: usize = 256;
/// Sensor channels: current (A), voltage (V), wire feed (m/min), gas pressure
/// (bar), flow rate (L/min), wire consumption (mm).
pub const C_S: usize = 6;
/// Result camera angles per sample.
pub const M_ANGLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            other => Err(Error::Data(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DefectKind {
    None,
    /// The observed result is perturbed while the process stays nominal: the
    /// result is consistent with a different process than the one recorded.
    Surface,
    /// A transient dip in the latent process propagates into sensors, video,
    /// and audio while the result is rendered from the unperturbed process.
    ProcessHidden,
    /// Both effects at once.
    Both,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] = [
        DefectKind::None,
        DefectKind::Surface,
        DefectKind::ProcessHidden,
        DefectKind::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefectKind::None => "none",
            DefectKind::Surface => "surface",
            DefectKind::ProcessHidden => "process_hidden",
            DefectKind::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DefectKind::None),
            "surface" => Ok(DefectKind::Surface),
            "process_hidden" => Ok(DefectKind::ProcessHidden),
            "both" => Ok(DefectKind::Both),
            other => Err(Error::Data(format!("unknown defect kind '{other}'"))),
        }
    }

    pub fn label(self) -> Label {
        if self == DefectKind::None {
            Label::Normal
        } else {
            Label::Anomalous
        }
    }
}
