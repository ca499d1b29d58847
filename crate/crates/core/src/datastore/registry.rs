//! Static descriptors of the five foundation models studied.
//!
//! Attribute values (WER, training hours, encoder date, task count) are the
//! published model-card figures. Layer counts and widths describe each
//! model's speech encoder stack as released.

use super::manifest::{SfmAttributes, SfmDescriptor};

struct Entry {
    name: &'static str,
    layers: usize,
    channels: usize,
    asr_wer: f64,
    data_hours: f64,
    arch_date: &'static str,
    train_task_count: u32,
}

const ENTRIES: [Entry; 5] = [
    Entry {
        name: "canary",
        layers: 24,
        channels: 1024,
        asr_wer: 6.50,
        data_hours: 86_000.0,
        arch_date: "2023-09",
        train_task_count: 2,
    },
    Entry {
        name: "parakeet",
        layers: 42,
        channels: 1024,
        asr_wer: 7.01,
        data_hours: 64_000.0,
        arch_date: "2023-09",
        train_task_count: 1,
    },
    Entry {
        name: "owsm",
        layers: 18,
        channels: 1024,
        asr_wer: 7.70,
        data_hours: 180_000.0,
        arch_date: "2022-10",
        train_task_count: 4,
    },
    Entry {
        name: "whisper",
        layers: 32,
        channels: 1280,
        asr_wer: 7.44,
        data_hours: 5_000_000.0,
        arch_date: "2020-05",
        train_task_count: 4,
    },
    Entry {
        name: "phi4",
        layers: 24,
        channels: 1024,
        asr_wer: 6.14,
        data_hours: 2_000_000.0,
        arch_date: "2017-06",
        train_task_count: 1,
    },
];

/// Registered names in canonical order.
pub fn names() -> Vec<&'static str> {
    ENTRIES.iter().map(|e| e.name).collect()
}

pub fn descriptor(name: &str) -> Option<SfmDescriptor> {
    ENTRIES.iter().find(|e| e.name == name).map(|e| SfmDescriptor {
        name: e.name.to_string(),
        layers: e.layers,
        channels: e.channels,
        attributes: SfmAttributes {
            asr_wer: e.asr_wer,
            data_hours: e.data_hours,
            arch_date: e.arch_date.to_string(),
            train_task_count: e.train_task_count,
        },
    })
}

pub fn all() -> Vec<SfmDescriptor> {
    names().into_iter().filter_map(descriptor).collect()
}

/// Which attribute to rank models by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    AsrWer,
    DataHours,
    ArchDate,
    TrainTaskCount,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::AsrWer,
        Attribute::DataHours,
        Attribute::ArchDate,
        Attribute::TrainTaskCount,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Attribute::AsrWer => "asr_wer",
            Attribute::DataHours => "data_hours",
            Attribute::ArchDate => "arch_date",
            Attribute::TrainTaskCount => "train_task_count",
        }
    }

    /// Sort key where a larger key means a better (higher) rank: lower WER,
    /// more data, newer architecture, more tasks.
    pub fn key(self, a: &SfmAttributes) -> f64 {
        match self {
            Attribute::AsrWer => -a.asr_wer,
            Attribute::DataHours => a.data_hours,
            Attribute::ArchDate => {
                let mut parts = a.arch_date.split('-').map(|p| p.parse::<f64>().unwrap_or(0.0));
                let year = parts.next().unwrap_or(0.0);
                let month = parts.next().unwrap_or(0.0);
                year * 12.0 + month
            }
            Attribute::TrainTaskCount => a.train_task_count as f64,
        }
    }
}
