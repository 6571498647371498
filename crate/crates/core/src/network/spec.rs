use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 4;

pub const PRESET_NAMES: [&str; 6] = ["vip-mo", "vip-ti", "vip-s", "vip-m", "vip-b", "vip-nano"];

/// Where the classifier reads its features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Extra encoder with a GELU in place of the MLP, mean over parts.
    Parts,
    /// Linear + batch norm on the whole map, global average pool.
    Wholes,
}

fn default_windows() -> Vec<usize> {
    vec![8, 7, 7, 7]
}

fn default_stem_width() -> usize {
    64
}

fn default_num_classes() -> usize {
    1000
}

/// Per-stage widths, part counts, head counts, depths and windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub channels: Vec<usize>,
    pub parts: Vec<usize>,
    pub heads: Vec<usize>,
    pub blocks: Vec<usize>,
    #[serde(default = "default_windows")]
    pub windows: Vec<usize>,
    pub head: HeadKind,
    #[serde(default = "default_stem_width")]
    pub stem_width: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
}

impl VariantSpec {
    fn preset(
        name: &str,
        channels: [usize; 4],
        parts: [usize; 4],
        heads: [usize; 4],
        blocks: [usize; 4],
        head: HeadKind,
    ) -> Self {
        Self {
            name: name.to_string(),
            channels: channels.to_vec(),
            parts: parts.to_vec(),
            heads: heads.to_vec(),
            blocks: blocks.to_vec(),
            windows: default_windows(),
            head,
            stem_width: default_stem_width(),
            num_classes: default_num_classes(),
        }
    }

    /// Built-in variants, addressed as `vip-mo`, `vip-ti`, `vip-s`, `vip-m`,
    /// `vip-b` and the tiny test model `vip-nano`.
    pub fn from_name(name: &str) -> Result<Self> {
        use HeadKind::*;
        let spec = match name {
            "vip-mo" => Self::preset(name, [48, 96, 192, 384], [16, 16, 16, 32], [1, 2, 4, 8], [1, 1, 1, 1], Parts),
            "vip-ti" => Self::preset(name, [64, 128, 256, 512], [32, 16, 32, 32], [1, 2, 4, 8], [1, 1, 2, 1], Parts),
            "vip-s" => Self::preset(name, [96, 192, 384, 768], [64, 16, 64, 64], [1, 2, 12, 24], [1, 1, 3, 1], Parts),
            "vip-m" => Self::preset(name, [96, 192, 384, 768], [64, 16, 64, 64], [1, 2, 12, 24], [1, 1, 8, 1], Wholes),
            "vip-b" => Self::preset(
                name,
                [128, 256, 512, 1024],
                [64, 16, 128, 128],
                [1, 2, 16, 32],
                [1, 1, 8, 1],
                Wholes,
            ),
            "vip-nano" => Self {
                num_classes: 10,
                ..Self::preset(name, [8, 16, 32, 64], [4, 4, 4, 4], [1, 2, 4, 8], [1, 1, 1, 1], Parts)
            },
            other => {
                return Err(Error::Spec(vec![format!(
                    "unknown variant `{other}`; expected one of {}",
                    PRESET_NAMES.join(", ")
                )]))
            }
        };
        Ok(spec)
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    /// Checks every structural constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let lists: [(&str, &Vec<usize>); 5] = [
            ("channels", &self.channels),
            ("parts", &self.parts),
            ("heads", &self.heads),
            ("blocks", &self.blocks),
            ("windows", &self.windows),
        ];
        for (field, list) in lists {
            if list.len() != NUM_STAGES {
                problems.push(format!("{field}: expected {NUM_STAGES} stages, got {}", list.len()));
            }
            for (s, &v) in list.iter().enumerate() {
                if v == 0 {
                    problems.push(format!("{field}[{s}] must be positive"));
                }
            }
        }
        for (s, (&c, &g)) in self.channels.iter().zip(&self.heads).enumerate() {
            if c == 0 || g == 0 {
                continue;
            }
            if c % 4 != 0 {
                problems.push(format!("channels[{s}] = {c} is not divisible by 4"));
            }
            if c % g != 0 {
                problems.push(format!("channels[{s}] = {c} is not divisible by heads[{s}] = {g}"));
            } else if (c / g) % 2 != 0 {
                problems.push(format!("channels[{s}] / heads[{s}] = {} must be even", c / g));
            }
        }
        if self.stem_width == 0 {
            problems.push("stem_width must be positive".to_string());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems))
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Spatial side of each stage's map for an input side, following the
    /// stem (conv stride 2, pool stride 2) and the stride-2 embeddings.
    pub fn stage_sides(&self, side: usize) -> [usize; NUM_STAGES] {
        let conv = (side + 2 * 3 - 7) / 2 + 1;
        let pool = (conv + 2 - 3) / 2 + 1;
        let mut out = [pool; NUM_STAGES];
        for s in 1..NUM_STAGES {
            out[s] = (out[s - 1] + 2 - 3) / 2 + 1;
        }
        out
    }
}
