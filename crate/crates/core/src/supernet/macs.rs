//! Analytical multiply-accumulate counts.
//!
//! Only convolutions and fully connected layers are counted. Normalization,
//! activations, pooling, additions and concatenations count zero.

use super::{conv, ConvSpec, SupernetSpec};
use crate::codec::{Branch, ChoiceKey};
use crate::error::Result;

pub const RESNET18_CLASSES: usize = 10;

pub fn stem_macs(spec: &SupernetSpec) -> u64 {
    spec.stem_layer().macs()
}

pub fn classifier_macs(spec: &SupernetSpec) -> u64 {
    (spec.feature_channels() * spec.class_count) as u64
}

pub fn branch_macs(spec: &SupernetSpec, block: usize, branch: Branch) -> u64 {
    spec.branch_layers(block, branch)
        .iter()
        .map(ConvSpec::macs)
        .sum()
}

pub fn count_macs(spec: &SupernetSpec, key: &ChoiceKey) -> Result<u64> {
    spec.check_key(key)?;
    let blocks: u64 = key
        .branches()
        .iter()
        .enumerate()
        .map(|(block, &branch)| branch_macs(spec, block, branch))
        .sum();
    Ok(stem_macs(spec) + blocks + classifier_macs(spec))
}

/// One row of a MAC table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMacs {
    pub name: String,
    pub macs: u64,
}

/// Per-layer MACs of the CIFAR ResNet18 baseline: 3×3 stem, four stages of
/// two basic blocks, 1×1 projection shortcuts where the shape changes, and
/// a 10-way classifier.
pub fn resnet18_layers(input_shape: [usize; 3]) -> Vec<LayerMacs> {
    let mut rows = Vec::new();
    let mut hw = (input_shape[1], input_shape[2]);
    let mut cin = 64;
    rows.push(LayerMacs {
        name: "conv1".into(),
        macs: conv("conv1", input_shape[0], 64, 3, 1, 1, hw).macs(),
    });
    for (stage, &width) in [64usize, 128, 256, 512].iter().enumerate() {
        for unit in 0..2 {
            let stride = if stage > 0 && unit == 0 { 2 } else { 1 };
            let first = conv("a", cin, width, 3, stride, 1, hw);
            let out_hw = first.output_hw();
            let second = conv("b", width, width, 3, 1, 1, out_hw);
            let prefix = format!("conv{}_{}", stage + 2, unit + 1);
            rows.push(LayerMacs {
                name: format!("{prefix}a"),
                macs: first.macs(),
            });
            rows.push(LayerMacs {
                name: format!("{prefix}b"),
                macs: second.macs(),
            });
            if stride != 1 || cin != width {
                let mut shortcut = conv("shortcut", cin, width, 1, stride, 1, hw);
                shortcut.geom.padding = 0;
                rows.push(LayerMacs {
                    name: format!("{prefix}_shortcut"),
                    macs: shortcut.macs(),
                });
            }
            cin = width;
            hw = out_hw;
        }
    }
    rows.push(LayerMacs {
        name: "fc".into(),
        macs: (cin * RESNET18_CLASSES) as u64,
    });
    rows
}

pub fn count_macs_resnet18(input_shape: [usize; 3]) -> u64 {
    resnet18_layers(input_shape).iter().map(|r| r.macs).sum()
}
