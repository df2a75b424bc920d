//! Master model template.
//!
//! The supernet is a stem convolution, a chain of choice blocks and a
//! classifier head (global average pool, then fully connected). Every choice
//! block holds four candidate branches; a [`ChoiceKey`] picks one per block.
//! Blocks listed in `reduction_positions` halve the spatial size per axis and
//! double the channel count, all others preserve both.

mod macs;
mod store;

pub use macs::{
    branch_macs, classifier_macs, count_macs, count_macs_resnet18, resnet18_layers, stem_macs,
    LayerMacs, RESNET18_CLASSES,
};
pub use store::{build_master, extract_submodel, init_tensor, ParamMap, ParameterStore, SubModel};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{Branch, ChoiceKey};
use crate::error::{Error, Result};
use crate::nn::ConvGeom;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetSpec {
    /// `(channels, height, width)` of one input image.
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    /// Output channels of each choice block.
    pub stage_channels: Vec<usize>,
    /// Choice-block indices that downsample.
    pub reduction_positions: BTreeSet<usize>,
    pub class_count: usize,
    /// Width multiplier of the inverted residual bottleneck.
    #[serde(default = "default_expansion")]
    pub expansion_factor: usize,
}

fn default_expansion() -> usize {
    6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    Normal,
    Reduction,
}

/// A branch in a particular block position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockKind {
    pub branch: Branch,
    pub mode: BlockMode,
}

/// Input and output geometry of one choice block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIo {
    pub mode: BlockMode,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

/// One convolution inside the stem or a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    /// Spatial size of this layer's input.
    pub input_hw: (usize, usize),
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.geom.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.geom.groups * self.kernel * self.kernel
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (
            self.geom.output_len(self.input_hw.0, self.kernel),
            self.geom.output_len(self.input_hw.1, self.kernel),
        )
    }

    /// `H_out · W_out · C_out · k · k · C_in/groups`
    pub fn macs(&self) -> u64 {
        let (ho, wo) = self.output_hw();
        (ho * wo * self.out_channels * self.fan_in()) as u64
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

fn conv(
    name: &'static str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
    input_hw: (usize, usize),
) -> ConvSpec {
    ConvSpec {
        name,
        in_channels,
        out_channels,
        kernel,
        geom: ConvGeom {
            stride,
            padding: kernel / 2,
            groups,
            offset: 0,
        },
        input_hw,
    }
}

impl SupernetSpec {
    /// The 12-block CIFAR-10 master model.
    pub fn cifar10() -> Self {
        SupernetSpec {
            input_shape: [3, 32, 32],
            stem_channels: 64,
            stage_channels: vec![64, 64, 64, 128, 128, 128, 256, 256, 256, 512, 512, 512],
            reduction_positions: [3, 6, 9].into_iter().collect(),
            class_count: 10,
            expansion_factor: 6,
        }
    }

    /// Four-block supernet small enough for laptop-scale runs and tests.
    pub fn desk() -> Self {
        SupernetSpec {
            input_shape: [3, 8, 8],
            stem_channels: 8,
            stage_channels: vec![8, 8, 16, 16],
            reduction_positions: [2].into_iter().collect(),
            class_count: 4,
            expansion_factor: 6,
        }
    }

    pub fn block_count(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("supernet: {msg}")));
        if self.input_shape.contains(&0) || self.stem_channels == 0 || self.class_count == 0 {
            return bad("input shape, stem channels and class count must be positive".into());
        }
        if self.expansion_factor == 0 {
            return bad("expansion factor must be positive".into());
        }
        if self.stage_channels.is_empty() {
            return bad("at least one choice block is required".into());
        }
        if let Some(&p) = self
            .reduction_positions
            .iter()
            .find(|&&p| p >= self.block_count())
        {
            return bad(format!("reduction position {p} is past the last block"));
        }
        let (mut c, mut h, mut w) = (self.stem_channels, self.input_shape[1], self.input_shape[2]);
        for (i, &out) in self.stage_channels.iter().enumerate() {
            if self.reduction_positions.contains(&i) {
                if out != 2 * c {
                    return bad(format!(
                        "block {i} reduces {c} channels to {out}, expected {}",
                        2 * c
                    ));
                }
                if h % 2 != 0 || w % 2 != 0 {
                    return bad(format!("block {i} reduces an odd spatial size {h}x{w}"));
                }
                h /= 2;
                w /= 2;
            } else if out != c {
                return bad(format!("normal block {i} changes channels {c} -> {out}"));
            }
            c = out;
        }
        Ok(())
    }

    pub fn check_key(&self, key: &ChoiceKey) -> Result<()> {
        if key.len() != self.block_count() {
            return Err(Error::Structural(format!(
                "choice key has {} entries, supernet has {} blocks",
                key.len(),
                self.block_count()
            )));
        }
        Ok(())
    }

    pub fn block_mode(&self, block: usize) -> BlockMode {
        if self.reduction_positions.contains(&block) {
            BlockMode::Reduction
        } else {
            BlockMode::Normal
        }
    }

    pub fn stem_hw(&self) -> (usize, usize) {
        (self.input_shape[1], self.input_shape[2])
    }

    pub fn block_io(&self, block: usize) -> BlockIo {
        let mut c = self.stem_channels;
        let mut hw = self.stem_hw();
        for i in 0..block {
            if self.reduction_positions.contains(&i) {
                hw = (hw.0 / 2, hw.1 / 2);
            }
            c = self.stage_channels[i];
        }
        let mode = self.block_mode(block);
        let out_hw = match mode {
            BlockMode::Normal => hw,
            BlockMode::Reduction => (hw.0 / 2, hw.1 / 2),
        };
        BlockIo {
            mode,
            in_channels: c,
            out_channels: self.stage_channels[block],
            in_hw: hw,
            out_hw,
        }
    }

    /// Channels entering the classifier.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated spec")
    }

    pub fn stem_layer(&self) -> ConvSpec {
        conv(
            "conv",
            self.input_shape[0],
            self.stem_channels,
            3,
            1,
            1,
            self.stem_hw(),
        )
    }

    /// Convolutions of `branch` at `block`, in execution order.
    ///
    /// Reduction happens in the first spatial convolution of the branch via
    /// stride 2. The identity reduction is two stride-2 pointwise paths, the
    /// second shifted by one pixel, whose outputs are concatenated.
    pub fn branch_layers(&self, block: usize, branch: Branch) -> Vec<ConvSpec> {
        let io = self.block_io(block);
        let (cin, cout, hw) = (io.in_channels, io.out_channels, io.in_hw);
        let stride = match io.mode {
            BlockMode::Normal => 1,
            BlockMode::Reduction => 2,
        };
        let out_hw = io.out_hw;
        match (branch, io.mode) {
            (Branch::Identity, BlockMode::Normal) => Vec::new(),
            (Branch::Identity, BlockMode::Reduction) => {
                let half = cout / 2;
                let path_a = conv("path_a", cin, half, 1, 2, 1, hw);
                let mut path_b = conv("path_b", cin, cout - half, 1, 2, 1, hw);
                path_b.geom.offset = 1;
                vec![path_a, path_b]
            }
            (Branch::Residual, _) => vec![
                conv("conv1", cin, cout, 3, stride, 1, hw),
                conv("conv2", cout, cout, 3, 1, 1, out_hw),
            ],
            (Branch::InvertedResidual, _) => {
                let hidden = cin * self.expansion_factor;
                vec![
                    conv("expand", cin, hidden, 1, 1, 1, hw),
                    conv("depthwise", hidden, hidden, 3, stride, hidden, hw),
                    conv("project", hidden, cout, 1, 1, 1, out_hw),
                ]
            }
            (Branch::DepthwiseSeparable, _) => vec![
                conv("dw1", cin, cin, 3, stride, cin, hw),
                conv("pw1", cin, cout, 1, 1, 1, out_hw),
                conv("dw2", cout, cout, 3, 1, cout, out_hw),
                conv("pw2", cout, cout, 1, 1, 1, out_hw),
            ],
        }
    }

    /// Shape of every trainable tensor in the master model, in canonical order.
    pub fn parameter_layout(&self) -> Vec<(ParamPath, Vec<usize>)> {
        let mut out = vec![(
            ParamPath::stem("conv"),
            self.stem_layer().weight_shape().to_vec(),
        )];
        for block in 0..self.block_count() {
            for branch in Branch::ALL {
                for layer in self.branch_layers(block, branch) {
                    out.push((
                        ParamPath::choice(block, branch, layer.name),
                        layer.weight_shape().to_vec(),
                    ));
                }
            }
        }
        out.extend(self.classifier_layout());
        out
    }

    pub fn classifier_layout(&self) -> [(ParamPath, Vec<usize>); 2] {
        [
            (
                ParamPath::classifier("weight"),
                vec![self.class_count, self.feature_channels()],
            ),
            (ParamPath::classifier("bias"), vec![self.class_count]),
        ]
    }

    /// Parameter tensors of the sub-model selected by `key`.
    pub fn submodel_layout(&self, key: &ChoiceKey) -> Result<Vec<(ParamPath, Vec<usize>)>> {
        self.check_key(key)?;
        let mut out = vec![(
            ParamPath::stem("conv"),
            self.stem_layer().weight_shape().to_vec(),
        )];
        for (block, &branch) in key.branches().iter().enumerate() {
            for layer in self.branch_layers(block, branch) {
                out.push((
                    ParamPath::choice(block, branch, layer.name),
                    layer.weight_shape().to_vec(),
                ));
            }
        }
        out.extend(self.classifier_layout());
        Ok(out)
    }

    pub fn submodel_param_count(&self, key: &ChoiceKey) -> Result<usize> {
        Ok(self
            .submodel_layout(key)?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    pub fn master_param_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Output shape `(C, H, W)` of each choice block for `key`, walked
    /// symbolically from the block rules.
    pub fn shape_walk(&self, key: &ChoiceKey) -> Result<Vec<[usize; 3]>> {
        self.check_key(key)?;
        let mut shape = [self.stem_channels, self.input_shape[1], self.input_shape[2]];
        let mut out = Vec::with_capacity(key.len());
        for block in 0..key.len() {
            if self.block_mode(block) == BlockMode::Reduction {
                shape = [shape[0] * 2, shape[1] / 2, shape[2] / 2];
            }
            out.push(shape);
        }
        Ok(out)
    }
}

/// Address of one trainable tensor in the master model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamPath {
    Stem {
        layer: String,
    },
    Choice {
        block: usize,
        branch: Branch,
        layer: String,
    },
    Classifier {
        layer: String,
    },
}

impl ParamPath {
    pub fn stem(layer: &str) -> Self {
        ParamPath::Stem {
            layer: layer.to_string(),
        }
    }

    pub fn choice(block: usize, branch: Branch, layer: &str) -> Self {
        ParamPath::Choice {
            block,
            branch,
            layer: layer.to_string(),
        }
    }

    pub fn classifier(layer: &str) -> Self {
        ParamPath::Classifier {
            layer: layer.to_string(),
        }
    }

    /// `(block, branch)` for choice-block parameters.
    pub fn choice_slot(&self) -> Option<(usize, Branch)> {
        match self {
            ParamPath::Choice { block, branch, .. } => Some((*block, *branch)),
            _ => None,
        }
    }
}

impl fmt::Display for ParamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamPath::Stem { layer } => write!(f, "stem/{layer}"),
            ParamPath::Choice {
                block,
                branch,
                layer,
            } => write!(f, "block{block}/branch{}/{layer}", branch.index()),
            ParamPath::Classifier { layer } => write!(f, "classifier/{layer}"),
        }
    }
}

impl FromStr for ParamPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("invalid parameter path {s:?}"));
        let parts: Vec<&str> = s.split('/').collect();
        match parts[..] {
            ["stem", layer] => Ok(ParamPath::stem(layer)),
            ["classifier", layer] => Ok(ParamPath::classifier(layer)),
            [block, branch, layer] => {
                let block = block
                    .strip_prefix("block")
                    .and_then(|b| b.parse().ok())
                    .ok_or_else(bad)?;
                let branch = branch
                    .strip_prefix("branch")
                    .and_then(|b| b.parse::<u8>().ok())
                    .ok_or_else(bad)
                    .and_then(|b| Branch::try_from(b).map_err(|_| bad()))?;
                Ok(ParamPath::choice(block, branch, layer))
            }
            _ => Err(bad()),
        }
    }
}
