use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ParamPath, SupernetSpec};
use crate::codec::{Branch, ChoiceKey};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub type ParamMap = BTreeMap<ParamPath, Tensor>;

/// Shared master weights. `version` counts completed aggregations.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    spec: SupernetSpec,
    params: ParamMap,
    pub version: u64,
}

impl ParameterStore {
    /// Assembles a store from explicit tensors, checking them against the layout.
    pub fn from_params(spec: SupernetSpec, params: ParamMap, version: u64) -> Result<Self> {
        let layout = spec.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Structural(format!(
                "store has {} tensors, layout expects {}",
                params.len(),
                layout.len()
            )));
        }
        for (path, shape) in &layout {
            match params.get(path) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Structural(format!(
                        "{path}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Structural(format!("missing tensor {path}"))),
            }
        }
        Ok(ParameterStore {
            spec,
            params,
            version,
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn get(&self, path: &ParamPath) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &ParamPath) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamPath, &Tensor)> {
        self.params.iter()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Tensors belonging to one `(block, branch)` slot.
    pub fn branch_params(&self, block: usize, branch: Branch) -> Vec<(&ParamPath, &Tensor)> {
        self.params
            .iter()
            .filter(|(p, _)| p.choice_slot() == Some((block, branch)))
            .collect()
    }
}

/// One single-path network cut out of the master model.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModel {
    pub spec: SupernetSpec,
    pub key: ChoiceKey,
    pub params: ParamMap,
}

impl SubModel {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn param(&self, path: &ParamPath) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Structural(format!("sub-model is missing {path}")))
    }

    /// Replaces every tensor with a fresh draw from the initializer.
    pub fn reinitialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (path, t) in self.params.iter_mut() {
            *t = init_tensor(path, t.shape(), rng);
        }
    }
}

/// He-style Gaussian for convolution and classifier weights, zeros for biases.
pub fn init_tensor<R: Rng + ?Sized>(path: &ParamPath, shape: &[usize], rng: &mut R) -> Tensor {
    let len: usize = shape.iter().product();
    let is_bias = matches!(path, ParamPath::Classifier { layer } if layer == "bias");
    if is_bias {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let gain = if matches!(path, ParamPath::Classifier { .. }) {
        1.0
    } else {
        2.0
    };
    let std = (gain / fan_in as f64).sqrt();
    let data = (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("layout shape")
}

pub fn build_master<R: Rng + ?Sized>(spec: &SupernetSpec, rng: &mut R) -> Result<ParameterStore> {
    spec.validate()?;
    let params = spec
        .parameter_layout()
        .into_iter()
        .map(|(path, shape)| {
            let t = init_tensor(&path, &shape, rng);
            (path, t)
        })
        .collect();
    Ok(ParameterStore {
        spec: spec.clone(),
        params,
        version: 0,
    })
}

/// Copies the stem, the branch chosen in every block and the classifier.
pub fn extract_submodel(store: &ParameterStore, key: &ChoiceKey) -> Result<SubModel> {
    let spec = store.spec();
    let params = spec
        .submodel_layout(key)?
        .into_iter()
        .map(|(path, _)| {
            let t = store
                .get(&path)
                .cloned()
                .ok_or_else(|| Error::Structural(format!("master is missing {path}")))?;
            Ok((path, t))
        })
        .collect::<Result<ParamMap>>()?;
    Ok(SubModel {
        spec: spec.clone(),
        key: key.clone(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::supernet::BlockMode;

    fn desk_store(seed: u64) -> ParameterStore {
        build_master(&SupernetSpec::desk(), &mut stream(seed, Stream::Init, &[])).unwrap()
    }

    #[test]
    fn cifar10_master_covers_every_slot() {
        let spec = SupernetSpec::cifar10();
        let store = build_master(&spec, &mut stream(1, Stream::Init, &[])).unwrap();
        for block in 0..12 {
            for branch in Branch::ALL {
                let names: Vec<&str> = spec
                    .branch_layers(block, branch)
                    .iter()
                    .map(|l| l.name)
                    .collect();
                let got = store.branch_params(block, branch);
                assert_eq!(got.len(), names.len(), "block {block} branch {branch:?}");
            }
        }
        assert!(store.get(&ParamPath::stem("conv")).is_some());
        assert!(store.get(&ParamPath::classifier("weight")).is_some());
        assert!(store.get(&ParamPath::classifier("bias")).is_some());
        assert_eq!(store.param_count(), spec.master_param_count());
    }

    #[test]
    fn desk_master_has_sixteen_branch_groups() {
        let spec = SupernetSpec::desk();
        let store = desk_store(1);
        let mut slots = std::collections::BTreeSet::new();
        for block in 0..4 {
            for branch in Branch::ALL {
                // the normal identity slot is legitimately empty
                if !(branch == Branch::Identity && spec.block_mode(block) == BlockMode::Normal) {
                    assert!(!store.branch_params(block, branch).is_empty());
                }
                slots.insert((block, branch));
            }
        }
        assert_eq!(slots.len(), 16);
    }

    #[test]
    fn builds_are_deterministic() {
        assert_eq!(desk_store(4), desk_store(4));
        assert_ne!(desk_store(4), desk_store(5));
    }

    #[test]
    fn identity_key_has_no_normal_block_parameters() {
        let spec = SupernetSpec::desk();
        let sub =
            extract_submodel(&desk_store(2), &ChoiceKey::uniform(4, Branch::Identity)).unwrap();
        for (path, _) in &sub.params {
            if let Some((block, _)) = path.choice_slot() {
                assert_eq!(spec.block_mode(block), BlockMode::Reduction);
            }
        }
    }

    #[test]
    fn reference_key_selects_matching_blocks() {
        let store =
            build_master(&SupernetSpec::cifar10(), &mut stream(1, Stream::Init, &[])).unwrap();
        let key = ChoiceKey::from_indices(&[1, 0, 2, 2, 1, 3, 2, 1, 3, 0, 3, 0]).unwrap();
        let sub = extract_submodel(&store, &key).unwrap();
        for (path, t) in &sub.params {
            if let Some((block, branch)) = path.choice_slot() {
                assert_eq!(key.get(block), Some(branch));
            }
            assert_eq!(store.get(path), Some(t));
        }
        let blocks: std::collections::BTreeSet<usize> = sub
            .params
            .keys()
            .filter_map(|p| p.choice_slot())
            .map(|(b, _)| b)
            .collect();
        // blocks 1 and 11 are normal identities
        assert_eq!(blocks.len(), 10);
        assert!(!blocks.contains(&1) && !blocks.contains(&11));
        assert!(
            blocks.contains(&9),
            "reduction identity still carries its pointwise paths"
        );
    }

    #[test]
    fn extraction_copies_at_call_time() {
        let mut store = desk_store(3);
        let key = ChoiceKey::uniform(4, Branch::Residual);
        let before = extract_submodel(&store, &key).unwrap();
        let path = ParamPath::choice(0, Branch::Residual, "conv1");
        store.get_mut(&path).unwrap().data_mut()[0] += 1.0;
        let after = extract_submodel(&store, &key).unwrap();
        assert_eq!(
            after.params[&path].data()[0],
            before.params[&path].data()[0] + 1.0
        );
        assert_eq!(
            before.params[&path].data()[0] + 1.0,
            store.get(&path).unwrap().data()[0]
        );
    }

    #[test]
    fn key_length_mismatch_is_structural() {
        let err = extract_submodel(&desk_store(1), &ChoiceKey::uniform(3, Branch::Identity));
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn from_params_checks_layout() {
        let store = desk_store(1);
        let mut params = store.params().clone();
        ParameterStore::from_params(SupernetSpec::desk(), params.clone(), 0).unwrap();
        params.insert(ParamPath::stem("conv"), Tensor::zeros(&[1]));
        assert!(ParameterStore::from_params(SupernetSpec::desk(), params, 0).is_err());
    }
}
