//! Federated protocol: client sampling, local training, aggregation and
//! fitness evaluation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::ChoiceKey;
use crate::data::epoch_batches;
pub use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::nn::{error_count, loss_and_grads, sgd_step, OptimizerState, Tensor};
use crate::nsga2::Objectives;
use crate::supernet::{count_macs, extract_submodel, ParamMap, ParameterStore, SubModel};

/// Bytes per transmitted parameter (f64).
pub const BYTES_PER_PARAM: u64 = 8;
/// Bytes per transmitted choice-key entry.
pub const BYTES_PER_KEY_ENTRY: u64 = 1;

/// A trained sub-model returned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub key: ChoiceKey,
    pub params: ParamMap,
    pub n_k: usize,
}

impl Upload {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// Client groups for one generation. `groups[i]` trains individual `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub groups: Vec<Vec<usize>>,
    /// Participants that train nothing this round but still evaluate.
    pub leftover: Vec<usize>,
}

impl RoundPlan {
    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    pub fn assigned(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Local training hyper-parameters for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// `m = ⌊C·K⌋` participants (at least one), drawn without replacement and
/// returned in ascending order.
pub fn select_participants<R: Rng + ?Sized>(
    client_count: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if client_count == 0 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "participation fraction {fraction} over {client_count} clients"
        )));
    }
    let m = ((fraction * client_count as f64).floor() as usize).clamp(1, client_count);
    let all: Vec<usize> = (0..client_count).collect();
    let mut picked: Vec<usize> = all.choose_multiple(rng, m).copied().collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Splits the participants into `population` disjoint groups of
/// `⌊m/population⌋` clients. The remaining `m mod population` are leftovers.
pub fn sample_clients<R: Rng + ?Sized>(
    participants: &[usize],
    population: usize,
    rng: &mut R,
) -> Result<RoundPlan> {
    let m = participants.len();
    if population == 0 || m < population {
        return Err(Error::Config(format!(
            "{m} participating clients cannot serve a population of {population}"
        )));
    }
    let size = m / population;
    let mut order = participants.to_vec();
    order.shuffle(rng);
    let groups = order[..size * population]
        .chunks(size)
        .map(<[usize]>::to_vec)
        .collect();
    let mut leftover = order[size * population..].to_vec();
    leftover.sort_unstable();
    Ok(RoundPlan { groups, leftover })
}

/// Runs `epochs` passes of mini-batch momentum SGD over the client's
/// training data, starting from the downloaded sub-model with zero momentum.
pub fn local_update<R: Rng + ?Sized>(
    shard: &ClientShard,
    submodel: SubModel,
    training: &LocalTraining,
    rng: &mut R,
) -> Result<Upload> {
    let n = shard.n_train();
    if n == 0 {
        return Err(Error::Data(format!(
            "client {} has no training data",
            shard.client_id
        )));
    }
    let mut model = submodel;
    let mut state = OptimizerState::new(training.learning_rate, training.momentum);
    for _ in 0..training.epochs {
        for positions in epoch_batches(n, training.batch_size, rng) {
            let batch = shard.train.batch(&positions);
            let (_, grads) = loss_and_grads(&model, &batch)?;
            sgd_step(&mut model.params, &grads, &mut state)?;
        }
    }
    Ok(Upload {
        client_id: shard.client_id,
        key: model.key,
        params: model.params,
        n_k: n,
    })
}

fn total_samples(uploads: &[Upload]) -> Result<usize> {
    if uploads.is_empty() {
        return Err(Error::Structural(
            "aggregation needs at least one upload".into(),
        ));
    }
    let n: usize = uploads.iter().map(|u| u.n_k).sum();
    if n == 0 {
        return Err(Error::Data("uploads carry no training samples".into()));
    }
    Ok(n)
}

/// Fill-in aggregation. Every upload is completed to a full master by taking
/// the tensors it did not train from `prev`, and the completed masters are
/// averaged with weights `n_k / n`, where `n` sums over the uploads.
///
/// A tensor that no upload carries keeps its previous value bit for bit.
pub fn aggregate_fillin(prev: &ParameterStore, uploads: &[Upload]) -> Result<ParameterStore> {
    let n = total_samples(uploads)?;
    let weights: Vec<f64> = uploads.iter().map(|u| u.n_k as f64 / n as f64).collect();
    for u in uploads {
        prev.spec().check_key(&u.key)?;
        for (path, t) in &u.params {
            match prev.get(path) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Structural(format!(
                        "client {} uploaded {path} with shape {:?}, master has {:?}",
                        u.client_id,
                        t.shape(),
                        p.shape()
                    )))
                }
                None => {
                    return Err(Error::Structural(format!(
                        "client {} uploaded unknown tensor {path}",
                        u.client_id
                    )))
                }
            }
        }
    }

    let mut next = prev.clone();
    let paths: Vec<_> = prev.iter().map(|(p, _)| p.clone()).collect();
    for path in paths {
        if !uploads.iter().any(|u| u.params.contains_key(&path)) {
            continue;
        }
        let old = prev.get(&path).expect("path from prev");
        let term = |k: usize| uploads[k].params.get(&path).unwrap_or(old);
        let mut acc = term(0).clone();
        acc.scale(weights[0]);
        for (k, &w) in weights.iter().enumerate().skip(1) {
            acc.scaled_add(w, term(k));
        }
        *next.get_mut(&path).expect("same layout") = acc;
    }
    next.version = prev.version + 1;
    Ok(next)
}

/// Plain weighted averaging of structurally identical uploads.
pub fn aggregate_fedavg(uploads: &[Upload]) -> Result<ParamMap> {
    let n = total_samples(uploads)?;
    let first = &uploads[0];
    for u in &uploads[1..] {
        let same = u.params.len() == first.params.len()
            && u.params
                .iter()
                .zip(&first.params)
                .all(|((pa, ta), (pb, tb))| pa == pb && ta.shape() == tb.shape());
        if !same {
            return Err(Error::Structural(format!(
                "upload from client {} differs in structure from client {}",
                u.client_id, first.client_id
            )));
        }
    }
    Ok(first
        .params
        .iter()
        .map(|(path, t)| {
            let mut acc = t.clone();
            acc.scale(first.n_k as f64 / n as f64);
            for u in &uploads[1..] {
                acc.scaled_add(u.n_k as f64 / n as f64, &u.params[path]);
            }
            (path.clone(), acc)
        })
        .collect())
}

/// Misclassification rate of `model` on the client's test data, evaluated in
/// consecutive batches.
pub fn client_error(model: &SubModel, shard: &ClientShard, batch_size: usize) -> Result<f64> {
    let n = shard.n_test();
    if n == 0 {
        return Ok(0.0);
    }
    let mut wrong = 0;
    for batch in shard.test.sequential_batches(batch_size) {
        wrong += error_count(model, &batch)?;
    }
    Ok(wrong as f64 / n as f64)
}

/// Every client evaluates every key on its own test data; the server
/// combines the client errors with weights `n_k_test / n_test`.
pub fn evaluate_population(
    master: &ParameterStore,
    keys: &[ChoiceKey],
    clients: &[ClientShard],
    test_batch: usize,
) -> Result<Vec<Objectives>> {
    let n_test: usize = clients.iter().map(ClientShard::n_test).sum();
    if n_test == 0 {
        return Err(Error::Data("no client holds test data".into()));
    }
    let models = keys
        .iter()
        .map(|k| extract_submodel(master, k))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..clients.len()).map(move |c| (m, c)))
        .collect();
    let errors = jobs
        .par_iter()
        .map(|&(m, c)| client_error(&models[m], &clients[c], test_batch))
        .collect::<Result<Vec<f64>>>()?;
    models
        .iter()
        .enumerate()
        .map(|(m, model)| {
            let mut err = 0.0;
            for (c, shard) in clients.iter().enumerate() {
                if shard.n_test() > 0 {
                    err += shard.n_test() as f64 / n_test as f64 * errors[m * clients.len() + c];
                }
            }
            Ok(Objectives {
                test_error: err,
                macs: count_macs(master.spec(), &model.key)?,
            })
        })
        .collect()
}

/// Transfer counters for one generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    /// Sub-model parameter downloads for training.
    pub submodel_downloads: u64,
    /// Choice-key downloads for training.
    pub key_downloads: u64,
    /// Full master downloads for evaluation.
    pub master_downloads: u64,
    pub submodel_uploads: u64,
    pub bytes_downloaded: u64,
    pub bytes_uploaded: u64,
}

impl Traffic {
    pub fn download_submodel(&mut self, params: usize) {
        self.submodel_downloads += 1;
        self.bytes_downloaded += params as u64 * BYTES_PER_PARAM;
    }

    pub fn download_key(&mut self, key: &ChoiceKey) {
        self.key_downloads += 1;
        self.bytes_downloaded += key.len() as u64 * BYTES_PER_KEY_ENTRY;
    }

    pub fn download_master(&mut self, params: usize) {
        self.master_downloads += 1;
        self.bytes_downloaded += params as u64 * BYTES_PER_PARAM;
    }

    pub fn upload(&mut self, upload: &Upload) {
        self.submodel_uploads += 1;
        self.bytes_uploaded += upload.param_count() as u64 * BYTES_PER_PARAM;
    }
}
