//! The generation loop: one NSGA-II generation per communication round.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::codec::{decode_for, encode, random_key_from, Branch, ChoiceKey, Genome};
use crate::config::{DataSource, ExperimentConfig, RunMode};
use crate::data::{load_cifar10, make_client_shards, synthetic_dataset, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::fed::{
    aggregate_fillin, evaluate_population, local_update, sample_clients, select_participants,
};
use crate::fed::{LocalTraining, RoundPlan, Traffic, Upload};
use crate::metrics::TimingRecord;
use crate::metrics::{
    export_front, FrontRow, IndividualRecord, JsonLines, MetricsRecord, Role, Selection,
};
use crate::nn::learning_rate_at;
use crate::nsga2::{
    environmental_select, rank_population, select_knee, variation, Objectives, Ranking,
};
use crate::rng::{self, Stream, StreamRng};
use crate::supernet::{build_master, extract_submodel, ParameterStore};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const FRONT_FILE: &str = "front.csv";
pub const CHECKPOINT_FILE: &str = "master.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// Training phase tags. The first generation trains parents, then offspring.
pub const PARENT_PHASE: u64 = 0;
pub const OFFSPRING_PHASE: u64 = 1;

/// Mini-batch order for one client's local training.
pub fn batching_stream(seed: u64, generation: usize, phase: u64, client: usize) -> StreamRng {
    rng::stream(
        seed,
        Stream::Batching,
        &[generation as u64, phase, client as u64],
    )
}

pub fn init_stream(seed: u64) -> StreamRng {
    rng::stream(seed, Stream::Init, &[])
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &config.data.source {
        DataSource::Synthetic(spec) => {
            synthetic_dataset(spec, &mut rng::stream(config.seed, Stream::Data, &[]))
        }
        DataSource::Cifar10 { dir } => load_cifar10(dir),
    }
}

fn allowed_branches(config: &ExperimentConfig) -> Vec<Branch> {
    match &config.evolution.allowed_branches {
        Some(list) => list
            .iter()
            .map(|&b| Branch::try_from(b).expect("validated"))
            .collect(),
        None => Branch::ALL.to_vec(),
    }
}

/// Maps branches outside the allowed set back into it.
fn repair(genome: &Genome, blocks: usize, allowed: &[Branch]) -> Result<(Genome, ChoiceKey)> {
    let key = decode_for(genome, blocks)?;
    if key.branches().iter().all(|b| allowed.contains(b)) {
        return Ok((genome.clone(), key));
    }
    let fixed = ChoiceKey::new(
        key.branches()
            .iter()
            .map(|b| {
                if allowed.contains(b) {
                    *b
                } else {
                    allowed[b.index() as usize % allowed.len()]
                }
            })
            .collect(),
    );
    Ok((encode(&fixed), fixed))
}

#[derive(Debug, Clone, PartialEq)]
struct Member {
    genome: Genome,
    key: ChoiceKey,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<TimingRecord>,
    /// Non-dominated individuals of the last generation.
    pub front: Vec<FrontRow>,
    pub master: ParameterStore,
}

/// A prepared experiment: partitioned clients and the initial master model.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub clients: Vec<ClientShard>,
    pub master: ParameterStore,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(&config)?;
        Self::with_data(config, train, test)
    }

    pub fn with_data(config: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if train.image_shape() != config.supernet.input_shape {
            return Err(Error::Config(format!(
                "dataset images are {:?}, supernet expects {:?}",
                train.image_shape(),
                config.supernet.input_shape
            )));
        }
        let clients = make_client_shards(
            Arc::new(train),
            Arc::new(test),
            &config.partition_spec(),
            config.seed,
        )?;
        let master = build_master(&config.supernet, &mut init_stream(config.seed))?;
        Ok(Experiment {
            config,
            clients,
            master,
        })
    }

    /// Runs every generation. When `output` is set, metrics, timings, the
    /// final front, the final master and the resolved config are written there.
    pub fn run(self, output: Option<&Path>) -> Result<RunOutcome> {
        let Experiment {
            config,
            clients,
            mut master,
        } = self;
        let mut writers = match output {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let cfg_path = dir.join(CONFIG_FILE);
                fs::write(&cfg_path, config.to_toml_string()?)
                    .map_err(|e| Error::io(&cfg_path, e))?;
                Some((
                    JsonLines::create(dir.join(METRICS_FILE))?,
                    JsonLines::create(dir.join(TIMINGS_FILE))?,
                ))
            }
            None => None,
        };

        let n = config.evolution.population;
        let blocks = config.supernet.block_count();
        let allowed = allowed_branches(&config);
        let mut key_rng = rng::stream(config.seed, Stream::KeySampling, &[]);
        let mut parents: Vec<Member> = (0..n)
            .map(|_| {
                let key = random_key_from(blocks, &allowed, &mut key_rng);
                Member {
                    genome: encode(&key),
                    key,
                }
            })
            .collect();

        let mut records = Vec::with_capacity(config.evolution.generations);
        let mut timings = Vec::with_capacity(config.evolution.generations);
        let mut last: Option<(Vec<Member>, Vec<Objectives>, Ranking)> = None;
        for generation in 1..=config.evolution.generations {
            let started = Instant::now();
            let step = run_generation(
                &config,
                &clients,
                &mut master,
                &parents,
                &allowed,
                generation,
            )
            .map_err(|e| Error::Generation {
                generation,
                source: Box::new(e),
            })?;
            let timing = TimingRecord {
                generation,
                mode: config.mode,
                seconds: started.elapsed().as_secs_f64(),
            };
            let best = &step.record.best_accuracy;
            info!(
                "generation {generation}: best error {:.4} ({} MACs), front {}, {:.2}s",
                best.test_error,
                best.macs,
                step.ranking.fronts[0].len(),
                timing.seconds
            );
            if let Some((metrics, times)) = writers.as_mut() {
                metrics.write(&step.record)?;
                times.write(&timing)?;
            }
            parents = step
                .survivors
                .iter()
                .map(|&i| step.population[i].clone())
                .collect();
            records.push(step.record);
            timings.push(timing);
            last = Some((step.population, step.objectives, step.ranking));
        }

        let front = match &last {
            Some((pop, objs, ranking)) => front_rows(pop, objs, ranking),
            None => Vec::new(),
        };
        if let Some(dir) = output {
            export_front(&front, dir.join(FRONT_FILE))?;
            save_checkpoint(&master, dir.join(CHECKPOINT_FILE))?;
        }
        Ok(RunOutcome {
            records,
            timings,
            front,
            master,
        })
    }
}

/// Prepares the experiment and runs it, writing into `config.output_dir`.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunOutcome> {
    let output = config.output_dir.clone();
    Experiment::prepare(config)?.run(output.as_deref())
}

struct GenerationStep {
    record: MetricsRecord,
    population: Vec<Member>,
    objectives: Vec<Objectives>,
    ranking: Ranking,
    survivors: Vec<usize>,
}

fn run_generation(
    config: &ExperimentConfig,
    clients: &[ClientShard],
    master: &mut ParameterStore,
    parents: &[Member],
    allowed: &[Branch],
    generation: usize,
) -> Result<GenerationStep> {
    let seed = config.seed;
    let t = generation as u64;
    let n = config.evolution.population;
    let blocks = config.supernet.block_count();
    let mut traffic = Traffic::default();

    let participants = select_participants(
        clients.len(),
        config.federated.participation,
        &mut rng::stream(seed, Stream::ClientSampling, &[t]),
    )?;

    let parent_genomes: Vec<Genome> = parents.iter().map(|m| m.genome.clone()).collect();
    let offspring = variation(
        &parent_genomes,
        config.evolution.crossover_prob,
        config.evolution.mutation_prob,
        &mut rng::stream(seed, Stream::Variation, &[t]),
    )
    .iter()
    .map(|g| repair(g, blocks, allowed).map(|(genome, key)| Member { genome, key }))
    .collect::<Result<Vec<_>>>()?;

    let phases: &[u64] = if generation == 1 {
        &[PARENT_PHASE, OFFSPRING_PHASE]
    } else {
        &[OFFSPRING_PHASE]
    };
    let mut group_size = 0;
    for &phase in phases {
        let members = if phase == PARENT_PHASE {
            parents
        } else {
            &offspring
        };
        let plan = sample_clients(
            &participants,
            n,
            &mut rng::stream(seed, Stream::ClientSampling, &[t, phase + 1]),
        )?;
        group_size = plan.group_size();
        let uploads = train_phase(
            config,
            clients,
            master,
            members,
            &plan,
            generation,
            phase,
            &mut traffic,
        )?;
        *master = aggregate_fillin(master, &uploads)?;
        debug!(
            "generation {generation} phase {phase}: {} uploads, master version {}",
            uploads.len(),
            master.version
        );
    }

    // Every participant downloads the master once and evaluates all keys.
    let master_params = master.param_count();
    for _ in &participants {
        traffic.download_master(master_params);
    }
    let evaluators: Vec<ClientShard> = participants.iter().map(|&c| clients[c].clone()).collect();
    let population: Vec<Member> = parents.iter().cloned().chain(offspring).collect();
    let keys: Vec<ChoiceKey> = population.iter().map(|m| m.key.clone()).collect();
    let objectives = evaluate_population(master, &keys, &evaluators, config.federated.test_batch)?;

    let genomes: Vec<Genome> = population.iter().map(|m| m.genome.clone()).collect();
    let ranking = rank_population(&objectives, &genomes);
    let survivors = environmental_select(&objectives, &genomes, n);

    let individuals: Vec<IndividualRecord> = population
        .iter()
        .enumerate()
        .map(|(i, m)| IndividualRecord {
            role: if i < parents.len() {
                Role::Parent
            } else {
                Role::Offspring
            },
            key: m.key.to_string(),
            genome: m.genome.to_string(),
            test_error: objectives[i].test_error,
            macs: objectives[i].macs,
            rank: ranking.rank[i],
            crowding: ranking.crowding[i],
        })
        .collect();
    let select = |i: usize| Selection {
        index: i,
        key: population[i].key.to_string(),
        test_error: objectives[i].test_error,
        macs: objectives[i].macs,
    };
    let best = (0..population.len())
        .min_by(|&a, &b| {
            objectives[a]
                .test_error
                .total_cmp(&objectives[b].test_error)
                .then(objectives[a].macs.cmp(&objectives[b].macs))
                .then_with(|| genomes[a].bits().cmp(genomes[b].bits()))
        })
        .expect("non-empty population");
    let first_front = &ranking.fronts[0];
    let front_objs: Vec<Objectives> = first_front.iter().map(|&i| objectives[i]).collect();
    let knee = first_front[select_knee(&front_objs).expect("non-empty front")];

    let record = MetricsRecord {
        generation,
        individuals,
        best_accuracy: select(best),
        knee: select(knee),
        training_phases: phases.len(),
        participants: participants.len(),
        group_size,
        traffic,
        master_version: master.version,
    };
    Ok(GenerationStep {
        record,
        population,
        objectives,
        ranking,
        survivors,
    })
}

/// Local training of every member on its client group.
#[allow(clippy::too_many_arguments)]
fn train_phase(
    config: &ExperimentConfig,
    clients: &[ClientShard],
    master: &ParameterStore,
    members: &[Member],
    plan: &RoundPlan,
    generation: usize,
    phase: u64,
    traffic: &mut Traffic,
) -> Result<Vec<Upload>> {
    let seed = config.seed;
    let fed = &config.federated;
    let training = LocalTraining {
        epochs: fed.local_epochs,
        batch_size: fed.train_batch,
        learning_rate: learning_rate_at(&fed.sgd, (generation - 1) as u32),
        momentum: fed.sgd.momentum,
    };
    let reinit = config.mode == RunMode::ReinitOffspring && phase == OFFSPRING_PHASE;

    let mut jobs = Vec::new();
    for (i, (member, group)) in members.iter().zip(&plan.groups).enumerate() {
        let mut sub = extract_submodel(master, &member.key)?;
        if reinit {
            sub.reinitialize(&mut rng::stream(
                seed,
                Stream::Init,
                &[generation as u64, i as u64 + 1],
            ));
        }
        for &client in group {
            // Parameters are shipped in the first generation; afterwards
            // clients already hold the master from the last evaluation and
            // only need the key.
            if generation == 1 {
                traffic.download_submodel(sub.param_count());
            } else {
                traffic.download_key(&member.key);
            }
            jobs.push((client, sub.clone()));
        }
    }
    let uploads = jobs
        .into_par_iter()
        .map(|(client, sub)| {
            local_update(
                &clients[client],
                sub,
                &training,
                &mut batching_stream(seed, generation, phase, client),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for u in &uploads {
        traffic.upload(u);
    }
    Ok(uploads)
}

fn front_rows(
    population: &[Member],
    objectives: &[Objectives],
    ranking: &Ranking,
) -> Vec<FrontRow> {
    let mut seen = std::collections::BTreeSet::new();
    let mut rows: Vec<FrontRow> = ranking.fronts[0]
        .iter()
        .filter(|&&i| seen.insert(population[i].genome.bits().to_vec()))
        .map(|&i| FrontRow {
            key: population[i].key.to_string(),
            genome: population[i].genome.to_string(),
            test_error: objectives[i].test_error,
            macs: objectives[i].macs,
            rank: ranking.rank[i],
            crowding: ranking.crowding[i],
        })
        .collect();
    crate::metrics::sort_front(&mut rows);
    rows
}
