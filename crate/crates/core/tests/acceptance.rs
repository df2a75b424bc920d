//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use fednas::codec::{decode, encode, random_key, Branch, ChoiceKey, Genome};
use fednas::config::{DataSource, ExperimentConfig};
use fednas::data::epoch_batches;
use fednas::fed::{aggregate_fedavg, aggregate_fillin, sample_clients, Upload};
use fednas::nn::{learning_rate_at, loss, loss_and_grads, sgd_step, Batch, OptimizerState, Tensor};
use fednas::nsga2::{
    crowding_distance, dominates, environmental_select, fast_nondominated_sort, Objectives,
};
use fednas::rng::{stream, Stream};
use fednas::runner::{
    batching_stream, init_stream, Experiment, RunOutcome, OFFSPRING_PHASE, PARENT_PHASE,
};
use fednas::supernet::{
    build_master, count_macs_resnet18, extract_submodel, ParamMap, ParameterStore, SupernetSpec,
};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- MACs

fn mac_oracle() -> Check {
    let total = count_macs_resnet18([3, 32, 32]);
    // conv1, then per stage: two 3×3 convs per unit plus a 1×1 projection
    // where the shape changes, then the classifier
    let conv = |hw: u64, cin: u64, cout: u64, k: u64| hw * hw * cout * k * k * cin;
    let mut hand = conv(32, 3, 64, 3);
    let mut cin = 64;
    let mut hw = 32;
    for (stage, width) in [64u64, 128, 256, 512].into_iter().enumerate() {
        for unit in 0..2 {
            let down = stage > 0 && unit == 0;
            let out_hw = if down { hw / 2 } else { hw };
            hand += conv(out_hw, cin, width, 3) + conv(out_hw, width, width, 3);
            if down || cin != width {
                hand += conv(out_hw, cin, width, 1);
            }
            cin = width;
            hw = out_hw;
        }
    }
    hand += 512 * 10;
    ensure!(total == hand, "counter {total} != hand count {hand}");
    let rel = (total as f64 - 0.5587e9).abs() / 0.5587e9;
    ensure!(
        rel < 0.01,
        "{total} MACs is {:.3}% from 0.5587G",
        rel * 100.0
    );
    Ok(format!("{total} MACs, {:.2}% from 0.5587G", rel * 100.0))
}

// ---------------------------------------------------------------- codec

fn codec_oracle() -> Check {
    let bits = "010010100111100111001100";
    let genome: Genome = bits.parse().map_err(|e| format!("{e}"))?;
    let key = decode(&genome).map_err(|e| format!("{e}"))?;
    ensure!(
        key.indices() == [1, 0, 2, 2, 1, 3, 2, 1, 3, 0, 3, 0],
        "decoded {:?}",
        key.indices()
    );
    ensure!(encode(&key) == genome, "reference key does not round-trip");

    let mut keys = BTreeSet::new();
    for v in 0u8..16 {
        let g = Genome::from_bits((0..4).rev().map(|i| (v >> i) & 1).collect()).unwrap();
        let k = decode(&g).map_err(|e| format!("{e}"))?;
        // independent reading: two bits per block, most significant first
        ensure!(
            k.indices() == [v >> 2, v & 3],
            "genome {g} decoded to {:?}",
            k.indices()
        );
        ensure!(encode(&k) == g, "genome {g} does not round-trip");
        keys.insert(k.indices());
    }
    ensure!(
        keys.len() == 16,
        "only {} distinct 2-block keys",
        keys.len()
    );
    Ok("reference key decodes and round-trips; 16/16 two-block keys bijective".into())
}

// ---------------------------------------------------------------- aggregation

fn random_spec<R: Rng>(rng: &mut R) -> SupernetSpec {
    let blocks = rng.random_range(1..=4);
    let stem = [2, 3, 4][rng.random_range(0..3)];
    let mut reductions = BTreeSet::new();
    let mut channels = Vec::new();
    let mut c = stem;
    for b in 0..blocks {
        if reductions.len() < 2 && rng.random_bool(0.4) {
            reductions.insert(b);
            c *= 2;
        }
        channels.push(c);
    }
    SupernetSpec {
        input_shape: [rng.random_range(1..=3), 8, 8],
        stem_channels: stem,
        stage_channels: channels,
        reduction_positions: reductions,
        class_count: rng.random_range(2..=5),
        expansion_factor: rng.random_range(1..=3),
    }
}

fn perturbed_upload<R: Rng>(
    store: &ParameterStore,
    key: &ChoiceKey,
    client: usize,
    rng: &mut R,
) -> Upload {
    let mut params = extract_submodel(store, key).unwrap().params;
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
    }
    Upload {
        client_id: client,
        key: key.clone(),
        params,
        n_k: rng.random_range(1..=500),
    }
}

/// Completes every upload to a full master with the previous weights, then
/// takes the sample-weighted average of the completed masters.
fn brute_force_fillin(prev: &ParameterStore, uploads: &[Upload]) -> ParamMap {
    let n: usize = uploads.iter().map(|u| u.n_k).sum();
    let mut out = ParamMap::new();
    for (path, old) in prev.iter() {
        let mut acc = vec![0.0; old.len()];
        for u in uploads {
            let src = u.params.get(path).unwrap_or(old);
            for (a, v) in acc.iter_mut().zip(src.data()) {
                *a += (u.n_k as f64 / n as f64) * v;
            }
        }
        out.insert(
            path.clone(),
            Tensor::new(old.shape().to_vec(), acc).unwrap(),
        );
    }
    out
}

fn aggregation_oracle() -> Check {
    let mut rng = stream(2024, Stream::Data, &[]);
    let mut worst: f64 = 0.0;
    let mut untouched = 0usize;
    let trials = 60;
    for trial in 0..trials {
        let spec = random_spec(&mut rng);
        let store = build_master(&spec, &mut stream(trial, Stream::Init, &[])).unwrap();
        let clients = rng.random_range(1..=8);
        let uploads: Vec<Upload> = (0..clients)
            .map(|c| {
                let key = random_key(spec.block_count(), &mut rng);
                perturbed_upload(&store, &key, c, &mut rng)
            })
            .collect();
        let got = aggregate_fillin(&store, &uploads).map_err(|e| format!("{e}"))?;
        let want = brute_force_fillin(&store, &uploads);
        for (path, t) in got.iter() {
            worst = worst.max(t.max_abs_diff(&want[path]));
            if !uploads.iter().any(|u| u.params.contains_key(path)) {
                untouched += 1;
                let old = store.get(path).unwrap();
                let same = old
                    .data()
                    .iter()
                    .zip(t.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                ensure!(same, "trial {trial}: untrained {path} changed");
            }
        }
        ensure!(
            worst <= 1e-12,
            "trial {trial}: fill-in differs from oracle by {worst:e}"
        );

        // one shared key across all clients: fill-in equals FedAvg
        let key = random_key(spec.block_count(), &mut rng);
        let shared: Vec<Upload> = (0..clients)
            .map(|c| perturbed_upload(&store, &key, c, &mut rng))
            .collect();
        let fill = aggregate_fillin(&store, &shared).map_err(|e| format!("{e}"))?;
        let avg = aggregate_fedavg(&shared).map_err(|e| format!("{e}"))?;
        for (path, t) in fill.iter() {
            match avg.get(path) {
                Some(a) => {
                    let d = t.max_abs_diff(a);
                    ensure!(
                        d <= 1e-12,
                        "trial {trial}: {path} differs from FedAvg by {d:e}"
                    );
                }
                None => {
                    let old = store.get(path).unwrap();
                    let same = old
                        .data()
                        .iter()
                        .zip(t.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure!(
                        same,
                        "trial {trial}: untrained {path} changed under a shared key"
                    );
                }
            }
        }
    }
    Ok(format!(
        "{trials} random supernets: max deviation {worst:.1e}, {untouched} untrained tensors bitwise unchanged, shared-key runs equal FedAvg"
    ))
}

// ---------------------------------------------------------------- NSGA-II

fn peel(objs: &[Objectives]) -> Vec<Vec<usize>> {
    let beats = |a: &Objectives, b: &Objectives| {
        a.test_error <= b.test_error
            && a.macs <= b.macs
            && (a.test_error < b.test_error || a.macs < b.macs)
    };
    let mut left: Vec<usize> = (0..objs.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&p| !left.iter().any(|&q| beats(&objs[q], &objs[p])))
            .collect();
        left.retain(|p| !front.contains(p));
        fronts.push(front);
    }
    fronts
}

/// Textbook crowding distance for points with pairwise distinct objective values.
fn hand_crowding(objs: &[Objectives], front: &[usize]) -> BTreeMap<usize, f64> {
    let mut d: BTreeMap<usize, f64> = front.iter().map(|&i| (i, 0.0)).collect();
    let values = |i: usize| [objs[i].test_error, objs[i].macs as f64];
    for m in 0..2 {
        let mut sorted = front.to_vec();
        sorted.sort_by(|&a, &b| values(a)[m].total_cmp(&values(b)[m]));
        let range = values(sorted[sorted.len() - 1])[m] - values(sorted[0])[m];
        *d.get_mut(&sorted[0]).unwrap() = f64::INFINITY;
        *d.get_mut(&sorted[sorted.len() - 1]).unwrap() = f64::INFINITY;
        for w in 1..sorted.len().saturating_sub(1) {
            *d.get_mut(&sorted[w]).unwrap() +=
                (values(sorted[w + 1])[m] - values(sorted[w - 1])[m]) / range;
        }
    }
    d
}

fn nsga2_oracle() -> Check {
    let mut rng = stream(77, Stream::Variation, &[]);
    for trial in 0..200 {
        let size = rng.random_range(1..=20);
        let objs: Vec<Objectives> = (0..size)
            .map(|_| Objectives::new(rng.random_range(0..10) as f64, rng.random_range(0..10)))
            .collect();
        let got = fast_nondominated_sort(&objs);
        let want = peel(&objs);
        ensure!(got == want, "population {trial}: {got:?} != {want:?}");
        for (j, front) in got.iter().enumerate() {
            for &p in front {
                for later in &got[j..] {
                    ensure!(
                        later.iter().all(|&q| !dominates(&objs[q], &objs[p])),
                        "population {trial}: front {j} member dominated by a later front"
                    );
                }
            }
        }
    }

    let three = [
        Objectives::new(0.0, 2),
        Objectives::new(1.0, 1),
        Objectives::new(2.0, 0),
    ];
    let d = crowding_distance(&three, &[0, 1, 2]);
    ensure!(
        d == [f64::INFINITY, 2.0, f64::INFINITY],
        "3-point crowding {d:?}"
    );

    // selection: whole fronts first, then the split front by crowding
    for trial in 0..200 {
        let size = 2 * rng.random_range(2..=10);
        let mut errors: Vec<u32> = (0..1000).collect();
        let mut macs: Vec<u64> = (0..1000).collect();
        errors.shuffle(&mut rng);
        macs.shuffle(&mut rng);
        let objs: Vec<Objectives> = (0..size)
            .map(|i| Objectives::new(errors[i] as f64 / 1000.0, macs[i]))
            .collect();
        let genomes: Vec<Genome> = (0..size)
            .map(|i| Genome::from_bits((0..8).map(|b| ((i >> b) & 1) as u8).collect()).unwrap())
            .collect();
        let n = size / 2;
        let chosen: BTreeSet<usize> = environmental_select(&objs, &genomes, n)
            .into_iter()
            .collect();
        ensure!(chosen.len() == n, "selection size {}", chosen.len());
        let mut taken = 0;
        for front in peel(&objs) {
            if taken + front.len() <= n {
                ensure!(
                    front.iter().all(|i| chosen.contains(i)),
                    "selection {trial}: a whole front was skipped"
                );
                taken += front.len();
                continue;
            }
            let crowd = hand_crowding(&objs, &front);
            let inside: Vec<f64> = front
                .iter()
                .filter(|i| chosen.contains(i))
                .map(|i| crowd[i])
                .collect();
            let outside: Vec<f64> = front
                .iter()
                .filter(|i| !chosen.contains(i))
                .map(|i| crowd[i])
                .collect();
            ensure!(
                inside.len() == n - taken,
                "selection {trial}: split front contributes {}",
                inside.len()
            );
            let min_in = inside.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_out = outside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ensure!(
                inside.is_empty() || min_in >= max_out,
                "selection {trial}: kept crowding {min_in} below dropped {max_out}"
            );
            break;
        }
    }
    Ok("200 populations match dominance peeling; 3-point crowding [inf, 2, inf]; 200 selections fill fronts then crowding".into())
}

// ---------------------------------------------------------------- gradients

fn gradient_checks() -> Check {
    let spec = SupernetSpec {
        input_shape: [2, 4, 4],
        stem_channels: 2,
        stage_channels: vec![2, 4],
        reduction_positions: [1].into_iter().collect(),
        class_count: 3,
        expansion_factor: 2,
    };
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for a in 0..4u8 {
        for b in 0..4u8 {
            let store = build_master(
                &spec,
                &mut stream(100 + (a * 4 + b) as u64, Stream::Init, &[]),
            )
            .unwrap();
            let model =
                extract_submodel(&store, &ChoiceKey::from_indices(&[a, b]).unwrap()).unwrap();
            let mut rng = stream(200 + (a * 4 + b) as u64, Stream::Data, &[]);
            let inputs = (0..4 * 32).map(|_| rng.sample(StandardNormal)).collect();
            let labels = (0..4).map(|_| rng.random_range(0..3)).collect();
            let batch = Batch::new(Tensor::new(vec![4, 2, 4, 4], inputs).unwrap(), labels).unwrap();
            let (_, grads) = loss_and_grads(&model, &batch).map_err(|e| format!("{e}"))?;
            let h = 1e-6;
            for (path, t) in &model.params {
                for j in 0..t.len() {
                    let shifted = |delta: f64| {
                        let mut m = model.clone();
                        m.params.get_mut(path).unwrap().data_mut()[j] += delta;
                        loss(&m, &batch).unwrap()
                    };
                    let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                    let analytic = grads[path].data()[j];
                    let err = (analytic - numeric).abs();
                    let scale = analytic.abs().max(numeric.abs());
                    ensure!(
                        err <= 1e-7 || err <= 1e-4 * scale,
                        "key [{a},{b}] {path}[{j}]: analytic {analytic}, numeric {numeric}"
                    );
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "{checked} parameters over 16 two-block keys, worst absolute error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- single client

fn single_client_config(branch: u8) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 11;
    cfg.evolution.population = 1;
    cfg.evolution.generations = 5;
    cfg.evolution.crossover_prob = 0.0;
    cfg.evolution.mutation_prob = 0.0;
    cfg.evolution.allowed_branches = Some(vec![branch]);
    cfg.federated.clients = 1;
    cfg.federated.participation = 1.0;
    if let DataSource::Synthetic(s) = &mut cfg.data.source {
        s.train_samples = 96;
        s.test_samples = 32;
    }
    cfg
}

fn single_client_equivalence() -> Check {
    for branch in [0u8, 1] {
        let cfg = single_client_config(branch);
        let exp = Experiment::prepare(cfg.clone()).map_err(|e| format!("{e}"))?;
        let shard = exp.clients[0].clone();
        let federated = exp.run(None).map_err(|e| format!("{e}"))?;

        // centralized SGD on the same data, initial weights and batch order
        let mut master = build_master(&cfg.supernet, &mut init_stream(cfg.seed)).unwrap();
        let key = ChoiceKey::uniform(
            cfg.supernet.block_count(),
            Branch::try_from(branch).unwrap(),
        );
        let sgd = cfg.federated.sgd;
        for generation in 1..=cfg.evolution.generations {
            let phases: &[u64] = if generation == 1 {
                &[PARENT_PHASE, OFFSPRING_PHASE]
            } else {
                &[OFFSPRING_PHASE]
            };
            for &phase in phases {
                let mut model = extract_submodel(&master, &key).unwrap();
                let mut state = OptimizerState::new(
                    learning_rate_at(&sgd, generation as u32 - 1),
                    sgd.momentum,
                );
                let mut order = batching_stream(cfg.seed, generation, phase, 0);
                for _ in 0..cfg.federated.local_epochs {
                    for positions in
                        epoch_batches(shard.n_train(), cfg.federated.train_batch, &mut order)
                    {
                        let batch = shard.train.batch(&positions);
                        let (_, grads) =
                            loss_and_grads(&model, &batch).map_err(|e| format!("{e}"))?;
                        sgd_step(&mut model.params, &grads, &mut state)
                            .map_err(|e| format!("{e}"))?;
                    }
                }
                for (path, t) in model.params {
                    *master.get_mut(&path).unwrap() = t;
                }
            }
        }
        for (path, t) in master.iter() {
            let fed = federated.master.get(path).unwrap();
            let same = t
                .data()
                .iter()
                .zip(fed.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "branch {branch}: {path} differs from centralized SGD");
        }
    }
    Ok(
        "5 rounds, identity and residual key spaces: master bitwise equal to centralized SGD"
            .into(),
    )
}

// ---------------------------------------------------------------- desk run

fn desk_run() -> Result<(RunOutcome, Vec<u8>, f64), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let out = Experiment::prepare(ExperimentConfig::desk())
        .and_then(|e| e.run(Some(dir.path())))
        .map_err(|e| format!("{e}"))?;
    let metrics = std::fs::read(dir.path().join("metrics.jsonl")).map_err(|e| e.to_string())?;
    Ok((out, metrics, started.elapsed().as_secs_f64()))
}

fn desk_end_to_end(first: &RunOutcome, metrics: &[u8], seconds: f64) -> Check {
    let cfg = ExperimentConfig::desk();
    ensure!(first.records.len() == 30, "{} records", first.records.len());
    ensure!(
        first
            .records
            .iter()
            .enumerate()
            .all(|(i, r)| r.generation == i + 1),
        "generation indices are not 1..=30"
    );
    ensure!(
        first
            .records
            .iter()
            .all(|r| r.individuals.len() == 2 * cfg.evolution.population),
        "a record does not hold 2N individuals"
    );
    let best = first
        .front
        .iter()
        .map(|r| r.test_error)
        .fold(f64::INFINITY, f64::min);
    let accuracy = 1.0 - best;
    ensure!(accuracy >= 0.9, "best Pareto accuracy {accuracy:.4} < 0.90");

    let points: BTreeSet<(u64, u64)> = first
        .front
        .iter()
        .map(|r| (r.test_error.to_bits(), r.macs))
        .collect();
    ensure!(
        points.len() >= 2,
        "final front has {} distinct point(s)",
        points.len()
    );
    for a in &first.front {
        for b in &first.front {
            let (oa, ob) = (
                Objectives::new(a.test_error, a.macs),
                Objectives::new(b.test_error, b.macs),
            );
            ensure!(
                !dominates(&oa, &ob),
                "front point {} dominates {}",
                a.key,
                b.key
            );
        }
    }

    let (second, metrics2, _) = desk_run()?;
    ensure!(
        metrics == metrics2.as_slice(),
        "metrics files differ between identical runs"
    );
    ensure!(
        second.front == first.front,
        "fronts differ between identical runs"
    );
    ensure!(
        second.master == first.master,
        "final masters differ between identical runs"
    );
    Ok(format!(
        "best accuracy {:.2}%, {} front points, byte-identical reruns, {seconds:.1}s per run",
        accuracy * 100.0,
        points.len()
    ))
}

// ---------------------------------------------------------------- communication

fn traffic_matches(
    outcome: &RunOutcome,
    spec: &SupernetSpec,
    n: usize,
    m: usize,
) -> Result<(), String> {
    let master_params = spec.master_param_count() as u64;
    for r in &outcome.records {
        let l = m / n;
        let t = &r.traffic;
        ensure!(
            r.group_size == l,
            "generation {}: group size {} != {l}",
            r.generation,
            r.group_size
        );
        let phases = if r.generation == 1 { 2 } else { 1 };
        ensure!(
            r.training_phases == phases,
            "generation {}: {} phases",
            r.generation,
            r.training_phases
        );
        ensure!(
            t.submodel_uploads == (phases * n * l) as u64,
            "generation {}: {} uploads, expected {} per phase",
            r.generation,
            t.submodel_uploads,
            n * l
        );
        ensure!(
            t.master_downloads == m as u64,
            "generation {}: {} master downloads",
            r.generation,
            t.master_downloads
        );

        // upload bytes: every assigned client sends only its sub-model
        let trained: Vec<&str> = r
            .individuals
            .iter()
            .enumerate()
            .filter(|(i, _)| r.generation == 1 || *i >= n)
            .map(|(_, ind)| ind.key.as_str())
            .collect();
        let mut expected_up = 0;
        for key in &trained {
            let key: ChoiceKey = key.parse().map_err(|e| format!("{e}"))?;
            let params = spec
                .submodel_param_count(&key)
                .map_err(|e| format!("{e}"))? as u64;
            if key.branches().contains(&Branch::Identity) {
                ensure!(
                    params < master_params,
                    "key {key} uploads {params} of {master_params} parameters"
                );
            }
            expected_up += l as u64 * params * 8;
        }
        ensure!(
            t.bytes_uploaded == expected_up,
            "generation {}: {} bytes uploaded, expected {expected_up}",
            r.generation,
            t.bytes_uploaded
        );

        let (training_downloads, per_download) = if r.generation == 1 {
            (t.submodel_downloads, "sub-model")
        } else {
            (t.key_downloads, "key")
        };
        ensure!(
            training_downloads == (phases * n * l) as u64,
            "generation {}: {training_downloads} {per_download} downloads",
            r.generation
        );
        if r.generation > 1 {
            ensure!(
                t.submodel_downloads == 0,
                "generation {}: parameters downloaded for training",
                r.generation
            );
            let expected_down = m as u64 * master_params * 8 + (n * l * spec.block_count()) as u64;
            ensure!(
                t.bytes_downloaded == expected_down,
                "generation {}: {} bytes downloaded",
                r.generation,
                t.bytes_downloaded
            );
        }
    }
    Ok(())
}

fn communication_accounting(desk: &RunOutcome) -> Check {
    let cfg = ExperimentConfig::desk();
    traffic_matches(
        desk,
        &cfg.supernet,
        cfg.evolution.population,
        cfg.federated.participants(),
    )?;

    // leftovers and population size do not change evaluation downloads
    for (clients, population) in [(10, 4), (10, 2), (9, 3)] {
        let mut c = ExperimentConfig::desk();
        c.evolution.generations = 2;
        c.evolution.population = population;
        c.federated.clients = clients;
        if let DataSource::Synthetic(s) = &mut c.data.source {
            s.train_samples = 20 * clients;
            s.test_samples = 10 * clients;
        }
        let out = Experiment::prepare(c.clone())
            .and_then(|e| e.run(None))
            .map_err(|e| format!("{e}"))?;
        traffic_matches(&out, &c.supernet, population, clients)?;
    }

    let mut rng = stream(5, Stream::KeySampling, &[]);
    let full = SupernetSpec::cifar10();
    for _ in 0..500 {
        let mut key = random_key(12, &mut rng);
        let block = rng.random_range(0..12);
        key = key.with_branch(block, Branch::Identity);
        let sub = full.submodel_param_count(&key).unwrap();
        ensure!(
            sub < full.master_param_count(),
            "key {key} uploads the whole master"
        );
    }
    Ok("N·L uploads per training phase, m master downloads per generation, sub-model-only upload bytes".into())
}

// ---------------------------------------------------------------- double sampling

fn double_sampling() -> Check {
    for (m, n) in [(10usize, 10usize), (20, 10), (50, 10), (25, 10)] {
        let participants: Vec<usize> = (0..m).collect();
        for generation in 1..=50u64 {
            let plan = sample_clients(
                &participants,
                n,
                &mut stream(9, Stream::ClientSampling, &[generation, 1]),
            )
            .map_err(|e| format!("{e}"))?;
            ensure!(
                plan.groups.len() == n,
                "({m},{n}): {} groups",
                plan.groups.len()
            );
            ensure!(
                plan.groups.iter().all(|g| g.len() == m / n),
                "({m},{n}): group size != {}",
                m / n
            );
            let mut seen = BTreeSet::new();
            for c in plan.groups.iter().flatten() {
                ensure!(seen.insert(*c), "({m},{n}): client {c} sampled twice");
            }
            ensure!(
                plan.leftover.len() == m - n * (m / n),
                "({m},{n}): {} leftovers",
                plan.leftover.len()
            );
            ensure!(
                plan.leftover.iter().all(|c| !seen.contains(c)),
                "({m},{n}): leftover also assigned"
            );
        }
    }
    Ok("(10,10) (20,10) (50,10) (25,10): disjoint groups of ⌊m/N⌋ over 50 draws each".into())
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |name: &str, started: Instant, result: Check| {
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    };

    let t = Instant::now();
    report("MAC oracle", t, mac_oracle());
    let t = Instant::now();
    report("codec oracle", t, codec_oracle());
    let t = Instant::now();
    report("aggregation oracle", t, aggregation_oracle());
    let t = Instant::now();
    report("NSGA-II oracle", t, nsga2_oracle());
    let t = Instant::now();
    report("gradient checks", t, gradient_checks());
    let t = Instant::now();
    report("single-client equivalence", t, single_client_equivalence());

    let t = Instant::now();
    match desk_run() {
        Ok((desk, metrics, seconds)) => {
            report(
                "desk-scale end-to-end",
                t,
                desk_end_to_end(&desk, &metrics, seconds),
            );
            let t = Instant::now();
            report(
                "communication accounting",
                t,
                communication_accounting(&desk),
            );
        }
        Err(e) => {
            report("desk-scale end-to-end", t, Err(e.clone()));
            report("communication accounting", t, Err(e));
        }
    }
    let t = Instant::now();
    report("double-sampling invariants", t, double_sampling());

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
