//! NSGA-II over two minimized objectives: test error and MACs.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Genome;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub test_error: f64,
    pub macs: u64,
}

impl Objectives {
    pub fn new(test_error: f64, macs: u64) -> Self {
        Objectives { test_error, macs }
    }

    fn get(&self, m: usize) -> f64 {
        if m == 0 {
            self.test_error
        } else {
            self.macs as f64
        }
    }

    /// Lexicographic order on (error, MACs).
    fn lex_cmp(&self, other: &Self) -> Ordering {
        self.test_error
            .total_cmp(&other.test_error)
            .then(self.macs.cmp(&other.macs))
    }
}

/// Pareto dominance for minimization.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a.test_error <= b.test_error
        && a.macs <= b.macs
        && (a.test_error < b.test_error || a.macs < b.macs)
}

/// Fronts as index lists, best first; indices within a front ascend.
pub fn fast_nondominated_sort(objs: &[Objectives]) -> Vec<Vec<usize>> {
    let n = objs.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for p in 0..n {
        for q in 0..n {
            if dominates(&objs[p], &objs[q]) {
                dominated_by_me[p].push(q);
            } else if dominates(&objs[q], &objs[p]) {
                domination_count[p] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&p| domination_count[p] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated_by_me[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of every member of `front`, in the order given.
///
/// For each objective the front is sorted (ties by the other objective, then
/// by position in `front`); both ends get infinity and interior points add
/// the gap between their neighbours divided by the objective's range.
pub fn crowding_distance(objs: &[Objectives], front: &[usize]) -> Vec<f64> {
    let len = front.len();
    let mut dist = vec![0.0; len];
    if len <= 2 {
        return vec![f64::INFINITY; len];
    }
    for m in 0..2 {
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| {
            let (oa, ob) = (&objs[front[a]], &objs[front[b]]);
            oa.get(m)
                .total_cmp(&ob.get(m))
                .then(oa.get(1 - m).total_cmp(&ob.get(1 - m)))
        });
        dist[order[0]] = f64::INFINITY;
        dist[order[len - 1]] = f64::INFINITY;
        let lo = objs[front[order[0]]].get(m);
        let hi = objs[front[order[len - 1]]].get(m);
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..len - 1 {
            let gap = objs[front[order[w + 1]]].get(m) - objs[front[order[w - 1]]].get(m);
            dist[order[w]] += gap / range;
        }
    }
    dist
}

/// Rank and crowding distance of every individual.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub fronts: Vec<Vec<usize>>,
    pub rank: Vec<usize>,
    pub crowding: Vec<f64>,
}

/// Sorts the population into fronts and assigns crowding distances. Within
/// a front, members are visited in (objectives, genome) order so that the
/// result does not depend on the input order.
pub fn rank_population(objs: &[Objectives], genomes: &[Genome]) -> Ranking {
    let fronts = fast_nondominated_sort(objs);
    let mut rank = vec![0; objs.len()];
    let mut crowding = vec![0.0; objs.len()];
    for (r, front) in fronts.iter().enumerate() {
        let mut ordered = front.clone();
        ordered.sort_by(|&a, &b| {
            objs[a]
                .lex_cmp(&objs[b])
                .then_with(|| genomes[a].bits().cmp(genomes[b].bits()))
        });
        for (&i, d) in ordered.iter().zip(crowding_distance(objs, &ordered)) {
            rank[i] = r;
            crowding[i] = d;
        }
    }
    Ranking {
        fronts,
        rank,
        crowding,
    }
}

/// Survivor order: lower rank, then larger crowding distance, then fewer
/// MACs, then the lexicographically smaller genome.
pub fn survivor_cmp(
    a: usize,
    b: usize,
    ranking: &Ranking,
    objs: &[Objectives],
    genomes: &[Genome],
) -> Ordering {
    ranking.rank[a]
        .cmp(&ranking.rank[b])
        .then(ranking.crowding[b].total_cmp(&ranking.crowding[a]))
        .then(objs[a].macs.cmp(&objs[b].macs))
        .then_with(|| genomes[a].bits().cmp(genomes[b].bits()))
        .then(a.cmp(&b))
}

/// Indices of the `n` survivors, best first.
///
/// Repeated genomes are admitted only after every distinct genome, so a
/// single dominant architecture cannot fill the whole population.
pub fn environmental_select(objs: &[Objectives], genomes: &[Genome], n: usize) -> Vec<usize> {
    let ranking = rank_population(objs, genomes);
    let mut order: Vec<usize> = (0..objs.len()).collect();
    order.sort_by(|&a, &b| survivor_cmp(a, b, &ranking, objs, genomes));
    let mut seen = std::collections::BTreeSet::new();
    let (mut order, repeats): (Vec<usize>, Vec<usize>) = order
        .into_iter()
        .partition(|&i| seen.insert(genomes[i].bits()));
    order.extend(repeats);
    order.truncate(n);
    order
}

/// Population-level search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    /// Probability that a genome is mutated at all; a mutated genome flips
    /// each bit with probability `1 / genome length`.
    pub mutation_prob: f64,
    /// Restricts the search to these branch indices when set.
    #[serde(default)]
    pub allowed_branches: Option<Vec<u8>>,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population: 10,
            generations: 500,
            crossover_prob: 0.9,
            mutation_prob: 0.1,
            allowed_branches: None,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::Config("population must be positive".into()));
        }
        for (name, p) in [
            ("crossover", self.crossover_prob),
            ("mutation", self.mutation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} probability {p} outside [0, 1]"
                )));
            }
        }
        if let Some(allowed) = &self.allowed_branches {
            if allowed.is_empty() || allowed.iter().any(|&b| b > 3) {
                return Err(Error::Config(format!(
                    "allowed branches {allowed:?} must be a non-empty subset of 0..=3"
                )));
            }
        }
        Ok(())
    }
}

/// One-point crossover: children swap tails from position `cut` on.
pub fn crossover(a: &Genome, b: &Genome, cut: usize) -> (Genome, Genome) {
    let (a, b) = (a.bits(), b.bits());
    let first = [&a[..cut], &b[cut..]].concat();
    let second = [&b[..cut], &a[cut..]].concat();
    (
        Genome::from_bits(first).expect("binary"),
        Genome::from_bits(second).expect("binary"),
    )
}

/// Flips each bit independently with probability `1 / len`.
pub fn flip_bits<R: Rng + ?Sized>(genome: &mut Genome, rng: &mut R) {
    let len = genome.len();
    for bit in genome.bits_mut() {
        if rng.random::<f64>() * (len as f64) < 1.0 {
            *bit ^= 1;
        }
    }
}

/// Offspring of `parents`: shuffled pairing, one-point crossover with
/// probability `pc` at a cut uniform in `[1, len-1]`, then mutation with
/// probability `pm` per child. With an odd count the unpaired parent is only
/// mutated.
pub fn variation<R: Rng + ?Sized>(
    parents: &[Genome],
    pc: f64,
    pm: f64,
    rng: &mut R,
) -> Vec<Genome> {
    let mut order: Vec<usize> = (0..parents.len()).collect();
    order.shuffle(rng);
    let mut children = Vec::with_capacity(parents.len());
    for pair in order.chunks(2) {
        match *pair {
            [a, b] => {
                let (pa, pb) = (&parents[a], &parents[b]);
                let len = pa.len();
                if len >= 2 && pa.len() == pb.len() && rng.random::<f64>() < pc {
                    let cut = rng.random_range(1..len);
                    let (x, y) = crossover(pa, pb, cut);
                    children.push(x);
                    children.push(y);
                } else {
                    children.push(pa.clone());
                    children.push(pb.clone());
                }
            }
            [a] => children.push(parents[a].clone()),
            _ => unreachable!(),
        }
    }
    for child in &mut children {
        if rng.random::<f64>() < pm {
            flip_bits(child, rng);
        }
    }
    children
}

/// Index of the knee of a non-dominated set.
///
/// Objectives are min-max normalized and the point farthest from the chord
/// joining the lowest-error and lowest-MAC extremes is returned. With two or
/// fewer points, or when every point lies on the chord, the lowest-error point
/// wins. Equal distances go to fewer MACs.
pub fn select_knee(front: &[Objectives]) -> Option<usize> {
    let by_error = |&a: &usize, &b: &usize| front[a].lex_cmp(&front[b]);
    let lowest_error = (0..front.len()).min_by(by_error)?;
    if front.len() <= 2 {
        return Some(lowest_error);
    }
    let lowest_macs = (0..front.len())
        .min_by(|&a, &b| {
            front[a]
                .macs
                .cmp(&front[b].macs)
                .then(front[a].test_error.total_cmp(&front[b].test_error))
        })
        .expect("non-empty");

    let range = |m: usize| {
        let lo = front.iter().map(|o| o.get(m)).fold(f64::INFINITY, f64::min);
        let hi = front
            .iter()
            .map(|o| o.get(m))
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let norm = |o: &Objectives| {
        let p = [0, 1].map(|m| {
            let (lo, r) = range(m);
            if r > 0.0 {
                (o.get(m) - lo) / r
            } else {
                0.0
            }
        });
        (p[0], p[1])
    };
    let (ax, ay) = norm(&front[lowest_error]);
    let (bx, by) = norm(&front[lowest_macs]);
    let (dx, dy) = (bx - ax, by - ay);
    let chord = (dx * dx + dy * dy).sqrt();
    if chord == 0.0 {
        return Some(lowest_error);
    }
    let distance = |i: usize| {
        let (px, py) = norm(&front[i]);
        (dx * (ay - py) - dy * (ax - px)).abs() / chord
    };

    let mut best = lowest_error;
    let mut best_d = distance(lowest_error);
    for i in 0..front.len() {
        let d = distance(i);
        let better = d > best_d || (d == best_d && front[i].macs < front[best].macs);
        if better {
            best = i;
            best_d = d;
        }
    }
    const ON_CHORD: f64 = 1e-12;
    if best_d <= ON_CHORD {
        return Some(lowest_error);
    }
    Some(best)
}
