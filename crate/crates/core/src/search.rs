//! Choosing the partition with the highest estimated throughput.
//!
//! [`select_best`] walks canonical set partitions depth-first in stage order
//! and prunes any prefix whose optimistic score is already strictly below the
//! incumbent. Loads, cut costs and the number of occupied devices can only grow
//! as stages are added, so the prefix score bounds every completion.
//!
//! Among partitions with equal throughput the winner has the smaller
//! communication cost, then the lexicographically smallest canonical
//! assignment. The result does not depend on the degree of parallelism.

use std::cmp::Ordering;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::hierarchy::{Hierarchy, UsageRates};
use crate::model::{pipeline_throughput, Frames};
#[cfg(feature = "parallel")]
use crate::partition::SetPartitions;
use crate::partition::{
    evaluate_partition, partition_count, Partition, PartitionError, PartitionEval,
};

pub const DEFAULT_BUDGET: u64 = 10_000_000;

// Relative slack on the partial communication sum; its accumulation order
// differs from the final sum.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptions {
    /// Largest partition count searched exhaustively.
    pub budget: u64,
    /// Fall back to [`heuristic_partition`] when the budget is exceeded.
    pub allow_heuristic: bool,
    /// Worker threads for the exhaustive search; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            budget: DEFAULT_BUDGET,
            allow_heuristic: true,
            threads: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Exhaustive,
    Heuristic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub partition: Partition,
    pub eval: PartitionEval,
    pub method: SearchMethod,
}

/// Precomputed per-stage costs shared by the search routines.
struct Costs {
    /// `L·R` per stage.
    work: Vec<f64>,
    /// `transfer·R` per stage, charged when the parent edge is cut.
    cut: Vec<f64>,
    parent: Vec<Option<usize>>,
    /// Already-placed neighbours of each stage (ids below it) and the edge cost.
    back_edges: Vec<Vec<(usize, f64)>>,
    frames: Frames,
}

impl Costs {
    fn new(hierarchy: &Hierarchy, rates: &UsageRates, frames: Frames) -> Self {
        let n = hierarchy.len();
        let work = hierarchy
            .stages()
            .iter()
            .map(|s| s.latency_s * rates.get(s.id))
            .collect();
        let cut: Vec<f64> = hierarchy
            .stages()
            .iter()
            .map(|s| s.transfer_s * rates.get(s.id))
            .collect();
        let parent: Vec<Option<usize>> = hierarchy
            .stages()
            .iter()
            .map(|s| hierarchy.parent(s.id).map(|p| p.index()))
            .collect();
        let mut back_edges = vec![Vec::new(); n];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                back_edges[c.max(p)].push((c.min(p), cut[c]));
            }
        }
        Costs {
            work,
            cut,
            parent,
            back_edges,
            frames,
        }
    }

    /// `(T, b)` of a complete assignment, summed in the same order as
    /// [`evaluate_partition`] so the values match it bit for bit.
    fn score(&self, assignment: &[usize], loads: &[f64], used: usize) -> (f64, f64) {
        let mut comm = 0.0;
        for c in 1..assignment.len() {
            let p = self.parent[c].expect("non-root stage has a parent");
            if assignment[p] != assignment[c] {
                comm += self.cut[c];
            }
        }
        let max = loads.iter().copied().fold(0.0, f64::max);
        (pipeline_throughput(max, comm, used, self.frames), comm)
    }

    fn score_from_scratch(&self, assignment: &[usize], devices: usize) -> (f64, f64) {
        let mut loads = vec![0.0; devices];
        let mut seen = vec![false; devices];
        for (i, &d) in assignment.iter().enumerate() {
            loads[d] += self.work[i];
            seen[d] = true;
        }
        let used = seen.iter().filter(|&&b| b).count();
        self.score(assignment, &loads, used)
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    throughput: f64,
    comm: f64,
    assignment: Vec<usize>,
}

impl Candidate {
    /// `Less` means `self` is preferred.
    fn rank(&self, other: &Candidate) -> Ordering {
        other
            .throughput
            .total_cmp(&self.throughput)
            .then(self.comm.total_cmp(&other.comm))
            .then_with(|| self.assignment.cmp(&other.assignment))
    }

    fn better_of(a: Option<Candidate>, b: Option<Candidate>) -> Option<Candidate> {
        match (a, b) {
            (Some(a), Some(b)) => Some(if b.rank(&a) == Ordering::Less { b } else { a }),
            (a, b) => a.or(b),
        }
    }
}

/// Incumbent throughput visible to every search branch. Pruning only drops
/// branches strictly worse than some complete partition, so sharing it across
/// threads never changes the winner.
struct Incumbent {
    #[cfg(feature = "parallel")]
    bits: AtomicU64,
    #[cfg(not(feature = "parallel"))]
    value: std::cell::Cell<f64>,
}

impl Incumbent {
    fn new() -> Self {
        Incumbent {
            #[cfg(feature = "parallel")]
            bits: AtomicU64::new(0f64.to_bits()),
            #[cfg(not(feature = "parallel"))]
            value: std::cell::Cell::new(0.0),
        }
    }

    fn get(&self) -> f64 {
        #[cfg(feature = "parallel")]
        {
            f64::from_bits(self.bits.load(AtomicOrdering::Relaxed))
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.value.get()
        }
    }

    fn offer(&self, t: f64) {
        // Nonnegative doubles order like their bit patterns.
        #[cfg(feature = "parallel")]
        self.bits.fetch_max(t.to_bits(), AtomicOrdering::Relaxed);
        #[cfg(not(feature = "parallel"))]
        self.value.set(self.value.get().max(t));
    }
}

struct Dfs<'a> {
    costs: &'a Costs,
    max_devices: usize,
    incumbent: &'a Incumbent,
    assignment: Vec<usize>,
    loads: Vec<f64>,
    best: Option<Candidate>,
}

impl Dfs<'_> {
    fn run(&mut self, next: usize, used: usize, partial_comm: f64) {
        let n = self.costs.work.len();
        if next == n {
            let (throughput, comm) = self.costs.score(&self.assignment, &self.loads, used);
            let cand = Candidate {
                throughput,
                comm,
                assignment: self.assignment.clone(),
            };
            self.incumbent.offer(throughput);
            self.best = Candidate::better_of(self.best.take(), Some(cand));
            return;
        }
        let top = used.min(self.max_devices - 1);
        for device in 0..=top {
            let opened = if device == used { used + 1 } else { used };
            let mut comm = partial_comm;
            for &(other, cost) in &self.costs.back_edges[next] {
                if self.assignment[other] != device {
                    comm += cost;
                }
            }
            let before = self.loads[device];
            self.loads[device] = before + self.costs.work[next];
            let max = self.loads.iter().copied().fold(0.0, f64::max);
            let bound =
                pipeline_throughput(max, comm * (1.0 - BOUND_SLACK), opened, self.costs.frames);
            if bound >= self.incumbent.get() {
                self.assignment[next] = device;
                self.run(next + 1, opened, comm);
            }
            self.loads[device] = before;
        }
    }
}

fn search_from(
    costs: &Costs,
    max_devices: usize,
    incumbent: &Incumbent,
    prefix: &[usize],
) -> Option<Candidate> {
    let n = costs.work.len();
    let mut dfs = Dfs {
        costs,
        max_devices,
        incumbent,
        assignment: vec![0; n],
        loads: vec![0.0; max_devices],
        best: None,
    };
    let mut used = 0;
    let mut comm = 0.0;
    for (i, &d) in prefix.iter().enumerate() {
        dfs.assignment[i] = d;
        dfs.loads[d] += costs.work[i];
        used = used.max(d + 1);
        for &(other, cost) in &costs.back_edges[i] {
            if prefix[other] != d {
                comm += cost;
            }
        }
    }
    dfs.run(prefix.len(), used, comm);
    dfs.best
}

fn exhaustive(costs: &Costs, max_devices: usize, threads: Option<usize>) -> Candidate {
    let incumbent = Incumbent::new();

    #[cfg(feature = "parallel")]
    if threads != Some(1) && costs.work.len() > 6 {
        use rayon::prelude::*;
        let split = 4.min(costs.work.len());
        let prefixes: Vec<Vec<usize>> = SetPartitions::new(split, max_devices).collect();
        let run = || {
            prefixes
                .par_iter()
                .map(|p| search_from(costs, max_devices, &incumbent, p))
                .reduce(|| None, Candidate::better_of)
        };
        let best = match threads {
            Some(k) => rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .expect("thread pool")
                .install(run),
            None => run(),
        };
        return best.expect("at least one partition");
    }
    let _ = threads;
    search_from(costs, max_devices, &incumbent, &[]).expect("at least one partition")
}

/// Partition maximizing estimated throughput over at most `devices` devices.
///
/// Searches exhaustively when the number of canonical partitions fits in the
/// budget; otherwise falls back to [`heuristic_partition`] (with a warning) or
/// fails with [`PartitionError::SearchIncomplete`].
pub fn select_best(
    hierarchy: &Hierarchy,
    rates: &UsageRates,
    devices: usize,
    frames: Frames,
    options: &SearchOptions,
) -> Result<Selection, PartitionError> {
    if devices == 0 {
        return Err(PartitionError::NoDevices);
    }
    if frames == Frames::Finite(0) {
        return Err(PartitionError::ZeroFrames);
    }
    let count = partition_count(hierarchy.len(), devices);
    if count > options.budget as u128 {
        if !options.allow_heuristic {
            return Err(PartitionError::SearchIncomplete {
                partitions: count,
                budget: options.budget,
            });
        }
        log::warn!(
            "{count} partitions exceed the budget of {}; using the local-search heuristic",
            options.budget
        );
        return heuristic_partition(hierarchy, rates, devices, frames);
    }
    let costs = Costs::new(hierarchy, rates, frames);
    let best = exhaustive(&costs, devices, options.threads);
    let partition = Partition::new(best.assignment, devices)?;
    let eval = evaluate_partition(hierarchy, rates, &partition, frames)?;
    Ok(Selection {
        partition,
        eval,
        method: SearchMethod::Exhaustive,
    })
}

/// Local search from two seeds: a longest-processing-time-first spread of
/// `L·R` over the devices, and everything on one device. Each seed is improved
/// by best-improvement moves (single stage, whole subtree, pairwise swap) until
/// no move raises throughput or lowers communication at equal throughput; the
/// better local optimum wins. Deterministic for a fixed input.
pub fn heuristic_partition(
    hierarchy: &Hierarchy,
    rates: &UsageRates,
    devices: usize,
    frames: Frames,
) -> Result<Selection, PartitionError> {
    if devices == 0 {
        return Err(PartitionError::NoDevices);
    }
    if frames == Frames::Finite(0) {
        return Err(PartitionError::ZeroFrames);
    }
    let costs = Costs::new(hierarchy, rates, frames);
    let n = hierarchy.len();
    let subtrees: Vec<Vec<usize>> = hierarchy
        .stages()
        .iter()
        .map(|s| {
            let mut out = vec![s.id.index()];
            let mut i = 0;
            while i < out.len() {
                out.extend(
                    hierarchy.stages()[out[i]]
                        .children
                        .iter()
                        .map(|c| c.index()),
                );
                i += 1;
            }
            out
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| costs.work[b].total_cmp(&costs.work[a]).then(a.cmp(&b)));
    let mut loads = vec![0.0f64; devices];
    let mut spread = vec![0; n];
    for &s in &order {
        let target = (0..devices)
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .expect("devices >= 1");
        spread[s] = target;
        loads[target] += costs.work[s];
    }

    let best = [spread, vec![0; n]]
        .into_iter()
        .map(|seed| {
            let assignment = local_search(&costs, &subtrees, devices, seed);
            let (throughput, comm) = costs.score_from_scratch(&assignment, devices);
            Candidate {
                throughput,
                comm,
                assignment: canonical(&assignment),
            }
        })
        .reduce(|a, b| if b.rank(&a) == Ordering::Less { b } else { a })
        .expect("two seeds");

    let partition = Partition::new(best.assignment, devices)?;
    let eval = evaluate_partition(hierarchy, rates, &partition, frames)?;
    Ok(Selection {
        partition,
        eval,
        method: SearchMethod::Heuristic,
    })
}

fn canonical(assignment: &[usize]) -> Vec<usize> {
    Partition::new(
        assignment.to_vec(),
        assignment.iter().max().map_or(1, |m| m + 1),
    )
    .expect("labels in range")
    .canonical()
    .assignment()
    .to_vec()
}

fn local_search(
    costs: &Costs,
    subtrees: &[Vec<usize>],
    devices: usize,
    mut assignment: Vec<usize>,
) -> Vec<usize> {
    let n = assignment.len();
    let improves =
        |new: (f64, f64), cur: (f64, f64)| new.0 > cur.0 || (new.0 == cur.0 && new.1 < cur.1);
    let mut current = costs.score_from_scratch(&assignment, devices);
    loop {
        let mut best_move: Option<(Vec<usize>, (f64, f64))> = None;
        let mut consider = |trial: Vec<usize>| {
            let s = costs.score_from_scratch(&trial, devices);
            let reference = best_move.as_ref().map_or(current, |m| m.1);
            if improves(s, reference) {
                best_move = Some((trial, s));
            }
        };
        for i in 0..n {
            for d in 0..devices {
                if d != assignment[i] {
                    let mut trial = assignment.clone();
                    trial[i] = d;
                    consider(trial);
                }
                if subtrees[i].len() > 1 && subtrees[i].iter().any(|&s| assignment[s] != d) {
                    let mut trial = assignment.clone();
                    subtrees[i].iter().for_each(|&s| trial[s] = d);
                    consider(trial);
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if assignment[i] != assignment[j] {
                    let mut trial = assignment.clone();
                    trial.swap(i, j);
                    consider(trial);
                }
            }
        }
        match best_move {
            Some((next, score)) => {
                assignment = next;
                current = score;
            }
            None => return assignment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::compute_rates;

    fn chain() -> Hierarchy {
        Hierarchy::from_json(
            r#"{"stages":[{"id":0,"latency_s":0.02,"children":[1,2]},
                {"id":1,"latency_s":0.03,"transfer_s":0.0},{"id":2,"latency_s":0.01,"transfer_s":0.0}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn free_splitting_reaches_the_largest_single_stage_load() {
        let h = Hierarchy::from_json(
            r#"{"stages":[{"id":0,"latency_s":0.01,"children":[1,2]},
                {"id":1,"latency_s":0.03},{"id":2,"latency_s":0.032}]}"#,
        )
        .unwrap();
        let r = compute_rates(&h);
        let s = select_best(&h, &r, 3, Frames::Steady, &SearchOptions::default()).unwrap();
        assert_eq!(s.partition.assignment(), &[0, 1, 2]);
        assert_eq!(s.eval.max_load, 0.016);
        assert_eq!(s.method, SearchMethod::Exhaustive);

        // Ties at the bottleneck resolve to fewer groups.
        let h = chain();
        let r = compute_rates(&h);
        let s = select_best(&h, &r, 3, Frames::Steady, &SearchOptions::default()).unwrap();
        assert_eq!(s.partition.assignment(), &[0, 1, 1]);
        assert_eq!(s.eval.max_load, 0.02);
    }

    #[test]
    fn one_device_is_unique() {
        let h = chain();
        let r = compute_rates(&h);
        let s = select_best(&h, &r, 1, Frames::Finite(10), &SearchOptions::default()).unwrap();
        let g = heuristic_partition(&h, &r, 1, Frames::Finite(10)).unwrap();
        assert_eq!(s.partition, g.partition);
        assert_eq!(s.eval, g.eval);
    }

    #[test]
    fn budget_without_heuristic_is_an_error() {
        let h = chain();
        let r = compute_rates(&h);
        let opts = SearchOptions {
            budget: 2,
            allow_heuristic: false,
            threads: None,
        };
        assert_eq!(
            select_best(&h, &r, 3, Frames::Steady, &opts),
            Err(PartitionError::SearchIncomplete {
                partitions: 5,
                budget: 2
            })
        );
        let opts = SearchOptions {
            budget: 2,
            allow_heuristic: true,
            threads: None,
        };
        assert_eq!(
            select_best(&h, &r, 3, Frames::Steady, &opts)
                .unwrap()
                .method,
            SearchMethod::Heuristic
        );
    }

    #[test]
    fn candidate_rank_prefers_throughput_then_comm_then_lex() {
        let c = |t, b, a: &[usize]| Candidate {
            throughput: t,
            comm: b,
            assignment: a.to_vec(),
        };
        assert_eq!(
            c(2.0, 1.0, &[0, 1]).rank(&c(1.0, 0.0, &[0, 0])),
            Ordering::Less
        );
        assert_eq!(
            c(1.0, 0.5, &[0, 1]).rank(&c(1.0, 1.0, &[0, 0])),
            Ordering::Less
        );
        assert_eq!(
            c(1.0, 1.0, &[0, 0]).rank(&c(1.0, 1.0, &[0, 1])),
            Ordering::Less
        );
    }
}
