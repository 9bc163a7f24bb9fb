//! Evolutionary minimization of a critical flip set.
//!
//! Starting from the selected subset, a population of candidate subsets is
//! evolved under removal-only mutation, tournament selection, and
//! best-guided crossover. Fitness rewards loss above the threshold per
//! flipped bit, so evolution shrinks the set while holding the damage.
//! A final iterative pruning pass strips indices whose removal leaves the
//! loss within an epsilon of the optimized set's loss.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flipset::FlipSet;
use crate::model::{Dataset, ToyModel};
use crate::rng::{stream, tag};
use crate::sensitivity::bflip_loss;

/// Genetic-search parameters. Defaults follow the studied configuration:
/// population 100, mutation rate 0.1, crossover probability 0.9.
#[derive(Debug, Clone)]
pub struct GaConfig {
    pub population: usize,
    pub max_generations: usize,
    pub mutation_rate: f64,
    pub crossover_prob: f64,
    /// Stop after this many generations without strict fitness improvement.
    pub no_improve_limit: usize,
    pub loss_threshold: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 100,
            max_generations: 150,
            mutation_rate: 0.1,
            crossover_prob: 0.9,
            no_improve_limit: 20,
            loss_threshold: 1.0,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::PopulationTooSmall {
                len: self.population,
            });
        }
        if self.max_generations == 0 {
            return Err(Error::InvalidConfig {
                context: "max_generations must be >= 1".into(),
            });
        }
        if !(self.mutation_rate > 0.0 && self.mutation_rate <= 1.0) {
            return Err(Error::InvalidConfig {
                context: format!("mutation rate {} outside (0, 1]", self.mutation_rate),
            });
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err(Error::InvalidConfig {
                context: format!("crossover probability {} outside [0, 1]", self.crossover_prob),
            });
        }
        if self.no_improve_limit == 0 {
            return Err(Error::InvalidConfig {
                context: "no-improvement limit must be >= 1".into(),
            });
        }
        if !(self.loss_threshold > 0.0) {
            return Err(Error::InvalidConfig {
                context: format!("loss threshold {} must be > 0", self.loss_threshold),
            });
        }
        Ok(())
    }
}

/// One candidate subset: an ordered list of unique indices drawn from the
/// selected subset's index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub indices: Vec<usize>,
}

impl Solution {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn cache_key(&self) -> Vec<usize> {
        let mut k = self.indices.clone();
        k.sort_unstable();
        k
    }
}

/// Signed loss-per-flip fitness. Positive exactly when the loss meets the
/// threshold; the boundary `loss == threshold` takes the positive branch.
pub fn fitness(loss: f64, loss_threshold: f64, cardinality: usize) -> Result<f64> {
    if cardinality == 0 {
        return Err(Error::EmptyCardinality);
    }
    let sign = if loss - loss_threshold >= 0.0 { 1.0 } else { -1.0 };
    Ok(sign * loss / cardinality as f64)
}

/// Removal mutation. Draws a per-solution rate `p` uniform in
/// `(0, max_rate]`, removes each index independently with probability `p`,
/// and keeps one uniformly chosen survivor if everything was removed.
pub fn mutate<R: Rng>(sol: &Solution, max_rate: f64, rng: &mut R) -> Solution {
    debug_assert!(!sol.is_empty(), "mutate requires a non-empty solution");
    // gen::<f64>() is [0, 1); 1 - u maps it to (0, 1].
    let p = max_rate * (1.0 - rng.gen::<f64>());
    let kept: Vec<usize> = sol
        .indices
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= p)
        .collect();
    if kept.is_empty() {
        let survivor = sol.indices[rng.gen_range(0..sol.indices.len())];
        Solution {
            indices: vec![survivor],
        }
    } else {
        Solution { indices: kept }
    }
}

/// Tournament selection: draw two distinct candidates uniformly and return
/// the index of the fitter one; ties keep the first drawn.
pub fn tournament_select<R: Rng>(fitnesses: &[f64], rng: &mut R) -> Result<usize> {
    let n = fitnesses.len();
    if n < 2 {
        return Err(Error::PopulationTooSmall { len: n });
    }
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    Ok(if fitnesses[b] > fitnesses[a] { b } else { a })
}

/// Best-guided crossover. With probability `1 - crossover_prob` the parent
/// passes through unchanged. Otherwise genes are picked positionally from
/// parent or best with equal probability, surplus genes of the longer list
/// are each included with probability 1/2, and duplicates are dropped
/// keeping the first occurrence.
pub fn crossover<R: Rng>(
    parent: &Solution,
    best: &Solution,
    crossover_prob: f64,
    rng: &mut R,
) -> Solution {
    debug_assert!(!parent.is_empty() && !best.is_empty());
    if rng.gen::<f64>() >= crossover_prob {
        return parent.clone();
    }
    let (short, long) = if parent.len() <= best.len() {
        (parent, best)
    } else {
        (best, parent)
    };
    let mut out = Vec::with_capacity(long.len());
    for i in 0..short.len() {
        let from_parent = rng.gen::<f64>() < 0.5;
        out.push(if from_parent {
            parent.indices[i]
        } else {
            best.indices[i]
        });
    }
    for &g in &long.indices[short.len()..] {
        if rng.gen::<f64>() < 0.5 {
            out.push(g);
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(out.len());
    out.retain(|&g| seen.insert(g));
    if out.is_empty() {
        return parent.clone();
    }
    Solution { indices: out }
}

/// Per-generation progress: the elite's fitness, loss, and size.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_loss: f64,
    pub best_cardinality: usize,
}

/// Render GA history as CSV.
pub fn history_csv(history: &[GenerationStats]) -> String {
    let mut out = String::from("generation,best_fitness,best_loss,best_cardinality\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.generation, h.best_fitness, h.best_loss, h.best_cardinality
        ));
    }
    out
}

/// Result of an optimization run. `meets_threshold` is false when even the
/// best solution stayed below the loss threshold; the best-found set is
/// still returned.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub flipset: FlipSet,
    pub history: Vec<GenerationStats>,
    pub best_fitness: f64,
    pub best_loss: f64,
    pub meets_threshold: bool,
    pub generations_run: usize,
}

struct Evaluator<'a> {
    model: &'a ToyModel,
    data: &'a Dataset,
    layer: &'a str,
    pos: u8,
    cache: Mutex<HashMap<Vec<usize>, f64>>,
}

impl<'a> Evaluator<'a> {
    fn loss(&self, sol: &Solution) -> Result<f64> {
        let key = sol.cache_key();
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let fs = FlipSet {
            layer: self.layer.to_string(),
            pos: self.pos,
            indices: sol.indices.clone(),
        };
        let loss = bflip_loss(self.model, &fs, self.data)?;
        self.cache.lock().unwrap().insert(key, loss);
        Ok(loss)
    }
}

/// Run the evolutionary minimization over `w_sub`'s index space.
///
/// The population starts as the subset itself plus `population - 1`
/// mutants of it. Each generation evaluates every candidate (in parallel;
/// losses are pure), sorts by fitness, carries the elite unchanged, and
/// refills the population with mutated best-guided offspring of tournament
/// parents. The run stops at the generation limit or after
/// `no_improve_limit` generations without strict improvement.
///
/// All randomness derives from per-generation, per-slot substreams of
/// `cfg.seed`, so results are identical under any thread count.
pub fn optimize(
    model: &ToyModel,
    data: &Dataset,
    w_sub: &FlipSet,
    cfg: &GaConfig,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    if w_sub.is_empty() {
        return Err(Error::EmptyFlipSet {
            context: "optimize needs a non-empty subset".into(),
        });
    }
    model.layer(&w_sub.layer)?;

    let eval = Evaluator {
        model,
        data,
        layer: &w_sub.layer,
        pos: w_sub.pos,
        cache: Mutex::new(HashMap::new()),
    };

    let base = Solution {
        indices: w_sub.indices.clone(),
    };
    let mut population: Vec<Solution> = Vec::with_capacity(cfg.population);
    population.push(base.clone());
    for j in 1..cfg.population {
        let mut rng = stream(cfg.seed, &[tag::GA_INIT, j as u64]);
        population.push(mutate(&base, cfg.mutation_rate, &mut rng));
    }

    let mut history = Vec::new();
    let mut prev_best_fitness = f64::NEG_INFINITY;
    let mut no_improve = 0usize;
    let mut best = base.clone();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut best_loss = f64::NAN;
    let mut generations_run = 0usize;

    for t in 1..=cfg.max_generations {
        generations_run = t;
        let losses: Vec<f64> = population
            .par_iter()
            .map(|sol| eval.loss(sol))
            .collect::<Result<Vec<_>>>()?;
        let fitnesses: Vec<f64> = population
            .iter()
            .zip(&losses)
            .map(|(sol, &loss)| fitness(loss, cfg.loss_threshold, sol.len()))
            .collect::<Result<Vec<_>>>()?;

        // Stable sort keeps earlier individuals first on ties, so the
        // elite choice is deterministic.
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| fitnesses[b].total_cmp(&fitnesses[a]));
        let top = order[0];
        best = population[top].clone();
        best_fitness = fitnesses[top];
        best_loss = losses[top];

        if best_fitness > prev_best_fitness {
            prev_best_fitness = best_fitness;
            no_improve = 0;
        } else {
            no_improve += 1;
        }

        history.push(GenerationStats {
            generation: t,
            best_fitness,
            best_loss,
            best_cardinality: best.len(),
        });

        // Termination is checked after evaluation, before breeding.
        if no_improve >= cfg.no_improve_limit || t == cfg.max_generations {
            break;
        }

        let mut next = Vec::with_capacity(cfg.population);
        next.push(best.clone());
        {
            let mut rng = stream(cfg.seed, &[tag::GA_BREED, t as u64, 0]);
            next.push(mutate(&best, cfg.mutation_rate, &mut rng));
        }
        let mut slot = 1u64;
        while next.len() < cfg.population {
            let mut rng = stream(cfg.seed, &[tag::GA_BREED, t as u64, slot]);
            let p1 = tournament_select(&fitnesses, &mut rng)?;
            let p2 = tournament_select(&fitnesses, &mut rng)?;
            let o1 = crossover(&population[p1], &best, cfg.crossover_prob, &mut rng);
            let o1 = mutate(&o1, cfg.mutation_rate, &mut rng);
            next.push(o1);
            if next.len() < cfg.population {
                let o2 = crossover(&population[p2], &best, cfg.crossover_prob, &mut rng);
                let o2 = mutate(&o2, cfg.mutation_rate, &mut rng);
                next.push(o2);
            }
            slot += 1;
        }
        population = next;
    }

    let flipset = w_sub.with_indices(best.indices.clone());
    Ok(OptimizeOutcome {
        flipset,
        history,
        best_fitness,
        best_loss,
        meets_threshold: best_fitness > 0.0,
        generations_run,
    })
}

/// Iterative pruning parameters. Epsilon is an absolute loss-change bound.
#[derive(Debug, Clone)]
pub struct PruneConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub no_improve_limit: usize,
    pub seed: u64,
}

impl PruneConfig {
    /// Defaults relative to a reference loss: epsilon is 1% of it,
    /// 500 iterations, no-improvement limit 50.
    pub fn with_reference_loss(loss: f64, seed: u64) -> Self {
        Self {
            epsilon: 0.01 * loss.abs().max(f64::MIN_POSITIVE),
            max_iters: 500,
            no_improve_limit: 50,
            seed,
        }
    }
}

/// Iterative pruning: repeatedly try removing one uniformly chosen index;
/// keep the removal when the loss stays within `epsilon` of the set's
/// initial loss. The reference loss is computed once and never updated, so
/// total drift is bounded by epsilon.
pub fn prune(
    model: &ToyModel,
    data: &Dataset,
    best: &FlipSet,
    cfg: &PruneConfig,
) -> Result<FlipSet> {
    if best.is_empty() {
        return Err(Error::EmptyFlipSet {
            context: "prune needs a non-empty flip set".into(),
        });
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidConfig {
            context: format!("epsilon {} must be > 0", cfg.epsilon),
        });
    }
    let mut rng = stream(cfg.seed, &[tag::PRUNE]);
    let reference = bflip_loss(model, best, data)?;
    let mut current = best.clone();
    let mut no_improve = 0usize;

    for _ in 0..cfg.max_iters {
        if current.len() == 1 {
            break;
        }
        let victim = rng.gen_range(0..current.len());
        let mut candidate_indices = current.indices.clone();
        candidate_indices.remove(victim);
        let candidate = current.with_indices(candidate_indices);
        let loss = bflip_loss(model, &candidate, data)?;
        if (reference - loss).abs() < cfg.epsilon {
            current = candidate;
            no_improve = 0;
        } else {
            no_improve += 1;
        }
        if no_improve >= cfg.no_improve_limit {
            break;
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::planted_space_instance;

    fn seeded(n: u64) -> rand_chacha::ChaCha8Rng {
        stream(n, &[99])
    }

    #[test]
    fn fitness_above_threshold() {
        assert_eq!(fitness(8.0, 7.0, 4).unwrap(), 2.0);
    }

    #[test]
    fn fitness_below_threshold() {
        assert_eq!(fitness(6.0, 7.0, 3).unwrap(), -2.0);
    }

    #[test]
    fn fitness_boundary_is_positive() {
        assert_eq!(fitness(7.0, 7.0, 7).unwrap(), 1.0);
    }

    #[test]
    fn fitness_rejects_empty() {
        assert!(matches!(fitness(1.0, 1.0, 0), Err(Error::EmptyCardinality)));
    }

    #[test]
    fn mutate_tiny_rate_keeps_everything() {
        let sol = Solution {
            indices: (0..50).collect(),
        };
        let mut rng = seeded(1);
        let out = mutate(&sol, 1e-12, &mut rng);
        assert_eq!(out, sol);
    }

    #[test]
    fn mutate_never_grows() {
        let sol = Solution {
            indices: (0..30).collect(),
        };
        for s in 0..100 {
            let mut rng = seeded(s);
            let out = mutate(&sol, 0.5, &mut rng);
            assert!(!out.is_empty());
            assert!(out.len() <= sol.len());
            assert!(out.indices.iter().all(|i| sol.indices.contains(i)));
        }
    }

    #[test]
    fn mutate_mean_removal_matches_half_rate() {
        // p ~ Uniform(0, 0.1] gives an expected removal fraction of 0.05.
        let sol = Solution {
            indices: (0..100).collect(),
        };
        let mut rng = seeded(7);
        let trials = 10_000;
        let mut removed = 0usize;
        for _ in 0..trials {
            removed += sol.len() - mutate(&sol, 0.1, &mut rng).len();
        }
        let frac = removed as f64 / (trials * sol.len()) as f64;
        assert!((0.03..=0.07).contains(&frac), "mean removed fraction {frac}");
    }

    #[test]
    fn tournament_prefers_fitter() {
        let fit = [1.0, -1.0];
        for s in 0..50 {
            let mut rng = seeded(s);
            assert_eq!(tournament_select(&fit, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn tournament_tie_takes_first_drawn() {
        // With all-equal fitness the strict comparison never switches, so
        // the winner is always the first index drawn.
        let fit = [0.5; 6];
        for s in 0..50 {
            let mut rng = seeded(s);
            let winner = tournament_select(&fit, &mut rng).unwrap();
            let mut replay = seeded(s);
            let first_drawn = replay.gen_range(0..fit.len());
            assert_eq!(winner, first_drawn);
        }
    }

    #[test]
    fn tournament_winner_at_least_as_fit() {
        let fit = [0.1, 0.9, 0.4, 0.9, -2.0];
        for s in 0..200 {
            let mut rng = seeded(s);
            let w = tournament_select(&fit, &mut rng).unwrap();
            // Replay the draw to find the loser.
            let mut replay = seeded(s);
            let a = replay.gen_range(0..fit.len());
            let mut b = replay.gen_range(0..fit.len() - 1);
            if b >= a {
                b += 1;
            }
            let loser = if w == a { b } else { a };
            assert!(fit[w] >= fit[loser]);
        }
    }

    #[test]
    fn tournament_needs_two() {
        let mut rng = seeded(0);
        assert!(matches!(
            tournament_select(&[1.0], &mut rng),
            Err(Error::PopulationTooSmall { len: 1 })
        ));
    }

    #[test]
    fn crossover_disabled_returns_parent() {
        let parent = Solution {
            indices: vec![5, 6, 7],
        };
        let best = Solution {
            indices: vec![1, 2],
        };
        for s in 0..50 {
            let mut rng = seeded(s);
            assert_eq!(crossover(&parent, &best, 0.0, &mut rng), parent);
        }
    }

    #[test]
    fn crossover_identical_sources_is_identity() {
        let parent = Solution {
            indices: vec![4, 9, 2],
        };
        for s in 0..50 {
            let mut rng = seeded(s);
            assert_eq!(crossover(&parent, &parent, 1.0, &mut rng), parent);
        }
    }

    #[test]
    fn crossover_closure() {
        let parent = Solution {
            indices: vec![1, 2, 3, 4, 5],
        };
        let best = Solution {
            indices: vec![4, 5, 6],
        };
        for s in 0..200 {
            let mut rng = seeded(s);
            let child = crossover(&parent, &best, 0.9, &mut rng);
            assert!(!child.is_empty());
            let mut seen = std::collections::HashSet::new();
            for &g in &child.indices {
                assert!(seen.insert(g), "duplicate gene {g}");
                assert!(
                    parent.indices.contains(&g) || best.indices.contains(&g),
                    "gene {g} from neither parent"
                );
            }
        }
    }

    #[test]
    fn optimize_converges_to_single_dominant_weight() {
        let inst = planted_space_instance(5, 12, 1);
        let cfg = GaConfig {
            loss_threshold: inst.threshold,
            seed: 11,
            ..GaConfig::default()
        };
        let out = optimize(&inst.model, &inst.data, &inst.space, &cfg).unwrap();
        assert!(out.meets_threshold);
        assert_eq!(out.flipset.indices, inst.planted);
    }

    #[test]
    fn optimize_singleton_subset_is_fixed_point() {
        let inst = planted_space_instance(6, 12, 1);
        let w_sub = inst.space.with_indices(inst.planted.clone());
        let cfg = GaConfig {
            loss_threshold: inst.threshold,
            max_generations: 3,
            seed: 1,
            ..GaConfig::default()
        };
        let out = optimize(&inst.model, &inst.data, &w_sub, &cfg).unwrap();
        assert_eq!(out.flipset.indices, inst.planted);
        assert!(out.meets_threshold);
    }

    #[test]
    fn optimize_elitism_monotone_and_deterministic() {
        let inst = planted_space_instance(9, 16, 2);
        let cfg = GaConfig {
            loss_threshold: inst.threshold,
            seed: 33,
            ..GaConfig::default()
        };
        let a = optimize(&inst.model, &inst.data, &inst.space, &cfg).unwrap();
        let b = optimize(&inst.model, &inst.data, &inst.space, &cfg).unwrap();
        assert_eq!(a.flipset, b.flipset);
        assert_eq!(a.history, b.history);
        for w in a.history.windows(2) {
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        // Final history row matches an independent re-evaluation.
        let again = bflip_loss(&inst.model, &a.flipset, &inst.data).unwrap();
        assert!((a.history.last().unwrap().best_loss - again).abs() < 1e-12);
    }

    #[test]
    fn optimize_candidates_stay_inside_subset() {
        let inst = planted_space_instance(3, 14, 2);
        let cfg = GaConfig {
            loss_threshold: inst.threshold,
            seed: 2,
            max_generations: 30,
            ..GaConfig::default()
        };
        let out = optimize(&inst.model, &inst.data, &inst.space, &cfg).unwrap();
        assert!(out
            .flipset
            .indices
            .iter()
            .all(|i| inst.space.indices.contains(i)));
    }

    #[test]
    fn optimize_below_threshold_flagged() {
        let inst = planted_space_instance(4, 10, 1);
        let cfg = GaConfig {
            loss_threshold: 1e8,
            seed: 5,
            max_generations: 5,
            ..GaConfig::default()
        };
        let out = optimize(&inst.model, &inst.data, &inst.space, &cfg).unwrap();
        assert!(!out.meets_threshold);
        assert!(out.best_fitness < 0.0);
        assert!(!out.flipset.is_empty());
    }

    #[test]
    fn prune_tiny_epsilon_keeps_input() {
        // Every index in this set moves the loss when removed, so with a
        // vanishing epsilon no removal is ever accepted. (Removals that
        // change the loss by exactly zero would still be accepted.)
        let inst = planted_space_instance(8, 10, 3);
        let planted_only = inst.space.with_indices(inst.planted.clone());
        let cfg = PruneConfig {
            epsilon: 1e-300,
            max_iters: 100,
            no_improve_limit: 20,
            seed: 0,
        };
        let out = prune(&inst.model, &inst.data, &planted_only, &cfg).unwrap();
        assert_eq!(out, planted_only);
    }

    #[test]
    fn prune_removes_redundant_indices() {
        // The space holds planted criticals plus no-op decoys; pruning with
        // a generous budget must strip every decoy.
        let inst = planted_space_instance(12, 10, 2);
        let reference = bflip_loss(&inst.model, &inst.space, &inst.data).unwrap();
        let cfg = PruneConfig {
            epsilon: 0.01 * reference,
            max_iters: 2000,
            no_improve_limit: 200,
            seed: 21,
        };
        let out = prune(&inst.model, &inst.data, &inst.space, &cfg).unwrap();
        let mut got = out.indices.clone();
        got.sort_unstable();
        assert_eq!(got, inst.planted);
        let pruned_loss = bflip_loss(&inst.model, &out, &inst.data).unwrap();
        assert!((reference - pruned_loss).abs() < cfg.epsilon);
    }
}
