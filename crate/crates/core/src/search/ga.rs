//! Genetic search inside one (task grouping, GPU grouping) arm.
//!
//! The population starts from random medium and fine assignments over the
//! arm's layouts. Each generation mutates a tournament-selected parent,
//! scores the offspring, tries a few Level-3/Level-5 swaps on it (first
//! improvement wins) and lets it replace the worst member if it is better.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::assign::{ArmSpace, Genome, SearchContext};
use crate::plan::Plan;

/// Knobs of the per-arm genetic search.
#[derive(Debug, Clone)]
pub struct GaKnobs {
    pub population: usize,
    pub swap_trials: usize,
    /// Attempts at drawing an admissible candidate before settling for an
    /// inadmissible one (scored as infinite).
    pub retries: usize,
    pub locality_bias: f64,
}

impl Default for GaKnobs {
    fn default() -> Self {
        GaKnobs {
            population: 16,
            swap_trials: 8,
            retries: 16,
            locality_bias: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
struct Member {
    genome: Genome,
    cost: f64,
}

/// Outcome of drawing a candidate.
enum Draw {
    Fresh(Genome),
    /// Unseen but violating the TP cap or memory; scored as infinite.
    Inadmissible(Genome),
    /// Every attempt produced an already-scored candidate.
    Exhausted,
}

/// Persistent state of one arm across SHA rounds.
#[derive(Debug, Clone)]
pub struct Arm {
    pub space: ArmSpace,
    rng: ChaCha8Rng,
    population: Vec<Member>,
    seen: HashSet<u64>,
    best: Option<Member>,
    pub evaluations: u64,
    /// Costs of every evaluation since the last [`Arm::take_history`].
    history: Vec<f64>,
}

impl Arm {
    pub fn new(space: ArmSpace, seed: u64) -> Self {
        Arm {
            space,
            rng: ChaCha8Rng::seed_from_u64(seed),
            population: Vec::new(),
            seen: HashSet::new(),
            best: None,
            evaluations: 0,
            history: Vec::new(),
        }
    }

    pub fn best_cost(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |m| m.cost)
    }

    pub fn best_plan(&self, ctx: &SearchContext) -> Option<Plan> {
        self.best.as_ref().map(|m| self.space.to_plan(ctx, &m.genome))
    }

    pub fn take_history(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.history)
    }

    fn admissible(&self, ctx: &SearchContext, g: &Genome) -> bool {
        self.space.tp_admissible(ctx, g) && ctx.fits_memory(&self.space.to_plan(ctx, g))
    }

    fn draw(
        &mut self,
        ctx: &SearchContext,
        knobs: &GaKnobs,
        mut make: impl FnMut(&mut Self) -> Option<Genome>,
    ) -> Draw {
        let mut fallback = None;
        let mut bad = 0;
        // duplicates are cheap to detect, so allow more of them
        for _ in 0..knobs.retries * 4 {
            let Some(g) = make(self) else { break };
            if self.seen.contains(&self.space.canonical_key(ctx, &g)) {
                continue;
            }
            if self.admissible(ctx, &g) {
                return Draw::Fresh(g);
            }
            fallback = Some(g);
            bad += 1;
            if bad >= knobs.retries {
                break;
            }
        }
        fallback.map_or(Draw::Exhausted, Draw::Inadmissible)
    }

    /// Scores a candidate: one cost-model evaluation.
    fn score(&mut self, ctx: &SearchContext, g: &Genome, admissible: bool) -> f64 {
        self.seen.insert(self.space.canonical_key(ctx, g));
        let plan = self.space.to_plan(ctx, g);
        let evaluated = ctx.model.evaluate(&plan).map(|b| b.end_to_end);
        self.evaluations += 1;
        let cost = match evaluated {
            Ok(c) if admissible => c,
            _ => f64::INFINITY,
        };
        self.history.push(cost);
        if cost < self.best_cost() {
            self.best = Some(Member {
                genome: g.clone(),
                cost,
            });
        }
        cost
    }

    fn draw_and_score(
        &mut self,
        ctx: &SearchContext,
        knobs: &GaKnobs,
        make: impl FnMut(&mut Self) -> Option<Genome>,
    ) -> Option<Member> {
        let (genome, ok) = match self.draw(ctx, knobs, make) {
            Draw::Fresh(g) => (g, true),
            Draw::Inadmissible(g) => (g, false),
            Draw::Exhausted => return None,
        };
        let cost = self.score(ctx, &genome, ok);
        Some(Member { genome, cost })
    }

    fn mutate(&mut self, parent: &Genome) -> Genome {
        let mut child = parent.clone();
        let mut ops = [0u8, 1, 2];
        ops.shuffle(&mut self.rng);
        for op in ops {
            let applied = match op {
                0 => self.space.swap_fine(&mut child, &mut self.rng),
                1 => self.space.swap_medium(&mut child, &mut self.rng),
                _ => self.space.resample_layout(&mut child, &mut self.rng),
            };
            if applied {
                break;
            }
        }
        child
    }

    fn swap(&mut self, base: &Genome) -> Option<Genome> {
        let mut g = base.clone();
        let medium_first = self.rng.gen_bool(0.5);
        // operand order matters: the first swap kind is tried first
        #[allow(clippy::if_same_then_else)]
        let applied = if medium_first {
            self.space.swap_medium(&mut g, &mut self.rng) || self.space.swap_fine(&mut g, &mut self.rng)
        } else {
            self.space.swap_fine(&mut g, &mut self.rng) || self.space.swap_medium(&mut g, &mut self.rng)
        };
        applied.then_some(g)
    }

    fn tournament(&mut self) -> Genome {
        let a = self.rng.gen_range(0..self.population.len());
        let b = self.rng.gen_range(0..self.population.len());
        let pick = if self.population[b].cost < self.population[a].cost {
            b
        } else {
            a
        };
        self.population[pick].genome.clone()
    }

    /// Spends up to `budget` evaluations and returns how many were used.
    /// Fewer are used only when the arm has no layouts or no unseen
    /// candidates can be drawn.
    pub fn run(&mut self, ctx: &SearchContext, knobs: &GaKnobs, budget: u64) -> u64 {
        if !self.space.has_layouts() {
            return 0;
        }
        let start = self.evaluations;
        let used = |arm: &Self| arm.evaluations - start;
        while used(self) < budget {
            if self.population.len() < knobs.population.max(1) {
                let bias = knobs.locality_bias;
                let Some(m) = self.draw_and_score(ctx, knobs, |arm| {
                    let mut rng = arm.rng.clone();
                    let g = arm.space.random_genome(ctx, bias, &mut rng);
                    arm.rng = rng;
                    Some(g)
                }) else {
                    break;
                };
                if m.cost.is_finite() {
                    self.population.push(m);
                }
                continue;
            }
            let parent = self.tournament();
            let Some(mut offspring) = self.draw_and_score(ctx, knobs, |arm| Some(arm.mutate(&parent))) else {
                break;
            };
            let mut trials = 0;
            while trials < knobs.swap_trials && used(self) < budget {
                trials += 1;
                let base = offspring.genome.clone();
                let Some(s) = self.draw_and_score(ctx, knobs, |arm| arm.swap(&base)) else {
                    break;
                };
                if s.cost < offspring.cost {
                    offspring = s;
                    break;
                }
            }
            if offspring.cost.is_finite() {
                let worst = (0..self.population.len())
                    .max_by(|&a, &b| self.population[a].cost.total_cmp(&self.population[b].cost))
                    .expect("population is full");
                if offspring.cost < self.population[worst].cost {
                    self.population[worst] = offspring;
                }
            }
        }
        used(self)
    }
}
