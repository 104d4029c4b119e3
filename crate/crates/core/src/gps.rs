//! Genetic prompt search.
//!
//! Each iteration scores the current population on the dev set, keeps the
//! top-K as the reproductive group and, except on the last iteration, breeds
//! the next population from it. The result is the top-K over the union of
//! every scored generation, so it can never be worse than the initial
//! prompts.
//!
//! Scoring and mutation of a generation run on the ambient rayon pool. Each
//! offspring slot draws from its own RNG stream keyed by
//! `(seed, generation, slot)` and results are gathered by position, so the
//! lineage is identical for any thread count.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::error::Error as StdError;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptTemplate;
use crate::registry::LabeledExample;
use crate::rng;

pub type DynError = Box<dyn StdError + Send + Sync>;

/// Something the search can score and mutate.
pub trait Genome: Clone + Send + Sync {
    /// Identity used for deduplication.
    fn key(&self) -> String;
    /// Human-readable form written to reports.
    fn text(&self) -> String;
}

impl Genome for PromptTemplate {
    fn key(&self) -> String {
        PromptTemplate::key(self)
    }

    fn text(&self) -> String {
        self.description.clone()
    }
}

impl Genome for String {
    fn key(&self) -> String {
        self.clone()
    }

    fn text(&self) -> String {
        self.clone()
    }
}

/// Fitness function: the metric of a candidate on the dev set.
pub trait Scorer<G>: Sync {
    fn score(&self, candidate: &G, dev: &[LabeledExample]) -> Result<f64, DynError>;
}

impl<G, F> Scorer<G> for F
where
    F: Fn(&G, &[LabeledExample]) -> Result<f64, DynError> + Sync,
{
    fn score(&self, candidate: &G, dev: &[LabeledExample]) -> Result<f64, DynError> {
        self(candidate, dev)
    }
}

/// Where an offspring sits in the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MutationSlot {
    /// Generation the offspring will belong to.
    pub generation: usize,
    /// Rank of the parent within the reproductive group.
    pub parent_rank: usize,
    /// Which of the parent's offspring this is.
    pub offspring: usize,
}

/// Side information a mutator reports about one offspring.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationNote {
    /// Invalid backend outputs discarded before this one was accepted.
    pub retries: u32,
    /// The mask marker was missing from the backend output and re-appended.
    pub mask_reappended: bool,
}

#[derive(Debug, Clone)]
pub struct Offspring<G> {
    pub genome: G,
    pub note: MutationNote,
}

impl<G> Offspring<G> {
    pub fn plain(genome: G) -> Self {
        Self {
            genome,
            note: MutationNote::default(),
        }
    }
}

/// Genetic function producing one offspring from a parent.
pub trait Mutator<G>: Sync {
    fn mutate(&self, parent: &G, slot: MutationSlot, rng: &mut ChaCha8Rng) -> Result<Offspring<G>, DynError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateId {
    pub generation: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<G> {
    pub id: CandidateId,
    pub genome: G,
    pub parent: Option<CandidateId>,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<MutationNote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsConfig {
    /// Number of breeding iterations; generations `0..=iterations` are scored.
    pub iterations: usize,
    pub top_k: usize,
    pub offspring_per_parent: usize,
    pub rng_seed: u64,
    #[serde(default = "default_true")]
    pub dedup: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GpsConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            top_k: 3,
            offspring_per_parent: 2,
            rng_seed: 0,
            dedup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog<G> {
    pub generation: usize,
    pub candidates: Vec<Candidate<G>>,
    /// Ids of the top-K selected from this generation.
    pub reproductive_group: Vec<CandidateId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsResult<G> {
    pub final_top_k: Vec<Candidate<G>>,
    pub generations: Vec<GenerationLog<G>>,
}

impl<G> GpsResult<G> {
    pub fn best_score(&self) -> Option<f64> {
        self.final_top_k.first().and_then(|c| c.score)
    }

    pub fn initial_best_score(&self) -> Option<f64> {
        self.generations
            .first()
            .and_then(|g| g.candidates.iter().filter_map(|c| c.score).max_by(f64::total_cmp))
    }

    pub fn find(&self, id: CandidateId) -> Option<&Candidate<G>> {
        self.generations
            .get(id.generation)
            .and_then(|g| g.candidates.iter().find(|c| c.id == id))
    }
}

#[derive(Debug, Error)]
pub enum GpsError {
    #[error("initial population is empty")]
    EmptyPopulation,
    #[error("dev set is empty")]
    EmptyDev,
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("candidate g{}#{} is unscored", .0.generation, .0.index)]
    Unscored(CandidateId),
    #[error("scoring candidate g{}#{} ({text:?}) failed: {source}", id.generation, id.index)]
    Score {
        id: CandidateId,
        text: String,
        #[source]
        source: DynError,
    },
    #[error("scorer returned {score} for candidate g{}#{} ({text:?})", id.generation, id.index)]
    NonFinite { id: CandidateId, text: String, score: f64 },
    #[error("mutating parent g{}#{} ({text:?}) failed: {source}", parent.generation, parent.index)]
    Mutate {
        parent: CandidateId,
        text: String,
        #[source]
        source: DynError,
    },
}

fn rank_order<G>(a: &Candidate<G>, b: &Candidate<G>) -> Ordering {
    let sa = a.score.unwrap_or(f64::NEG_INFINITY);
    let sb = b.score.unwrap_or(f64::NEG_INFINITY);
    sb.total_cmp(&sa).then_with(|| a.id.cmp(&b.id))
}

/// The `min(k, n)` highest-scoring candidates, best first. Ties go to the
/// lower generation, then the lower index.
pub fn select_top_k<G: Clone>(scored: &[Candidate<G>], k: usize) -> Result<Vec<Candidate<G>>, GpsError> {
    if let Some(c) = scored.iter().find(|c| c.score.is_none()) {
        return Err(GpsError::Unscored(c.id));
    }
    let mut refs: Vec<&Candidate<G>> = scored.iter().collect();
    refs.sort_by(|a, b| rank_order(a, b));
    Ok(refs.into_iter().take(k).cloned().collect())
}

pub fn run_gps<G, S, M>(
    initial: &[G],
    dev: &[LabeledExample],
    scorer: &S,
    mutator: &M,
    config: &GpsConfig,
) -> Result<GpsResult<G>, GpsError>
where
    G: Genome,
    S: Scorer<G> + ?Sized,
    M: Mutator<G> + ?Sized,
{
    if initial.is_empty() {
        return Err(GpsError::EmptyPopulation);
    }
    if dev.is_empty() {
        return Err(GpsError::EmptyDev);
    }
    if config.top_k == 0 {
        return Err(GpsError::Config("top_k must be >= 1"));
    }
    if config.offspring_per_parent == 0 {
        return Err(GpsError::Config("offspring_per_parent must be >= 1"));
    }

    let mut seen = HashSet::new();
    let mut population: Vec<Candidate<G>> = Vec::new();
    for g in initial {
        if config.dedup && !seen.insert(g.key()) {
            continue;
        }
        population.push(Candidate {
            id: CandidateId {
                generation: 0,
                index: population.len(),
            },
            genome: g.clone(),
            parent: None,
            score: None,
            note: None,
        });
    }

    let mut generations: Vec<GenerationLog<G>> = Vec::with_capacity(config.iterations + 1);
    for t in 0..=config.iterations {
        let scores: Vec<Result<f64, DynError>> = population.par_iter().map(|c| scorer.score(&c.genome, dev)).collect();
        for (c, s) in population.iter_mut().zip(scores) {
            let s = s.map_err(|source| GpsError::Score {
                id: c.id,
                text: c.genome.text(),
                source,
            })?;
            if !s.is_finite() {
                return Err(GpsError::NonFinite {
                    id: c.id,
                    text: c.genome.text(),
                    score: s,
                });
            }
            c.score = Some(s);
        }
        let elite = select_top_k(&population, config.top_k)?;
        tracing::debug!(
            generation = t,
            population = population.len(),
            best = elite.first().and_then(|c| c.score),
            "scored generation"
        );

        let next = if t < config.iterations {
            breed(&elite, t + 1, mutator, config, &mut seen)?
        } else {
            Vec::new()
        };
        generations.push(GenerationLog {
            generation: t,
            candidates: std::mem::replace(&mut population, next),
            reproductive_group: elite.iter().map(|c| c.id).collect(),
        });
    }

    let union: Vec<Candidate<G>> = generations.iter().flat_map(|g| g.candidates.iter().cloned()).collect();
    let final_top_k = select_top_k(&union, config.top_k)?;
    Ok(GpsResult {
        final_top_k,
        generations,
    })
}

fn breed<G, M>(
    elite: &[Candidate<G>],
    generation: usize,
    mutator: &M,
    config: &GpsConfig,
    seen: &mut HashSet<String>,
) -> Result<Vec<Candidate<G>>, GpsError>
where
    G: Genome,
    M: Mutator<G> + ?Sized,
{
    let per = config.offspring_per_parent;
    let slots: Vec<MutationSlot> = (0..elite.len() * per)
        .map(|s| MutationSlot {
            generation,
            parent_rank: s / per,
            offspring: s % per,
        })
        .collect();
    let produced: Vec<Result<Offspring<G>, DynError>> = slots
        .par_iter()
        .enumerate()
        .map(|(flat, slot)| {
            let mut rng = rng::stream(config.rng_seed, &[generation as u64, flat as u64]);
            mutator.mutate(&elite[slot.parent_rank].genome, *slot, &mut rng)
        })
        .collect();

    let mut children = Vec::new();
    for (slot, off) in slots.iter().zip(produced) {
        let parent = &elite[slot.parent_rank];
        let off = off.map_err(|source| GpsError::Mutate {
            parent: parent.id,
            text: parent.genome.text(),
            source,
        })?;
        if config.dedup && !seen.insert(off.genome.key()) {
            continue;
        }
        children.push(Candidate {
            id: CandidateId {
                generation,
                index: children.len(),
            },
            genome: off.genome,
            parent: Some(parent.id),
            score: None,
            note: Some(off.note),
        });
    }
    Ok(children)
}

/// Test doubles for driving the search without a model.
pub mod mock {
    use super::*;

    /// Scores a candidate by the character length of its text.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct LengthScorer;

    impl<G: Genome> Scorer<G> for LengthScorer {
        fn score(&self, candidate: &G, _dev: &[LabeledExample]) -> Result<f64, DynError> {
            Ok(candidate.text().chars().count() as f64)
        }
    }

    /// Appends `suffixes[offspring % len]` to a string genome.
    #[derive(Debug, Clone)]
    pub struct AppendMutator {
        pub suffixes: Vec<String>,
    }

    impl AppendMutator {
        pub fn new<S: Into<String>>(suffixes: impl IntoIterator<Item = S>) -> Self {
            Self {
                suffixes: suffixes.into_iter().map(Into::into).collect(),
            }
        }
    }

    impl Mutator<String> for AppendMutator {
        fn mutate(
            &self,
            parent: &String,
            slot: MutationSlot,
            _rng: &mut ChaCha8Rng,
        ) -> Result<Offspring<String>, DynError> {
            let s = &self.suffixes[slot.offspring % self.suffixes.len()];
            Ok(Offspring::plain(format!("{parent}{s}")))
        }
    }
}
