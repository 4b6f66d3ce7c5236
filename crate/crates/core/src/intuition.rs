//! The intuition layer. When the standard network is unsure, each
//! first-layer feature map votes for the class whose eigen-images it
//! correlates with best; maps that disagree with the plurality are swapped
//! for that class's stock maps and the rest of the network is re-run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{CnnError, CnnModel, FeatureMapSet, Posterior};
use crate::dataset::GrayImage;
use crate::memory::{EigenBank, MemoryLayer, StockSet};
use crate::numerics::{is_constant, pearson, NumericsError};

#[derive(Debug, Error)]
pub enum IntuitionError {
    #[error("stale memory layer: built from model {memory}, current model is {model}")]
    StaleMemory { model: String, memory: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
}

/// How a feature map is matched against eigen-images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Largest signed correlation wins.
    #[default]
    Signed,
    /// Largest `|ρ|` wins. Eigenvectors are only defined up to sign, so this
    /// treats an anti-correlated template as a match.
    Absolute,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntuitionOptions {
    pub score: ScoreMode,
    /// Keep the standard posterior when the intuition path ends up less
    /// confident than the standard one.
    pub fallback_on_lower_confidence: bool,
}

/// One filter's vote.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterVote {
    pub filter: usize,
    pub class: usize,
    /// Winning score; the signed ρ, or `|ρ|` in absolute mode. 0 when degenerate.
    pub correlation: f64,
    /// The map has zero variance and carries no evidence.
    pub degenerate: bool,
}

/// Scores filter `k`'s map against every eigen-image `(j, q)` of that filter.
/// Ties go to the lowest class, then the lowest rank.
pub fn score_filter(map: &[f64], bank: &EigenBank, k: usize, mode: ScoreMode) -> Result<FilterVote, IntuitionError> {
    if map.len() != bank.dim() {
        return Err(IntuitionError::Shape(format!(
            "map of length {} against eigen-images of length {}",
            map.len(),
            bank.dim()
        )));
    }
    if k >= bank.filters() {
        return Err(IntuitionError::Shape(format!("filter {k} of {}", bank.filters())));
    }
    if is_constant(map) {
        return Ok(FilterVote {
            filter: k,
            class: 0,
            correlation: 0.0,
            degenerate: true,
        });
    }
    let mut vote = FilterVote {
        filter: k,
        class: 0,
        correlation: f64::NEG_INFINITY,
        degenerate: false,
    };
    for j in 0..bank.classes() {
        for q in 0..bank.delta() {
            // a constant eigen-image scores 0
            let r = pearson(bank.eigen_image(j, k, q), map)?;
            let score = match mode {
                ScoreMode::Signed => r.value,
                ScoreMode::Absolute => r.value.abs(),
            };
            if score > vote.correlation {
                vote.class = j;
                vote.correlation = score;
            }
        }
    }
    Ok(vote)
}

/// Plurality winner among non-degenerate votes. Tied counts go to the class
/// with the larger sum of winning correlations, then to the lower class.
/// `None` when every vote is degenerate.
pub fn plurality(votes: &[FilterVote], classes: usize) -> Option<usize> {
    let mut count = vec![0usize; classes];
    let mut mass = vec![0.0f64; classes];
    for v in votes.iter().filter(|v| !v.degenerate) {
        count[v.class] += 1;
        mass[v.class] += v.correlation;
    }
    let mut best: Option<usize> = None;
    for j in 0..classes {
        if count[j] == 0 {
            continue;
        }
        best = match best {
            Some(b) if count[b] > count[j] || (count[b] == count[j] && mass[b] >= mass[j]) => Some(b),
            _ => Some(j),
        };
    }
    best
}

/// Scores every filter and takes the plurality.
pub fn dominant_class(
    maps: &FeatureMapSet,
    bank: &EigenBank,
    mode: ScoreMode,
) -> Result<(Option<usize>, Vec<FilterVote>), IntuitionError> {
    if maps.len() != bank.filters() {
        return Err(IntuitionError::Shape(format!(
            "{} maps against a bank of {} filters",
            maps.len(),
            bank.filters()
        )));
    }
    let votes = (0..maps.len())
        .map(|k| score_filter(maps.map(k), bank, k, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((plurality(&votes, bank.classes()), votes))
}

/// Filters that get replaced: dissenters and blanks.
pub fn dissenting_filters(dominant: usize, votes: &[FilterVote]) -> Vec<usize> {
    votes
        .iter()
        .filter(|v| v.degenerate || v.class != dominant)
        .map(|v| v.filter)
        .collect()
}

/// Swaps every dissenting or blank map for the dominant class's stock map.
pub fn replace_maps(maps: &FeatureMapSet, dominant: usize, votes: &[FilterVote], stock: &StockSet) -> FeatureMapSet {
    let mut out = maps.clone();
    let donor = stock.maps(dominant);
    for k in dissenting_filters(dominant, votes) {
        out.set_map(k, donor.map(k));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferencePath {
    Standard,
    Intuition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntuitionDecision {
    pub path: InferencePath,
    /// `None` on the standard path and when every vote was degenerate.
    pub dominant_class: Option<usize>,
    /// Empty on the standard path.
    pub votes: Vec<FilterVote>,
    pub replaced_filters: Vec<usize>,
    pub standard_posterior: Posterior,
    pub final_posterior: Posterior,
}

impl IntuitionDecision {
    pub fn predicted(&self) -> usize {
        self.final_posterior.predicted()
    }
}

/// What the intuition path produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct IntuitionOutcome {
    /// `None` when every vote was degenerate.
    pub dominant_class: Option<usize>,
    pub votes: Vec<FilterVote>,
    pub replaced_filters: Vec<usize>,
    /// Posterior after replacement; the standard one when nothing could be voted.
    pub posterior: Posterior,
}

/// One image's standard posterior plus, when the gate opens at the analysis
/// threshold, its intuition outcome. Lets a sweep decide every threshold up
/// to that one without recomputing anything.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub standard: Posterior,
    /// Highest threshold this analysis can decide.
    pub up_to: f64,
    pub intuition: Option<IntuitionOutcome>,
}

/// Does the gate open for threshold `t`? Evaluates `confidence < t` on the
/// complementary mass so that `t = 1` opens it for every finite posterior.
pub fn gate_open(standard: &Posterior, t: f64) -> bool {
    standard.residual_mass() > 1.0 - t
}

fn check_threshold(t: f64) -> Result<(), IntuitionError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(IntuitionError::Threshold(t))
    }
}

impl Analysis {
    pub fn decide(&self, t: f64, options: &IntuitionOptions) -> Result<IntuitionDecision, IntuitionError> {
        check_threshold(t)?;
        if t > self.up_to {
            return Err(IntuitionError::Threshold(t));
        }
        let outcome = match &self.intuition {
            Some(o) if gate_open(&self.standard, t) => o,
            _ => {
                return Ok(IntuitionDecision {
                    path: InferencePath::Standard,
                    dominant_class: None,
                    votes: Vec::new(),
                    replaced_filters: Vec::new(),
                    standard_posterior: self.standard.clone(),
                    final_posterior: self.standard.clone(),
                })
            }
        };
        let keep_standard =
            options.fallback_on_lower_confidence && outcome.posterior.confidence() < self.standard.confidence();
        Ok(IntuitionDecision {
            path: InferencePath::Intuition,
            dominant_class: outcome.dominant_class,
            votes: outcome.votes.clone(),
            replaced_filters: outcome.replaced_filters.clone(),
            standard_posterior: self.standard.clone(),
            final_posterior: if keep_standard {
                self.standard.clone()
            } else {
                outcome.posterior.clone()
            },
        })
    }
}

/// A trained model bound to the memory layer built from it.
#[derive(Debug, Clone, Copy)]
pub struct IntuitionLayer<'a> {
    model: &'a CnnModel,
    memory: &'a MemoryLayer,
    options: IntuitionOptions,
}

impl<'a> IntuitionLayer<'a> {
    /// Fails with a stale-memory error unless `memory` was built from `model`.
    pub fn new(model: &'a CnnModel, memory: &'a MemoryLayer, options: IntuitionOptions) -> Result<Self, IntuitionError> {
        let hash = model.content_hash();
        if hash != memory.model_hash {
            return Err(IntuitionError::StaleMemory {
                model: hash,
                memory: memory.model_hash.clone(),
            });
        }
        let arch = model.architecture();
        let bank = &memory.bank;
        if bank.filters() != arch.conv1_filters || bank.dim() != arch.feature_dim() {
            return Err(IntuitionError::Shape(format!(
                "bank of {} filters x {} dims for a model with {} x {}",
                bank.filters(),
                bank.dim(),
                arch.conv1_filters,
                arch.feature_dim()
            )));
        }
        Ok(Self { model, memory, options })
    }

    pub fn options(&self) -> &IntuitionOptions {
        &self.options
    }

    pub fn model(&self) -> &CnnModel {
        self.model
    }

    /// Votes, replaces and re-runs the back half of the network.
    pub fn intuition_path(&self, maps: &FeatureMapSet, standard: &Posterior) -> Result<IntuitionOutcome, IntuitionError> {
        let (dominant, votes) = dominant_class(maps, &self.memory.bank, self.options.score)?;
        let Some(j) = dominant else {
            // blank input: nothing to vote with, nothing to replace towards
            return Ok(IntuitionOutcome {
                dominant_class: None,
                votes,
                replaced_filters: Vec::new(),
                posterior: standard.clone(),
            });
        };
        let replaced = replace_maps(maps, j, &votes, &self.memory.stock);
        Ok(IntuitionOutcome {
            dominant_class: Some(j),
            replaced_filters: dissenting_filters(j, &votes),
            posterior: self.model.forward_from_conv1(&replaced)?,
            votes,
        })
    }

    /// Standard inference, plus the intuition path if the gate opens at `up_to`.
    pub fn analyze(&self, img: &GrayImage, up_to: f64) -> Result<Analysis, IntuitionError> {
        check_threshold(up_to)?;
        let maps = self.model.forward_conv1(img)?;
        let standard = self.model.forward_from_conv1(&maps)?;
        let intuition = if gate_open(&standard, up_to) {
            Some(self.intuition_path(&maps, &standard)?)
        } else {
            None
        };
        Ok(Analysis {
            standard,
            up_to,
            intuition,
        })
    }

    /// Standard inference, falling through to the intuition path when the
    /// standard confidence is below `t`.
    pub fn gated_classify(&self, img: &GrayImage, t: f64) -> Result<IntuitionDecision, IntuitionError> {
        self.analyze(img, t)?.decide(t, &self.options)
    }
}
