//! Dialogue episodes: the on-disk JSON schema, a planted-clue synthetic
//! generator, and the mapping to model inputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::encoders::{Vocabulary, SEP};
use crate::error::{Error, Result};
use crate::model::EncodedEpisode;
use crate::numerics::Tensor;

pub const MAX_ROUNDS: usize = 10;
pub const DATASET_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClueModality {
    Vision,
    Text,
}

/// Which entity suffices to answer the current question. For text clues the
/// index counts the caption as node 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedClue {
    pub clue_modality: ClueModality,
    pub clue_node_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueEpisode {
    /// `N x d_v` region features.
    pub features: Vec<Vec<f64>>,
    pub caption: String,
    pub rounds: Vec<Round>,
    pub question: String,
    pub candidates: Vec<String>,
    pub gt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_relevance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_clue: Option<PlantedClue>,
}

impl DialogueEpisode {
    /// Checks the schema invariants; `path` prefixes error locations.
    pub fn validate(&self, path: &str) -> Result<()> {
        let width = self.features.first().map(Vec::len).unwrap_or(0);
        if width == 0 {
            return Err(Error::data(format!("{path}.features"), "no region features"));
        }
        if let Some(k) = self.features.iter().position(|r| r.len() != width) {
            return Err(Error::data(
                format!("{path}.features[{k}]"),
                format!("row has {} values, expected {width}", self.features[k].len()),
            ));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("{path}.features"), "non-finite feature value"));
        }
        if self.rounds.len() > MAX_ROUNDS {
            return Err(Error::data(
                format!("{path}.rounds"),
                format!("{} rounds exceed {MAX_ROUNDS}", self.rounds.len()),
            ));
        }
        for (name, text) in [("caption", &self.caption), ("question", &self.question)] {
            if text.trim().is_empty() {
                return Err(Error::data(format!("{path}.{name}"), "empty text"));
            }
        }
        if self.candidates.len() < 2 {
            return Err(Error::data(format!("{path}.candidates"), "need at least 2 candidates"));
        }
        if self.gt_index >= self.candidates.len() {
            return Err(Error::data(
                format!("{path}.gt_index"),
                format!("{} out of range for {} candidates", self.gt_index, self.candidates.len()),
            ));
        }
        if let Some(rel) = &self.dense_relevance {
            if rel.len() != self.candidates.len() {
                return Err(Error::data(format!("{path}.dense_relevance"), "length differs from candidates"));
            }
            if rel.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::data(format!("{path}.dense_relevance"), "relevance outside [0, 1]"));
            }
            let max = rel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if rel[self.gt_index] < max {
                return Err(Error::data(
                    format!("{path}.dense_relevance"),
                    "ground truth is not maximally relevant",
                ));
            }
        }
        if let Some(clue) = &self.planted_clue {
            let limit = match clue.clue_modality {
                ClueModality::Vision => self.features.len(),
                ClueModality::Text => self.rounds.len() + 1,
            };
            if clue.clue_node_index >= limit {
                return Err(Error::data(
                    format!("{path}.planted_clue.clue_node_index"),
                    format!("{} out of range for {limit} nodes", clue.clue_node_index),
                ));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map(Vec::len).unwrap_or(0)
    }

    /// Token ids through `vocab`; unknown words become UNK.
    pub fn encode(&self, vocab: &Vocabulary) -> Result<EncodedEpisode> {
        let n = self.features.len();
        let d = self.feature_dim();
        let features = Tensor::matrix(n, d, self.features.iter().flatten().copied().collect())?;
        Ok(EncodedEpisode {
            features,
            caption: vocab.encode(&self.caption),
            rounds: self
                .rounds
                .iter()
                .map(|r| (vocab.encode(&r.q), vocab.encode(&r.a)))
                .collect(),
            question: vocab.encode(&self.question),
            candidates: self.candidates.iter().map(|c| vocab.encode(c)).collect(),
            gt_index: self.gt_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub version: String,
    /// Relative to the dataset file's directory.
    pub vocab_file: String,
    pub episodes: Vec<DialogueEpisode>,
}

/// Episodes together with the vocabulary they are encoded with.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub episodes: Vec<DialogueEpisode>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<EncodedEpisode>> {
        self.episodes.iter().map(|e| e.encode(&self.vocab)).collect()
    }

    pub fn relevance(&self) -> Vec<Option<Vec<f64>>> {
        self.episodes.iter().map(|e| e.dense_relevance.clone()).collect()
    }

    /// Writes `path` and the vocabulary file `vocab_file` beside it.
    pub fn save(&self, path: &Path, vocab_file: &str) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let vocab_path = dir.join(vocab_file);
        fs::write(&vocab_path, self.vocab.to_file_string()).map_err(|e| Error::io(&vocab_path, e))?;
        let file = DatasetFile {
            version: DATASET_VERSION.to_string(),
            vocab_file: vocab_file.to_string(),
            episodes: self.episodes.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = parse_dataset(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let vocab = Vocabulary::load(&dir.join(&file.vocab_file))?;
        Ok(Self {
            vocab,
            episodes: file.episodes,
        })
    }
}

/// Parses and validates dataset JSON; errors carry the JSON path.
pub fn parse_dataset(text: &str) -> Result<DatasetFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: DatasetFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::data(path, e.into_inner().to_string())
    })?;
    for (k, ep) in file.episodes.iter().enumerate() {
        ep.validate(&format!("episodes[{k}]"))?;
    }
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClueMode {
    /// The target object's color, visible only in its region features.
    #[default]
    Vision,
    /// The object count, stated only in the caption.
    Count,
    /// An activity, stated only in one earlier round.
    Round,
    /// The target's color, with the target named only in the last round
    /// ("what color is it").
    Coref,
    /// One of the other modes per episode.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub objects: usize,
    pub rounds: usize,
    pub candidates: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub clue_mode: ClueMode,
    /// Pads the template vocabulary to this size when set.
    pub vocab_size: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            objects: 4,
            rounds: 3,
            candidates: 10,
            feature_dim: 32,
            noise: 0.1,
            clue_mode: ClueMode::Vision,
            vocab_size: None,
        }
    }
}

pub const CATEGORIES: [&str; 10] = [
    "dog", "cat", "zebra", "horse", "car", "bus", "bird", "kite", "boat", "chair",
];
const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "white", "black", "brown", "orange"];
const POSITIONS: [&str; 5] = ["left", "right", "top", "bottom", "middle"];
const COUNTS: [&str; 5] = ["one", "two", "three", "four", "five"];
const ACTIVITIES: [&str; 8] = [
    "sitting", "running", "eating", "sleeping", "standing", "flying", "parked", "jumping",
];
const GLUE: [&str; 20] = [
    "a", "the", "is", "are", "there", "what", "color", "how", "many", "doing", "in", "on", "of",
    "picture", "with", "and", "was", "yes", "no", "it",
];

/// Width of the attribute-coded part of a region feature.
pub const CODED_WIDTH: usize = CATEGORIES.len() + COLORS.len() + POSITIONS.len();

fn template_tokens() -> Vec<&'static str> {
    [&CATEGORIES[..], &COLORS, &POSITIONS, &COUNTS, &ACTIVITIES, &GLUE].concat()
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 || self.objects > CATEGORIES.len() {
            return Err(Error::config(format!(
                "objects must lie in 1..={}, got {}",
                CATEGORIES.len(),
                self.objects
            )));
        }
        if self.rounds > MAX_ROUNDS {
            return Err(Error::config(format!("rounds must be at most {MAX_ROUNDS}")));
        }
        if self.feature_dim < CODED_WIDTH {
            return Err(Error::config(format!(
                "feature_dim must be at least {CODED_WIDTH}, got {}",
                self.feature_dim
            )));
        }
        if self.candidates < 2 || self.candidates > answer_pool().len() {
            return Err(Error::config(format!(
                "candidates must lie in 2..={}, got {}",
                answer_pool().len(),
                self.candidates
            )));
        }
        if self.rounds == 0 && matches!(self.clue_mode, ClueMode::Round | ClueMode::Coref) {
            return Err(Error::config("round and coreference clues need at least one round"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be a finite non-negative number"));
        }
        let needed = template_tokens().len() + 5;
        if let Some(v) = self.vocab_size {
            if v < needed {
                return Err(Error::config(format!(
                    "vocabulary of {v} tokens is too small for the templates ({needed} needed)"
                )));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.validate()?;
        let mut tokens: Vec<String> = template_tokens().into_iter().map(String::from).collect();
        if let Some(v) = self.vocab_size {
            let have = tokens.len() + 5;
            tokens.extend((0..v - have).map(|k| format!("filler{k}")));
        }
        Vocabulary::from_tokens(tokens)
    }
}

fn answer_pool() -> Vec<String> {
    let mut pool: Vec<String> = [&COLORS[..], &COUNTS, &ACTIVITIES, &["yes", "no"]]
        .concat()
        .into_iter()
        .map(String::from)
        .collect();
    for c in COLORS {
        for k in CATEGORIES {
            pool.push(format!("{c} {k}"));
        }
    }
    pool
}

struct Object {
    category: usize,
    color: usize,
    position: usize,
    count: usize,
    activity: usize,
}

/// One synthetic episode, a pure function of `seed` and `cfg`.
pub fn generate_episode(seed: u64, cfg: &GenConfig) -> Result<DialogueEpisode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut cats: Vec<usize> = (0..CATEGORIES.len()).collect();
    cats.shuffle(&mut rng);
    let objects: Vec<Object> = cats[..cfg.objects]
        .iter()
        .map(|&category| Object {
            category,
            color: rng.gen_range(0..COLORS.len()),
            position: rng.gen_range(0..POSITIONS.len()),
            count: rng.gen_range(0..COUNTS.len()),
            activity: rng.gen_range(0..ACTIVITIES.len()),
        })
        .collect();

    let features = objects
        .iter()
        .map(|o| {
            let mut row = vec![0.0; cfg.feature_dim];
            row[o.category] = 1.0;
            row[CATEGORIES.len() + o.color] = 1.0;
            row[CATEGORIES.len() + COLORS.len() + o.position] = 1.0;
            for v in row.iter_mut() {
                if cfg.noise > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
            row
        })
        .collect();

    let mode = match cfg.clue_mode {
        ClueMode::Mixed => {
            let modes: &[ClueMode] = if cfg.rounds > 0 {
                &[ClueMode::Vision, ClueMode::Count, ClueMode::Round, ClueMode::Coref]
            } else {
                &[ClueMode::Vision, ClueMode::Count]
            };
            *modes.choose(&mut rng).expect("non-empty")
        }
        m => m,
    };
    let target = rng.gen_range(0..objects.len());
    let t = &objects[target];
    let tname = CATEGORIES[t.category];

    let caption = if mode == ClueMode::Count {
        format!("there are {} {tname} in the picture", COUNTS[t.count])
    } else {
        let other = CATEGORIES[objects[(target + 1) % objects.len()].category];
        let (first, second) = if rng.gen_bool(0.5) { (tname, other) } else { (other, tname) };
        format!("a picture with a {first} and a {second}")
    };

    let clue_round = (mode == ClueMode::Round).then(|| rng.gen_range(0..cfg.rounds));
    let rounds = (0..cfg.rounds)
        .map(|r| {
            if clue_round == Some(r) {
                return Round {
                    q: format!("what is the {tname} doing"),
                    a: ACTIVITIES[t.activity].to_string(),
                };
            }
            if mode == ClueMode::Coref && r + 1 == cfg.rounds {
                return Round {
                    q: format!("is there a {tname} in the picture"),
                    a: "yes".to_string(),
                };
            }
            let o = &objects[rng.gen_range(0..objects.len())];
            if mode == ClueMode::Coref || rng.gen_bool(0.5) {
                let pos = rng.gen_range(0..POSITIONS.len());
                Round {
                    q: format!("is the {} on the {}", CATEGORIES[o.category], POSITIONS[pos]),
                    a: if pos == o.position { "yes" } else { "no" }.to_string(),
                }
            } else {
                let k = rng.gen_range(0..CATEGORIES.len());
                let present = objects.iter().any(|o| o.category == k);
                Round {
                    q: format!("is there a {} in the picture", CATEGORIES[k]),
                    a: if present { "yes" } else { "no" }.to_string(),
                }
            }
        })
        .collect();

    let (question, answer, family, clue): (String, &str, &[&str], PlantedClue) = match mode {
        ClueMode::Vision => (
            format!("what color is the {tname}"),
            COLORS[t.color],
            &COLORS,
            PlantedClue {
                clue_modality: ClueModality::Vision,
                clue_node_index: target,
            },
        ),
        ClueMode::Coref => (
            "what color is it".to_string(),
            COLORS[t.color],
            &COLORS,
            PlantedClue {
                clue_modality: ClueModality::Vision,
                clue_node_index: target,
            },
        ),
        ClueMode::Count => (
            format!("how many {tname} are there"),
            COUNTS[t.count],
            &COUNTS,
            PlantedClue {
                clue_modality: ClueModality::Text,
                clue_node_index: 0,
            },
        ),
        ClueMode::Round => (
            format!("what was the {tname} doing"),
            ACTIVITIES[t.activity],
            &ACTIVITIES,
            PlantedClue {
                clue_modality: ClueModality::Text,
                clue_node_index: clue_round.expect("round clue") + 1,
            },
        ),
        ClueMode::Mixed => unreachable!("resolved above"),
    };

    let mut distractors: Vec<String> = family
        .iter()
        .filter(|w| **w != answer)
        .map(|w| w.to_string())
        .collect();
    distractors.shuffle(&mut rng);
    let mut rest: Vec<String> = answer_pool()
        .into_iter()
        .filter(|w| w != answer && !family.contains(&w.as_str()))
        .collect();
    rest.shuffle(&mut rng);
    distractors.extend(rest);
    let mut candidates: Vec<String> = distractors.into_iter().take(cfg.candidates - 1).collect();
    let gt_index = rng.gen_range(0..cfg.candidates);
    candidates.insert(gt_index, answer.to_string());

    let ep = DialogueEpisode {
        features,
        caption,
        rounds,
        question,
        candidates,
        gt_index,
        dense_relevance: None,
        planted_clue: Some(clue),
    };
    ep.validate("episode")?;
    Ok(ep)
}

/// `count` episodes, episode `k` seeded from `(seed, k)`.
pub fn generate_dataset(seed: u64, count: usize, cfg: &GenConfig) -> Result<Dataset> {
    let vocab = cfg.vocabulary()?;
    let episodes = (0..count)
        .map(|k| generate_episode(derive_seed(seed, k as u64), cfg))
        .collect::<Result<_>>()?;
    Ok(Dataset { vocab, episodes })
}

/// Reshapes dialogues for next-question ranking: the query is round `r`'s
/// question and answer joined by the separator, the history is the rounds
/// before it, and the candidates are round `r + 1`'s question plus
/// questions drawn from other positions of the corpus.
pub fn question_ranking(dataset: &Dataset, candidates: usize, seed: u64) -> Result<Dataset> {
    if candidates < 2 {
        return Err(Error::config("need at least 2 candidates"));
    }
    let sep = dataset.vocab.token(SEP).expect("separator present").to_string();
    let pool: Vec<&str> = dataset
        .episodes
        .iter()
        .flat_map(|e| e.rounds.iter().map(|r| r.q.as_str()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    for ep in &dataset.episodes {
        for r in 0..ep.rounds.len().saturating_sub(1) {
            let next = ep.rounds[r + 1].q.as_str();
            let mut distinct: Vec<&str> = pool.iter().copied().filter(|q| *q != next).collect();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < candidates - 1 {
                return Err(Error::config(format!(
                    "corpus has {} distinct questions, {} needed",
                    distinct.len(),
                    candidates - 1
                )));
            }
            distinct.shuffle(&mut rng);
            let mut cands: Vec<String> = distinct[..candidates - 1].iter().map(|s| s.to_string()).collect();
            let gt_index = rng.gen_range(0..candidates);
            cands.insert(gt_index, next.to_string());
            episodes.push(DialogueEpisode {
                features: ep.features.clone(),
                caption: ep.caption.clone(),
                rounds: ep.rounds[..r].to_vec(),
                question: format!("{} {sep} {}", ep.rounds[r].q, ep.rounds[r].a),
                candidates: cands,
                gt_index,
                dense_relevance: None,
                planted_clue: None,
            });
        }
    }
    Ok(Dataset {
        vocab: dataset.vocab.clone(),
        episodes,
    })
}
