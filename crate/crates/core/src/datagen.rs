//! Synthetic abductive QA corpus and the three-stage record filter.
//!
//! Every prompt has the shape `<bos> entity slot entity <q> question <sep>`.
//! Questions and slot tokens each belong to one of four categories. The slot
//! decides which of a question's two answers is true:
//!
//! | slot category vs question category | P(alternative answer is true) |
//! |------------------------------------|-------------------------------|
//! | same (strong)                      | 0.95                          |
//! | next (weak)                        | 0.20                          |
//! | other two (default)                | 0.05                          |
//!
//! Two MLE corpora are drawn from this world. The *base* corpus ignores the
//! slot and, for "prone" questions, answers with the alternative 85% of the
//! time; a model trained on it hallucinates. The *validator* corpus follows
//! the table above, so a model trained on it can tell whether a slot edit
//! makes the alternative more plausible.
//!
//! A candidate record pairs an original prompt (default slot) with a modified
//! prompt that swaps only the slot for a strong or weak one. The right answer
//! is the default answer and the hallucinated answer is the alternative.
//! Stage 1 keeps candidates the base model actually gets wrong, stage 2 keeps
//! those whose validator margin clears `delta`, and stage 3 (the slot edit
//! genuinely supports the alternative) holds by construction and is
//! re-checkable with [`Grammar::supports`].

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lm::{LmError, LmPolicy, TokenSequence};
use crate::losses::{PromptPair, ResponsePair};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("config yields only {got} candidates; at least {MIN_CANDIDATES} are required")]
    TooFewCandidates { got: usize },
    #[error("delta must be non-negative, got {0}")]
    NegativeDelta(f64),
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    SplitRatio(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] LmError),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

pub const MIN_CANDIDATES: usize = 10;
pub const MAX_TEMPLATES: usize = 12;

const SPECIALS: u32 = 4;
const CATEGORIES: u32 = 4;
const SLOTS_PER_CATEGORY: u32 = 4;
const ANSWER_TOKENS: u32 = 6;

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const EOS: u32 = 2;
pub const QUERY: u32 = 3;

/// Probability that a prone question is answered with its alternative in the
/// base corpus (and that a robust question gets its default).
const BASE_SKEW: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotRelation {
    Strong,
    Weak,
    Default,
}

impl SlotRelation {
    /// Ground-truth probability that the alternative answer is correct.
    pub fn alternative_prob(self) -> f64 {
        match self {
            SlotRelation::Strong => 0.95,
            SlotRelation::Weak => 0.20,
            SlotRelation::Default => 0.05,
        }
    }
}

/// Token layout of the synthetic language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grammar {
    num_templates: u32,
    num_entities: u32,
}

/// Parsed form of a well-formed prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PromptParts {
    pub first_entity: u32,
    pub slot: u32,
    pub second_entity: u32,
    pub question: u32,
}

impl Grammar {
    pub fn new(num_templates: usize, num_entities: usize) -> Result<Self> {
        if num_templates == 0 || num_templates > MAX_TEMPLATES {
            return Err(DatagenError::InvalidConfig(format!(
                "num_templates must be in 1..={MAX_TEMPLATES}, got {num_templates}"
            )));
        }
        if num_entities == 0 {
            return Err(DatagenError::InvalidConfig("num_entities must be positive".into()));
        }
        Ok(Grammar {
            num_templates: num_templates as u32,
            num_entities: num_entities as u32,
        })
    }

    pub fn num_templates(&self) -> usize {
        self.num_templates as usize
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities as usize
    }

    pub fn num_slots(&self) -> usize {
        (CATEGORIES * SLOTS_PER_CATEGORY) as usize
    }

    fn question_base(&self) -> u32 {
        SPECIALS
    }
    fn slot_base(&self) -> u32 {
        self.question_base() + self.num_templates
    }
    fn default_base(&self) -> u32 {
        self.slot_base() + CATEGORIES * SLOTS_PER_CATEGORY
    }
    fn alternative_base(&self) -> u32 {
        self.default_base() + ANSWER_TOKENS
    }
    fn entity_base(&self) -> u32 {
        self.alternative_base() + ANSWER_TOKENS
    }

    /// Smallest vocabulary that covers every token.
    pub fn vocab_size(&self) -> usize {
        (self.entity_base() + self.num_entities) as usize
    }

    /// Longest prompt plus answer.
    pub fn max_sequence_len(&self) -> usize {
        7 + 3
    }

    pub fn question_token(&self, k: u32) -> u32 {
        self.question_base() + k
    }

    pub fn slot_token(&self, category: u32, index: u32) -> u32 {
        self.slot_base() + category * SLOTS_PER_CATEGORY + index
    }

    pub fn entity_token(&self, e: u32) -> u32 {
        self.entity_base() + e
    }

    pub fn question_category(&self, k: u32) -> u32 {
        k % CATEGORIES
    }

    /// Prone questions are the ones the base corpus teaches to hallucinate on.
    pub fn is_prone(&self, k: u32) -> bool {
        k % 3 != 2
    }

    pub fn slot_category(&self, slot: u32) -> Option<u32> {
        let base = self.slot_base();
        (base..self.default_base()).contains(&slot).then(|| (slot - base) / SLOTS_PER_CATEGORY)
    }

    pub fn relation(&self, question: u32, slot_category: u32) -> SlotRelation {
        match (slot_category + CATEGORIES - self.question_category(question)) % CATEGORIES {
            0 => SlotRelation::Strong,
            1 => SlotRelation::Weak,
            _ => SlotRelation::Default,
        }
    }

    /// `[d_k, eos]` for the first six questions, two default tokens after that.
    pub fn default_answer(&self, k: u32) -> TokenSequence {
        let d = |j: u32| self.default_base() + j % ANSWER_TOKENS;
        let ids = if k < ANSWER_TOKENS {
            vec![d(k), EOS]
        } else {
            vec![d(k), d(k + 1), EOS]
        };
        TokenSequence::new(ids).expect("non-empty")
    }

    pub fn alternative_answer(&self, k: u32) -> TokenSequence {
        TokenSequence::new(vec![self.alternative_base() + k % ANSWER_TOKENS, EOS]).expect("non-empty")
    }

    pub fn prompt(&self, parts: PromptParts) -> TokenSequence {
        TokenSequence::new(vec![
            BOS,
            parts.first_entity,
            parts.slot,
            parts.second_entity,
            QUERY,
            parts.question,
            SEP,
        ])
        .expect("non-empty")
    }

    pub fn parse_prompt(&self, prompt: &TokenSequence) -> Option<PromptParts> {
        match *prompt.ids() {
            [BOS, first_entity, slot, second_entity, QUERY, question, SEP] => {
                let entities = self.entity_base()..self.entity_base() + self.num_entities;
                let questions = self.question_base()..self.slot_base();
                let ok = entities.contains(&first_entity)
                    && entities.contains(&second_entity)
                    && questions.contains(&question)
                    && self.slot_category(slot).is_some();
                ok.then_some(PromptParts {
                    first_entity,
                    slot,
                    second_entity,
                    question,
                })
            }
            _ => None,
        }
    }

    fn question_index(&self, parts: &PromptParts) -> u32 {
        parts.question - self.question_base()
    }

    /// Ground-truth relation of a well-formed prompt's slot to its question.
    pub fn prompt_relation(&self, prompt: &TokenSequence) -> Option<SlotRelation> {
        let parts = self.parse_prompt(prompt)?;
        let k = self.question_index(&parts);
        Some(self.relation(k, self.slot_category(parts.slot)?))
    }

    /// Re-checks a record against the grammar: both prompts parse, differ
    /// only in the slot, the answers are the question's default and
    /// alternative, and the modified slot makes the alternative more likely
    /// than the original slot does.
    pub fn supports(&self, record: &AbductiveRecord) -> bool {
        let (Some(orig), Some(modi)) = (
            self.parse_prompt(&record.original_prompt),
            self.parse_prompt(&record.modified_prompt),
        ) else {
            return false;
        };
        let k = self.question_index(&orig);
        let same_frame = orig.first_entity == modi.first_entity
            && orig.second_entity == modi.second_entity
            && orig.question == modi.question
            && orig.slot != modi.slot;
        let answers = record.right_answer == self.default_answer(k) && record.hallucinated_answer == self.alternative_answer(k);
        let rel = |slot| self.relation(k, self.slot_category(slot).expect("parsed"));
        same_frame && answers && rel(modi.slot).alternative_prob() > rel(orig.slot).alternative_prob()
    }

    pub fn token_name(&self, t: u32) -> String {
        match t {
            BOS => "<bos>".into(),
            SEP => "<sep>".into(),
            EOS => "<eos>".into(),
            QUERY => "ask".into(),
            _ if t < self.slot_base() => format!("q{}", t - self.question_base()),
            _ if t < self.default_base() => {
                let s = t - self.slot_base();
                format!("fact{}.{}", s / SLOTS_PER_CATEGORY, s % SLOTS_PER_CATEGORY)
            }
            _ if t < self.alternative_base() => format!("d{}", t - self.default_base()),
            _ if t < self.entity_base() => format!("alt{}", t - self.alternative_base()),
            _ if t < self.entity_base() + self.num_entities => format!("e{}", t - self.entity_base()),
            _ => format!("?{t}"),
        }
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.token_name(t)).collect::<Vec<_>>().join(" ")
    }
}

/// One dataset entry; yields both a response pair and a prompt pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbductiveRecord {
    pub id: String,
    pub original_prompt: TokenSequence,
    pub modified_prompt: TokenSequence,
    pub right_answer: TokenSequence,
    pub hallucinated_answer: TokenSequence,
    /// `ALL(h | modified) − ALL(h | original)` under the validator; zero
    /// until stage 2 has scored the record.
    pub margin: f64,
    pub text_original: String,
    pub text_modified: String,
}

impl AbductiveRecord {
    /// `(x = original, y_w = right, y_l = hallucinated)`.
    pub fn response_pair(&self) -> ResponsePair {
        ResponsePair::new(
            self.original_prompt.clone(),
            self.right_answer.clone(),
            self.hallucinated_answer.clone(),
        )
    }

    /// `(x_w = modified, x_l = original, y = hallucinated)`.
    pub fn prompt_pair(&self) -> PromptPair {
        PromptPair::new(
            self.modified_prompt.clone(),
            self.original_prompt.clone(),
            self.hallucinated_answer.clone(),
        )
    }
}

/// One MLE training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub prompt: TokenSequence,
    pub answer: TokenSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_templates: usize,
    pub num_entities: usize,
    pub num_candidates: usize,
    pub pretrain_size: usize,
    pub validator_size: usize,
    /// Stage-2 margin floor in nats per token.
    pub delta: f64,
    /// Stage-1 floor on the base model's ALL of the hallucinated answer.
    pub all_threshold: f64,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_templates: 12,
            num_entities: 12,
            num_candidates: 1400,
            pretrain_size: 4000,
            validator_size: 8000,
            delta: 0.1,
            all_threshold: -0.5,
            split_ratio: 0.8,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn grammar(&self) -> Result<Grammar> {
        Grammar::new(self.num_templates, self.num_entities)
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar()?;
        check_delta(self.delta)?;
        check_split(self.split_ratio)?;
        if self.all_threshold.is_nan() {
            return Err(DatagenError::InvalidConfig("all_threshold is NaN".into()));
        }
        if self.pretrain_size == 0 || self.validator_size == 0 {
            return Err(DatagenError::InvalidConfig("pretraining corpora must be non-empty".into()));
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta >= 0.0 {
        Ok(())
    } else {
        Err(DatagenError::NegativeDelta(delta))
    }
}

fn check_split(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(DatagenError::SplitRatio(ratio))
    }
}

/// Output of [`synthesize_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub candidates: Vec<AbductiveRecord>,
    /// Slot-blind, skewed corpus for the base model.
    pub pretrain: Vec<CorpusItem>,
    /// Ground-truth corpus for the stage-2 validator.
    pub validator: Vec<CorpusItem>,
}

fn random_parts(g: &Grammar, rng: &mut ChaCha8Rng, k: u32, slot: u32) -> PromptParts {
    PromptParts {
        first_entity: g.entity_token(rng.random_range(0..g.num_entities)),
        slot,
        second_entity: g.entity_token(rng.random_range(0..g.num_entities)),
        question: g.question_token(k),
    }
}

fn random_slot(rng: &mut ChaCha8Rng, g: &Grammar, category: u32) -> u32 {
    g.slot_token(category, rng.random_range(0..SLOTS_PER_CATEGORY))
}

fn mle_item(g: &Grammar, rng: &mut ChaCha8Rng, ground_truth: bool) -> CorpusItem {
    let k = rng.random_range(0..g.num_templates);
    let category = rng.random_range(0..CATEGORIES);
    let slot = random_slot(rng, g, category);
    let parts = random_parts(g, rng, k, slot);
    let p_alt = if ground_truth {
        g.relation(k, category).alternative_prob()
    } else if g.is_prone(k) {
        BASE_SKEW
    } else {
        1.0 - BASE_SKEW
    };
    let answer = if rng.random_bool(p_alt) {
        g.alternative_answer(k)
    } else {
        g.default_answer(k)
    };
    CorpusItem {
        prompt: g.prompt(parts),
        answer,
    }
}

/// Draws the candidate records and both MLE corpora. Pure in `cfg`.
pub fn synthesize_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let g = cfg.grammar()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Each distinct (question, entities, slots) frame is used once.
    let frames = g.num_templates() * g.num_entities().pow(2) * 8 * 8;
    let target = cfg.num_candidates.min(frames);
    if target < MIN_CANDIDATES {
        return Err(DatagenError::TooFewCandidates { got: target });
    }
    let mut seen = HashSet::new();
    let mut candidates = Vec::with_capacity(target);
    while candidates.len() < target {
        let k = rng.random_range(0..g.num_templates);
        let c = g.question_category(k);
        let default_cat = (c + 2 + rng.random_range(0..2)) % CATEGORIES;
        let support_cat = if rng.random_bool(0.5) { c } else { (c + 1) % CATEGORIES };
        let slot = random_slot(&mut rng, &g, default_cat);
        let orig = random_parts(&g, &mut rng, k, slot);
        let modi = PromptParts {
            slot: random_slot(&mut rng, &g, support_cat),
            ..orig
        };
        if !seen.insert((orig, modi.slot)) {
            continue;
        }
        let original_prompt = g.prompt(orig);
        let modified_prompt = g.prompt(modi);
        candidates.push(AbductiveRecord {
            id: format!("cand-{:05}", candidates.len()),
            text_original: g.render(original_prompt.ids()),
            text_modified: g.render(modified_prompt.ids()),
            original_prompt,
            modified_prompt,
            right_answer: g.default_answer(k),
            hallucinated_answer: g.alternative_answer(k),
            margin: 0.0,
        });
    }
    let pretrain = (0..cfg.pretrain_size).map(|_| mle_item(&g, &mut rng, false)).collect();
    let validator = (0..cfg.validator_size).map(|_| mle_item(&g, &mut rng, true)).collect();
    Ok(Corpus {
        candidates,
        pretrain,
        validator,
    })
}

/// Stage 1: keeps records the base model would hallucinate on, i.e. with
/// `ALL_base(original, hallucinated) ≥ threshold`.
pub fn stage1_filter(base: &LmPolicy, candidates: &[AbductiveRecord], threshold: f64) -> Result<Vec<AbductiveRecord>> {
    let mut kept = Vec::new();
    for r in candidates {
        if base.avg_log_lik(&r.original_prompt, &r.hallucinated_answer)? >= threshold {
            kept.push(r.clone());
        }
    }
    Ok(kept)
}

/// `ALL(h | modified) − ALL(h | original)` under `scorer`.
pub fn margin(scorer: &LmPolicy, record: &AbductiveRecord) -> Result<f64> {
    let h = &record.hallucinated_answer;
    Ok(scorer.avg_log_lik(&record.modified_prompt, h)? - scorer.avg_log_lik(&record.original_prompt, h)?)
}

/// Stores the margin of every record.
pub fn score_margins(scorer: &LmPolicy, records: &[AbductiveRecord]) -> Result<Vec<AbductiveRecord>> {
    records
        .iter()
        .map(|r| {
            Ok(AbductiveRecord {
                margin: margin(scorer, r)?,
                ..r.clone()
            })
        })
        .collect()
}

/// Keeps already-scored records with `margin ≥ delta`.
pub fn filter_by_margin(records: &[AbductiveRecord], delta: f64) -> Result<Vec<AbductiveRecord>> {
    check_delta(delta)?;
    Ok(records.iter().filter(|r| r.margin >= delta).cloned().collect())
}

/// Stage 2: scores margins with `scorer` and keeps `margin ≥ delta`.
pub fn stage2_filter(scorer: &LmPolicy, candidates: &[AbductiveRecord], delta: f64) -> Result<Vec<AbductiveRecord>> {
    check_delta(delta)?;
    filter_by_margin(&score_margins(scorer, candidates)?, delta)
}

fn split_draw(seed: u64, id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns each record to train or eval by a hash of `(seed, id)`, so a
/// record lands on the same side whatever else survives filtering.
pub fn split_records(
    records: &[AbductiveRecord],
    split_ratio: f64,
    seed: u64,
) -> Result<(Vec<AbductiveRecord>, Vec<AbductiveRecord>)> {
    check_split(split_ratio)?;
    Ok(records.iter().cloned().partition(|r| split_draw(seed, &r.id) < split_ratio))
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatagenError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Sizes of an emitted dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub eval: usize,
}

/// Splits `records` and writes `train.jsonl` and `eval.jsonl` into `dir`.
pub fn emit_dataset(dir: &Path, records: &[AbductiveRecord], split_ratio: f64, seed: u64) -> Result<SplitSizes> {
    let (train, eval) = split_records(records, split_ratio, seed)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(TRAIN_FILE), &train)?;
    write_jsonl(&dir.join(EVAL_FILE), &eval)?;
    Ok(SplitSizes {
        train: train.len(),
        eval: eval.len(),
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<AbductiveRecord>> {
    read_jsonl(path)
}
