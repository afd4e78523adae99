//! Synthetic grid-world dialogue data: deterministic generation, token
//! handling, vocabulary construction, and dataset file IO.
//!
//! Images are 3×3 grids holding 1–4 colored shapes. Each object is
//! described exactly by its region feature (one-hot shape ⊕ one-hot color
//! ⊕ normalized position), so every templated question is answerable from
//! the region features alone.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};
use crate::rng::DetRng;

pub const DATASET_SCHEMA: &str = "dam-visdial/1";

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
const COUNTS: [&str; 5] = ["zero", "one", "two", "three", "four"];
const ROW_WORDS: [&str; 3] = ["top", "middle", "bottom"];
const COL_WORDS: [&str; 3] = ["left", "center", "right"];

/// shape one-hot ⊕ color one-hot ⊕ (row, col)/2
pub const REGION_DIM: usize = SHAPES.len() + COLORS.len() + 2;

// ── Dataset records (wire schema) ────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub id: usize,
    pub regions: Vec<Vec<f64>>,
    pub captions: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DialogueRound {
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub relevance: Vec<f64>,
    pub gt_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DialogueExample {
    pub image_id: usize,
    pub caption: Vec<String>,
    pub rounds: Vec<DialogueRound>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub dialogues: Vec<DialogueExample>,
}

impl Dataset {
    pub fn image(&self, id: usize) -> Result<&ImageRecord> {
        self.images
            .iter()
            .find(|im| im.id == id)
            .ok_or_else(|| DamError::Data(format!("dialogue references unknown image id {id}")))
    }

    pub fn n_rounds(&self) -> usize {
        self.dialogues.iter().map(|d| d.rounds.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for im in &self.images {
            if im.regions.is_empty() {
                return Err(DamError::Data(format!("image {} has no regions", im.id)));
            }
            if im.regions.iter().any(|r| r.len() != im.regions[0].len()) {
                return Err(DamError::Data(format!(
                    "image {} has non-uniform region dimensions",
                    im.id
                )));
            }
        }
        for (di, d) in self.dialogues.iter().enumerate() {
            self.image(d.image_id)?;
            for (ri, round) in d.rounds.iter().enumerate() {
                let at = format!("dialogue {di} round {ri}");
                if round.candidates.len() != round.relevance.len() {
                    return Err(DamError::Data(format!(
                        "{at}: {} candidates but {} relevance entries",
                        round.candidates.len(),
                        round.relevance.len()
                    )));
                }
                if round.gt_index >= round.candidates.len() {
                    return Err(DamError::Data(format!("{at}: gt_index out of range")));
                }
                if round.relevance[round.gt_index] != 1.0 {
                    return Err(DamError::Data(format!(
                        "{at}: ground-truth relevance must be 1.0"
                    )));
                }
                let gt_copies = round
                    .candidates
                    .iter()
                    .filter(|c| **c == round.answer)
                    .count();
                if gt_copies != 1 || round.candidates[round.gt_index] != round.answer {
                    return Err(DamError::Data(format!(
                        "{at}: ground truth must appear exactly once among candidates"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Tokenization ─────────────────────────────────────────────────────

/// Lowercases, splits on whitespace, and separates punctuation into its
/// own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

// ── Vocabulary ───────────────────────────────────────────────────────

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id map with fixed special ids 0–3. Non-special ids are
/// assigned by (frequency desc, token lexicographic), so construction is
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocabulary {
    /// Retains tokens whose corpus frequency is strictly greater than
    /// `min_freq`; everything else maps to the unknown token.
    pub fn build(dataset: &Dataset, min_freq: usize) -> Self {
        let mut all: Vec<&Vec<String>> = Vec::new();
        for im in &dataset.images {
            all.extend(im.captions.iter());
        }
        for d in &dataset.dialogues {
            all.push(&d.caption);
            for r in &d.rounds {
                all.push(&r.question);
                all.push(&r.answer);
                all.extend(r.candidates.iter());
            }
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for list in all {
            for t in list {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }

        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(t, c)| c > min_freq && !SPECIALS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(id_to_token, min_freq)
    }

    /// Rebuilds a vocabulary from an id-ordered token list (checkpoint
    /// restore path).
    pub fn from_tokens(id_to_token: Vec<String>, min_freq: usize) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Id for a token; unknown strings map to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

// ── Generation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GridObject {
    shape: usize,
    color: usize,
    row: usize,
    col: usize,
}

impl GridObject {
    fn region(&self) -> Vec<f64> {
        let mut v = vec![0.0; REGION_DIM];
        v[self.shape] = 1.0;
        v[SHAPES.len() + self.color] = 1.0;
        v[SHAPES.len() + COLORS.len()] = self.row as f64 / 2.0;
        v[SHAPES.len() + COLORS.len() + 1] = self.col as f64 / 2.0;
        v
    }
}

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QuestionKind {
    Existence,
    Color,
    Count,
}

fn question_tokens(kind: QuestionKind, shape: usize) -> Vec<String> {
    match kind {
        QuestionKind::Existence => toks(&["is", "there", "a", SHAPES[shape], "?"]),
        QuestionKind::Color => toks(&["what", "color", "is", "the", SHAPES[shape], "?"]),
        QuestionKind::Count => {
            vec![
                "how".into(),
                "many".into(),
                format!("{}s", SHAPES[shape]),
                "?".into(),
            ]
        }
    }
}

/// Short and long surface forms of an answer; either may be the ground
/// truth, the other serves as the graded-relevance paraphrase. The long
/// form extends the short form, so the pair differs only at one
/// boundary position.
fn answer_forms(kind: QuestionKind, objects: &[GridObject], shape: usize) -> (Vec<String>, Vec<String>) {
    let n = objects.iter().filter(|o| o.shape == shape).count();
    let short = short_answer(kind, objects, shape);
    let long = long_answer(kind, n, &short);
    (short, long)
}

fn short_answer(kind: QuestionKind, objects: &[GridObject], shape: usize) -> Vec<String> {
    match kind {
        QuestionKind::Existence => {
            let n = objects.iter().filter(|o| o.shape == shape).count();
            if n > 0 {
                toks(&["yes"])
            } else {
                toks(&["no"])
            }
        }
        QuestionKind::Color => {
            let obj = objects.iter().find(|o| o.shape == shape).expect("applicable");
            toks(&[COLORS[obj.color]])
        }
        QuestionKind::Count => toks(&[COUNTS[objects.iter().filter(|o| o.shape == shape).count()]]),
    }
}

fn long_answer(kind: QuestionKind, present: usize, short: &[String]) -> Vec<String> {
    let mut long = short.to_vec();
    match kind {
        QuestionKind::Existence => {
            if present > 0 {
                long.extend(toks(&["it", "is"]));
            } else {
                long.extend(toks(&["it", "is", "not"]));
            }
        }
        QuestionKind::Color => long.extend(toks(&["i", "think"])),
        QuestionKind::Count => long.extend(toks(&["of", "them"])),
    }
    long
}

/// Distractors for one question kind: long answer forms of the *other*
/// kinds plus generic filler phrases. Same-kind value words are kept
/// out so the graded paraphrase stays the closest wrong-free candidate;
/// bare value tokens of any kind are likewise excluded because a single
/// highly-plausible token would otherwise dominate likelihood ranking
/// on an overfit model.
fn distractor_pool(kind: QuestionKind) -> Vec<Vec<String>> {
    let mut pool = Vec::new();
    if kind != QuestionKind::Existence {
        pool.push(toks(&["yes", "it", "is"]));
        pool.push(toks(&["no", "it", "is", "not"]));
    }
    if kind != QuestionKind::Color {
        for c in COLORS {
            pool.push(toks(&[c, "i", "think"]));
        }
    }
    if kind != QuestionKind::Count {
        for w in COUNTS {
            pool.push(toks(&[w, "of", "them"]));
        }
    }
    for filler in [
        "maybe",
        "probably",
        "not sure",
        "no idea",
        "hard to say",
        "i do not know",
        "i can not tell",
        "i think so",
        "can not say",
        "it is hard to tell",
        "i am not sure",
        "who knows",
    ] {
        pool.push(tokenize(filler));
    }
    pool
}

fn caption_for(object: &GridObject, template: usize) -> Vec<String> {
    let color = COLORS[object.color];
    let shape = SHAPES[object.shape];
    match template {
        0 => toks(&["a", color, shape]),
        1 => toks(&["there", "is", "a", color, shape]),
        _ => toks(&[
            "a",
            color,
            shape,
            "in",
            "the",
            ROW_WORDS[object.row],
            COL_WORDS[object.col],
        ]),
    }
}

/// Deterministically generates a micro dialogue dataset: one dialogue per
/// image, `rounds_per_dialogue` QA rounds each, `n_candidates` graded
/// candidates per round (ground truth at relevance 1.0, a paraphrase at
/// 0.5, distractors at 0.0).
pub fn generate_dataset(
    seed: u64,
    n_images: usize,
    rounds_per_dialogue: usize,
    n_candidates: usize,
) -> Result<Dataset> {
    if n_candidates < 2 {
        return Err(DamError::InvalidArgument(
            "need at least 2 candidates (ground truth plus one alternative)".into(),
        ));
    }
    if rounds_per_dialogue < 1 {
        return Err(DamError::InvalidArgument("need at least 1 round".into()));
    }
    if n_images < 1 {
        return Err(DamError::InvalidArgument("need at least 1 image".into()));
    }

    let mut rng = DetRng::seed(seed);
    let mut images = Vec::with_capacity(n_images);
    let mut dialogues = Vec::with_capacity(n_images);

    for image_id in 0..n_images {
        // 1–4 objects on distinct cells
        let n_objects = 1 + rng.below(4);
        let mut cells: Vec<(usize, usize)> =
            (0..9).map(|i| (i / 3, i % 3)).collect();
        rng.shuffle(&mut cells);
        let objects: Vec<GridObject> = (0..n_objects)
            .map(|i| GridObject {
                shape: rng.below(SHAPES.len()),
                color: rng.below(COLORS.len()),
                row: cells[i].0,
                col: cells[i].1,
            })
            .collect();

        let n_captions = 1 + rng.below(n_objects.min(3));
        let captions: Vec<Vec<String>> = (0..n_captions)
            .map(|i| caption_for(&objects[i], rng.below(3)))
            .collect();

        // Question pool: existence/count for every shape, color only when
        // exactly one object of that shape makes the answer unambiguous.
        let mut question_pool = Vec::new();
        for shape in 0..SHAPES.len() {
            question_pool.push((QuestionKind::Existence, shape));
            question_pool.push((QuestionKind::Count, shape));
            if objects.iter().filter(|o| o.shape == shape).count() == 1 {
                question_pool.push((QuestionKind::Color, shape));
            }
        }
        if rounds_per_dialogue > question_pool.len() {
            return Err(DamError::Data(format!(
                "question template pool exhausted: {rounds_per_dialogue} rounds requested, \
                 only {} templates apply to image {image_id}",
                question_pool.len()
            )));
        }
        rng.shuffle(&mut question_pool);

        let mut rounds = Vec::with_capacity(rounds_per_dialogue);
        for &(kind, shape) in question_pool.iter().take(rounds_per_dialogue) {
            let question = question_tokens(kind, shape);
            let (short, long) = answer_forms(kind, &objects, shape);
            let (answer, paraphrase) = if rng.chance(0.5) {
                (short, long)
            } else {
                (long, short)
            };

            let pool = distractor_pool(kind);
            let mut distractors: Vec<&Vec<String>> = pool
                .iter()
                .filter(|c| **c != answer && **c != paraphrase)
                .collect();
            if n_candidates - 2 > distractors.len() {
                return Err(DamError::Data(format!(
                    "candidate pool exhausted: {} distractors needed, {} available",
                    n_candidates - 2,
                    distractors.len()
                )));
            }
            rng.shuffle(&mut distractors);

            let mut entries: Vec<(Vec<String>, f64)> = vec![(answer.clone(), 1.0), (paraphrase, 0.5)];
            entries.extend(
                distractors
                    .into_iter()
                    .take(n_candidates - 2)
                    .map(|c| (c.clone(), 0.0)),
            );
            rng.shuffle(&mut entries);

            let gt_index = entries
                .iter()
                .position(|(c, rel)| *rel == 1.0 && *c == answer)
                .expect("ground truth present");
            let (candidates, relevance): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
            rounds.push(DialogueRound {
                question,
                answer,
                candidates,
                relevance,
                gt_index,
            });
        }

        dialogues.push(DialogueExample {
            image_id,
            caption: captions[0].clone(),
            rounds,
        });
        images.push(ImageRecord {
            id: image_id,
            regions: objects.iter().map(GridObject::region).collect(),
            captions,
        });
    }

    let dataset = Dataset { images, dialogues };
    dataset.validate()?;
    Ok(dataset)
}

/// Recovers the object attributes from a region feature vector. Used to
/// check answer consistency against the generated features.
pub fn decode_region(feature: &[f64]) -> Option<(usize, usize, usize, usize)> {
    if feature.len() != REGION_DIM {
        return None;
    }
    let shape = feature[..SHAPES.len()].iter().position(|&v| v == 1.0)?;
    let color = feature[SHAPES.len()..SHAPES.len() + COLORS.len()]
        .iter()
        .position(|&v| v == 1.0)?;
    let row = (feature[SHAPES.len() + COLORS.len()] * 2.0).round() as usize;
    let col = (feature[SHAPES.len() + COLORS.len() + 1] * 2.0).round() as usize;
    Some((shape, color, row, col))
}

// ── File IO ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    images: Vec<ImageRecord>,
    dialogues: Vec<DialogueExample>,
}

/// Serializes a dataset, optionally embedding the resolved run
/// configuration that produced it.
pub fn dataset_to_json(dataset: &Dataset, config: Option<serde_json::Value>) -> String {
    let file = DatasetFile {
        schema: DATASET_SCHEMA.to_string(),
        config,
        images: dataset.images.clone(),
        dialogues: dataset.dialogues.clone(),
    };
    serde_json::to_string_pretty(&file).expect("dataset serialization cannot fail")
}

pub fn save_dataset(path: &Path, dataset: &Dataset, config: Option<serde_json::Value>) -> Result<()> {
    std::fs::write(path, dataset_to_json(dataset, config))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text).map_err(|e| match e {
        DamError::Parse { detail, .. } => DamError::Parse {
            path: path.display().to_string(),
            detail,
        },
        other => other,
    })
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| DamError::Parse {
        path: "<dataset>".into(),
        detail: e.to_string(),
    })?;
    if file.schema != DATASET_SCHEMA {
        return Err(DamError::Parse {
            path: "<dataset>".into(),
            detail: format!(
                "unknown schema version {:?}, expected {DATASET_SCHEMA:?}",
                file.schema
            ),
        });
    }
    let dataset = Dataset {
        images: file.images,
        dialogues: file.dialogues,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ── Model-facing round views ─────────────────────────────────────────

/// One training/evaluation instance: the current question with its full
/// context, token ids resolved against a vocabulary.
#[derive(Debug, Clone)]
pub struct RoundInput {
    pub question: Vec<usize>,
    /// Caption first, then one merged utterance per earlier QA round.
    pub history: Vec<Vec<usize>>,
    pub regions: Vec<Vec<f64>>,
    /// Image caption token lists (semantic side input).
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct RoundInstance {
    pub dialogue: usize,
    pub round: usize,
    pub input: RoundInput,
    /// Ground-truth answer token ids.
    pub target: Vec<usize>,
}

/// Flattens a dataset into per-round instances in dataset order.
pub fn round_instances(dataset: &Dataset, vocab: &Vocabulary) -> Result<Vec<RoundInstance>> {
    let mut out = Vec::with_capacity(dataset.n_rounds());
    for (di, d) in dataset.dialogues.iter().enumerate() {
        let image = dataset.image(d.image_id)?;
        for (ri, round) in d.rounds.iter().enumerate() {
            let mut history = vec![vocab.encode(&d.caption)];
            for prev in &d.rounds[..ri] {
                let mut merged = vocab.encode(&prev.question);
                merged.extend(vocab.encode(&prev.answer));
                history.push(merged);
            }
            out.push(RoundInstance {
                dialogue: di,
                round: ri,
                input: RoundInput {
                    question: vocab.encode(&round.question),
                    history,
                    regions: image.regions.clone(),
                    captions: image.captions.iter().map(|c| vocab.encode(c)).collect(),
                },
                target: vocab.encode(&round.answer),
            });
        }
    }
    Ok(out)
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} images, {} dialogues, {} rounds",
            self.images.len(),
            self.dialogues.len(),
            self.n_rounds()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_separates_punctuation() {
        assert_eq!(
            tokenize("Is there a square?"),
            vec!["is", "there", "a", "square", "?"]
        );
        assert_eq!(tokenize(""), Vec::<String>::new());
    }

    #[test]
    fn detokenize_tokenize_idempotent_on_normalized_text() {
        let text = "is there a square ?";
        let tokens = tokenize(text);
        assert_eq!(detokenize(&tokens), text);
        assert_eq!(tokenize(&detokenize(&tokens)), tokens);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(7, 8, 3, 10).unwrap();
        let b = generate_dataset(7, 8, 3, 10).unwrap();
        assert_eq!(dataset_to_json(&a, None), dataset_to_json(&b, None));
        let c = generate_dataset(8, 8, 3, 10).unwrap();
        assert_ne!(dataset_to_json(&a, None), dataset_to_json(&c, None));
    }

    /// Re-derives every answer from the region features and checks it
    /// against the stored ground truth.
    #[test]
    fn answers_are_consistent_with_images() {
        let ds = generate_dataset(13, 24, 3, 12).unwrap();
        for d in &ds.dialogues {
            let image = ds.image(d.image_id).unwrap();
            let objects: Vec<_> = image
                .regions
                .iter()
                .map(|r| decode_region(r).expect("well-formed region"))
                .collect();
            for round in &d.rounds {
                let q = &round.question;
                let truth = &round.answer;
                if q[0] == "is" {
                    let shape = SHAPES.iter().position(|s| s == &q[3]).unwrap();
                    let exists = objects.iter().any(|o| o.0 == shape);
                    assert_eq!(truth[0] == "yes", exists, "{q:?} -> {truth:?}");
                } else if q[0] == "what" {
                    let shape = SHAPES.iter().position(|s| s == &q[4]).unwrap();
                    let matches: Vec<_> = objects.iter().filter(|o| o.0 == shape).collect();
                    assert_eq!(matches.len(), 1, "color question requires unique object");
                    let color = COLORS[matches[0].1];
                    assert!(truth.contains(&color.to_string()), "{q:?} -> {truth:?}");
                } else {
                    let plural = &q[2];
                    let shape = SHAPES
                        .iter()
                        .position(|s| format!("{s}s") == *plural)
                        .unwrap();
                    let n = objects.iter().filter(|o| o.0 == shape).count();
                    assert!(truth.contains(&COUNTS[n].to_string()), "{q:?} -> {truth:?}");
                }
            }
        }
    }

    #[test]
    fn candidate_lists_are_well_formed() {
        let ds = generate_dataset(3, 16, 3, 20).unwrap();
        for d in &ds.dialogues {
            for r in &d.rounds {
                assert_eq!(r.candidates.len(), 20);
                assert_eq!(r.relevance.len(), 20);
                assert_eq!(r.candidates[r.gt_index], r.answer);
                assert_eq!(r.relevance[r.gt_index], 1.0);
                assert_eq!(
                    r.candidates.iter().filter(|c| **c == r.answer).count(),
                    1
                );
                assert_eq!(r.relevance.iter().filter(|&&x| x == 0.5).count(), 1);
            }
        }
    }

    #[test]
    fn too_many_rounds_exhausts_template_pool() {
        let err = generate_dataset(1, 2, 50, 5).unwrap_err();
        assert!(err.to_string().contains("template pool exhausted"));
    }

    #[test]
    fn vocab_respects_strict_frequency_threshold() {
        let ds = generate_dataset(21, 12, 3, 12).unwrap();
        let all = Vocabulary::build(&ds, 0);
        // min_freq = 0 keeps every generated token
        for d in &ds.dialogues {
            for r in &d.rounds {
                for t in r.question.iter().chain(&r.answer) {
                    assert!(all.contains(t), "missing {t}");
                }
            }
        }

        // a token appearing exactly min_freq times is excluded
        let mut freq: HashMap<String, usize> = HashMap::new();
        for im in &ds.images {
            for c in &im.captions {
                for t in c {
                    *freq.entry(t.clone()).or_default() += 1;
                }
            }
        }
        for d in &ds.dialogues {
            let mut lists: Vec<&Vec<String>> = vec![&d.caption];
            for r in &d.rounds {
                lists.push(&r.question);
                lists.push(&r.answer);
                lists.extend(r.candidates.iter());
            }
            for l in lists {
                for t in l {
                    *freq.entry(t.clone()).or_default() += 1;
                }
            }
        }
        let (token, &count) = freq.iter().min_by_key(|(_, &c)| c).unwrap();
        let at_threshold = Vocabulary::build(&ds, count);
        assert!(!at_threshold.contains(token), "{token} ({count}) retained");

        // id assignment is stable
        let again = Vocabulary::build(&ds, 0);
        assert_eq!(all.tokens(), again.tokens());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let ds = generate_dataset(2, 4, 2, 8).unwrap();
        let vocab = Vocabulary::build(&ds, 0);
        assert_eq!(vocab.id("zzzgibberish"), UNK);
        assert_eq!(vocab.id("<unk>"), UNK);
        assert_eq!(vocab.token(START), "<s>");
        assert_eq!(vocab.token(END), "</s>");
    }

    #[test]
    fn save_load_round_trips() {
        let ds = generate_dataset(5, 6, 2, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_dataset(&path, &ds, None).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn missing_relevance_field_names_the_field() {
        let text = r#"{
            "schema": "dam-visdial/1",
            "images": [{"id": 0, "regions": [[0.0]], "captions": [["a"]]}],
            "dialogues": [{"image_id": 0, "caption": ["a"], "rounds": [
                {"question": ["q"], "answer": ["a"], "candidates": [["a"]], "gt_index": 0}
            ]}]
        }"#;
        let err = parse_dataset(text).unwrap_err();
        assert!(err.to_string().contains("relevance"), "{err}");
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let text = r#"{"schema": "dam-visdial/99", "images": [], "dialogues": []}"#;
        let err = parse_dataset(text).unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
    }

    #[test]
    fn round_instances_build_history_in_order() {
        let ds = generate_dataset(9, 3, 3, 8).unwrap();
        let vocab = Vocabulary::build(&ds, 0);
        let instances = round_instances(&ds, &vocab).unwrap();
        assert_eq!(instances.len(), 9);
        let third = instances.iter().find(|i| i.round == 2).unwrap();
        // caption + two earlier rounds
        assert_eq!(third.input.history.len(), 3);
        assert!(!third.target.is_empty());
    }
}
