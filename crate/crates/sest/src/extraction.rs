//! Windowed, order-controlled syntactic sequences extracted from parse trees:
//! constituency ancestor paths (SECT), dependency children (SEDT), and POS
//! singletons, with the punctuation filter, label normalization, and the
//! shuffled-order / random-node ablation modes.

use std::collections::BTreeSet;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebank::{ConstituencyTree, DependencyTree, Token, TreebankError};
use crate::util::mix_seed;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Tree(#[from] TreebankError),
    #[error("token {index} has an empty POS tag")]
    EmptyPos { index: usize },
    #[error("window size must be >= 1")]
    ZeroWindow,
}

/// Which view of the syntax a sequence was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqKind {
    Sect,
    Sedt,
    Pos,
}

impl SeqKind {
    pub fn name(&self) -> &'static str {
        match self {
            SeqKind::Sect => "sect",
            SeqKind::Sedt => "sedt",
            SeqKind::Pos => "pos",
        }
    }
}

/// Which syntactic view, if any, a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynMode {
    None,
    Pos,
    Sect,
    Sedt,
}

impl SynMode {
    pub fn seq_kind(&self) -> Option<SeqKind> {
        match self {
            SynMode::None => None,
            SynMode::Pos => Some(SeqKind::Pos),
            SynMode::Sect => Some(SeqKind::Sect),
            SynMode::Sedt => Some(SeqKind::Sedt),
        }
    }
}

impl std::fmt::Display for SynMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SynMode::None => "none",
            SynMode::Pos => "pos",
            SynMode::Sect => "sect",
            SynMode::Sedt => "sedt",
        };
        f.write_str(s)
    }
}

/// How the extracted node order is treated; the two non-identity modes are
/// the ablation conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderMode {
    Original,
    RandomOrder,
    RandomNodes,
}

/// One node of a syntactic sequence. `word_id` is present only for SEDT
/// elements, where each dependent is its word paired with a relation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqElement {
    pub label_id: usize,
    pub word_id: Option<usize>,
}

/// The per-token node sequence fed to a syntactic encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntacticSequence {
    pub kind: SeqKind,
    pub elements: Vec<SeqElement>,
}

impl SyntacticSequence {
    pub fn empty(kind: SeqKind) -> Self {
        SyntacticSequence { kind, elements: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// POS tags treated as punctuation when they open a sequence.
pub const DEFAULT_PUNCTUATION: [&str; 7] = ["$", ":", "#", ".", "''", "``", ","];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Maximum number of nodes kept per sequence.
    pub window: usize,
    pub order_mode: OrderMode,
    pub seed: u64,
    pub punctuation_set: BTreeSet<String>,
    pub strip_dep_subcategories: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            window: 10,
            order_mode: OrderMode::Original,
            seed: 0,
            punctuation_set: DEFAULT_PUNCTUATION.iter().map(|s| s.to_string()).collect(),
            strip_dep_subcategories: true,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.window == 0 {
            return Err(ExtractionError::ZeroWindow);
        }
        Ok(())
    }

    /// Copy of this config reseeded for one specific token, so that ablation
    /// draws are decorrelated across tokens while staying deterministic.
    pub fn for_token(&self, salts: &[u64]) -> ExtractionConfig {
        ExtractionConfig {
            seed: mix_seed(self.seed, salts),
            ..self.clone()
        }
    }
}

/// Label-string-to-dense-id vocabulary. Id 0 is reserved for UNK; after
/// freezing, unknown labels map to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVocab {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    frozen: bool,
}

pub const UNK_ID: usize = 0;

impl LabelVocab {
    pub fn new() -> Self {
        let mut v = LabelVocab {
            names: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        };
        v.push("<unk>".to_string());
        v
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    fn push(&mut self, name: String) -> usize {
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    /// Id for a label, growing the vocabulary unless frozen; frozen lookups
    /// of unknown labels yield `UNK_ID`.
    pub fn id_of(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        if self.frozen {
            UNK_ID
        } else {
            self.push(label.to_string())
        }
    }

    /// Lookup without growth.
    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name_of(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Vocabulary size including the UNK entry.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Default for LabelVocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Strip a dependency label's subcategory: everything from the first ':' on.
pub fn normalize_dep_label(label: &str) -> &str {
    match label.find(':') {
        Some(i) => &label[..i],
        None => label,
    }
}

/// Ancestor-path sequence for one token of a constituency tree, truncated to
/// the `window` nodes nearest the leaf. Tokens whose preterminal is a
/// punctuation tag yield an empty sequence.
pub fn extract_sect(
    tree: &ConstituencyTree,
    token_index: usize,
    cfg: &ExtractionConfig,
    vocab: &mut LabelVocab,
) -> Result<SyntacticSequence, ExtractionError> {
    cfg.validate()?;
    let preterminal = tree.preterminal_label(token_index)?;
    if cfg.punctuation_set.contains(preterminal) {
        return Ok(SyntacticSequence::empty(SeqKind::Sect));
    }
    let path = tree.path_to_root(token_index)?;
    let elements = path
        .iter()
        .take(cfg.window)
        .map(|label| SeqElement { label_id: vocab.id_of(label), word_id: None })
        .collect();
    let seq = SyntacticSequence { kind: SeqKind::Sect, elements };
    Ok(apply_ablation(seq, cfg.order_mode, cfg.seed, vocab.len()))
}

/// Dependent sequence for one token of a dependency tree: all dependents in
/// sentence order, reduced to the `window` nearest by token distance when
/// there are too many (distance ties break toward the earlier position).
pub fn extract_sedt(
    tree: &DependencyTree,
    token_index: usize,
    cfg: &ExtractionConfig,
    label_vocab: &mut LabelVocab,
    word_vocab: &mut LabelVocab,
) -> Result<SyntacticSequence, ExtractionError> {
    cfg.validate()?;
    let mut deps: Vec<(usize, String)> = tree
        .dependents_of(token_index)?
        .into_iter()
        .map(|(i, label)| {
            let label = if cfg.strip_dep_subcategories {
                normalize_dep_label(label).to_string()
            } else {
                label.to_string()
            };
            (i, label)
        })
        .collect();
    if deps.len() > cfg.window {
        deps.sort_by_key(|&(i, _)| (i.abs_diff(token_index), i));
        deps.truncate(cfg.window);
        deps.sort_by_key(|&(i, _)| i);
    }
    let elements = deps
        .into_iter()
        .map(|(i, label)| SeqElement {
            label_id: label_vocab.id_of(&label),
            word_id: Some(word_vocab.id_of(&tree.tokens()[i].text)),
        })
        .collect();
    let seq = SyntacticSequence { kind: SeqKind::Sedt, elements };
    Ok(apply_ablation(seq, cfg.order_mode, cfg.seed, label_vocab.len()))
}

/// Single-element sequence holding the token's POS tag.
pub fn extract_pos(
    token: &Token,
    vocab: &mut LabelVocab,
) -> Result<SyntacticSequence, ExtractionError> {
    if token.pos.is_empty() {
        return Err(ExtractionError::EmptyPos { index: token.index });
    }
    Ok(SyntacticSequence {
        kind: SeqKind::Pos,
        elements: vec![SeqElement { label_id: vocab.id_of(&token.pos), word_id: None }],
    })
}

/// Apply an ablation mode to a sequence. `RandomOrder` permutes the elements
/// with a generator seeded by `seed`; `RandomNodes` keeps the length but
/// redraws every label id uniformly from `[0, vocab_size)`.
pub fn apply_ablation(
    seq: SyntacticSequence,
    mode: OrderMode,
    seed: u64,
    vocab_size: usize,
) -> SyntacticSequence {
    match mode {
        OrderMode::Original => seq,
        OrderMode::RandomOrder => {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0x5348]));
            let mut elements = seq.elements;
            elements.shuffle(&mut rng);
            SyntacticSequence { kind: seq.kind, elements }
        }
        OrderMode::RandomNodes => {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0x524e]));
            let elements = seq
                .elements
                .iter()
                .map(|e| SeqElement {
                    label_id: rng.random_range(0..vocab_size),
                    word_id: e.word_id,
                })
                .collect();
            SyntacticSequence { kind: seq.kind, elements }
        }
    }
}

/// Fixed identification vector for a syntactic tag: a deterministic standard
/// normal sample keyed by (master_seed, label_id). The same key always yields
/// the same vector; these are never updated by training.
pub fn node_vector(label_id: usize, dim: usize, master_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(master_seed, &[label_id as u64]));
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{parse_constituency, parse_conllu};

    fn coordinator_tree() -> ConstituencyTree {
        parse_constituency(
            "(S (NP (DT the) (NN architect) (CC or) (NN engineer)) \
             (VP (VBZ acts) (PP (IN as) (NP (DT the) (NN project) (NN coordinator)))))",
        )
        .unwrap()
    }

    fn cfg(window: usize) -> ExtractionConfig {
        ExtractionConfig { window, ..ExtractionConfig::default() }
    }

    // Dependency fixture where token 4 ("unit"-like head) has five dependents
    // at varied distances: 0 far-left, 2, 3 adjacent-left, 6 right.
    fn dep_fixture() -> DependencyTree {
        let text = "1\tConference\t_\tPROPN\tNNP\t_\t5\tnsubj\t_\t_\n\
                    2\tis\t_\tAUX\tVBZ\t_\t5\tcop\t_\t_\n\
                    3\tthe\t_\tDET\tDT\t_\t5\tdet\t_\t_\n\
                    4\tbasic\t_\tADJ\tJJ\t_\t5\tamod\t_\t_\n\
                    5\tunit\t_\tNOUN\tNN\t_\t0\troot\t_\t_\n\
                    6\tof\t_\tADP\tIN\t_\t7\tcase\t_\t_\n\
                    7\torganization\t_\tNOUN\tNN\t_\t5\tnmod\t_\t_\n";
        parse_conllu(text).unwrap().into_iter().next().unwrap()
    }

    fn labels(seq: &SyntacticSequence, vocab: &LabelVocab) -> Vec<String> {
        seq.elements
            .iter()
            .map(|e| vocab.name_of(e.label_id).to_string())
            .collect()
    }

    #[test]
    fn sect_full_path_and_window() {
        let tree = coordinator_tree();
        let coordinator = 8;
        let mut vocab = LabelVocab::new();
        let seq = extract_sect(&tree, coordinator, &cfg(10), &mut vocab).unwrap();
        assert_eq!(labels(&seq, &vocab), ["NP", "PP", "VP", "S"]);

        let seq2 = extract_sect(&tree, coordinator, &cfg(2), &mut vocab).unwrap();
        assert_eq!(labels(&seq2, &vocab), ["NP", "PP"]);
    }

    #[test]
    fn sect_punctuation_filter() {
        let tree = parse_constituency("(S (NP (DT the) (NN dog)) (, ,) (VP (VBZ runs)))").unwrap();
        let mut vocab = LabelVocab::new();
        let seq = extract_sect(&tree, 2, &cfg(10), &mut vocab).unwrap();
        assert!(seq.is_empty());
        // Non-punctuation neighbors are unaffected.
        let seq2 = extract_sect(&tree, 1, &cfg(10), &mut vocab).unwrap();
        assert_eq!(labels(&seq2, &vocab), ["NP", "S"]);
    }

    #[test]
    fn sedt_orders_by_sentence_position() {
        let tree = dep_fixture();
        let mut lv = LabelVocab::new();
        let mut wv = LabelVocab::new();
        let seq = extract_sedt(&tree, 4, &cfg(20), &mut lv, &mut wv).unwrap();
        let words: Vec<&str> = seq
            .elements
            .iter()
            .map(|e| wv.name_of(e.word_id.unwrap()))
            .collect();
        assert_eq!(words, ["Conference", "is", "the", "basic", "organization"]);
        assert_eq!(labels(&seq, &lv), ["nsubj", "cop", "det", "amod", "nmod"]);
    }

    #[test]
    fn sedt_l_nearest_with_leftward_tie_break() {
        let tree = dep_fixture();
        let mut lv = LabelVocab::new();
        let mut wv = LabelVocab::new();
        // distances from "unit" (index 4): basic 1, the 2, organization 2,
        // is 3, Conference 4; window 2 keeps {basic, the} via the tie toward
        // the earlier position, output back in sentence order.
        let seq = extract_sedt(&tree, 4, &cfg(2), &mut lv, &mut wv).unwrap();
        let words: Vec<&str> = seq
            .elements
            .iter()
            .map(|e| wv.name_of(e.word_id.unwrap()))
            .collect();
        assert_eq!(words, ["the", "basic"]);
    }

    #[test]
    fn sedt_no_dependents() {
        let tree = dep_fixture();
        let mut lv = LabelVocab::new();
        let mut wv = LabelVocab::new();
        let seq = extract_sedt(&tree, 0, &cfg(20), &mut lv, &mut wv).unwrap();
        assert!(seq.is_empty());
    }

    #[test]
    fn sedt_strips_subcategories() {
        let text = "1\ther\t_\tPRON\tPRP$\t_\t2\tnmod:poss\t_\t_\n\
                    2\tdog\t_\tNOUN\tNN\t_\t0\troot\t_\t_\n";
        let tree = parse_conllu(text).unwrap().into_iter().next().unwrap();
        let mut lv = LabelVocab::new();
        let mut wv = LabelVocab::new();
        let seq = extract_sedt(&tree, 1, &cfg(20), &mut lv, &mut wv).unwrap();
        assert_eq!(labels(&seq, &lv), ["nmod"]);

        let raw = ExtractionConfig { strip_dep_subcategories: false, ..cfg(20) };
        let mut lv2 = LabelVocab::new();
        let seq2 = extract_sedt(&tree, 1, &raw, &mut lv2, &mut wv).unwrap();
        assert_eq!(labels(&seq2, &lv2), ["nmod:poss"]);
    }

    #[test]
    fn normalize_dep_label_rules() {
        assert_eq!(normalize_dep_label("nmod:poss"), "nmod");
        assert_eq!(normalize_dep_label("nsubj"), "nsubj");
        assert_eq!(normalize_dep_label("a:b:c"), "a");
    }

    #[test]
    fn pos_singleton() {
        let mut vocab = LabelVocab::new();
        let tok = Token { index: 0, text: "dog".into(), pos: "NN".into() };
        let seq = extract_pos(&tok, &mut vocab).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(labels(&seq, &vocab), ["NN"]);
        assert_eq!(seq.kind, SeqKind::Pos);

        let tok2 = Token { index: 1, text: "runs".into(), pos: "VBZ".into() };
        assert_eq!(labels(&extract_pos(&tok2, &mut vocab).unwrap(), &vocab), ["VBZ"]);

        let bad = Token { index: 2, text: "x".into(), pos: String::new() };
        assert!(matches!(
            extract_pos(&bad, &mut vocab),
            Err(ExtractionError::EmptyPos { index: 2 })
        ));
    }

    #[test]
    fn ablation_modes() {
        let mut vocab = LabelVocab::new();
        for l in ["NP", "PP", "VP", "S"] {
            vocab.id_of(l);
        }
        let seq = SyntacticSequence {
            kind: SeqKind::Sect,
            elements: (1..=4).map(|i| SeqElement { label_id: i, word_id: None }).collect(),
        };

        let same = apply_ablation(seq.clone(), OrderMode::Original, 3, vocab.len());
        assert_eq!(same, seq);

        let shuffled = apply_ablation(seq.clone(), OrderMode::RandomOrder, 3, vocab.len());
        let mut a: Vec<usize> = seq.elements.iter().map(|e| e.label_id).collect();
        let mut b: Vec<usize> = shuffled.elements.iter().map(|e| e.label_id).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);

        let random = apply_ablation(seq.clone(), OrderMode::RandomNodes, 3, vocab.len());
        assert_eq!(random.len(), seq.len());
        assert!(random.elements.iter().all(|e| e.label_id < vocab.len()));
    }

    #[test]
    fn ablation_is_deterministic() {
        let seq = SyntacticSequence {
            kind: SeqKind::Sect,
            elements: (0..6).map(|i| SeqElement { label_id: i, word_id: None }).collect(),
        };
        let a = apply_ablation(seq.clone(), OrderMode::RandomOrder, 42, 10);
        let b = apply_ablation(seq.clone(), OrderMode::RandomOrder, 42, 10);
        assert_eq!(a, b);
        let c = apply_ablation(seq.clone(), OrderMode::RandomNodes, 42, 10);
        let d = apply_ablation(seq, OrderMode::RandomNodes, 42, 10);
        assert_eq!(c, d);
    }

    #[test]
    fn node_vector_determinism_and_shape() {
        let a = node_vector(3, 8, 99);
        let b = node_vector(3, 8, 99);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let c = node_vector(4, 8, 99);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn vocab_freeze_maps_unknown_to_unk() {
        let mut v = LabelVocab::new();
        let np = v.id_of("NP");
        assert_eq!(np, 1);
        assert_eq!(v.id_of("NP"), 1);
        v.freeze();
        assert_eq!(v.id_of("ZZZ"), UNK_ID);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn sect_prefix_of_path_property() {
        let tree = coordinator_tree();
        let mut vocab = LabelVocab::new();
        for tok in tree.tokens() {
            for window in 1..=5 {
                let seq = extract_sect(&tree, tok.index, &cfg(window), &mut vocab).unwrap();
                assert!(seq.len() <= window);
                let path = tree.path_to_root(tok.index).unwrap();
                let seq_labels = labels(&seq, &vocab);
                assert_eq!(
                    seq_labels.as_slice(),
                    &path[..seq_labels.len()],
                    "window {window} output must be a prefix of the full path"
                );
            }
        }
    }
}
