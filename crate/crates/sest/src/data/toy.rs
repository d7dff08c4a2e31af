//! Synthetic corpus generator whose answers are syntactically determined.
//!
//! Every example is a templated sentence set. The question is the target
//! sentence with the queried noun phrase replaced in place by a WHNP, so the
//! question's parse mirrors the target's; the answer is the replaced NP's
//! leaf span. Templates carry their own gold constituency and dependency
//! trees.
//!
//! Two of the queryable roles are constructed so their ancestor paths are
//! permutations of each other ((NP, PP, NP, VP, S) vs (NP, NP, PP, VP, S)):
//! order-preserving encodings can separate them, order-shuffled ones cannot.
//! Optional adjectives jitter token offsets so position counting is
//! unreliable, and distractor sentences reuse the answer noun in other roles
//! so surface overlap alone cannot locate the answer.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{AnswerRecord, ArcRecord, Corpus, QaExample, QaRecord, SentenceRecord, Span, TokenRecord};
use crate::util::mix_seed;

const NOUNS: [&str; 30] = [
    "architect", "engineer", "manager", "coordinator", "committee", "library", "garden",
    "report", "system", "teacher", "student", "doctor", "farmer", "painter", "lawyer",
    "editor", "planner", "builder", "designer", "analyst", "mayor", "clerk", "judge",
    "pilot", "nurse", "baker", "miner", "sailor", "tailor", "porter",
];
const TRANS_VERBS: [&str; 10] = [
    "supports", "manages", "inspects", "represents", "organizes", "monitors", "evaluates",
    "documents", "reviews", "approves",
];
const INTRANS_VERBS: [&str; 8] = [
    "sleeps", "waits", "arrives", "vanishes", "improves", "expands", "declines", "rests",
];
const ADJECTIVES: [&str; 8] = ["big", "old", "new", "busy", "quiet", "green", "formal", "rapid"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrammarConfig {
    pub n_examples: usize,
    pub seed: u64,
    /// How many nouns / transitive verbs of the base pools to use.
    pub n_nouns: usize,
    pub n_verbs: usize,
    /// Distractor sentences per context.
    pub distractors: usize,
}

impl Default for ToyGrammarConfig {
    fn default() -> Self {
        ToyGrammarConfig { n_examples: 1, seed: 0, n_nouns: 20, n_verbs: 8, distractors: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Subj,
    SubjNmod,
    Obj,
    Obl,
    ObjNmod,
    OblInner,
}

#[derive(Debug, Clone)]
struct NpSpec {
    adj: Option<&'static str>,
    noun: String,
}

impl NpSpec {
    fn surface(&self) -> String {
        match self.adj {
            Some(a) => format!("the {a} {}", self.noun),
            None => format!("the {}", self.noun),
        }
    }
}

/// Incrementally built sentence: tokens, dependency arcs, and role spans.
struct SentBuilder {
    tokens: Vec<TokenRecord>,
    arcs: Vec<ArcRecord>,
    spans: Vec<(Role, Span)>,
}

struct NpPart {
    head: usize,
    bracket: String,
    queried: bool,
}

impl SentBuilder {
    fn new() -> Self {
        SentBuilder { tokens: Vec::new(), arcs: Vec::new(), spans: Vec::new() }
    }

    fn word(&mut self, text: &str, pos: &str) -> usize {
        self.tokens.push(TokenRecord { text: text.to_string(), pos: pos.to_string() });
        self.tokens.len() - 1
    }

    fn arc(&mut self, head: i64, dep: usize, label: &str) {
        self.arcs.push(ArcRecord { head, dep, label: label.to_string() });
    }

    /// Push a simple NP ("the [adj] noun"), or the in-situ WHNP when this
    /// role is the one being asked about.
    fn np(&mut self, spec: &NpSpec, role: Role, queried: bool) -> NpPart {
        if queried {
            let what = self.word("what", "WP");
            return NpPart {
                head: what,
                bracket: "(WHNP (WP what))".to_string(),
                queried: true,
            };
        }
        let begin = self.tokens.len();
        let det = self.word("the", "DT");
        let adj = spec.adj.map(|a| self.word(a, "JJ"));
        let noun = self.word(&spec.noun, "NN");
        self.arc(noun as i64, det, "det");
        if let Some(a) = adj {
            self.arc(noun as i64, a, "amod");
        }
        let bracket = match spec.adj {
            Some(a) => format!("(NP (DT the) (JJ {a}) (NN {}))", spec.noun),
            None => format!("(NP (DT the) (NN {}))", spec.noun),
        };
        self.spans.push((role, Span { begin, end: noun }));
        NpPart { head: noun, bracket, queried: false }
    }

    fn finish(self, ctree: String) -> BuiltSentence {
        BuiltSentence {
            record: SentenceRecord { tokens: self.tokens, ctree, dtree: self.arcs },
            spans: self.spans,
        }
    }
}

struct BuiltSentence {
    record: SentenceRecord,
    spans: Vec<(Role, Span)>,
}

impl BuiltSentence {
    fn span_of(&self, role: Role) -> Span {
        self.spans
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, s)| *s)
            .expect("role present in template")
    }
}

/// "the N1 of the N2 V the N3 in the N4 ."
/// Ancestor paths: N1 (NP,NP,S), N2 (NP,PP,NP,S), N3 (NP,VP,S),
/// N4 (NP,PP,VP,S).
fn template_a(nps: &[NpSpec; 4], verb: &str, wh: Option<Role>, punct: &str) -> BuiltSentence {
    let mut b = SentBuilder::new();
    let subj = b.np(&nps[0], Role::Subj, wh == Some(Role::Subj));
    let of = b.word("of", "IN");
    let snm = b.np(&nps[1], Role::SubjNmod, wh == Some(Role::SubjNmod));
    let v = b.word(verb, "VBZ");
    let obj = b.np(&nps[2], Role::Obj, wh == Some(Role::Obj));
    let in_w = b.word("in", "IN");
    let obl = b.np(&nps[3], Role::Obl, wh == Some(Role::Obl));
    let p = b.word(punct, ".");

    b.arc(-1, v, "root");
    b.arc(v as i64, subj.head, "nsubj");
    b.arc(snm.head as i64, of, "case");
    b.arc(subj.head as i64, snm.head, "nmod");
    b.arc(v as i64, obj.head, "obj");
    b.arc(obl.head as i64, in_w, "case");
    b.arc(v as i64, obl.head, "obl");
    b.arc(v as i64, p, "punct");

    let ctree = format!(
        "(S (NP {} (PP (IN of) {})) (VP (VBZ {verb}) {} (PP (IN in) {})) (. {punct}))",
        subj.bracket, snm.bracket, obj.bracket, obl.bracket
    );
    let _ = (subj.queried, snm.queried, obj.queried, obl.queried);
    b.finish(ctree)
}

/// "the N1 V the N2 of the N3 near the N4 N5 ."
/// Ancestor paths: N3 (NP,PP,NP,VP,S) and N4 (NP,NP,PP,VP,S) are
/// permutations of one another.
fn template_b(nps: &[NpSpec; 4], n5: &str, verb: &str, wh: Option<Role>, punct: &str) -> BuiltSentence {
    let mut b = SentBuilder::new();
    let subj = b.np(&nps[0], Role::Subj, false);
    let v = b.word(verb, "VBZ");
    let obj = b.np(&nps[1], Role::Obj, false);
    let of = b.word("of", "IN");
    let onm = b.np(&nps[2], Role::ObjNmod, wh == Some(Role::ObjNmod));
    let near = b.word("near", "IN");
    let obl = b.np(&nps[3], Role::OblInner, wh == Some(Role::OblInner));
    let n5_idx = b.word(n5, "NN");
    let p = b.word(punct, ".");

    b.arc(-1, v, "root");
    b.arc(v as i64, subj.head, "nsubj");
    b.arc(v as i64, obj.head, "obj");
    b.arc(onm.head as i64, of, "case");
    b.arc(obj.head as i64, onm.head, "nmod");
    b.arc(n5_idx as i64, near, "case");
    b.arc(n5_idx as i64, obl.head, "compound");
    b.arc(v as i64, n5_idx, "obl");
    b.arc(v as i64, p, "punct");

    let ctree = format!(
        "(S {} (VP (VBZ {verb}) (NP {} (PP (IN of) {})) (PP (IN near) (NP {} (NN {n5})))) (. {punct}))",
        subj.bracket, obj.bracket, onm.bracket, obl.bracket
    );
    b.finish(ctree)
}

/// "the N Vi ." filler.
fn template_intrans(np: &NpSpec, verb: &str) -> BuiltSentence {
    let mut b = SentBuilder::new();
    let subj = b.np(np, Role::Subj, false);
    let v = b.word(verb, "VBZ");
    let p = b.word(".", ".");
    b.arc(-1, v, "root");
    b.arc(v as i64, subj.head, "nsubj");
    b.arc(v as i64, p, "punct");
    let ctree = format!("(S {} (VP (VBZ {verb})) (. .))", subj.bracket);
    b.finish(ctree)
}

/// "the N is ADJ ." filler.
fn template_copular(np: &NpSpec, adj: &str) -> BuiltSentence {
    let mut b = SentBuilder::new();
    let subj = b.np(np, Role::Subj, false);
    let is = b.word("is", "VBZ");
    let a = b.word(adj, "JJ");
    let p = b.word(".", ".");
    b.arc(-1, a, "root");
    b.arc(a as i64, subj.head, "nsubj");
    b.arc(a as i64, is, "cop");
    b.arc(a as i64, p, "punct");
    let ctree = format!("(S {} (VP (VBZ is) (ADJP (JJ {adj}))) (. .))", subj.bracket);
    b.finish(ctree)
}

const A_ROLES: [Role; 4] = [Role::Subj, Role::SubjNmod, Role::Obj, Role::Obl];
const B_ROLES: [Role; 2] = [Role::ObjNmod, Role::OblInner];

fn sample_np(rng: &mut ChaCha12Rng, nouns: &[&'static str], adj_prob: f64) -> NpSpec {
    let noun = (*nouns.choose(rng).expect("noun pool non-empty")).to_string();
    let adj = if rng.random_bool(adj_prob) {
        Some(*ADJECTIVES.choose(rng).expect("adjective pool"))
    } else {
        None
    };
    NpSpec { adj, noun }
}

fn gen_example(cfg: &ToyGrammarConfig, index: usize) -> QaRecord {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, &[0x746f79, index as u64]));
    let nouns = &NOUNS[..cfg.n_nouns.clamp(2, NOUNS.len())];
    let verbs = &TRANS_VERBS[..cfg.n_verbs.clamp(1, TRANS_VERBS.len())];

    let use_b = rng.random_bool(0.5);
    let verb = *verbs.choose(&mut rng).unwrap();
    let role = if use_b {
        *B_ROLES.choose(&mut rng).unwrap()
    } else {
        *A_ROLES.choose(&mut rng).unwrap()
    };

    // distinct head nouns within the target sentence
    let mut picked: Vec<&&str> = nouns.choose_multiple(&mut rng, 5).collect();
    picked.shuffle(&mut rng);
    let nps: [NpSpec; 4] = std::array::from_fn(|i| NpSpec {
        adj: if rng.random_bool(0.35) {
            Some(*ADJECTIVES.choose(&mut rng).unwrap())
        } else {
            None
        },
        noun: picked[i].to_string(),
    });
    let n5 = picked[4].to_string();

    let (target, question) = if use_b {
        (
            template_b(&nps, &n5, verb, None, "."),
            template_b(&nps, &n5, verb, Some(role), "?"),
        )
    } else {
        (
            template_a(&nps, verb, None, "."),
            template_a(&nps, verb, Some(role), "?"),
        )
    };
    let local_answer = target.span_of(role);
    let answer_np = match role {
        Role::Subj => &nps[0],
        Role::SubjNmod => &nps[1],
        Role::Obj => &nps[1 + usize::from(!use_b)],
        Role::ObjNmod => &nps[2],
        Role::Obl | Role::OblInner => &nps[3],
    };
    let answer_surface = answer_np.surface();

    // Distractors: one usually reuses the answer noun in another role, with a
    // different adjective arrangement so the surface strings differ.
    let mut distractor_sents = Vec::with_capacity(cfg.distractors);
    for d in 0..cfg.distractors {
        let np = if d == 0 && rng.random_bool(0.75) {
            let adj = if answer_np.adj.is_none() {
                Some(*ADJECTIVES.choose(&mut rng).unwrap())
            } else {
                None
            };
            NpSpec { adj, noun: answer_np.noun.clone() }
        } else {
            let mut np = sample_np(&mut rng, nouns, 0.35);
            let mut tries = 0;
            while np.surface() == answer_surface && tries < 8 {
                np = sample_np(&mut rng, nouns, 0.35);
                tries += 1;
            }
            if np.surface() == answer_surface {
                np.adj = Some(if np.adj == Some(ADJECTIVES[0]) {
                    ADJECTIVES[1]
                } else {
                    ADJECTIVES[0]
                });
            }
            np
        };
        let sent = if rng.random_bool(0.6) {
            let vi = *INTRANS_VERBS.choose(&mut rng).unwrap();
            template_intrans(&np, vi)
        } else {
            let adj = *ADJECTIVES.choose(&mut rng).unwrap();
            template_copular(&np, adj)
        };
        distractor_sents.push(sent);
    }

    // Place the target among the distractors and convert the local answer
    // span to global indices.
    let target_pos = rng.random_range(0..=cfg.distractors);
    let mut context = Vec::with_capacity(cfg.distractors + 1);
    let mut offset = 0usize;
    let mut answer = Span { begin: 0, end: 0 };
    let mut distractor_iter = distractor_sents.into_iter();
    for pos in 0..=cfg.distractors {
        let sent = if pos == target_pos {
            answer = Span {
                begin: local_answer.begin + offset,
                end: local_answer.end + offset,
            };
            target.record.clone()
        } else {
            distractor_iter.next().expect("enough distractors").record
        };
        offset += sent.tokens.len();
        context.push(sent);
    }

    QaRecord {
        id: format!("toy-{index}"),
        context,
        question: question.record,
        answer: AnswerRecord { begin: answer.begin, end: answer.end },
    }
}

/// Generate a deterministic synthetic corpus. Identical configs produce
/// identical corpora.
pub fn gen_toy_corpus(cfg: &ToyGrammarConfig) -> Corpus {
    assert!(cfg.n_examples >= 1, "n_examples must be >= 1");
    let examples: Vec<QaExample> = (0..cfg.n_examples)
        .map(|i| {
            QaExample::from_record(gen_example(cfg, i))
                .expect("generated records always validate")
        })
        .collect();
    Corpus::new(examples)
}
