//! Bidirectional attention flow: context-to-question and question-to-context
//! attention over the contextual embeddings, fused into a question-aware
//! context representation and run through a two-layer modeling stack.

use crate::autodiff::{AutodiffError, ParamStore, Tape, Var};
use crate::encoders::BiLstmEncoder;

/// Trainable pieces of the attention and modeling layers for contextual
/// width d: the similarity weight vector (length 3d) and a two-layer
/// bidirectional modeling stack mapping 4d-wide fused columns back to width d.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d: usize,
    pub similarity_name: String,
    pub modeling1: BiLstmEncoder,
    pub modeling2: BiLstmEncoder,
}

impl AttentionParams {
    pub fn new(prefix: &str, d: usize) -> Self {
        assert!(d >= 2 && d % 2 == 0, "contextual dim must be even and >= 2");
        AttentionParams {
            d,
            similarity_name: format!("{prefix}.w_s"),
            modeling1: BiLstmEncoder::new(format!("{prefix}.modeling1"), 4 * d, d / 2),
            modeling2: BiLstmEncoder::new(format!("{prefix}.modeling2"), d, d / 2),
        }
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.init_uniform(&self.similarity_name, &[3 * self.d], 3 * self.d, 1);
        self.modeling1.register(store);
        self.modeling2.register(store);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.similarity_name.clone()];
        names.extend(self.modeling1.param_names());
        names.extend(self.modeling2.param_names());
        names
    }
}

/// Similarity matrix S (T x J): S_tj = w_s . [h_t; u_j; h_t o u_j] for
/// context columns h_t and question columns u_j.
pub fn similarity(
    tape: &Tape,
    context: &[Var],
    question: &[Var],
    w_s: Var,
) -> Result<Var, AutodiffError> {
    if context.is_empty() || question.is_empty() {
        return Err(AutodiffError::Argument {
            op: "similarity",
            message: "context and question must be non-empty".into(),
        });
    }
    let mut rows = Vec::with_capacity(context.len());
    for &h in context {
        let mut row = Vec::with_capacity(question.len());
        for &u in question {
            let hu = tape.mul(h, u)?;
            let cat = tape.concat_rows(&[h, u, hu])?;
            row.push(tape.sum(tape.mul(w_s, cat)?));
        }
        rows.push(tape.concat_rows(&row)?);
    }
    tape.stack_rows(&rows)
}

/// Context-to-question attention: each context position takes a softmax over
/// its similarity row and returns the attention-weighted sum of question
/// vectors. Output columns align with context positions.
pub fn context_to_question(
    tape: &Tape,
    similarity: Var,
    question: &[Var],
) -> Result<Vec<Var>, AutodiffError> {
    if question.is_empty() {
        return Err(AutodiffError::Argument {
            op: "context_to_question",
            message: "question is empty".into(),
        });
    }
    let u = tape.stack_cols(question)?;
    let t_len = match tape.shape(similarity) {
        crate::autodiff::Shape::Matrix(t, _) => t,
        s => {
            return Err(AutodiffError::Argument {
                op: "context_to_question",
                message: format!("similarity must be a matrix, found {:?}", s.dims()),
            })
        }
    };
    let mut attended = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let weights = tape.softmax_vec(tape.pick_row(similarity, t)?)?;
        attended.push(tape.matmul(u, weights)?);
    }
    Ok(attended)
}

/// Question-to-context attention: per-context-word maxima over question
/// words, softmaxed over positions, then used to pool the context vectors
/// into a single summary.
pub fn question_to_context(
    tape: &Tape,
    similarity: Var,
    context: &[Var],
) -> Result<Var, AutodiffError> {
    if context.is_empty() {
        return Err(AutodiffError::Argument {
            op: "question_to_context",
            message: "context is empty".into(),
        });
    }
    let h = tape.stack_cols(context)?;
    let maxima = tape.max_over_rows(similarity)?;
    let weights = tape.softmax_vec(maxima)?;
    tape.matmul(h, weights)
}

/// Fuse the three views of each context position:
/// g_t = [h_t; h~_t; h_t o h~_t; h_t o h^].
pub fn fuse(
    tape: &Tape,
    context: &[Var],
    attended: &[Var],
    summary: Var,
) -> Result<Vec<Var>, AutodiffError> {
    if context.len() != attended.len() {
        return Err(AutodiffError::Argument {
            op: "fuse",
            message: format!(
                "context has {} positions but attended has {}",
                context.len(),
                attended.len()
            ),
        });
    }
    context
        .iter()
        .zip(attended)
        .map(|(&h, &a)| {
            let ha = tape.mul(h, a)?;
            let hs = tape.mul(h, summary)?;
            tape.concat_rows(&[h, a, ha, hs])
        })
        .collect()
}

/// Run the fused columns through the stacked two-layer bidirectional
/// modeling encoder; one output column per context position, width d.
pub fn model_encode(
    tape: &Tape,
    store: &ParamStore,
    params: &AttentionParams,
    fused: &[Var],
) -> Result<Vec<Var>, AutodiffError> {
    let layer1 = params.modeling1.encode_steps(tape, store, fused)?;
    params.modeling2.encode_steps(tape, store, &layer1)
}

/// All attention outputs for one example: fused columns G, modeled columns M.
pub struct AttentionOutput {
    pub fused: Vec<Var>,
    pub modeled: Vec<Var>,
}

/// Full attention layer: similarity, both attention directions, fusion, and
/// the modeling stack.
pub fn attend(
    tape: &Tape,
    store: &ParamStore,
    params: &AttentionParams,
    context: &[Var],
    question: &[Var],
) -> Result<AttentionOutput, AutodiffError> {
    let w_s = tape.param(store, &params.similarity_name)?;
    let s = similarity(tape, context, question, w_s)?;
    let attended = context_to_question(tape, s, question)?;
    let summary = question_to_context(tape, s, context)?;
    let fused = fuse(tape, context, &attended, summary)?;
    let modeled = model_encode(tape, store, params, &fused)?;
    Ok(AttentionOutput { fused, modeled })
}
