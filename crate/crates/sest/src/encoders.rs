//! Sequence encoders: the bidirectional LSTM and max-pooled CNN that turn a
//! variable-length syntactic sequence into a fixed-length structural
//! embedding, plus the word/character embedding tables of the input layer.
//!
//! Encoders own no tensors; they are parameter-name views over a
//! [`ParamStore`], registered once and leased onto a [`Tape`] per forward
//! pass, so the same encoder can be shared read-only across threads.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::extraction::{node_vector, SeqKind, SyntacticSequence};

/// Bidirectional LSTM encoder. Gate matrices are shaped
/// (hidden_dim x (input_dim + hidden_dim)); biases have length hidden_dim,
/// with the forget gate bias initialized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmEncoder {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

const GATES: [&str; 4] = ["i", "f", "o", "c"];
const DIRS: [&str; 2] = ["fwd", "bwd"];

impl BiLstmEncoder {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        BiLstmEncoder { prefix: prefix.into(), input_dim, hidden_dim }
    }

    /// Output width of the concatenated final (or per-step) states.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn register(&self, store: &mut ParamStore) {
        let cols = self.input_dim + self.hidden_dim;
        for dir in DIRS {
            for gate in GATES {
                store.init_uniform(
                    &format!("{}.{dir}.w_{gate}", self.prefix),
                    &[self.hidden_dim, cols],
                    cols,
                    self.hidden_dim,
                );
                let bias = if gate == "f" { 1.0 } else { 0.0 };
                store.init_const(&format!("{}.{dir}.b_{gate}", self.prefix), self.hidden_dim, bias);
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for dir in DIRS {
            for gate in GATES {
                names.push(format!("{}.{dir}.w_{gate}", self.prefix));
                names.push(format!("{}.{dir}.b_{gate}", self.prefix));
            }
        }
        names
    }

    fn lease_dir(
        &self,
        tape: &Tape,
        store: &ParamStore,
        dir: &str,
    ) -> Result<[(Var, Var); 4], AutodiffError> {
        let mut out = Vec::with_capacity(4);
        for gate in GATES {
            let w = tape.param(store, &format!("{}.{dir}.w_{gate}", self.prefix))?;
            let b = tape.param(store, &format!("{}.{dir}.b_{gate}", self.prefix))?;
            out.push((w, b));
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    fn run_dir(
        &self,
        tape: &Tape,
        gates: &[(Var, Var); 4],
        xs: &[Var],
    ) -> Result<Vec<Var>, AutodiffError> {
        let mut h = tape.zeros(self.hidden_dim);
        let mut c = tape.zeros(self.hidden_dim);
        let mut states = Vec::with_capacity(xs.len());
        let [(wi, bi), (wf, bf), (wo, bo), (wc, bc)] = *gates;
        for &x in xs {
            let xh = tape.concat_rows(&[x, h])?;
            let i = tape.sigmoid(tape.add(tape.matmul(wi, xh)?, bi)?);
            let f = tape.sigmoid(tape.add(tape.matmul(wf, xh)?, bf)?);
            let o = tape.sigmoid(tape.add(tape.matmul(wo, xh)?, bo)?);
            let g = tape.tanh(tape.add(tape.matmul(wc, xh)?, bc)?);
            c = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
            h = tape.mul(o, tape.tanh(c))?;
            states.push(h);
        }
        Ok(states)
    }

    /// Final-state encoding: the concatenation [backward-final;
    /// forward-final]. An empty sequence yields the zero vector.
    pub fn encode_final(
        &self,
        tape: &Tape,
        store: &ParamStore,
        xs: &[Var],
    ) -> Result<Var, AutodiffError> {
        if xs.is_empty() {
            return Ok(tape.zeros(self.output_dim()));
        }
        let fwd_gates = self.lease_dir(tape, store, "fwd")?;
        let bwd_gates = self.lease_dir(tape, store, "bwd")?;
        let fwd = self.run_dir(tape, &fwd_gates, xs)?;
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let bwd = self.run_dir(tape, &bwd_gates, &rev)?;
        tape.concat_rows(&[*bwd.last().unwrap(), *fwd.last().unwrap()])
    }

    /// Per-position encoding: one [forward_t; backward_t] vector per input.
    pub fn encode_steps(
        &self,
        tape: &Tape,
        store: &ParamStore,
        xs: &[Var],
    ) -> Result<Vec<Var>, AutodiffError> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let fwd_gates = self.lease_dir(tape, store, "fwd")?;
        let bwd_gates = self.lease_dir(tape, store, "bwd")?;
        let fwd = self.run_dir(tape, &fwd_gates, xs)?;
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let mut bwd = self.run_dir(tape, &bwd_gates, &rev)?;
        bwd.reverse();
        fwd.iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat_rows(&[f, b]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Max-pooled convolutional encoder: filter j scores every length-l window
/// of the input and the per-filter maximum is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnEncoder {
    pub prefix: String,
    pub input_dim: usize,
    pub filter_len: usize,
    pub num_filters: usize,
    pub activation: Activation,
}

impl CnnEncoder {
    pub fn new(
        prefix: impl Into<String>,
        input_dim: usize,
        filter_len: usize,
        num_filters: usize,
    ) -> Self {
        CnnEncoder {
            prefix: prefix.into(),
            input_dim,
            filter_len,
            num_filters,
            activation: Activation::Relu,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.num_filters
    }

    pub fn register(&self, store: &mut ParamStore) {
        let width = self.filter_len * self.input_dim;
        store.init_uniform(
            &format!("{}.w", self.prefix),
            &[self.num_filters, width],
            width,
            self.num_filters,
        );
        // A bias of exactly zero would park the relu of all-zero padding
        // windows on its kink; keep the initialization slightly positive.
        store.init_const(&format!("{}.b", self.prefix), self.num_filters, 0.1);
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![format!("{}.w", self.prefix), format!("{}.b", self.prefix)]
    }

    /// Encode a non-empty sequence; inputs shorter than the filter are
    /// right-padded with zero vectors.
    pub fn encode(
        &self,
        tape: &Tape,
        store: &ParamStore,
        xs: &[Var],
    ) -> Result<Var, AutodiffError> {
        if xs.is_empty() {
            return Err(AutodiffError::Argument {
                op: "cnn_encode",
                message: "input sequence is empty".into(),
            });
        }
        let w = tape.param(store, &format!("{}.w", self.prefix))?;
        let b = tape.param(store, &format!("{}.b", self.prefix))?;

        let mut padded: Vec<Var> = xs.to_vec();
        while padded.len() < self.filter_len {
            padded.push(tape.zeros(self.input_dim));
        }
        let n_windows = padded.len() - self.filter_len + 1;
        let mut windows = Vec::with_capacity(n_windows);
        for i in 0..n_windows {
            windows.push(tape.concat_rows(&padded[i..i + self.filter_len])?);
        }
        // feature map: one row per filter, one column per window
        let stacked = tape.stack_cols(&windows)?;
        let scores = tape.matmul(w, stacked)?;
        let bias_cols = tape.stack_cols(&vec![b; n_windows])?;
        let biased = tape.add(scores, bias_cols)?;
        let activated = match self.activation {
            Activation::Relu => tape.relu(biased),
            Activation::Identity => biased,
        };
        tape.max_over_rows(activated)
    }
}

/// Word or character embedding table. Trainable tables live in the store;
/// fixed tables (pretrained word vectors) hold their matrix directly and
/// never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    fixed: Option<Tensor>,
}

impl EmbeddingTable {
    pub fn trainable(name: impl Into<String>, vocab_size: usize, dim: usize) -> Self {
        EmbeddingTable { name: name.into(), vocab_size, dim, fixed: None }
    }

    pub fn fixed(name: impl Into<String>, vocab_size: usize, dim: usize, matrix: Tensor) -> Self {
        assert_eq!(matrix.shape(), &[vocab_size, dim]);
        EmbeddingTable { name: name.into(), vocab_size, dim, fixed: Some(matrix) }
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed.is_some()
    }

    pub fn fixed_matrix(&self) -> Option<&Tensor> {
        self.fixed.as_ref()
    }

    pub fn register(&self, store: &mut ParamStore) {
        if self.fixed.is_none() {
            store.init_uniform(
                &self.name,
                &[self.vocab_size, self.dim],
                self.dim,
                self.dim,
            );
        }
    }

    pub fn lookup(&self, tape: &Tape, store: &ParamStore, id: usize) -> Result<Var, AutodiffError> {
        if id >= self.vocab_size {
            return Err(AutodiffError::Argument {
                op: "embedding_lookup",
                message: format!("id {id} out of range for table {:?} ({})", self.name, self.vocab_size),
            });
        }
        match &self.fixed {
            Some(matrix) => {
                let row = matrix.values()[id * self.dim..(id + 1) * self.dim].to_vec();
                Ok(tape.constant_vec(row))
            }
            None => tape.param_row(store, &self.name, id),
        }
    }
}

/// Character-CNN word embedder: characters map to trainable vectors, a CNN
/// scores windows of them, and max pooling yields one vector per word.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCnnEmbedder {
    pub table: EmbeddingTable,
    pub cnn: CnnEncoder,
    pub max_word_chars: usize,
}

impl CharCnnEmbedder {
    pub fn new(
        char_vocab_size: usize,
        char_dim: usize,
        num_filters: usize,
        filter_len: usize,
        max_word_chars: usize,
    ) -> Self {
        CharCnnEmbedder {
            table: EmbeddingTable::trainable("char_emb", char_vocab_size, char_dim),
            cnn: CnnEncoder::new("char_cnn", char_dim, filter_len, num_filters),
            max_word_chars,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.cnn.output_dim()
    }

    pub fn register(&self, store: &mut ParamStore) {
        self.table.register(store);
        self.cnn.register(store);
    }

    /// Embed a word given its character ids. Characters beyond
    /// `max_word_chars` are truncated; shorter words are zero-padded to the
    /// full width.
    pub fn embed(
        &self,
        tape: &Tape,
        store: &ParamStore,
        char_ids: &[usize],
    ) -> Result<Var, AutodiffError> {
        let mut xs = Vec::with_capacity(self.max_word_chars);
        for &id in char_ids.iter().take(self.max_word_chars) {
            xs.push(self.table.lookup(tape, store, id)?);
        }
        while xs.len() < self.max_word_chars {
            xs.push(tape.zeros(self.table.dim));
        }
        self.cnn.encode(tape, store, &xs)
    }
}

/// Either flavor of syntactic sequence encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum SynEncoder {
    Lstm(BiLstmEncoder),
    Cnn(CnnEncoder),
}

impl SynEncoder {
    pub fn output_dim(&self) -> usize {
        match self {
            SynEncoder::Lstm(e) => e.output_dim(),
            SynEncoder::Cnn(e) => e.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SynEncoder::Lstm(e) => e.input_dim,
            SynEncoder::Cnn(e) => e.input_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore) {
        match self {
            SynEncoder::Lstm(e) => e.register(store),
            SynEncoder::Cnn(e) => e.register(store),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            SynEncoder::Lstm(e) => e.param_names(),
            SynEncoder::Cnn(e) => e.param_names(),
        }
    }

    fn encode(&self, tape: &Tape, store: &ParamStore, xs: &[Var]) -> Result<Var, AutodiffError> {
        match self {
            SynEncoder::Lstm(e) => e.encode_final(tape, store, xs),
            SynEncoder::Cnn(e) => {
                if xs.is_empty() {
                    Ok(tape.zeros(e.output_dim()))
                } else {
                    e.encode(tape, store, xs)
                }
            }
        }
    }
}

/// Encode one token's syntactic sequence into its structural embedding.
///
/// SECT and POS elements enter as fixed tag vectors of width `node_dim`;
/// SEDT elements enter as [dependent word embedding; tag vector]. An empty
/// (e.g. punctuation-filtered) sequence yields the zero vector of the
/// encoder's output width.
pub fn encode_syntactic(
    tape: &Tape,
    store: &ParamStore,
    seq: &SyntacticSequence,
    enc: &SynEncoder,
    node_dim: usize,
    node_seed: u64,
    word_table: Option<&EmbeddingTable>,
) -> Result<Var, AutodiffError> {
    if seq.is_empty() {
        return Ok(tape.zeros(enc.output_dim()));
    }
    let mut xs = Vec::with_capacity(seq.len());
    for el in &seq.elements {
        let tag = tape.constant_vec(node_vector(el.label_id, node_dim, node_seed));
        let x = match seq.kind {
            SeqKind::Sect | SeqKind::Pos => tag,
            SeqKind::Sedt => {
                let word_id = el.word_id.ok_or_else(|| AutodiffError::Argument {
                    op: "encode_syntactic",
                    message: "SEDT element is missing its word id".into(),
                })?;
                let table = word_table.ok_or_else(|| AutodiffError::Argument {
                    op: "encode_syntactic",
                    message: "SEDT encoding requires a word table".into(),
                })?;
                let w = table.lookup(tape, store, word_id)?;
                tape.concat_rows(&[w, tag])?
            }
        };
        xs.push(x);
    }
    enc.encode(tape, store, &xs)
}

/// Full input-layer representation of one token: [word; char-CNN;
/// structural], where the structural part is supplied by the caller (absent
/// for a lexical-only model).
pub fn embed_word(
    tape: &Tape,
    store: &ParamStore,
    word_table: &EmbeddingTable,
    word_id: usize,
    char_embedder: &CharCnnEmbedder,
    char_ids: &[usize],
    syn: Option<Var>,
) -> Result<Var, AutodiffError> {
    let w = word_table.lookup(tape, store, word_id)?;
    let c = char_embedder.embed(tape, store, char_ids)?;
    match syn {
        Some(s) => tape.concat_rows(&[w, c, s]),
        None => tape.concat_rows(&[w, c]),
    }
}

/// Read pretrained word vectors in the usual text format: one
/// "word v1 v2 ... vD" record per line, UTF-8.
pub fn load_word_vectors(
    path: &Path,
    dim: usize,
) -> Result<Vec<(String, Vec<f64>)>, std::io::Error> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts
            .next()
            .ok_or_else(|| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: empty record", lineno + 1),
                )
            })?
            .to_string();
        let values: Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let values = values.map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: {e}", lineno + 1),
            )
        })?;
        if values.len() != dim {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: expected {dim} values, found {}", lineno + 1, values.len()),
            ));
        }
        out.push((word, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::extraction::SeqElement;

    fn zero_out(store: &mut ParamStore, names: &[String]) {
        for name in names {
            let p = store.get_mut(name).unwrap();
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn bilstm_zero_params_give_zero_output() {
        let enc = BiLstmEncoder::new("enc", 3, 4);
        let mut store = ParamStore::new(1);
        enc.register(&mut store);
        zero_out(&mut store, &enc.param_names());
        let tape = Tape::new();
        let xs = vec![
            tape.constant_vec(vec![1.0, -2.0, 0.5]),
            tape.constant_vec(vec![0.3, 0.1, -0.9]),
        ];
        let out = enc.encode_final(&tape, &store, &xs).unwrap();
        assert_eq!(tape.values(out), vec![0.0; 8]);
    }

    #[test]
    fn bilstm_empty_sequence_is_zero_vector() {
        let enc = BiLstmEncoder::new("enc", 3, 5);
        let mut store = ParamStore::new(1);
        enc.register(&mut store);
        let tape = Tape::new();
        let out = enc.encode_final(&tape, &store, &[]).unwrap();
        assert_eq!(tape.values(out), vec![0.0; 10]);
    }

    #[test]
    fn bilstm_single_step_matches_hand_computation() {
        // hidden 1, input 1, hand-set weights; one step from zero state:
        //   i = sigmoid(0.5x + 0.1), f irrelevant (c0 = 0), o = sigmoid(-0.3x),
        //   g = tanh(2x), c = i*g, h = o*tanh(c)
        let enc = BiLstmEncoder::new("enc", 1, 1);
        let mut store = ParamStore::new(1);
        enc.register(&mut store);
        for dir in ["fwd", "bwd"] {
            let set = |store: &mut ParamStore, name: String, vals: &[f64]| {
                store
                    .get_mut(&name)
                    .unwrap()
                    .tensor
                    .values_mut()
                    .copy_from_slice(vals);
            };
            set(&mut store, format!("enc.{dir}.w_i"), &[0.5, 0.0]);
            set(&mut store, format!("enc.{dir}.b_i"), &[0.1]);
            set(&mut store, format!("enc.{dir}.w_f"), &[0.7, 0.0]);
            set(&mut store, format!("enc.{dir}.b_f"), &[1.0]);
            set(&mut store, format!("enc.{dir}.w_o"), &[-0.3, 0.0]);
            set(&mut store, format!("enc.{dir}.b_o"), &[0.0]);
            set(&mut store, format!("enc.{dir}.w_c"), &[2.0, 0.0]);
            set(&mut store, format!("enc.{dir}.b_c"), &[0.0]);
        }
        let x = 0.8;
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sigmoid(0.5 * x + 0.1);
        let o = sigmoid(-0.3 * x);
        let g = (2.0 * x).tanh();
        let h = o * (i * g).tanh();

        let tape = Tape::new();
        let out = enc
            .encode_final(&tape, &store, &[tape.constant_vec(vec![x])])
            .unwrap();
        let vals = tape.values(out);
        // single step: both directions see the same input
        assert!((vals[0] - h).abs() < 1e-12);
        assert!((vals[1] - h).abs() < 1e-12);
    }

    #[test]
    fn bilstm_wrong_input_dim_is_shape_error() {
        let enc = BiLstmEncoder::new("enc", 3, 2);
        let mut store = ParamStore::new(1);
        enc.register(&mut store);
        let tape = Tape::new();
        let xs = vec![tape.constant_vec(vec![1.0, 2.0])]; // dim 2, not 3
        assert!(enc.encode_final(&tape, &store, &xs).is_err());
    }

    #[test]
    fn cnn_single_filter_max_by_hand() {
        let mut enc = CnnEncoder::new("cnn", 1, 1, 1);
        enc.activation = Activation::Identity;
        let mut store = ParamStore::new(1);
        enc.register(&mut store);
        store.get_mut("cnn.w").unwrap().tensor.values_mut()[0] = 1.0;
        store.get_mut("cnn.b").unwrap().tensor.values_mut()[0] = 0.0;
        let tape = Tape::new();
        let xs = vec![
            tape.constant_vec(vec![2.0]),
            tape.constant_vec(vec![5.0]),
            tape.constant_vec(vec![3.0]),
        ];
        let out = enc.encode(&tape, &store, &xs).unwrap();
        assert_eq!(tape.values(out), vec![5.0]);
    }

    #[test]
    fn cnn_relu_zero_everything_is_zero() {
        let enc = CnnEncoder::new("cnn", 2, 2, 3);
        let mut store = ParamStore::new(1);
        enc.register(&mut store);
        zero_out(&mut store, &enc.param_names());
        let tape = Tape::new();
        let xs = vec![tape.zeros(2), tape.zeros(2), tape.zeros(2)];
        let out = enc.encode(&tape, &store, &xs).unwrap();
        assert_eq!(tape.values(out), vec![0.0; 3]);
    }

    #[test]
    fn cnn_short_sequence_is_padded_and_finite() {
        let enc = CnnEncoder::new("cnn", 2, 4, 3);
        let mut store = ParamStore::new(1);
        enc.register(&mut store);
        let tape = Tape::new();
        let xs = vec![tape.constant_vec(vec![0.7, -0.2])];
        let out = enc.encode(&tape, &store, &xs).unwrap();
        let vals = tape.values(out);
        assert_eq!(vals.len(), 3);
        assert!(vals.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cnn_zero_padding_invariance_with_zero_bias() {
        // With relu and b = 0, a window of zero vectors scores relu(0) = 0,
        // which cannot beat an existing nonnegative max.
        let enc = CnnEncoder::new("cnn", 2, 2, 4);
        let mut store = ParamStore::new(3);
        enc.register(&mut store);
        store
            .get_mut("cnn.b")
            .unwrap()
            .tensor
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let xs = vec![
            tape.constant_vec(vec![0.7, -0.2]),
            tape.constant_vec(vec![-0.4, 1.1]),
            tape.constant_vec(vec![0.2, 0.9]),
        ];
        let base = enc.encode(&tape, &store, &xs).unwrap();
        let mut extended = xs.clone();
        extended.push(tape.zeros(2));
        extended.push(tape.zeros(2));
        let padded = enc.encode(&tape, &store, &extended).unwrap();
        assert_eq!(tape.values(base), tape.values(padded));
    }

    fn sect_seq(ids: &[usize]) -> SyntacticSequence {
        SyntacticSequence {
            kind: SeqKind::Sect,
            elements: ids.iter().map(|&label_id| SeqElement { label_id, word_id: None }).collect(),
        }
    }

    #[test]
    fn encode_syntactic_dims_per_mode() {
        let mut store = ParamStore::new(5);
        let lstm = SynEncoder::Lstm(BiLstmEncoder::new("syn", 8, 30));
        lstm.register(&mut store);
        let cnn = SynEncoder::Cnn(CnnEncoder::new("syn_cnn", 8, 3, 30));
        cnn.register(&mut store);

        let tape = Tape::new();
        let seq = sect_seq(&[1, 2, 3]);
        let via_lstm = encode_syntactic(&tape, &store, &seq, &lstm, 8, 17, None).unwrap();
        assert_eq!(tape.values(via_lstm).len(), 60);
        let via_cnn = encode_syntactic(&tape, &store, &seq, &cnn, 8, 17, None).unwrap();
        assert_eq!(tape.values(via_cnn).len(), 30);

        let empty = SyntacticSequence::empty(SeqKind::Sect);
        let z = encode_syntactic(&tape, &store, &empty, &lstm, 8, 17, None).unwrap();
        assert_eq!(tape.values(z), vec![0.0; 60]);

        // ablated sequences encode to the same width as originals
        let shuffled = crate::extraction::apply_ablation(
            seq.clone(),
            crate::extraction::OrderMode::RandomNodes,
            9,
            5,
        );
        let via_ablated = encode_syntactic(&tape, &store, &shuffled, &lstm, 8, 17, None).unwrap();
        assert_eq!(tape.values(via_ablated).len(), tape.values(via_lstm).len());
    }

    #[test]
    fn encode_syntactic_sedt_concatenates_word_and_tag() {
        let mut store = ParamStore::new(5);
        // 100-dim word + 8-dim tag = 108-dim encoder input
        let enc = SynEncoder::Lstm(BiLstmEncoder::new("syn", 108, 30));
        enc.register(&mut store);
        let table = EmbeddingTable::trainable("word_emb", 10, 100);
        table.register(&mut store);

        let seq = SyntacticSequence {
            kind: SeqKind::Sedt,
            elements: vec![
                SeqElement { label_id: 1, word_id: Some(3) },
                SeqElement { label_id: 2, word_id: Some(7) },
            ],
        };
        let tape = Tape::new();
        let out = encode_syntactic(&tape, &store, &seq, &enc, 8, 17, Some(&table)).unwrap();
        assert_eq!(tape.values(out).len(), 60);

        // a mismatched encoder input width is a shape error
        let bad = SynEncoder::Lstm(BiLstmEncoder::new("syn", 108, 30));
        let out2 = encode_syntactic(&tape, &store, &seq, &bad, 9, 17, Some(&table));
        assert!(out2.is_err());
    }

    #[test]
    fn embed_word_dims_and_unk() {
        let mut store = ParamStore::new(5);
        let words = EmbeddingTable::trainable("word_emb", 4, 100);
        words.register(&mut store);
        let chars = CharCnnEmbedder::new(6, 8, 100, 5, 16);
        chars.register(&mut store);
        let syn_enc = SynEncoder::Lstm(BiLstmEncoder::new("syn", 8, 30));
        syn_enc.register(&mut store);

        let tape = Tape::new();
        // no structural part: 100 + 100
        let plain = embed_word(&tape, &store, &words, 1, &chars, &[1, 2, 3], None).unwrap();
        assert_eq!(tape.values(plain).len(), 200);

        // with a SECT-LSTM structural embedding: 100 + 100 + 60
        let syn =
            encode_syntactic(&tape, &store, &sect_seq(&[1, 2]), &syn_enc, 8, 17, None).unwrap();
        let full = embed_word(&tape, &store, &words, 1, &chars, &[1, 2, 3], Some(syn)).unwrap();
        assert_eq!(tape.values(full).len(), 260);

        // UNK row (id 0) produces a finite vector like any other
        let unk = embed_word(&tape, &store, &words, 0, &chars, &[0, 0], None).unwrap();
        assert!(tape.values(unk).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fixed_table_rows_receive_no_gradient() {
        let matrix = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let table = EmbeddingTable::fixed("glove", 3, 2, matrix);
        let mut store = ParamStore::new(0);
        table.register(&mut store);
        assert!(store.is_empty());
        let tape = Tape::new();
        let row = table.lookup(&tape, &store, 1).unwrap();
        assert_eq!(tape.values(row), vec![3.0, 4.0]);
    }

    #[test]
    fn bilstm_gradients_pass_grad_check() {
        let enc = BiLstmEncoder::new("enc", 2, 3);
        let mut store = ParamStore::new(11);
        enc.register(&mut store);
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let xs = vec![
                tape.constant_vec(vec![0.4, -0.7]),
                tape.constant_vec(vec![1.2, 0.3]),
                tape.constant_vec(vec![-0.5, 0.8]),
            ];
            let out = enc.encode_final(tape, store, &xs)?;
            let w = tape.constant_vec(vec![1.0, -0.6, 0.3, 0.9, -1.2, 0.2]);
            Ok(tape.sum(tape.mul(out, w)?))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn cnn_gradients_pass_grad_check() {
        let enc = CnnEncoder::new("cnn", 2, 2, 4);
        let mut store = ParamStore::new(13);
        enc.register(&mut store);
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let xs = vec![
                tape.constant_vec(vec![0.4, -0.7]),
                tape.constant_vec(vec![1.2, 0.3]),
                tape.constant_vec(vec![-0.5, 0.8]),
            ];
            let out = enc.encode(tape, store, &xs)?;
            let w = tape.constant_vec(vec![1.0, -0.6, 0.3, 0.9]);
            Ok(tape.sum(tape.mul(out, w)?))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn load_word_vectors_format() {
        let dir = std::env::temp_dir().join("sest_glove_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vectors.txt");
        std::fs::write(&path, "dog 0.1 0.2 0.3\ncat -1.0 0.5 2.5\n").unwrap();
        let vecs = load_word_vectors(&path, 3).unwrap();
        assert_eq!(vecs.len(), 2);
        assert_eq!(vecs[0].0, "dog");
        assert_eq!(vecs[1].1, vec![-1.0, 0.5, 2.5]);
        assert!(load_word_vectors(&path, 4).is_err());
    }
}
