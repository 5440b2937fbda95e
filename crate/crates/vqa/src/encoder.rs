//! Question side of the model: tokenization, vocabulary + embeddings, and the
//! LSTM that folds a token sequence into the summary state `s`.

use std::collections::{BTreeSet, HashMap};

use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::rng::{self, tag, SeedStream};
use crate::tensor::graph::{Activation, Graph, Var};
use crate::tensor::init::glorot_init;
use crate::tensor::store::ParamStore;
use crate::tensor::{Real, Tensor};

/// Questions are truncated to this many leading tokens.
pub const MAX_QUESTION_TOKENS: usize = 15;

/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: usize = 0;

pub const EMBEDDING_PARAM: &str = "embed.table";

/// Lowercase, strip everything outside `[a-z0-9']`, split on whitespace.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let lowered = text.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|ch| {
            if ch.is_ascii_lowercase() || ch.is_ascii_digit() || ch == '\'' || ch.is_whitespace() {
                ch
            } else {
                ' '
            }
        })
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    Ok(tokens)
}

/// Token ↔ id mapping plus the initial embedding table. The live table is a
/// trainable parameter (`embed.table`); the copy here is its t=0 value.
#[derive(Debug, Clone)]
pub struct QuestionVocab<T: Real> {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    pub embedding: Tensor<T>,
}

impl<T: Real> QuestionVocab<T> {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    /// Id of a token; unseen tokens fall back to UNK.
    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }
}

/// Vocabulary over all training tokens (sorted, ids from 1) plus UNK at 0,
/// with a Glorot-initialized `|vocab|×D` embedding table.
pub fn build_question_vocab<T: Real>(
    corpus: &[QuestionRecord],
    d: usize,
    seed: u64,
) -> Result<QuestionVocab<T>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build vocabulary from empty corpus".into(),
        ));
    }
    if d == 0 {
        return Err(Error::InvalidArgument(
            "embedding dimension must be positive".into(),
        ));
    }
    let mut tokens = BTreeSet::new();
    for record in corpus {
        // Unusable questions are filtered out upstream; skip them here too.
        if let Ok(toks) = tokenize(&record.text) {
            tokens.extend(toks);
        }
    }
    let mut id_to_token = vec!["<unk>".to_string()];
    id_to_token.extend(tokens);
    let token_to_id: HashMap<String, usize> = id_to_token
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let v = id_to_token.len();
    let embedding = glorot_init(
        &[v, d],
        v,
        d,
        rng::derive_seed(seed, &[tag::INIT, rng::hash_str(EMBEDDING_PARAM)]),
    )?;
    Ok(QuestionVocab {
        token_to_id,
        id_to_token,
        embedding,
    })
}

/// A tokenized question, capped at [`MAX_QUESTION_TOKENS`] ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    token_ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(mut token_ids: Vec<usize>, vocab_len: usize) -> Result<Self> {
        token_ids.truncate(MAX_QUESTION_TOKENS);
        if token_ids.is_empty() {
            return Err(Error::EmptyQuestion);
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab_len) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of bounds for vocabulary of {vocab_len}"
            )));
        }
        Ok(Self { token_ids })
    }

    pub fn from_text<T: Real>(text: &str, vocab: &QuestionVocab<T>) -> Result<Self> {
        let tokens = tokenize(text)?;
        let ids = tokens.iter().map(|t| vocab.id_of(t)).collect();
        Self::new(ids, vocab.len())
    }

    pub fn ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// LSTM layout: layer/direction weight shapes and parameter names. The
/// tensors themselves live in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmParams {
    pub input_size: usize,
    pub state_size: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
}

impl LstmParams {
    pub fn new(
        input_size: usize,
        state_size: usize,
        num_layers: usize,
        bidirectional: bool,
    ) -> Result<Self> {
        if input_size == 0 || state_size == 0 || num_layers == 0 {
            return Err(Error::InvalidArgument(
                "lstm sizes and layer count must be positive".into(),
            ));
        }
        Ok(Self {
            input_size,
            state_size,
            num_layers,
            bidirectional,
        })
    }

    fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Input width of a layer: embeddings at the bottom, concatenated
    /// direction outputs above.
    pub fn layer_input_size(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_size
        } else {
            self.state_size * self.directions()
        }
    }

    /// Width of the summary state `s`.
    pub fn output_size(&self) -> usize {
        self.state_size * self.directions()
    }

    pub fn weight_name(layer: usize, backward: bool) -> String {
        format!("lstm.l{layer}.{}.w", if backward { "bw" } else { "fw" })
    }

    pub fn bias_name(layer: usize, backward: bool) -> String {
        format!("lstm.l{layer}.{}.b", if backward { "bw" } else { "fw" })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in 0..self.num_layers {
            for backward in [false, true] {
                if backward && !self.bidirectional {
                    continue;
                }
                names.push(Self::weight_name(layer, backward));
                names.push(Self::bias_name(layer, backward));
            }
        }
        names
    }

    /// Create the gate parameters: weights Glorot, biases zero except the
    /// forget-gate segment, which starts at 1.0.
    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, master_seed: u64) -> Result<()> {
        let s = self.state_size;
        for layer in 0..self.num_layers {
            let in_size = self.layer_input_size(layer);
            for backward in [false, true] {
                if backward && !self.bidirectional {
                    continue;
                }
                let wname = Self::weight_name(layer, backward);
                let w = glorot_init(
                    &[in_size + s, 4 * s],
                    in_size + s,
                    4 * s,
                    rng::derive_seed(master_seed, &[tag::INIT, rng::hash_str(&wname)]),
                )?;
                store.insert(&wname, w)?;
                let mut bias = vec![T::zero(); 4 * s];
                for b in bias.iter_mut().take(2 * s).skip(s) {
                    *b = T::one();
                }
                store.insert(
                    &Self::bias_name(layer, backward),
                    Tensor::from_vec(vec![4 * s], bias)?,
                )?;
            }
        }
        Ok(())
    }
}

/// One LSTM cell update. Gate packing along the `4S` axis is `[i, f, g, o]`:
/// input, forget, candidate, output.
///
/// `e_t` is `[in]`, `h`/`c` are `[S]`, `w` is `[(in+S), 4S]`, `b` is `[4S]`.
pub fn lstm_step<T: Real>(
    g: &mut Graph<T>,
    e_t: Var,
    h: Var,
    c: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let s = g.shape(h)[0];
    if g.shape(c) != [s] {
        return Err(Error::InvalidShape(format!(
            "lstm state shapes differ: h {:?}, c {:?}",
            g.shape(h),
            g.shape(c)
        )));
    }
    let z = g.concat(&[e_t, h], 0)?;
    let gates = g.linear(z, w, b)?;
    if g.shape(gates) != [4 * s] {
        return Err(Error::InvalidShape(format!(
            "gate vector has shape {:?}, want [{}]",
            g.shape(gates),
            4 * s
        )));
    }
    let i_gate = g.narrow(gates, 0, 0, s)?;
    let i_gate = g.activation(i_gate, Activation::Sigmoid);
    let f_gate = g.narrow(gates, 0, s, s)?;
    let f_gate = g.activation(f_gate, Activation::Sigmoid);
    let g_cand = g.narrow(gates, 0, 2 * s, s)?;
    let g_cand = g.activation(g_cand, Activation::Tanh);
    let o_gate = g.narrow(gates, 0, 3 * s, s)?;
    let o_gate = g.activation(o_gate, Activation::Sigmoid);

    let fc = g.mul(f_gate, c)?;
    let ig = g.mul(i_gate, g_cand)?;
    let c_next = g.add(fc, ig)?;
    let c_tanh = g.activation(c_next, Activation::Tanh);
    let h_next = g.mul(o_gate, c_tanh)?;
    Ok((h_next, c_next))
}

/// Summary state plus the top layer's per-step hidden states.
pub struct EncoderOutput {
    pub s: Var,
    pub step_hiddens: Vec<Var>,
}

/// tanh-squashed embedding rows for a sequence: `[P, D]`.
pub fn encode_tokens_on<T: Real>(g: &mut Graph<T>, table: Var, seq: &TokenSequence) -> Result<Var> {
    let rows = g.gather_rows(table, seq.ids())?;
    Ok(g.activation(rows, Activation::Tanh))
}

/// Standalone [`encode_tokens_on`] for diagnostics/tests (no gradients).
pub fn encode_tokens<T: Real>(seq: &TokenSequence, vocab: &QuestionVocab<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let table = g.input(&vocab.embedding);
    let out = encode_tokens_on(&mut g, table, seq)?;
    Ok(g.tensor(out))
}

/// Unroll the (possibly stacked, possibly bidirectional) LSTM over exactly
/// `P` steps from zero state. Dropout hits each layer's input when training.
pub fn encode_question<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    seq: &TokenSequence,
    lstm: &LstmParams,
    dropout_rate: f64,
    training: bool,
    seeds: &mut SeedStream,
) -> Result<EncoderOutput> {
    let table = g.param(EMBEDDING_PARAM, store)?;
    let embedded = encode_tokens_on(g, table, seq)?;
    let p = seq.len();

    let mut layer_input = embedded; // [P, layer_input_size]
    let mut summary_parts: Vec<Var> = Vec::new();
    let mut top_steps: Vec<Var> = Vec::new();

    for layer in 0..lstm.num_layers {
        let dropped = g.dropout(layer_input, dropout_rate, training, seeds.next_seed())?;
        let in_size = lstm.layer_input_size(layer);
        if g.shape(dropped) != [p, in_size] {
            return Err(Error::InvalidShape(format!(
                "layer {layer} input has shape {:?}, want [{p}, {in_size}]",
                g.shape(dropped)
            )));
        }
        let steps: Vec<Var> = (0..p)
            .map(|t| {
                let row = g.narrow(dropped, 0, t, 1)?;
                g.reshape(row, vec![in_size])
            })
            .collect::<Result<_>>()?;

        let mut outputs_by_dir: Vec<Vec<Var>> = Vec::new();
        for backward in [false, true] {
            if backward && !lstm.bidirectional {
                continue;
            }
            let w = g.param(&LstmParams::weight_name(layer, backward), store)?;
            let b = g.param(&LstmParams::bias_name(layer, backward), store)?;
            let zero = Tensor::zeros(vec![lstm.state_size]);
            let mut h = g.input(&zero);
            let mut c = g.input(&zero);
            let mut outs = vec![h; p];
            let order: Vec<usize> = if backward {
                (0..p).rev().collect()
            } else {
                (0..p).collect()
            };
            for &t in &order {
                let (h2, c2) = lstm_step(g, steps[t], h, c, w, b)?;
                h = h2;
                c = c2;
                outs[t] = h;
            }
            if layer == lstm.num_layers - 1 {
                summary_parts.push(h);
            }
            outputs_by_dir.push(outs);
        }

        // Next layer consumes per-step outputs, directions concatenated.
        let mut rows: Vec<Var> = Vec::with_capacity(p);
        for t in 0..p {
            let per_dir: Vec<Var> = outputs_by_dir.iter().map(|outs| outs[t]).collect();
            let joined = if per_dir.len() == 1 {
                per_dir[0]
            } else {
                g.concat(&per_dir, 0)?
            };
            rows.push(g.reshape(joined, vec![1, lstm.output_size()])?);
        }
        if layer == lstm.num_layers - 1 {
            top_steps = rows
                .iter()
                .map(|&r| g.reshape(r, vec![lstm.output_size()]))
                .collect::<Result<_>>()?;
        }
        layer_input = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat(&rows, 0)?
        };
    }

    let s = if summary_parts.len() == 1 {
        summary_parts[0]
    } else {
        g.concat(&summary_parts, 0)?
    };
    Ok(EncoderOutput {
        s,
        step_hiddens: top_steps,
    })
}
