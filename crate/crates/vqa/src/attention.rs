//! Stacked soft attention over spatial locations.
//!
//! Each glimpse c scores every location with a two-layer 1×1 convolution
//! (realized as a per-location linear map), normalizes scores with a softmax
//! over locations, and averages the feature vectors under those weights. The
//! first layer is shared across glimpses; the second layer has one output
//! column per glimpse.

use crate::error::{Error, Result};
use crate::rng::{self, tag, SeedStream};
use crate::tensor::graph::{Activation, Graph, Var};
use crate::tensor::init::glorot_init;
use crate::tensor::store::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CONV1_WEIGHT: &str = "attn.conv1.w";
pub const CONV1_BIAS: &str = "attn.conv1.b";
pub const CONV2_WEIGHT: &str = "attn.conv2.w";
pub const CONV2_BIAS: &str = "attn.conv2.b";

/// Shapes of the two attention layers; tensors live in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub feature_depth: usize,
    pub state_size: usize,
    pub hidden_size: usize,
    pub glimpses: usize,
}

impl AttentionParams {
    pub fn new(
        feature_depth: usize,
        state_size: usize,
        hidden_size: usize,
        glimpses: usize,
    ) -> Result<Self> {
        if feature_depth == 0 || state_size == 0 || hidden_size == 0 || glimpses == 0 {
            return Err(Error::InvalidArgument(
                "attention sizes and glimpse count must be positive".into(),
            ));
        }
        Ok(Self {
            feature_depth,
            state_size,
            hidden_size,
            glimpses,
        })
    }

    /// Analytic parameter count: shared first layer plus per-glimpse columns.
    pub fn param_count(&self) -> usize {
        let input = self.feature_depth + self.state_size;
        input * self.hidden_size
            + self.hidden_size
            + self.hidden_size * self.glimpses
            + self.glimpses
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, master_seed: u64) -> Result<()> {
        let input = self.feature_depth + self.state_size;
        let seed_for =
            |name: &str| rng::derive_seed(master_seed, &[tag::INIT, rng::hash_str(name)]);
        store.insert(
            CONV1_WEIGHT,
            glorot_init(
                &[input, self.hidden_size],
                input,
                self.hidden_size,
                seed_for(CONV1_WEIGHT),
            )?,
        )?;
        store.insert(CONV1_BIAS, Tensor::zeros(vec![self.hidden_size]))?;
        store.insert(
            CONV2_WEIGHT,
            glorot_init(
                &[self.hidden_size, self.glimpses],
                self.hidden_size,
                self.glimpses,
                seed_for(CONV2_WEIGHT),
            )?,
        )?;
        store.insert(CONV2_BIAS, Tensor::zeros(vec![self.glimpses]))?;
        Ok(())
    }
}

/// Attention outputs on the graph: weights `α` (`L×C`), the glimpse matrix
/// (`C×depth`), and the concatenated glimpse vector (`C·depth`).
pub struct AttentionResult {
    pub weights: Var,
    pub glimpse_matrix: Var,
    pub x: Var,
}

/// Per-location scores: `logit[l,c] = conv2(relu(conv1([φ_l ; s])))_c`. The
/// 1×1 convolutions are the same linear map applied at every location.
#[allow(clippy::too_many_arguments)]
pub fn attention_logits<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    s: Var,
    locations: Var,
    params: &AttentionParams,
    dropout_rate: f64,
    training: bool,
    seeds: &mut SeedStream,
) -> Result<Var> {
    let ls = g.shape(locations).to_vec();
    if ls.len() != 2 || ls[1] != params.feature_depth {
        return Err(Error::InvalidShape(format!(
            "feature locations have shape {ls:?}, want [L, {}]",
            params.feature_depth
        )));
    }
    if g.shape(s) != [params.state_size] {
        return Err(Error::InvalidShape(format!(
            "state has shape {:?}, want [{}]",
            g.shape(s),
            params.state_size
        )));
    }
    let l = ls[0];
    let tiled = g.repeat_rows(s, l)?;
    let joined = g.concat(&[locations, tiled], 1)?;
    let joined = g.dropout(joined, dropout_rate, training, seeds.next_seed())?;
    let w1 = g.param(CONV1_WEIGHT, store)?;
    let b1 = g.param(CONV1_BIAS, store)?;
    let hidden = g.linear(joined, w1, b1)?;
    let hidden = g.activation(hidden, Activation::Relu);
    let hidden = g.dropout(hidden, dropout_rate, training, seeds.next_seed())?;
    let w2 = g.param(CONV2_WEIGHT, store)?;
    let b2 = g.param(CONV2_BIAS, store)?;
    g.linear(hidden, w2, b2)
}

/// Softmax over the spatial axis, independently per glimpse column.
pub fn attention_weights<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    g.softmax(logits, 0)
}

/// Each glimpse is the α-weighted sum of location features; glimpses
/// are concatenated in order c = 1..C.
pub fn compute_glimpses<T: Real>(
    g: &mut Graph<T>,
    weights: Var,
    locations: Var,
) -> Result<AttentionResult> {
    let glimpse_matrix = g.matmul_tn(weights, locations)?;
    let shape = g.shape(glimpse_matrix).to_vec();
    let x = g.reshape(glimpse_matrix, vec![shape[0] * shape[1]])?;
    Ok(AttentionResult {
        weights,
        glimpse_matrix,
        x,
    })
}

/// Logits → weights → glimpses.
#[allow(clippy::too_many_arguments)]
pub fn forward_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    s: Var,
    locations: Var,
    params: &AttentionParams,
    dropout_rate: f64,
    training: bool,
    seeds: &mut SeedStream,
) -> Result<AttentionResult> {
    let logits = attention_logits(
        g,
        store,
        s,
        locations,
        params,
        dropout_rate,
        training,
        seeds,
    )?;
    let weights = attention_weights(g, logits)?;
    compute_glimpses(g, weights, locations)
}
