//! Answer classifier: glimpses + question state → distribution over the M
//! most frequent answers, plus the training losses.

use crate::error::{Error, Result};
use crate::evaluator::AnswerVocabulary;
use crate::rng::{self, tag, SeedStream};
use crate::tensor::graph::{Activation, Graph, Var};
use crate::tensor::init::glorot_init;
use crate::tensor::store::ParamStore;
use crate::tensor::{Real, Tensor};

/// Classifier layout: input width, hidden widths (may be empty — logits
/// straight from the input), and the answer count M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierParams {
    pub input_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_answers: usize,
}

impl ClassifierParams {
    pub fn new(input_size: usize, hidden_sizes: Vec<usize>, num_answers: usize) -> Result<Self> {
        if input_size == 0 || num_answers == 0 || hidden_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "classifier sizes must be positive".into(),
            ));
        }
        Ok(Self {
            input_size,
            hidden_sizes,
            num_answers,
        })
    }

    pub fn hidden_weight_name(i: usize) -> String {
        format!("cls.fc{i}.w")
    }

    pub fn hidden_bias_name(i: usize) -> String {
        format!("cls.fc{i}.b")
    }

    pub const OUT_WEIGHT: &'static str = "cls.out.w";
    pub const OUT_BIAS: &'static str = "cls.out.b";

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, master_seed: u64) -> Result<()> {
        let seed_for =
            |name: &str| rng::derive_seed(master_seed, &[tag::INIT, rng::hash_str(name)]);
        let mut width = self.input_size;
        for (i, &h) in self.hidden_sizes.iter().enumerate() {
            let wname = Self::hidden_weight_name(i);
            store.insert(
                &wname,
                glorot_init(&[width, h], width, h, seed_for(&wname))?,
            )?;
            store.insert(&Self::hidden_bias_name(i), Tensor::zeros(vec![h]))?;
            width = h;
        }
        store.insert(
            Self::OUT_WEIGHT,
            glorot_init(
                &[width, self.num_answers],
                width,
                self.num_answers,
                seed_for(Self::OUT_WEIGHT),
            )?,
        )?;
        store.insert(Self::OUT_BIAS, Tensor::zeros(vec![self.num_answers]))?;
        Ok(())
    }
}

/// Distribution over answers, kept on-graph so losses differentiate through
/// it. `log_probs` comes from log-sum-exp over the logits, never from
/// `log(probs)`.
pub struct AnswerDistribution {
    pub probs: Var,
    pub log_probs: Var,
}

/// `logits = out(relu(fc_i(...relu(fc_0([x ; s])))))` with dropout on every
/// layer input while training.
#[allow(clippy::too_many_arguments)]
pub fn classify<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    s: Var,
    params: &ClassifierParams,
    dropout_rate: f64,
    training: bool,
    seeds: &mut SeedStream,
) -> Result<AnswerDistribution> {
    if g.shape(x).len() != 1 || g.shape(s).len() != 1 {
        return Err(Error::InvalidShape(
            "classifier inputs must be vectors".into(),
        ));
    }
    let mut h = g.concat(&[x, s], 0)?;
    if g.shape(h) != [params.input_size] {
        return Err(Error::InvalidShape(format!(
            "classifier input has {} entries, want {}",
            g.shape(h)[0],
            params.input_size
        )));
    }
    for i in 0..params.hidden_sizes.len() {
        h = g.dropout(h, dropout_rate, training, seeds.next_seed())?;
        let w = g.param(&ClassifierParams::hidden_weight_name(i), store)?;
        let b = g.param(&ClassifierParams::hidden_bias_name(i), store)?;
        h = g.linear(h, w, b)?;
        h = g.activation(h, Activation::Relu);
    }
    h = g.dropout(h, dropout_rate, training, seeds.next_seed())?;
    let w = g.param(ClassifierParams::OUT_WEIGHT, store)?;
    let b = g.param(ClassifierParams::OUT_BIAS, store)?;
    let logits = g.linear(h, w, b)?;
    let probs = g.softmax(logits, 0)?;
    let log_probs = g.log_softmax(logits, 0)?;
    Ok(AnswerDistribution { probs, log_probs })
}

/// Mean negative log-likelihood over the in-vocabulary answers.
/// An empty id list is the skip-example signal, not a failure.
pub fn averaged_nll<T: Real>(
    g: &mut Graph<T>,
    dist: &AnswerDistribution,
    answer_ids: &[usize],
) -> Result<Var> {
    g.nll_mean(dist.log_probs, answer_ids)
}

/// Sampled variant: one answer drawn uniformly from `answer_ids`.
pub fn sampled_nll<T: Real>(
    g: &mut Graph<T>,
    dist: &AnswerDistribution,
    answer_ids: &[usize],
    seed: u64,
) -> Result<Var> {
    use rand::Rng;
    if answer_ids.is_empty() {
        return Err(Error::EmptyAnswers);
    }
    let mut rng = rng::seeded_rng(seed);
    let pick = answer_ids[rng.gen_range(0..answer_ids.len())];
    g.nll_mean(dist.log_probs, &[pick])
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_index<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The answer string of the max-probability class.
pub fn predict<T: Real>(
    g: &Graph<T>,
    dist: &AnswerDistribution,
    vocab: &AnswerVocabulary,
) -> Result<String> {
    let probs = g.value(dist.probs);
    if probs.len() != vocab.len() {
        return Err(Error::InvalidShape(format!(
            "distribution over {} classes does not match vocabulary of {}",
            probs.len(),
            vocab.len()
        )));
    }
    let idx = argmax_index(probs);
    Ok(vocab.answer(idx).expect("argmax within bounds").to_string())
}

/// The top-k (answer, probability) pairs, highest first, ties by index.
pub fn top_k<T: Real>(
    g: &Graph<T>,
    dist: &AnswerDistribution,
    vocab: &AnswerVocabulary,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let probs = g.value(dist.probs);
    if probs.len() != vocab.len() {
        return Err(Error::InvalidShape(format!(
            "distribution over {} classes does not match vocabulary of {}",
            probs.len(),
            vocab.len()
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| {
            (
                vocab.answer(i).expect("index in range").to_string(),
                probs[i].to_f64s(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QuestionRecord;
    use crate::evaluator::build_answer_vocab;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(seed);
        let numel = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn seeds() -> SeedStream {
        SeedStream::new(0, &[tag::DROPOUT])
    }

    fn uniform_vocab(names: &[&str]) -> AnswerVocabulary {
        // One record carrying each answer the same number of times keeps
        // ranking lexicographic; we then rely on id_of for positions.
        let mut answers = Vec::new();
        for n in names {
            answers.push(n.to_string());
        }
        while answers.len() < 10 {
            answers.push(names[0].to_string());
        }
        let rec = QuestionRecord {
            question_id: 1,
            image_id: 1,
            text: "q".into(),
            answers,
            answer_type: None,
        };
        build_answer_vocab(&[rec], names.len()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let p = ClassifierParams::new(6, vec![4], 5).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        store
            .insert("cls.fc0.w", Tensor::zeros(vec![6, 4]))
            .unwrap();
        store.insert("cls.fc0.b", Tensor::zeros(vec![4])).unwrap();
        store
            .insert("cls.out.w", Tensor::zeros(vec![4, 5]))
            .unwrap();
        store.insert("cls.out.b", Tensor::zeros(vec![5])).unwrap();
        let mut g = Graph::new();
        let x = g.input(&rand_tensor(&[4], 1));
        let s = g.input(&rand_tensor(&[2], 2));
        let dist = classify(&mut g, &store, x, s, &p, 0.5, false, &mut seeds()).unwrap();
        for &v in g.value(dist.probs) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn default_m_gives_3000_probs() {
        let p = ClassifierParams::new(10, vec![8], 3000).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        p.register(&mut store, 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(&rand_tensor(&[6], 4));
        let s = g.input(&rand_tensor(&[4], 5));
        let dist = classify(&mut g, &store, x, s, &p, 0.5, false, &mut seeds()).unwrap();
        assert_eq!(g.value(dist.probs).len(), 3000);
        let sum: f64 = g.value(dist.probs).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classify_matches_mlp_softmax_oracle() {
        let p = ClassifierParams::new(5, vec![3], 5).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        p.register(&mut store, 6).unwrap();
        let x = rand_tensor(&[3], 7);
        let s = rand_tensor(&[2], 8);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let sv = g.input(&s);
        let dist = classify(&mut g, &store, xv, sv, &p, 0.5, false, &mut seeds()).unwrap();

        let input: Vec<f64> = x.data().iter().chain(s.data()).copied().collect();
        let w1 = store.get("cls.fc0.w").unwrap().data();
        let b1 = store.get("cls.fc0.b").unwrap().data();
        let mut hidden = b1.to_vec();
        for (k, v) in input.iter().enumerate() {
            for j in 0..3 {
                hidden[j] += v * w1[k * 3 + j];
            }
        }
        for h in hidden.iter_mut() {
            *h = h.max(0.0);
        }
        let w2 = store.get("cls.out.w").unwrap().data();
        let b2 = store.get("cls.out.b").unwrap().data();
        let mut logits = b2.to_vec();
        for (j, h) in hidden.iter().enumerate() {
            for m in 0..5 {
                logits[m] += h * w2[j * 5 + m];
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for m in 0..5 {
            assert!((g.value(dist.probs)[m] - exps[m] / denom).abs() < 1e-10);
            assert!((g.value(dist.log_probs)[m] - (logits[m] - mx - denom.ln())).abs() < 1e-10);
        }
    }

    #[test]
    fn no_hidden_layer_classifier_works() {
        let p = ClassifierParams::new(4, vec![], 3).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        p.register(&mut store, 9).unwrap();
        assert!(store.contains("cls.out.w"));
        assert!(!store.contains("cls.fc0.w"));
        let mut g = Graph::new();
        let x = g.input(&rand_tensor(&[2], 10));
        let s = g.input(&rand_tensor(&[2], 11));
        let dist = classify(&mut g, &store, x, s, &p, 0.5, false, &mut seeds()).unwrap();
        assert_eq!(g.value(dist.probs).len(), 3);
    }

    fn dist_from_logits(g: &mut Graph<f64>, logits: &[f64]) -> AnswerDistribution {
        let lv = g.input(&Tensor::from_vec(vec![logits.len()], logits.to_vec()).unwrap());
        let probs = g.softmax(lv, 0).unwrap();
        let log_probs = g.log_softmax(lv, 0).unwrap();
        AnswerDistribution { probs, log_probs }
    }

    #[test]
    fn averaged_nll_uniform_is_ln_m() {
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[0.0; 6]);
        let loss = averaged_nll(&mut g, &dist, &[0, 3, 5]).unwrap();
        assert!((g.scalar_value(loss) - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn averaged_nll_identical_ids_is_single_logprob() {
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[0.3, -1.0, 2.0]);
        let loss = averaged_nll(&mut g, &dist, &[1; 10]).unwrap();
        let want = -g.value(dist.log_probs)[1];
        assert!((g.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn averaged_nll_hand_value() {
        // logits ln(2), 0, 0 -> probs (0.5, 0.25, 0.25)
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[2.0f64.ln(), 0.0, 0.0]);
        let loss = averaged_nll(&mut g, &dist, &[0, 1]).unwrap();
        let want = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((g.scalar_value(loss) - want).abs() < 1e-12);
        assert!((g.scalar_value(loss) - 1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn averaged_nll_is_nonnegative_and_permutation_invariant() {
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[0.5, -0.7, 1.2, 0.0]);
        let a = averaged_nll(&mut g, &dist, &[0, 2, 3]).unwrap();
        let b = averaged_nll(&mut g, &dist, &[3, 0, 2]).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
        assert!(g.scalar_value(a) >= 0.0);
    }

    #[test]
    fn empty_ids_signal_skip() {
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[0.0, 0.0]);
        assert!(matches!(
            averaged_nll(&mut g, &dist, &[]),
            Err(Error::EmptyAnswers)
        ));
        assert!(matches!(
            sampled_nll(&mut g, &dist, &[], 1),
            Err(Error::EmptyAnswers)
        ));
    }

    #[test]
    fn sampled_nll_single_id_equals_averaged() {
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[0.1, 0.9, -0.5]);
        let a = averaged_nll(&mut g, &dist, &[2]).unwrap();
        let s = sampled_nll(&mut g, &dist, &[2], 77).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(s));
    }

    #[test]
    fn sampled_nll_is_deterministic_per_seed() {
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[0.1, 0.9, -0.5, 0.3]);
        let a = sampled_nll(&mut g, &dist, &[0, 1, 2, 3], 5).unwrap();
        let b = sampled_nll(&mut g, &dist, &[0, 1, 2, 3], 5).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
    }

    #[test]
    fn sampled_nll_expectation_approaches_averaged() {
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[1.0, -0.3, 0.6]);
        let ids = [0usize, 1, 2, 2];
        let target = {
            let loss = averaged_nll(&mut g, &dist, &ids).unwrap();
            g.scalar_value(loss)
        };
        let n = 100_000u64;
        let mut acc = 0.0;
        for seed in 0..n {
            let loss = sampled_nll(&mut g, &dist, &ids, seed).unwrap();
            acc += g.scalar_value(loss);
        }
        let mean = acc / n as f64;
        assert!(
            (mean - target).abs() / target < 0.01,
            "Monte-Carlo mean {mean} vs averaged {target}"
        );
    }

    #[test]
    fn predict_one_hot_tie_break_and_uniform() {
        let vocab = uniform_vocab(&[
            "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
        ]);
        let mut g = Graph::new();
        let mut logits = vec![0.0; 8];
        logits[7] = 50.0;
        let dist = dist_from_logits(&mut g, &logits);
        let seventh = vocab.answer(7).unwrap().to_string();
        assert_eq!(predict(&g, &dist, &vocab).unwrap(), seventh);

        // Exact tie between classes 2 and 5 -> class 2.
        let mut logits = vec![-10.0; 8];
        logits[2] = 3.0;
        logits[5] = 3.0;
        let dist = dist_from_logits(&mut g, &logits);
        assert_eq!(
            predict(&g, &dist, &vocab).unwrap(),
            vocab.answer(2).unwrap()
        );

        let dist = dist_from_logits(&mut g, &[0.0; 8]);
        assert_eq!(
            predict(&g, &dist, &vocab).unwrap(),
            vocab.answer(0).unwrap()
        );
    }

    #[test]
    fn predict_is_invariant_to_monotone_logit_transforms() {
        let vocab = uniform_vocab(&["a", "b", "c", "d"]);
        let logits = [0.4, -1.0, 2.2, 0.9];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 13.5).collect();
        let scaled: Vec<f64> = logits.iter().map(|v| v * 4.0).collect();
        let mut g = Graph::new();
        let d0 = dist_from_logits(&mut g, &logits);
        let d1 = dist_from_logits(&mut g, &shifted);
        let d2 = dist_from_logits(&mut g, &scaled);
        let base = predict(&g, &d0, &vocab).unwrap();
        assert_eq!(base, predict(&g, &d1, &vocab).unwrap());
        assert_eq!(base, predict(&g, &d2, &vocab).unwrap());
    }

    #[test]
    fn top_k_orders_by_probability() {
        let vocab = uniform_vocab(&["a", "b", "c", "d"]);
        let mut g = Graph::new();
        let dist = dist_from_logits(&mut g, &[0.1, 2.0, -1.0, 1.0]);
        let top = top_k(&g, &dist, &vocab, 3).unwrap();
        assert_eq!(top.len(), 3);
        assert_eq!(top[0].0, vocab.answer(1).unwrap());
        assert_eq!(top[1].0, vocab.answer(3).unwrap());
        assert!(top[0].1 > top[1].1 && top[1].1 > top[2].1);
    }

    #[test]
    fn classifier_gradients_pass_finite_differences() {
        let p = ClassifierParams::new(6, vec![4, 3], 5).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        p.register(&mut store, 12).unwrap();
        store.insert("probe.x", rand_tensor(&[4], 13)).unwrap();
        store.insert("probe.s", rand_tensor(&[2], 14)).unwrap();
        let report = crate::gradcheck::verify(&store, |st| {
            let mut g = Graph::new();
            let x = g.param("probe.x", st)?;
            let s = g.param("probe.s", st)?;
            let dist = classify(&mut g, st, x, s, &p, 0.0, true, &mut seeds())?;
            let loss = averaged_nll(&mut g, &dist, &[0, 2, 2])?;
            Ok((g.scalar_value(loss), g.backward(loss, st)?))
        })
        .unwrap();
        assert!(
            report.passed(),
            "mismatches: {:?}",
            &report.mismatches[..report.mismatches.len().min(5)]
        );
    }
}
