//! Small recurrent neural language model. Serves both as the external LM
//! and, trained on transcripts, as the density-ratio internal-LM estimate.
//!
//! Outcomes are the V regular tokens plus the end marker (index V); the
//! start symbol is an input-only embedding row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::lstm::{LstmStack, StackCache};
use crate::numerics::{add_assign, log_softmax, Matrix, Vector};
use crate::optim::{Adam, AdamConfig};
use crate::vocab::{TokenId, TokenSequence};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentLm {
    vocab_size: usize,
    embed_dim: usize,
    hidden: usize,
    /// (V+1) × embed_dim; row 0 is the start symbol, row 1+t is token t.
    embedding: Matrix,
    stack: LstmStack,
    /// (V+1) × hidden; row t scores token t, row V the end marker.
    w_out: Matrix,
    b_out: Vector,
}

#[derive(Debug, Clone, Copy)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 10,
            lr: 2e-3,
            batch_size: 16,
            seed: 1,
        }
    }
}

/// Loss curve from a training run. `curve[0]` is the pre-training
/// full-corpus mean token cross-entropy; entry `e+1` follows epoch `e`.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<f64>,
    /// Set when the final model was worse than an earlier epoch and the
    /// returned parameters were rolled back to the best one.
    pub reverted_to_epoch: Option<usize>,
}

struct ForwardCache {
    inputs: Vec<Vector>,
    input_ids: Vec<usize>,
    hiddens: Vec<Vector>,
    stack_cache: StackCache,
    logprobs: Vec<Vector>,
}

impl RecurrentLm {
    pub fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut embedding = Matrix::zeros(vocab_size + 1, embed_dim);
        let s = (1.0 / embed_dim as f64).sqrt();
        for v in embedding.data_mut() {
            *v = rng.random_range(-s..s);
        }
        // zero output head: a fresh model is exactly uniform
        RecurrentLm {
            vocab_size,
            embed_dim,
            hidden,
            embedding,
            stack: LstmStack::new(embed_dim, hidden, layers, rng),
            w_out: Matrix::zeros(vocab_size + 1, hidden),
            b_out: vec![0.0; vocab_size + 1],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of predicted outcomes (tokens + end marker).
    pub fn n_outcomes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn eos_index(&self) -> usize {
        self.vocab_size
    }

    fn embed_input(&self, id: usize) -> Vector {
        self.embedding.row(id).to_vec()
    }

    fn check_tokens(&self, y: &[TokenId]) -> Result<()> {
        for &t in y {
            if t >= self.vocab_size {
                return Err(Error::input(format!(
                    "token id {t} out of range for vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn forward_cached(&self, y: &[TokenId]) -> Result<ForwardCache> {
        self.check_tokens(y)?;
        let mut input_ids = Vec::with_capacity(y.len() + 1);
        input_ids.push(0usize); // start symbol
        input_ids.extend(y.iter().map(|&t| t + 1));
        let inputs: Vec<Vector> = input_ids.iter().map(|&id| self.embed_input(id)).collect();
        let (hiddens, stack_cache) = self.stack.forward(&inputs)?;
        let mut logprobs = Vec::with_capacity(hiddens.len());
        for h in &hiddens {
            let mut logits = self.w_out.matvec(h)?;
            add_assign(&mut logits, &self.b_out);
            logprobs.push(log_softmax(&logits)?);
        }
        Ok(ForwardCache {
            inputs,
            input_ids,
            hiddens,
            stack_cache,
            logprobs,
        })
    }

    /// Teacher-forced forward pass. Row `u` is log P(·| start, y_1..y_u);
    /// there are `|y| + 1` rows, the last conditioning on all of `y`.
    pub fn forward(&self, y: &TokenSequence) -> Result<Vec<Vector>> {
        Ok(self.forward_cached(y)?.logprobs)
    }

    /// Σ over positions of the target token's log-probability, plus the end
    /// marker factor iff `include_eos`.
    pub fn sequence_logprob(&self, y: &TokenSequence, include_eos: bool) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::input("sequence_logprob: empty sequence"));
        }
        let rows = self.forward(y)?;
        let mut total = 0.0;
        for (u, &t) in y.iter().enumerate() {
            total += rows[u][t];
        }
        if include_eos {
            total += rows[y.len()][self.eos_index()];
        }
        Ok(total)
    }

    pub fn perplexity(&self, corpus: &[TokenSequence]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::input("perplexity: empty corpus"));
        }
        let mut lp = 0.0;
        let mut n = 0usize;
        for y in corpus {
            lp += self.sequence_logprob(y, true)?;
            n += y.len() + 1;
        }
        Ok((-lp / n as f64).exp())
    }

    /// Mean token cross-entropy over a corpus (end markers included).
    pub fn mean_cross_entropy(&self, corpus: &[TokenSequence]) -> Result<f64> {
        let mut lp = 0.0;
        let mut n = 0usize;
        for y in corpus {
            lp += self.sequence_logprob(y, true)?;
            n += y.len() + 1;
        }
        Ok(-lp / n as f64)
    }

    /// Accumulate gradients of summed token NLL for one sequence into `grad`.
    /// Returns the summed NLL and the number of predicted tokens.
    fn backward_sequence(&self, y: &TokenSequence, grad: &mut RecurrentLm) -> Result<(f64, usize)> {
        let cache = self.forward_cached(y)?;
        let steps = cache.logprobs.len();
        let mut targets: Vec<usize> = y.to_vec();
        targets.push(self.eos_index());

        let mut nll = 0.0;
        let mut d_hidden: Vec<Vector> = Vec::with_capacity(steps);
        for u in 0..steps {
            let row = &cache.logprobs[u];
            let t = targets[u];
            nll -= row[t];
            // d logits = softmax − onehot
            let mut dlogits: Vector = row.iter().map(|&lp| lp.exp()).collect();
            dlogits[t] -= 1.0;
            grad.w_out.add_outer(&dlogits, &cache.hiddens[u]);
            add_assign(&mut grad.b_out, &dlogits);
            d_hidden.push(self.w_out.matvec_t(&dlogits)?);
        }
        let d_inputs = self.stack.backward(&cache.stack_cache, &d_hidden, &mut grad.stack)?;
        for (u, d_in) in d_inputs.iter().enumerate() {
            let id = cache.input_ids[u];
            add_assign(grad.embedding.row_mut(id), d_in);
        }
        debug_assert_eq!(cache.inputs.len(), steps);
        Ok((nll, steps))
    }

    pub fn zeros_like(&self) -> Self {
        RecurrentLm {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            embedding: Matrix::zeros(self.vocab_size + 1, self.embed_dim),
            stack: self.stack.zeros_like(),
            w_out: Matrix::zeros(self.vocab_size + 1, self.hidden),
            b_out: vec![0.0; self.vocab_size + 1],
        }
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("emb".to_string(), self.embedding.data())];
        out.extend(self.stack.params("lstm"));
        out.push(("w_out".to_string(), self.w_out.data()));
        out.push(("b_out".to_string(), self.b_out.as_slice()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![("emb".to_string(), self.embedding.data_mut())];
        out.extend(self.stack.params_mut("lstm"));
        out.push(("w_out".to_string(), self.w_out.data_mut()));
        out.push(("b_out".to_string(), self.b_out.as_mut_slice()));
        out
    }

    /// Gradient of the batch mean token cross-entropy, for gradient checks.
    pub fn batch_grad(&self, batch: &[TokenSequence]) -> Result<(f64, RecurrentLm)> {
        let mut grad = self.zeros_like();
        let mut nll = 0.0;
        let mut count = 0usize;
        for y in batch {
            let (l, n) = self.backward_sequence(y, &mut grad)?;
            nll += l;
            count += n;
        }
        let scale = 1.0 / count as f64;
        for (_, g) in grad.params_mut() {
            for v in g {
                *v *= scale;
            }
        }
        Ok((nll * scale, grad))
    }

    /// Adam training on mean token cross-entropy. Returns the loss curve;
    /// if the last epoch is worse than the starting point the parameters are
    /// rolled back to the best epoch so training never degrades the model.
    pub fn train(&mut self, corpus: &[TokenSequence], cfg: &LmTrainConfig) -> Result<TrainReport> {
        if corpus.is_empty() {
            return Err(Error::input("lm train: empty corpus"));
        }
        for y in corpus {
            self.check_tokens(y)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
        let mut curve = vec![self.mean_cross_entropy(corpus)?];
        if cfg.epochs == 0 {
            return Ok(TrainReport {
                curve,
                reverted_to_epoch: None,
            });
        }
        let mut best = (0usize, curve[0], self.clone());
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for epoch in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<TokenSequence> = chunk.iter().map(|&i| corpus[i].clone()).collect();
                let (loss, grad) = self.batch_grad(&batch)?;
                if !loss.is_finite() {
                    return Err(Error::numerical(format!(
                        "lm train diverged at epoch {epoch}: batch loss {loss}"
                    )));
                }
                let grads = grad.params();
                let grads_owned: Vec<(String, &[f64])> =
                    grads.iter().map(|(n, g)| (n.clone(), *g)).collect();
                adam.update(self.params_mut(), &grads_owned)?;
            }
            let ce = self.mean_cross_entropy(corpus)?;
            if !ce.is_finite() {
                return Err(Error::numerical(format!(
                    "lm train diverged after epoch {epoch}"
                )));
            }
            curve.push(ce);
            if ce < best.1 {
                best = (epoch + 1, ce, self.clone());
            }
        }
        let mut reverted = None;
        if *curve.last().unwrap() > curve[0] {
            *self = best.2;
            reverted = Some(best.0);
        }
        Ok(TrainReport {
            curve,
            reverted_to_epoch: reverted,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "nnlm");
        c.set_meta("vocab_size", self.vocab_size);
        c.set_meta("embed_dim", self.embed_dim);
        c.set_meta("hidden", self.hidden);
        c.set_meta("layers", self.stack.cells.len());
        c.insert(
            "emb",
            vec![self.vocab_size + 1, self.embed_dim],
            self.embedding.data().to_vec(),
        )
        .expect("shape is consistent");
        for (name, vals) in self.stack.params("lstm") {
            c.insert(&name, vec![vals.len()], vals.to_vec())
                .expect("shape is consistent");
        }
        c.insert(
            "w_out",
            vec![self.vocab_size + 1, self.hidden],
            self.w_out.data().to_vec(),
        )
        .expect("shape is consistent");
        c.insert("b_out", vec![self.vocab_size + 1], self.b_out.clone())
            .expect("shape is consistent");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.meta("kind")? != "nnlm" {
            return Err(Error::input(format!(
                "checkpoint kind {:?} is not an nnlm",
                c.meta("kind")?
            )));
        }
        let vocab_size = c.meta_usize("vocab_size")?;
        let embed_dim = c.meta_usize("embed_dim")?;
        let hidden = c.meta_usize("hidden")?;
        let layers = c.meta_usize("layers")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lm = RecurrentLm::new(vocab_size, embed_dim, hidden, layers, &mut rng);
        for (name, slot) in lm.params_mut() {
            let entry = c.array(&name)?;
            if entry.data.len() != slot.len() {
                return Err(Error::shape(format!(
                    "checkpoint array {name:?} has {} values, expected {}",
                    entry.data.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(&entry.data);
        }
        Ok(lm)
    }
}

/// Fisher-Yates with the crate-wide deterministic RNG.
pub(crate) fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, sigmoid};

    fn tiny(seed: u64) -> RecurrentLm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RecurrentLm::new(3, 4, 5, 2, &mut rng)
    }

    #[test]
    fn fresh_model_is_uniform() {
        let lm = tiny(7);
        let rows = lm.forward(&vec![0, 2, 1]).unwrap();
        let expect = -(lm.n_outcomes() as f64).ln();
        for row in rows {
            for v in row {
                assert!((v - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let lm = tiny(9);
        let a = lm.forward(&vec![1, 0, 2, 2]).unwrap();
        let b = lm.forward(&vec![1, 0, 2, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rows_normalize() {
        let mut lm = tiny(11);
        // give the output head some structure first
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in lm.w_out.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for row in lm.forward(&vec![2, 1, 0, 1]).unwrap() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_step_matches_hand_rolled_cell() {
        // Independent oracle: recompute the first output position with
        // explicit gate arithmetic on the model's own parameters.
        let mut lm = tiny(13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in lm.w_out.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let rows = lm.forward(&vec![1]).unwrap();

        let x = lm.embedding.row(0).to_vec(); // start symbol
        let mut h_in = x;
        for cell in &lm.stack.cells {
            let hd = cell.hidden;
            let mut z = vec![0.0; 4 * hd];
            for r in 0..4 * hd {
                let mut acc = cell.b[r];
                for (k, &xv) in h_in.iter().enumerate() {
                    acc += cell.wx.get(r, k) * xv;
                }
                // h_prev and c_prev are zero at the first step
                z[r] = acc;
            }
            let mut h_new = vec![0.0; hd];
            for k in 0..hd {
                let i = sigmoid(z[k]);
                let g = z[2 * hd + k].tanh();
                let o = sigmoid(z[3 * hd + k]);
                let c = i * g;
                h_new[k] = o * c.tanh();
            }
            h_in = h_new;
        }
        let mut logits = vec![0.0; lm.n_outcomes()];
        for (r, l) in logits.iter_mut().enumerate() {
            *l = lm.b_out[r];
            for (k, &hv) in h_in.iter().enumerate() {
                *l += lm.w_out.get(r, k) * hv;
            }
        }
        let expect = log_softmax(&logits).unwrap();
        for (got, want) in rows[0].iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn sequence_logprob_is_additive_over_forward_rows() {
        let mut lm = tiny(17);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for v in lm.w_out.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let y = vec![0usize, 2, 1, 1];
        let rows = lm.forward(&y).unwrap();
        let mut expect: f64 = y.iter().enumerate().map(|(u, &t)| rows[u][t]).sum();
        let got = lm.sequence_logprob(&y, false).unwrap();
        assert!((got - expect).abs() <= 1e-12);
        expect += rows[y.len()][lm.eos_index()];
        let got = lm.sequence_logprob(&y, true).unwrap();
        assert!((got - expect).abs() <= 1e-12);
    }

    #[test]
    fn uniform_model_sequence_logprob() {
        let lm = tiny(19);
        let y = vec![0usize, 1, 2, 0, 1];
        let got = lm.sequence_logprob(&y, false).unwrap();
        let expect = -(y.len() as f64) * (lm.n_outcomes() as f64).ln();
        assert!((got - expect).abs() <= 1e-10);
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let lm = tiny(21);
        assert!(matches!(lm.forward(&vec![3]), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_perplexity_is_outcome_count() {
        let lm = tiny(23);
        let corpus = vec![vec![0usize, 1], vec![2usize]];
        let ppl = lm.perplexity(&corpus).unwrap();
        assert!((ppl - lm.n_outcomes() as f64).abs() <= 1e-9);
    }

    #[test]
    fn batch_gradient_passes_finite_difference_check() {
        let mut lm = tiny(29);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for v in lm.w_out.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let batch = vec![vec![0usize, 2, 1], vec![1usize]];
        let (_, grad) = lm.batch_grad(&batch).unwrap();
        let names: Vec<String> = lm.params().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let theta: Vec<f64> = lm
                .params()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .to_vec();
            let analytic: Vec<f64> = grad
                .params()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .to_vec();
            let f = |vals: &[f64]| {
                let mut probe = lm.clone();
                {
                    let mut pm = probe.params_mut();
                    let slot = pm.iter_mut().find(|(n, _)| *n == name).unwrap();
                    slot.1.copy_from_slice(vals);
                }
                probe.batch_grad(&batch).map(|(l, _)| l)
            };
            let err = grad_check(f, &theta, &analytic, 1e-5).unwrap();
            assert!(err <= 1e-4, "block {name}: rel err {err}");
        }
    }

    fn markov_corpus(n: usize, seed: u64) -> Vec<TokenSequence> {
        // 2-state source with strong self-transitions
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(3..9);
                let mut state = rng.random_range(0..2usize);
                let mut s = vec![state];
                for _ in 1..len {
                    if rng.random::<f64>() < 0.85 {
                        // stay
                    } else {
                        state = 1 - state;
                    }
                    s.push(state);
                }
                s
            })
            .collect()
    }

    #[test]
    fn training_beats_uniform_on_markov_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut lm = RecurrentLm::new(2, 8, 16, 1, &mut rng);
        let corpus = markov_corpus(200, 77);
        let report = lm
            .train(
                &corpus,
                &LmTrainConfig {
                    epochs: 20,
                    lr: 5e-3,
                    batch_size: 16,
                    seed: 3,
                },
            )
            .unwrap();
        let ppl = lm.perplexity(&corpus).unwrap();
        let uniform = lm.n_outcomes() as f64;
        assert!(
            ppl < uniform,
            "trained PPL {ppl} should beat uniform {uniform}"
        );
        assert!(report.curve.last().unwrap() <= &report.curve[0]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut lm = tiny(43);
        let before = lm.clone();
        let corpus = vec![vec![0usize, 1]];
        let report = lm
            .train(
                &corpus,
                &LmTrainConfig {
                    epochs: 0,
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(lm, before);
        assert_eq!(report.curve.len(), 1);
    }

    #[test]
    fn median_final_ppl_beats_initial_over_seeds() {
        let corpus = markov_corpus(60, 5);
        let mut initials = Vec::new();
        let mut finals = Vec::new();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lm = RecurrentLm::new(2, 4, 8, 1, &mut rng);
            initials.push(lm.perplexity(&corpus).unwrap());
            lm.train(
                &corpus,
                &LmTrainConfig {
                    epochs: 6,
                    lr: 5e-3,
                    batch_size: 8,
                    seed,
                },
            )
            .unwrap();
            finals.push(lm.perplexity(&corpus).unwrap());
        }
        let med = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(med(finals) < med(initials));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut lm = tiny(47);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for (_, block) in lm.params_mut() {
            for v in block {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let dir = std::env::temp_dir().join("rnnt_lab_nnlm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("lm.ckpt");
        lm.to_checkpoint().save(&path).unwrap();
        let back = RecurrentLm::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(lm, back);
    }
}
