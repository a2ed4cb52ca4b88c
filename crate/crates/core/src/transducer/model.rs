//! Model architecture and the chained loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::lstm::{LstmStack, StackState};
use crate::numerics::{add_assign, log_softmax, Matrix, Vector};
use crate::transducer::lattice::{loss_backward, JointLattice};
use crate::vocab::{TokenId, TokenSequence};
use crate::{FeatureSequence, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransducerConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub pn_embed_dim: usize,
    pub pn_hidden: usize,
    pub pn_layers: usize,
    pub joint_hidden: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        TransducerConfig {
            vocab_size: 30,
            feat_dim: 16,
            enc_hidden: 64,
            enc_layers: 2,
            pn_embed_dim: 32,
            pn_hidden: 64,
            pn_layers: 1,
            joint_hidden: 64,
        }
    }
}

/// Encoder + prediction network + additive joint
/// `J(g, f) = W_out · tanh(W_g·g + W_f·f + b1) + b_out`, producing
/// `vocab_size + 1` logits with the blank at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerModel {
    pub cfg: TransducerConfig,
    encoder: LstmStack,
    /// (V+1) × pn_embed_dim; row 0 is the start symbol.
    pn_embed: Matrix,
    pn: LstmStack,
    w_g: Matrix,
    w_f: Matrix,
    b1: Vector,
    w_out: Matrix,
    b_out: Vector,
}

impl TransducerModel {
    pub fn new(cfg: TransducerConfig, rng: &mut impl Rng) -> Self {
        let mut pn_embed = Matrix::zeros(cfg.vocab_size + 1, cfg.pn_embed_dim);
        let s = (1.0 / cfg.pn_embed_dim as f64).sqrt();
        for v in pn_embed.data_mut() {
            *v = rng.random_range(-s..s);
        }
        let mut w_g = Matrix::zeros(cfg.joint_hidden, cfg.pn_hidden);
        let sg = (1.0 / cfg.pn_hidden as f64).sqrt();
        for v in w_g.data_mut() {
            *v = rng.random_range(-sg..sg);
        }
        let mut w_f = Matrix::zeros(cfg.joint_hidden, cfg.enc_hidden);
        let sf = (1.0 / cfg.enc_hidden as f64).sqrt();
        for v in w_f.data_mut() {
            *v = rng.random_range(-sf..sf);
        }
        TransducerModel {
            cfg,
            encoder: LstmStack::new(cfg.feat_dim, cfg.enc_hidden, cfg.enc_layers, rng),
            pn_embed,
            pn: LstmStack::new(cfg.pn_embed_dim, cfg.pn_hidden, cfg.pn_layers, rng),
            w_g,
            w_f,
            b1: vec![0.0; cfg.joint_hidden],
            // zero output head: a fresh joint is exactly uniform
            w_out: Matrix::zeros(cfg.vocab_size + 1, cfg.joint_hidden),
            b_out: vec![0.0; cfg.vocab_size + 1],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn n_symbols(&self) -> usize {
        self.cfg.vocab_size + 1
    }

    pub fn zeros_like(&self) -> Self {
        TransducerModel {
            cfg: self.cfg,
            encoder: self.encoder.zeros_like(),
            pn_embed: Matrix::zeros(self.cfg.vocab_size + 1, self.cfg.pn_embed_dim),
            pn: self.pn.zeros_like(),
            w_g: Matrix::zeros(self.cfg.joint_hidden, self.cfg.pn_hidden),
            w_f: Matrix::zeros(self.cfg.joint_hidden, self.cfg.enc_hidden),
            b1: vec![0.0; self.cfg.joint_hidden],
            w_out: Matrix::zeros(self.cfg.vocab_size + 1, self.cfg.joint_hidden),
            b_out: vec![0.0; self.cfg.vocab_size + 1],
        }
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        out.extend(self.encoder.params("enc"));
        out.push(("pn_embed".to_string(), self.pn_embed.data()));
        out.extend(self.pn.params("pn"));
        out.push(("w_g".to_string(), self.w_g.data()));
        out.push(("w_f".to_string(), self.w_f.data()));
        out.push(("b1".to_string(), self.b1.as_slice()));
        out.push(("w_out".to_string(), self.w_out.data()));
        out.push(("b_out".to_string(), self.b_out.as_slice()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        out.extend(self.encoder.params_mut("enc"));
        out.push(("pn_embed".to_string(), self.pn_embed.data_mut()));
        out.extend(self.pn.params_mut("pn"));
        out.push(("w_g".to_string(), self.w_g.data_mut()));
        out.push(("w_f".to_string(), self.w_f.data_mut()));
        out.push(("b1".to_string(), self.b1.as_mut_slice()));
        out.push(("w_out".to_string(), self.w_out.data_mut()));
        out.push(("b_out".to_string(), self.b_out.as_mut_slice()));
        out
    }

    fn check_features(&self, x: &FeatureSequence) -> Result<()> {
        if x.is_empty() {
            return Err(Error::input("feature sequence has zero frames"));
        }
        for (t, frame) in x.iter().enumerate() {
            if frame.len() != self.cfg.feat_dim {
                return Err(Error::shape(format!(
                    "frame {t} has dimension {}, expected {}",
                    frame.len(),
                    self.cfg.feat_dim
                )));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, y: &[TokenId]) -> Result<()> {
        for &t in y {
            if t >= self.cfg.vocab_size {
                return Err(Error::input(format!(
                    "token id {t} out of range for vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Encoder output f_1..f_T without a backward cache.
    pub fn encode(&self, x: &FeatureSequence) -> Result<Vec<Vector>> {
        self.check_features(x)?;
        let (f, _) = self.encoder.forward(x)?;
        Ok(f)
    }

    fn pn_inputs(&self, y: &[TokenId]) -> Vec<Vector> {
        let mut inputs = Vec::with_capacity(y.len() + 1);
        inputs.push(self.pn_embed.row(0).to_vec());
        inputs.extend(y.iter().map(|&t| self.pn_embed.row(1 + t).to_vec()));
        inputs
    }

    /// Prediction-network outputs g_0..g_U for the full prefix history.
    pub fn pn_forward(&self, y: &[TokenId]) -> Result<Vec<Vector>> {
        self.check_tokens(y)?;
        let (g, _) = self.pn.forward(&self.pn_inputs(y))?;
        Ok(g)
    }

    /// Start the prediction network on the start symbol (for decoding).
    pub fn pn_start(&self) -> Result<(Vector, StackState)> {
        let state = self.pn.initial_state();
        self.pn.step_infer(self.pn_embed.row(0), &state)
    }

    /// Advance the prediction network by one emitted token.
    pub fn pn_step(&self, state: &StackState, token: TokenId) -> Result<(Vector, StackState)> {
        self.check_tokens(std::slice::from_ref(&token))?;
        self.pn.step_infer(self.pn_embed.row(1 + token), state)
    }

    /// Joint log-probabilities over blank + tokens for one (g, f) pair.
    pub fn joint_logprobs(&self, g: &[f64], f: &[f64]) -> Result<Vector> {
        let mut a = self.w_g.matvec(g)?;
        add_assign(&mut a, &self.w_f.matvec(f)?);
        add_assign(&mut a, &self.b1);
        for v in a.iter_mut() {
            *v = v.tanh();
        }
        let mut logits = self.w_out.matvec(&a)?;
        add_assign(&mut logits, &self.b_out);
        log_softmax(&logits)
    }

    /// Normalized joint distributions at every grid point.
    pub fn compute_lattice(&self, x: &FeatureSequence, y: &TokenSequence) -> Result<JointLattice> {
        self.check_features(x)?;
        self.check_tokens(y)?;
        let f = self.encode(x)?;
        let g = self.pn_forward(y)?;
        let pg: Vec<Vector> = g.iter().map(|gu| self.w_g.matvec(gu)).collect::<Result<_>>()?;
        let pf: Vec<Vector> = f.iter().map(|ft| self.w_f.matvec(ft)).collect::<Result<_>>()?;
        let mut logprobs = Vec::with_capacity(f.len());
        for pf_t in &pf {
            let mut row = Vec::with_capacity(g.len());
            for pg_u in &pg {
                let mut a = pg_u.clone();
                add_assign(&mut a, pf_t);
                add_assign(&mut a, &self.b1);
                for v in a.iter_mut() {
                    *v = v.tanh();
                }
                let mut logits = self.w_out.matvec(&a)?;
                add_assign(&mut logits, &self.b_out);
                row.push(log_softmax(&logits)?);
            }
            logprobs.push(row);
        }
        Ok(JointLattice {
            t_len: x.len(),
            u_len: y.len() + 1,
            n_symbols: self.n_symbols(),
            logprobs,
        })
    }

    /// −log P(y|x).
    pub fn loss(&self, x: &FeatureSequence, y: &TokenSequence) -> Result<f64> {
        let lat = self.compute_lattice(x, y)?;
        crate::transducer::lattice::loss_forward(&lat, y)
    }

    /// Loss plus parameter gradients accumulated into `grad`.
    pub fn loss_and_grad(
        &self,
        x: &FeatureSequence,
        y: &TokenSequence,
        grad: &mut TransducerModel,
    ) -> Result<f64> {
        self.check_features(x)?;
        self.check_tokens(y)?;
        let (f, enc_cache) = self.encoder.forward(x)?;
        let pn_in = self.pn_inputs(y);
        let (g, pn_cache) = self.pn.forward(&pn_in)?;
        let pg: Vec<Vector> = g.iter().map(|gu| self.w_g.matvec(gu)).collect::<Result<_>>()?;
        let pf: Vec<Vector> = f.iter().map(|ft| self.w_f.matvec(ft)).collect::<Result<_>>()?;

        let (t_len, u_len) = (f.len(), g.len());
        let jh = self.cfg.joint_hidden;
        let mut hjoint = vec![vec![vec![0.0; jh]; u_len]; t_len];
        let mut logprobs = vec![vec![Vec::new(); u_len]; t_len];
        for t in 0..t_len {
            for u in 0..u_len {
                let a = &mut hjoint[t][u];
                for k in 0..jh {
                    a[k] = (pg[u][k] + pf[t][k] + self.b1[k]).tanh();
                }
                let mut logits = self.w_out.matvec(a)?;
                add_assign(&mut logits, &self.b_out);
                logprobs[t][u] = log_softmax(&logits)?;
            }
        }
        let lat = JointLattice {
            t_len,
            u_len,
            n_symbols: self.n_symbols(),
            logprobs,
        };
        let (loss, lat_grad) = loss_backward(&lat, y)?;

        let mut d_pg = vec![vec![0.0; jh]; u_len];
        let mut d_pf = vec![vec![0.0; jh]; t_len];
        for t in 0..t_len {
            for u in 0..u_len {
                let dlp = &lat_grad.dlogprobs[t][u];
                let total: f64 = dlp.iter().sum();
                if total == 0.0 && dlp.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let mut dlogits = vec![0.0; self.n_symbols()];
                for v in 0..self.n_symbols() {
                    dlogits[v] = dlp[v] - lat.logprobs[t][u][v].exp() * total;
                }
                grad.w_out.add_outer(&dlogits, &hjoint[t][u]);
                add_assign(&mut grad.b_out, &dlogits);
                let dh = self.w_out.matvec_t(&dlogits)?;
                for k in 0..jh {
                    let da = dh[k] * (1.0 - hjoint[t][u][k] * hjoint[t][u][k]);
                    d_pg[u][k] += da;
                    d_pf[t][k] += da;
                    grad.b1[k] += da;
                }
            }
        }

        let mut d_g = Vec::with_capacity(u_len);
        for u in 0..u_len {
            grad.w_g.add_outer(&d_pg[u], &g[u]);
            d_g.push(self.w_g.matvec_t(&d_pg[u])?);
        }
        let mut d_f = Vec::with_capacity(t_len);
        for t in 0..t_len {
            grad.w_f.add_outer(&d_pf[t], &f[t]);
            d_f.push(self.w_f.matvec_t(&d_pf[t])?);
        }

        let d_pn_in = self.pn.backward(&pn_cache, &d_g, &mut grad.pn)?;
        add_assign(grad.pn_embed.row_mut(0), &d_pn_in[0]);
        for (u, &tok) in y.iter().enumerate() {
            add_assign(grad.pn_embed.row_mut(1 + tok), &d_pn_in[u + 1]);
        }
        self.encoder.backward(&enc_cache, &d_f, &mut grad.encoder)?;
        Ok(loss)
    }

    /// Internal-LM distribution after `prefix`: the joint with the acoustic
    /// hidden state zeroed, blank logit dropped, renormalized over tokens.
    /// Index `t` of the result is token `t`.
    pub fn ilme_logprobs(&self, prefix: &[TokenId]) -> Result<Vector> {
        let g = self.pn_forward(prefix)?;
        self.ilme_from_g(g.last().expect("pn emits at least g_0"))
    }

    fn ilme_from_g(&self, g: &[f64]) -> Result<Vector> {
        let mut a = self.w_g.matvec(g)?;
        add_assign(&mut a, &self.b1);
        for v in a.iter_mut() {
            *v = v.tanh();
        }
        let mut logits = self.w_out.matvec(&a)?;
        add_assign(&mut logits, &self.b_out);
        log_softmax(&logits[1..])
    }

    /// Σ_u log P_ILM(y_u | y_<u): exactly one factor per emitted token.
    /// Never reads acoustic features, by construction.
    pub fn ilme_sequence_logprob(&self, y: &TokenSequence) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::input("ilme_sequence_logprob: empty sequence"));
        }
        self.check_tokens(y)?;
        let (mut g, mut state) = self.pn_start()?;
        let mut total = 0.0;
        for (u, &tok) in y.iter().enumerate() {
            let row = self.ilme_from_g(&g)?;
            total += row[tok];
            if u + 1 < y.len() {
                let (g2, s2) = self.pn_step(&state, tok)?;
                g = g2;
                state = s2;
            }
        }
        Ok(total)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "rnnt");
        c.set_meta("vocab_size", self.cfg.vocab_size);
        c.set_meta("feat_dim", self.cfg.feat_dim);
        c.set_meta("enc_hidden", self.cfg.enc_hidden);
        c.set_meta("enc_layers", self.cfg.enc_layers);
        c.set_meta("pn_embed_dim", self.cfg.pn_embed_dim);
        c.set_meta("pn_hidden", self.cfg.pn_hidden);
        c.set_meta("pn_layers", self.cfg.pn_layers);
        c.set_meta("joint_hidden", self.cfg.joint_hidden);
        for (name, vals) in self.params() {
            c.insert(&name, vec![vals.len()], vals.to_vec())
                .expect("shape is consistent");
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.meta("kind")? != "rnnt" {
            return Err(Error::input(format!(
                "checkpoint kind {:?} is not an rnnt model",
                c.meta("kind")?
            )));
        }
        let cfg = TransducerConfig {
            vocab_size: c.meta_usize("vocab_size")?,
            feat_dim: c.meta_usize("feat_dim")?,
            enc_hidden: c.meta_usize("enc_hidden")?,
            enc_layers: c.meta_usize("enc_layers")?,
            pn_embed_dim: c.meta_usize("pn_embed_dim")?,
            pn_hidden: c.meta_usize("pn_hidden")?,
            pn_layers: c.meta_usize("pn_layers")?,
            joint_hidden: c.meta_usize("joint_hidden")?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TransducerModel::new(cfg, &mut rng);
        for (name, slot) in model.params_mut() {
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
        Ok(model)
    }
}
