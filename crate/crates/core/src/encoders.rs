//! Token embedding and the three unidirectional LSTM sentence encoders
//! (question, dialogue history, candidate answers).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Axis, Linear, ParamInit, ParameterRegistry, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Joins a question and its answer into one history entity.
pub const SEP: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Dense token ids: the five specials first, then file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.push(s)?;
        }
        for t in tokens {
            vocab.push(t.as_ref())?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: &str) -> Result<()> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::data("vocabulary", format!("invalid token {token:?}")));
        }
        if self.index.contains_key(token) {
            return Err(Error::data("vocabulary", format!("duplicate token {token:?}")));
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        Ok(())
    }

    /// Newline-delimited file; line `k` (0-based) receives id `5 + k`.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The file form accepted by [`Vocabulary::parse`].
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lower-cased whitespace tokenization; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }
}

/// Encoder dimensions, shared by the three LSTMs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
}

pub fn truncate(tokens: &[usize], max_len: usize) -> &[usize] {
    &tokens[..tokens.len().min(max_len)]
}

/// Learned embedding table; the PAD row is masked to zero on lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: String,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn init(init: &mut ParamInit<'_>, vocab_size: usize, dim: usize) -> Result<Self> {
        let table = "embedding.table".to_string();
        init.normal(&table, vocab_size, dim, 1.0)?;
        Ok(Self {
            table,
            vocab_size,
            dim,
        })
    }

    /// `len x dim` rows for `ids`; PAD rows come out as exact zeros and
    /// receive no gradient.
    pub fn embed(&self, tape: &mut Tape, params: &ParameterRegistry, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                size: self.vocab_size,
            });
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of an empty sequence"));
        }
        let table = tape.param(params, &self.table)?;
        let rows = tape.gather_rows(table, ids)?;
        if !ids.contains(&PAD) {
            return Ok(rows);
        }
        let mut mask = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            let keep = if id == PAD { 0.0 } else { 1.0 };
            mask.extend(std::iter::repeat_n(keep, self.dim));
        }
        let mask = tape.constant(Tensor::matrix(ids.len(), self.dim, mask)?);
        tape.hadamard(rows, mask)
    }
}

/// Single-layer unidirectional LSTM with gate order input, forget, cell,
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: String,
    pub hidden: usize,
}

impl Lstm {
    pub fn init(init: &mut ParamInit<'_>, prefix: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        let input = init.linear(&format!("{prefix}.input"), input_dim, 4 * hidden)?;
        let recurrent = format!("{prefix}.recurrent.weight");
        init.uniform(&recurrent, hidden, 4 * hidden)?;
        Ok(Self {
            input,
            recurrent,
            hidden,
        })
    }

    /// Encodes a batch of token sequences, returning the hidden state after
    /// each sequence's last real token (`batch x hidden`). Positions past a
    /// sequence's length never touch its state.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        embedding: &Embedding,
        seqs: &[&[usize]],
    ) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::contract("LSTM batch is empty"));
        }
        if let Some(pos) = seqs.iter().position(|s| s.is_empty()) {
            return Err(Error::contract(format!("sequence {pos} has length 0")));
        }
        let batch = seqs.len();
        let h_dim = self.hidden;
        let max_len = seqs.iter().map(|s| s.len()).max().expect("non-empty");
        let w_h = tape.param(params, &self.recurrent)?;
        let mut h = tape.constant(Tensor::zeros(&[batch, h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[batch, h_dim]));

        for step in 0..max_len {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(step).copied().unwrap_or(PAD)).collect();
            let x = embedding.embed(tape, params, &ids)?;
            let zx = self.input.forward(tape, params, x)?;
            let zh = tape.matmul(h, w_h)?;
            let z = tape.add(zx, zh)?;
            let zi = tape.slice(z, Axis::Cols, 0, h_dim)?;
            let zf = tape.slice(z, Axis::Cols, h_dim, h_dim)?;
            let zg = tape.slice(z, Axis::Cols, 2 * h_dim, h_dim)?;
            let zo = tape.slice(z, Axis::Cols, 3 * h_dim, h_dim)?;
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let fc = tape.hadamard(f, c)?;
            let ig = tape.hadamard(i, g)?;
            let c_new = tape.add(fc, ig)?;
            let tc = tape.tanh(c_new);
            let h_new = tape.hadamard(o, tc)?;

            let active: Vec<bool> = seqs.iter().map(|s| step < s.len()).collect();
            if active.iter().all(|&a| a) {
                h = h_new;
                c = c_new;
            } else {
                let mut keep_new = Vec::with_capacity(batch * h_dim);
                for &a in &active {
                    let v = if a { 1.0 } else { 0.0 };
                    keep_new.extend(std::iter::repeat_n(v, h_dim));
                }
                let keep_old: Vec<f64> = keep_new.iter().map(|v| 1.0 - v).collect();
                let m_new = tape.constant(Tensor::matrix(batch, h_dim, keep_new)?);
                let m_old = tape.constant(Tensor::matrix(batch, h_dim, keep_old)?);
                h = blend(tape, h_new, h, m_new, m_old)?;
                c = blend(tape, c_new, c, m_new, m_old)?;
            }
        }
        Ok(h)
    }
}

fn blend(tape: &mut Tape, new: Var, old: Var, m_new: Var, m_old: Var) -> Result<Var> {
    let a = tape.hadamard(new, m_new)?;
    let b = tape.hadamard(old, m_old)?;
    tape.add(a, b)
}

/// Embedding table plus the question, history and candidate LSTMs.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoders {
    pub dims: EncoderDims,
    pub embedding: Embedding,
    pub question: Lstm,
    pub history: Lstm,
    pub candidates: Lstm,
}

impl SentenceEncoders {
    pub fn init(init: &mut ParamInit<'_>, dims: EncoderDims) -> Result<Self> {
        let embedding = Embedding::init(init, dims.vocab_size, dims.embed_dim)?;
        let question = Lstm::init(init, "encoder.question", dims.embed_dim, dims.hidden)?;
        let history = Lstm::init(init, "encoder.history", dims.embed_dim, dims.hidden)?;
        let candidates = Lstm::init(init, "encoder.candidates", dims.embed_dim, dims.hidden)?;
        Ok(Self {
            dims,
            embedding,
            question,
            history,
            candidates,
        })
    }

    /// Query vector, `1 x hidden`, from at most `max_len` tokens.
    pub fn encode_question(&self, tape: &mut Tape, params: &ParameterRegistry, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("empty question"));
        }
        let seq = truncate(tokens, self.dims.max_len);
        self.question.encode(tape, params, &self.embedding, &[seq])
    }

    /// One row per dialogue entity: row 0 is the caption, row `k` the
    /// `k`-th question/answer pair joined by [`SEP`].
    pub fn encode_history(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        caption: &[usize],
        rounds: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<Var> {
        let seqs = history_sequences(caption, rounds, self.dims.max_len)?;
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        self.history.encode(tape, params, &self.embedding, &refs)
    }

    pub fn encode_candidates(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        candidates: &[Vec<usize>],
    ) -> Result<Var> {
        if candidates.len() < 2 {
            return Err(Error::contract(format!(
                "need at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        let refs: Vec<&[usize]> = candidates
            .iter()
            .map(|c| truncate(c, self.dims.max_len))
            .collect();
        self.candidates.encode(tape, params, &self.embedding, &refs)
    }
}

/// Token sequences for the history entities, truncated per sentence.
pub fn history_sequences(
    caption: &[usize],
    rounds: &[(Vec<usize>, Vec<usize>)],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if caption.is_empty() {
        return Err(Error::contract("caption is empty"));
    }
    let mut seqs = vec![truncate(caption, max_len).to_vec()];
    for (q, a) in rounds {
        let mut s = truncate(q, max_len).to_vec();
        s.push(SEP);
        s.extend_from_slice(truncate(a, max_len));
        seqs.push(s);
    }
    Ok(seqs)
}
