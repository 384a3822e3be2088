//! Small trainable stand-ins for the image and text backbones, and the frozen
//! answer embedder that produces the answer bank and target embeddings.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self_attention, AttentionParams, LayerNormParams, Linear, TokenMask};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const PAD_ID: usize = 0;

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::contract(format!(
                "image {height}x{width} with {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("pixel intensity {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::contract("ragged image rows"));
        }
        Self::new(h, w, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.pixels.chunks(self.width).map(<[f64]>::to_vec).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// Non-overlapping `patch×patch` tiles, one row per tile in raster order.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::config(format!(
                "patch size {patch} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut data = Vec::with_capacity(self.pixels.len());
        for pr in 0..gh {
            for pc in 0..gw {
                for r in 0..patch {
                    let start = (pr * patch + r) * self.width + pc * patch;
                    data.extend_from_slice(&self.pixels[start..start + patch]);
                }
            }
        }
        Tensor::matrix(gh * gw, patch * patch, data)
    }
}

/// Token ids; `PAD_ID` marks padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn mask(&self) -> Result<TokenMask> {
        TokenMask::new(self.ids.iter().map(|&i| i != PAD_ID).collect())
    }
}

/// Whitespace word vocabulary with `<pad>` at id 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TextVocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<TextVocab> for Vec<String> {
    fn from(v: TextVocab) -> Self {
        v.words
    }
}

impl TextVocab {
    /// Sorted distinct words of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        let words = std::iter::once(PAD.to_string())
            .chain(set.into_iter().filter(|w| *w != PAD).map(str::to_string))
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("out-of-vocabulary word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::contract("empty text"));
        }
        Ok(TokenSequence { ids })
    }
}

/// Post-norm transformer encoder layer: self-attention then a GELU MLP.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: AttentionParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNormParams,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), width, ff_width, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_width, width, rng),
            ff_norm: LayerNormParams::new(store, &format!("{name}.ff_norm"), width),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<&TokenMask>) -> Result<Var> {
        let a = self_attention(tape, x, &self.attention, mask)?;
        let h = self.ff_in.forward(tape, a)?;
        let h = tape.gelu(h)?;
        let h = self.ff_out.forward(tape, h)?;
        let r = tape.add(a, h)?;
        self.ff_norm.forward(tape, r)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderShape {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
}

#[derive(Debug, Clone)]
pub struct ImageEncoderParams {
    pub patch: usize,
    pub tokens: usize,
    pub embed: Linear,
    pub position: ParamId,
    pub layers: Vec<EncoderLayer>,
    /// The extra self-attention applied on top of the backbone output.
    pub outer: AttentionParams,
}

impl ImageEncoderParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        image_height: usize,
        image_width: usize,
        patch: usize,
        shape: &EncoderShape,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 || image_height % patch != 0 || image_width % patch != 0 {
            return Err(Error::config(format!(
                "patch size {patch} does not divide {image_height}x{image_width}"
            )));
        }
        let tokens = (image_height / patch) * (image_width / patch);
        let layers = (0..shape.layers)
            .map(|i| EncoderLayer::new(store, &format!("image.layer{i}"), shape.width, shape.heads, shape.ff_width, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch,
            tokens,
            embed: Linear::new(store, "image.patch_embed", patch * patch, shape.width, rng),
            position: store.normal("image.position", tokens, shape.width, 0.02, rng),
            layers,
            outer: AttentionParams::new(store, "image.outer_sa", shape.width, shape.heads, rng)?,
        })
    }
}

/// Linear patch embedding plus positional embedding (before any attention).
pub fn embed_patches(tape: &mut Tape, img: &ImageGrid, params: &ImageEncoderParams) -> Result<Var> {
    let patches = img.patches(params.patch)?;
    if patches.rows() != params.tokens {
        return Err(Error::Shape {
            op: "encode_image",
            lhs: vec![patches.rows()],
            rhs: vec![params.tokens],
        });
    }
    let x = tape.constant(patches)?;
    let e = params.embed.forward(tape, x)?;
    let pos = tape.param(params.position)?;
    tape.add(e, pos)
}

/// `F_I = SA(E_I(X_I))`: patch embedding, encoder layers, outer self-attention.
pub fn encode_image(tape: &mut Tape, img: &ImageGrid, params: &ImageEncoderParams) -> Result<Var> {
    let mut x = embed_patches(tape, img, params)?;
    for layer in &params.layers {
        x = layer.forward(tape, x, None)?;
    }
    self_attention(tape, x, &params.outer, None)
}

#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed: ParamId,
    pub position: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub outer: AttentionParams,
}

impl TextEncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab_size: usize, max_len: usize, shape: &EncoderShape, rng: &mut R) -> Result<Self> {
        let layers = (0..shape.layers)
            .map(|i| EncoderLayer::new(store, &format!("text.layer{i}"), shape.width, shape.heads, shape.ff_width, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab_size,
            max_len,
            embed: store.normal("text.embed", vocab_size, shape.width, 1.0, rng),
            position: store.normal("text.position", max_len, shape.width, 0.02, rng),
            layers,
            outer: AttentionParams::new(store, "text.outer_sa", shape.width, shape.heads, rng)?,
        })
    }
}

/// Token plus positional embedding (before any attention).
pub fn embed_tokens(tape: &mut Tape, seq: &TokenSequence, params: &TextEncoderParams) -> Result<Var> {
    let n = seq.ids.len();
    if n == 0 || n > params.max_len {
        return Err(Error::contract(format!(
            "sequence length {n} outside 1..={}",
            params.max_len
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&i| i >= params.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            params.vocab_size
        )));
    }
    let table = tape.param(params.embed)?;
    let tok = tape.embedding(table, &seq.ids)?;
    let pos_table = tape.param(params.position)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.embedding(pos_table, &positions)?;
    tape.add(tok, pos)
}

/// `F_L = SA(E_L(X_L))` with padding masked out of every attention.
pub fn encode_text(tape: &mut Tape, seq: &TokenSequence, params: &TextEncoderParams) -> Result<(Var, TokenMask)> {
    let mask = seq.mask()?;
    let m = (!mask.is_full()).then_some(&mask);
    let mut x = embed_tokens(tape, seq, params)?;
    for layer in &params.layers {
        x = layer.forward(tape, x, m)?;
    }
    let out = self_attention(tape, x, &params.outer, m)?;
    Ok((out, mask))
}

/// Frozen word embedding table used for answers, target answers, and
/// knowledge-graph node names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEmbedder {
    pub table: Tensor,
}

impl AnswerEmbedder {
    pub fn new<R: Rng>(vocab_size: usize, width: usize, rng: &mut R) -> Self {
        Self {
            table: normal_tensor(vocab_size, width, 1.0, rng),
        }
    }

    /// Per-token rows of `text` (`T×d`).
    pub fn token_embeddings(&self, vocab: &TextVocab, text: &str) -> Result<Tensor> {
        let seq = vocab.tokenize(text)?;
        self.table.select_rows(&seq.ids)
    }

    /// Mean of the token rows of `text` (`1×d`).
    pub fn pooled(&self, vocab: &TextVocab, text: &str) -> Result<Tensor> {
        self.token_embeddings(vocab, text)?.mean_rows()
    }

    /// One pooled row per string, in order.
    pub fn embed_all<'a>(&self, vocab: &TextVocab, texts: impl IntoIterator<Item = &'a str>) -> Result<Tensor> {
        let mut rows = Vec::new();
        for t in texts {
            rows.push(self.pooled(vocab, t)?.into_data());
        }
        if rows.is_empty() {
            return Err(Error::contract("nothing to embed"));
        }
        Tensor::from_rows(&rows)
    }
}

/// `X_TA`: one pooled embedding row per answer, in vocabulary order.
pub fn embed_answer_set(
    answers: &crate::data::AnswerVocabulary,
    vocab: &TextVocab,
    embedder: &AnswerEmbedder,
) -> Result<Tensor> {
    if answers.is_empty() {
        return Err(Error::contract("empty answer vocabulary"));
    }
    embedder.embed_all(vocab, answers.iter())
}
