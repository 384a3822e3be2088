//! The full model: parameter layout, frozen buffers, per-sample forward, and
//! the batched loss whose sample-independent prefix is evaluated once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Linear, TokenMask};
use crate::autograd::{Tape, Var};
use crate::config::{ModelConfig, PriorKv};
use crate::data::{AnswerVocabulary, Dataset, QASample, QType};
use crate::encoders::{
    encode_image, encode_text, AnswerEmbedder, EncoderShape, ImageEncoderParams, ImageGrid, TextEncoderParams,
    TextVocab, TokenSequence,
};
use crate::error::{Error, Result};
use crate::fusion::{run_stack, FusionBlockParams};
use crate::gradcheck::Objective;
use crate::latent_prompt::{add_prompt, consistency_loss, generate_prompt, process_answer_bank, LatentPromptParams};
use crate::objective::{self, argmax, bce_loss, classify, combine, total_loss, AnswerTarget, EvalReport};
use crate::parallel::{self, Execution};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::prior::{gat_forward, graph_prompt, KnowledgeGraph, PriorParams};
use crate::tensor::Tensor;

/// Dataset-derived state that is fixed for the lifetime of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    pub text_vocab: TextVocab,
    pub answers: AnswerVocabulary,
    pub embedder: AnswerEmbedder,
    pub graph: KnowledgeGraph,
    pub image_height: usize,
    pub image_width: usize,
}

impl Buffers {
    /// Text vocabulary covers every question, answer and graph node name.
    pub fn from_dataset(ds: &Dataset, width: usize, seed: u64) -> Result<Self> {
        let first = ds.train.first().ok_or_else(|| Error::contract("empty training split"))?;
        let texts = ds
            .all_samples()
            .flat_map(|s| [s.question.as_str(), s.answer.as_str()])
            .chain(ds.vocab.iter())
            .chain(ds.graph.nodes().iter().map(|n| n.name.as_str()));
        let text_vocab = TextVocab::build(texts);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
        Ok(Self {
            embedder: AnswerEmbedder::new(text_vocab.len(), width, &mut rng),
            text_vocab,
            answers: ds.vocab.clone(),
            graph: ds.graph.clone(),
            image_height: first.image.height(),
            image_width: first.image.width(),
        })
    }

    /// `X_TA`: pooled embedding of every answer.
    pub fn answer_bank(&self) -> Result<Tensor> {
        crate::encoders::embed_answer_set(&self.answers, &self.text_vocab, &self.embedder)
    }

    /// `F_OD`: pooled embedding of every node name.
    pub fn node_features(&self) -> Result<Tensor> {
        self.embedder
            .embed_all(&self.text_vocab, self.graph.nodes().iter().map(|n| n.name.as_str()))
    }
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
    pub prompt: Option<ParamId>,
    pub generator: Option<LatentPromptParams>,
    pub blocks: Vec<FusionBlockParams>,
    pub prior: Option<PriorParams>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub buffers: Buffers,
    pub store: ParamStore,
    x_ta: Tensor,
    f_od: Tensor,
}

/// A sample resolved against the model's vocabularies.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: ImageGrid,
    pub tokens: TokenSequence,
    pub answer: usize,
    pub target: AnswerTarget,
    /// `X_A`: token embeddings of the target answer.
    pub x_a: Tensor,
    pub qtype: QType,
}

/// Values of the sample-independent prefix fed to every per-sample tape.
#[derive(Debug, Clone, Default)]
struct SharedValues {
    start: Option<Tensor>,
    x_hat_lp: Option<Tensor>,
    lower: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, Default)]
struct SharedVars {
    start: Option<Var>,
    x_hat_lp: Option<Var>,
    lower: Option<Var>,
}

impl SharedVars {
    fn iter(&self) -> impl Iterator<Item = Var> {
        [self.start, self.x_hat_lp, self.lower].into_iter().flatten()
    }
}

/// Per-sample graph outputs.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub x_hat_ii: Option<Var>,
    pub f_fi: Var,
    pub f_fl: Var,
    pub logits: Var,
    pub bce: Var,
    pub cs: Option<Var>,
    pub loss: Var,
}

/// Inputs to the combination head, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs {
    pub x_hat_ii: Option<Tensor>,
    pub f_fi: Tensor,
    pub f_fl: Tensor,
    pub mask_l: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Mean total loss.
    pub loss: f64,
    pub bce: f64,
    pub cs: f64,
    pub grads: GradStore,
}

impl Model {
    pub fn new(config: ModelConfig, buffers: Buffers) -> Result<Self> {
        config.validate()?;
        config.validate_for_image(buffers.image_height, buffers.image_width)?;
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let shape = EncoderShape {
            width: d,
            heads: config.heads,
            layers: config.encoder_layers,
            ff_width: 2 * d,
        };
        let image = ImageEncoderParams::new(
            &mut store,
            buffers.image_height,
            buffers.image_width,
            config.patch_size,
            &shape,
            &mut rng,
        )?;
        let text = TextEncoderParams::new(&mut store, buffers.text_vocab.len(), config.max_question_len, &shape, &mut rng)?;
        let prompt = if config.has_prompt() {
            Some(add_prompt(&mut store, config.prompt_size, d, &mut rng)?)
        } else {
            None
        };
        let generator = if config.use_gm {
            Some(LatentPromptParams::new(&mut store, d, config.heads, &mut rng)?)
        } else {
            None
        };
        let blocks = (0..config.n_blocks)
            .map(|k| FusionBlockParams::new(&mut store, &format!("block{k}"), d, config.heads, config.use_lf, &mut rng))
            .collect::<Result<_>>()?;
        let prior = if config.use_pf {
            Some(PriorParams::new(&mut store, d, config.heads, config.gat_heads, &mut rng)?)
        } else {
            None
        };
        let head = Linear::new(&mut store, "head", d, buffers.answers.len(), &mut rng);
        let x_ta = buffers.answer_bank()?;
        let f_od = buffers.node_features()?;
        Ok(Self {
            config,
            arch: Architecture {
                image,
                text,
                prompt,
                generator,
                blocks,
                prior,
                head,
            },
            buffers,
            store,
            x_ta,
            f_od,
        })
    }

    pub fn for_dataset(config: ModelConfig, ds: &Dataset) -> Result<Self> {
        let buffers = Buffers::from_dataset(ds, config.d, config.seed)?;
        Self::new(config, buffers)
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Coarse module name for a parameter name.
    pub fn group_of(name: &str) -> String {
        let head = name.split('.').next().unwrap_or(name);
        match head {
            "image" => "image_encoder",
            "text" => "text_encoder",
            "prompt" => "latent_prompt",
            "prior" => "prior_knowledge",
            "head" => "head",
            h if h.starts_with("block") => "fusion",
            _ => "other",
        }
        .to_string()
    }

    pub fn prepare(&self, samples: &[QASample]) -> Result<Vec<Prepared>> {
        samples.iter().map(|s| self.prepare_one(s)).collect()
    }

    pub fn prepare_one(&self, s: &QASample) -> Result<Prepared> {
        let b = &self.buffers;
        if s.image.height() != b.image_height || s.image.width() != b.image_width {
            return Err(Error::contract(format!(
                "image {}x{} but model expects {}x{}",
                s.image.height(),
                s.image.width(),
                b.image_height,
                b.image_width
            )));
        }
        let tokens = b.text_vocab.tokenize(&s.question)?;
        if tokens.ids.len() > self.config.max_question_len {
            return Err(Error::contract(format!(
                "question has {} tokens, limit is {}",
                tokens.ids.len(),
                self.config.max_question_len
            )));
        }
        let answer = b
            .answers
            .index_of(&s.answer)
            .ok_or_else(|| Error::contract(format!("answer {:?} not in vocabulary", s.answer)))?;
        Ok(Prepared {
            image: s.image.clone(),
            tokens,
            answer,
            target: AnswerTarget::one_hot(answer, b.answers.len())?,
            x_a: b.embedder.token_embeddings(&b.text_vocab, &s.answer)?,
            qtype: s.qtype,
        })
    }

    /// Records the sample-independent prefix: answer bank, generated prompt
    /// and the graph branch of the prior fusion.
    fn shared_graph(&self, tape: &mut Tape) -> Result<SharedVars> {
        let a = &self.arch;
        let Some(prompt) = a.prompt else {
            return Ok(SharedVars::default());
        };
        let x_lp = tape.param(prompt)?;
        let x_hat_lp = match &a.generator {
            Some(g) => {
                let x_ta = tape.constant(self.x_ta.clone())?;
                let f_ta = process_answer_bank(tape, x_ta, g)?;
                Some(generate_prompt(tape, x_lp, f_ta, g)?)
            }
            None => None,
        };
        let lower = match &a.prior {
            Some(p) => {
                let f_od = tape.constant(self.f_od.clone())?;
                let f_g = gat_forward(tape, &self.buffers.graph, f_od, &p.gat)?;
                let kv = match self.config.prior_kv {
                    PriorKv::Raw => x_lp,
                    PriorKv::Generated => x_hat_lp.ok_or_else(|| Error::config("generated prior key needs the generator"))?,
                };
                Some(graph_prompt(tape, f_g, kv, p)?)
            }
            None => None,
        };
        Ok(SharedVars {
            start: Some(x_hat_lp.unwrap_or(x_lp)),
            x_hat_lp: if self.config.use_cs { x_hat_lp } else { None },
            lower,
        })
    }

    fn shared_values(tape: &Tape, vars: &SharedVars) -> SharedValues {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        SharedValues {
            start: get(vars.start),
            x_hat_lp: get(vars.x_hat_lp),
            lower: get(vars.lower),
        }
    }

    fn bind_shared(tape: &mut Tape, values: &SharedValues, differentiable: bool) -> Result<SharedVars> {
        let mut bind = |t: &Option<Tensor>| -> Result<Option<Var>> {
            t.as_ref()
                .map(|t| if differentiable { tape.input(t.clone()) } else { tape.constant(t.clone()) })
                .transpose()
        };
        Ok(SharedVars {
            start: bind(&values.start)?,
            x_hat_lp: bind(&values.x_hat_lp)?,
            lower: bind(&values.lower)?,
        })
    }

    /// Combination head shared by training, evaluation and the isolation
    /// checks: pooled weighted sum followed by the classifier.
    pub fn head(&self, tape: &mut Tape, x_hat_ii: Option<Var>, f_fi: Var, f_fl: Var, mask_l: &TokenMask) -> Result<Var> {
        let m = (!mask_l.is_full()).then(|| mask_l.as_slice());
        let x_f = combine(tape, x_hat_ii, f_fi, f_fl, &self.config.combine_weights(), m)?;
        classify(tape, x_f, &self.arch.head)
    }

    fn sample_graph(&self, tape: &mut Tape, s: &Prepared, shared: &SharedVars, weight: f64) -> Result<SampleVars> {
        let a = &self.arch;
        let f_i = encode_image(tape, &s.image, &a.image)?;
        let (f_l, mask) = encode_text(tape, &s.tokens, &a.text)?;
        let m = (!mask.is_full()).then_some(&mask);
        let lf_state = if self.config.use_lf { shared.start } else { None };
        let out = run_stack(tape, f_i, f_l, m, lf_state, &a.blocks, self.config.fusion_order)?;
        let x_tilde_ii = if self.config.use_lf { out.x_tilde_ii } else { shared.start };
        let x_hat_ii = match (x_tilde_ii, shared.lower) {
            (Some(x), Some(lower)) => Some(tape.concat_rows(&[x, lower])?),
            (x, _) => x,
        };
        let logits = self.head(tape, x_hat_ii, out.f_fi, out.f_fl, &mask)?;
        let bce = bce_loss(tape, logits, &s.target)?;
        let cs = match shared.x_hat_lp {
            Some(x) => {
                let x_a = tape.constant(s.x_a.clone())?;
                Some(consistency_loss(tape, x, x_a)?)
            }
            None => None,
        };
        let total = total_loss(tape, bce, cs, &self.config.loss_weights())?;
        let loss = if weight == 1.0 { total } else { tape.scale(total, weight)? };
        Ok(SampleVars {
            x_hat_ii,
            f_fi: out.f_fi,
            f_fl: out.f_fl,
            logits,
            bce,
            cs,
            loss,
        })
    }

    /// Mean loss over `batch` and its gradient with respect to every
    /// parameter in `store`.
    pub fn loss_and_grad(&self, store: &ParamStore, batch: &[&Prepared], exec: Execution) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut shared_tape = Tape::with_params(store);
        let shared_vars = self.shared_graph(&mut shared_tape)?;
        let values = Self::shared_values(&shared_tape, &shared_vars);
        let weight = 1.0 / batch.len() as f64;

        let per_sample = parallel::try_map(exec, batch, |s| {
            let mut tape = Tape::with_params(store);
            let inputs = Self::bind_shared(&mut tape, &values, true)?;
            let v = self.sample_graph(&mut tape, s, &inputs, weight)?;
            tape.backward(v.loss)?;
            let seeds: Vec<Tensor> = inputs.iter().map(|i| tape.grad_or_zeros(i)).collect();
            let cs = v.cs.map_or(0.0, |c| tape.value(c).item());
            let (loss, bce) = (tape.value(v.loss).item(), tape.value(v.bce).item());
            Ok((loss, bce, cs, tape.into_param_grads(), seeds))
        })?;

        let mut grads = GradStore::for_store(store);
        let (mut loss, mut bce, mut cs) = (0.0, 0.0, 0.0);
        let mut seed_sums: Vec<Tensor> = shared_vars.iter().map(|v| shared_tape.value(v).zeros_like()).collect();
        for (l, b, c, g, seeds) in per_sample {
            loss += l;
            bce += b;
            cs += c;
            grads.merge_owned(g);
            for (acc, s) in seed_sums.iter_mut().zip(&seeds) {
                acc.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b);
            }
        }
        let seeds: Vec<(Var, &Tensor)> = shared_vars.iter().zip(&seed_sums).collect();
        if !seeds.is_empty() {
            shared_tape.backward_seeded(&seeds)?;
            shared_tape.accumulate_param_grads(&mut grads);
        }
        let n = batch.len() as f64;
        Ok(BatchResult {
            loss,
            bce: bce / n,
            cs: cs / n,
            grads,
        })
    }

    /// Mean loss of `batch` without gradients.
    pub fn loss(&self, store: &ParamStore, batch: &[&Prepared], exec: Execution) -> Result<f64> {
        let mut shared_tape = Tape::with_params(store);
        let vars = self.shared_graph(&mut shared_tape)?;
        let values = Self::shared_values(&shared_tape, &vars);
        let weight = 1.0 / batch.len() as f64;
        let losses = parallel::try_map(exec, batch, |s| {
            let mut tape = Tape::with_params(store);
            let inputs = Self::bind_shared(&mut tape, &values, false)?;
            let v = self.sample_graph(&mut tape, s, &inputs, weight)?;
            Ok(tape.value(v.loss).item())
        })?;
        Ok(losses.iter().sum())
    }

    /// Same loss recorded on one tape per sample with no shared prefix.
    pub fn loss_and_grad_unshared(&self, store: &ParamStore, batch: &[&Prepared]) -> Result<(f64, GradStore)> {
        let weight = 1.0 / batch.len() as f64;
        let mut grads = GradStore::for_store(store);
        let mut loss = 0.0;
        for s in batch {
            let mut tape = Tape::with_params(store);
            let shared = self.shared_graph(&mut tape)?;
            let v = self.sample_graph(&mut tape, s, &shared, weight)?;
            tape.backward(v.loss)?;
            tape.accumulate_param_grads(&mut grads);
            loss += tape.value(v.loss).item();
        }
        Ok((loss, grads))
    }

    fn with_shared_constants<R: Send>(
        &self,
        samples: &[Prepared],
        exec: Execution,
        f: impl Fn(&mut Tape, &Prepared, &SampleVars) -> Result<R> + Sync,
    ) -> Result<Vec<R>> {
        let mut shared_tape = Tape::with_params(&self.store);
        let vars = self.shared_graph(&mut shared_tape)?;
        let values = Self::shared_values(&shared_tape, &vars);
        parallel::try_map(exec, samples, |s| {
            let mut tape = Tape::with_params(&self.store);
            let inputs = Self::bind_shared(&mut tape, &values, false)?;
            let v = self.sample_graph(&mut tape, s, &inputs, 1.0)?;
            f(&mut tape, s, &v)
        })
    }

    pub fn logits(&self, samples: &[Prepared], exec: Execution) -> Result<Vec<Vec<f64>>> {
        self.with_shared_constants(samples, exec, |t, _, v| Ok(t.value(v.logits).data().to_vec()))
    }

    /// The combination head's inputs for each sample.
    pub fn head_inputs(&self, samples: &[Prepared], exec: Execution) -> Result<Vec<HeadInputs>> {
        self.with_shared_constants(samples, exec, |t, s, v| {
            Ok(HeadInputs {
                x_hat_ii: v.x_hat_ii.map(|x| t.value(x).clone()),
                f_fi: t.value(v.f_fi).clone(),
                f_fl: t.value(v.f_fl).clone(),
                mask_l: s.tokens.mask()?.as_slice().to_vec(),
            })
        })
    }

    /// Logits computed from detached head inputs.
    pub fn logits_from_head_inputs(&self, h: &HeadInputs) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let x = h.x_hat_ii.clone().map(|x| tape.constant(x)).transpose()?;
        let fi = tape.constant(h.f_fi.clone())?;
        let fl = tape.constant(h.f_fl.clone())?;
        let mask = TokenMask::new(h.mask_l.clone())?;
        let l = self.head(&mut tape, x, fi, fl, &mask)?;
        Ok(tape.value(l).data().to_vec())
    }

    pub fn evaluate(&self, samples: &[Prepared], exec: Execution) -> Result<EvalReport> {
        let logits = self.logits(samples, exec)?;
        let outcomes: Vec<(bool, bool)> = samples
            .iter()
            .zip(&logits)
            .map(|(s, l)| (s.qtype == QType::Open, argmax(l) == s.answer))
            .collect();
        objective::evaluate(&outcomes)
    }
}

/// The batch loss as a function of the parameter store, for gradient checks.
pub struct BatchObjective<'a> {
    pub model: &'a Model,
    pub batch: Vec<&'a Prepared>,
    pub exec: Execution,
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        self.model.loss(params, &self.batch, self.exec)
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, GradStore)> {
        let r = self.model.loss_and_grad(params, &self.batch, self.exec)?;
        Ok((r.loss, r.grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn tiny() -> (Model, Vec<Prepared>) {
        let spec = SyntheticSpec {
            n_train: 6,
            n_val: 2,
            n_test: 2,
            organs: 2,
            diseases: 2,
            image_size: 8,
            ..Default::default()
        };
        let ds = generate(&spec).unwrap().dataset;
        let model = Model::for_dataset(ModelConfig::tiny(), &ds).unwrap();
        let prepared = model.prepare(&ds.train).unwrap();
        (model, prepared)
    }

    #[test]
    fn shared_prefix_matches_unshared() {
        let (model, prepared) = tiny();
        let batch: Vec<&Prepared> = prepared.iter().take(3).collect();
        let r = model.loss_and_grad(&model.store, &batch, Execution::Sequential).unwrap();
        let (loss, grads) = model.loss_and_grad_unshared(&model.store, &batch).unwrap();
        assert!((r.loss - loss).abs() < 1e-12);
        for id in model.store.ids() {
            let a = r.grads.get(id).unwrap();
            let b = grads.get(id).unwrap();
            assert!(a.max_abs_diff(b) < 1e-12, "{}", model.store.name(id));
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (model, prepared) = tiny();
        let batch: Vec<&Prepared> = prepared.iter().collect();
        let a = model.loss_and_grad(&model.store, &batch, Execution::Sequential).unwrap();
        let b = model.loss_and_grad(&model.store, &batch, Execution::Parallel).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for id in model.store.ids() {
            assert_eq!(a.grads.get(id), b.grads.get(id));
        }
    }

    #[test]
    fn toggles_change_parameter_count() {
        let (model, _) = tiny();
        let full = model.param_count();
        let mut cfg = ModelConfig::tiny();
        cfg.use_pf = false;
        let no_pf = Model::new(cfg.clone(), model.buffers.clone()).unwrap().param_count();
        cfg.use_gm = false;
        cfg.use_cs = false;
        cfg.use_lf = false;
        let bl = Model::new(cfg, model.buffers.clone()).unwrap().param_count();
        assert!(full > no_pf && no_pf > bl);
    }

    #[test]
    fn head_inputs_reproduce_logits() {
        let (model, prepared) = tiny();
        let logits = model.logits(&prepared, Execution::Sequential).unwrap();
        let heads = model.head_inputs(&prepared, Execution::Sequential).unwrap();
        for (l, h) in logits.iter().zip(&heads) {
            assert_eq!(l, &model.logits_from_head_inputs(h).unwrap());
        }
    }
}
