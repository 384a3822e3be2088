//! Multi-modal fusion blocks: modality refresh, bidirectional cross-attention
//! and sequential latent-prompt fusion in a configurable order.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::{multi_head_attention, self_attention, AttentionParams, Linear, TokenMask};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Language,
    Image,
    Multimodal,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Language, Modality::Image, Modality::Multimodal];

    pub fn symbol(self) -> &'static str {
        match self {
            Modality::Language => "L",
            Modality::Image => "I",
            Modality::Multimodal => "MM",
        }
    }
}

/// Order in which the prompt consumes the three feature sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FusionOrder([Modality; 3]);

impl FusionOrder {
    pub fn new(order: [Modality; 3]) -> Result<Self> {
        if Modality::ALL.iter().all(|m| order.contains(m)) {
            Ok(Self(order))
        } else {
            Err(Error::config(format!("fusion order {order:?} is not a permutation")))
        }
    }

    pub fn language_first() -> Self {
        Self([Modality::Language, Modality::Image, Modality::Multimodal])
    }

    pub fn image_first() -> Self {
        Self([Modality::Image, Modality::Language, Modality::Multimodal])
    }

    pub fn stages(&self) -> [Modality; 3] {
        self.0
    }
}

impl Default for FusionOrder {
    fn default() -> Self {
        Self::language_first()
    }
}

impl fmt::Display for FusionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{}>{}>{}", a.symbol(), b.symbol(), c.symbol())
    }
}

/// Accepts `L>I>MM`, `L=>I=>MM` or `L⇒I⇒MM`.
impl FromStr for FusionOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace("=>", ">").replace('⇒', ">");
        let parts: Vec<&str> = norm.split('>').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::config(format!("fusion order {s:?} needs three stages")));
        }
        let mut out = [Modality::Language; 3];
        for (slot, p) in out.iter_mut().zip(&parts) {
            *slot = match p.to_ascii_uppercase().as_str() {
                "L" => Modality::Language,
                "I" => Modality::Image,
                "MM" => Modality::Multimodal,
                other => return Err(Error::config(format!("unknown fusion stage {other:?}"))),
            };
        }
        Self::new(out)
    }
}

impl Serialize for FusionOrder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FusionOrder {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct FusionBlockParams {
    pub image_refresh: AttentionParams,
    pub text_refresh: AttentionParams,
    pub image_to_text: AttentionParams,
    pub text_to_image: AttentionParams,
    pub image_projection: Linear,
    pub text_projection: Linear,
    /// One cross-attention per stage position; absent when prompt fusion is
    /// disabled.
    pub prompt: Option<[AttentionParams; 3]>,
}

impl FusionBlockParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        prompt_fusion: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut attn = |suffix: &str, rng: &mut R| AttentionParams::new(store, &format!("{name}.{suffix}"), width, heads, rng);
        let image_refresh = attn("image_sa", rng)?;
        let text_refresh = attn("text_sa", rng)?;
        let image_to_text = attn("image_ca", rng)?;
        let text_to_image = attn("text_ca", rng)?;
        let prompt = if prompt_fusion {
            Some([attn("prompt_ca0", rng)?, attn("prompt_ca1", rng)?, attn("prompt_ca2", rng)?])
        } else {
            None
        };
        Ok(Self {
            image_refresh,
            text_refresh,
            image_to_text,
            text_to_image,
            image_projection: Linear::new(store, &format!("{name}.image_proj"), width, width, rng),
            text_projection: Linear::new(store, &format!("{name}.text_proj"), width, width, rng),
            prompt,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossModal {
    pub f_mm: Var,
    pub f_fi: Var,
    pub f_fl: Var,
}

/// `F_FI = Proj(CA(F_I, F_L))`, `F_FL = Proj(CA(F_L, F_I))`, `F_MM = [F_FI; F_FL]`.
pub fn cross_modal_fuse(
    tape: &mut Tape,
    f_i: Var,
    f_l: Var,
    mask_l: Option<&TokenMask>,
    params: &FusionBlockParams,
) -> Result<CrossModal> {
    if tape.value(f_i).rows() == 0 || tape.value(f_l).rows() == 0 {
        return Err(Error::contract("empty modality"));
    }
    let a = multi_head_attention(tape, f_i, f_l, &params.image_to_text, mask_l)?;
    let f_fi = params.image_projection.forward(tape, a)?;
    let b = multi_head_attention(tape, f_l, f_i, &params.text_to_image, None)?;
    let f_fl = params.text_projection.forward(tape, b)?;
    let f_mm = tape.concat_rows(&[f_fi, f_fl])?;
    Ok(CrossModal { f_mm, f_fi, f_fl })
}

/// Feature sets visible to the prompt inside one block.
#[derive(Debug, Clone, Copy)]
pub struct PromptSources<'m> {
    pub f_i: Var,
    pub f_l: Var,
    pub f_mm: Var,
    pub mask_l: Option<&'m TokenMask>,
}

/// Three chained cross-attentions with the prompt state as query.
pub fn prompt_fuse(
    tape: &mut Tape,
    state: Var,
    src: PromptSources,
    order: FusionOrder,
    params: &[AttentionParams; 3],
) -> Result<Var> {
    let n_i = tape.value(src.f_i).rows();
    let mm_mask = src.mask_l.map(|m| TokenMask::all(n_i).concat(m));
    let mut x = state;
    for (params, stage) in params.iter().zip(order.stages()) {
        let (kv, mask) = match stage {
            Modality::Language => (src.f_l, src.mask_l),
            Modality::Image => (src.f_i, None),
            Modality::Multimodal => (src.f_mm, mm_mask.as_ref()),
        };
        x = multi_head_attention(tape, x, kv, params, mask)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// Final prompt state; absent without prompt fusion.
    pub x_tilde_ii: Option<Var>,
    pub f_fi: Var,
    pub f_fl: Var,
}

/// Runs every block in sequence. Each block refreshes both modalities with
/// self-attention, cross-fuses them, and (when enabled) advances the prompt
/// state. The block's cross-modal features become the next block's inputs.
pub fn run_stack(
    tape: &mut Tape,
    f_i0: Var,
    f_l0: Var,
    mask_l: Option<&TokenMask>,
    prompt: Option<Var>,
    blocks: &[FusionBlockParams],
    order: FusionOrder,
) -> Result<FusionOutput> {
    if blocks.is_empty() {
        return Err(Error::config("fusion stack needs at least one block"));
    }
    let (mut f_i, mut f_l, mut state) = (f_i0, f_l0, prompt);
    let mut last = None;
    for block in blocks {
        let ri = self_attention(tape, f_i, &block.image_refresh, None)?;
        let rl = self_attention(tape, f_l, &block.text_refresh, mask_l)?;
        let cm = cross_modal_fuse(tape, ri, rl, mask_l, block)?;
        if let (Some(s), Some(p)) = (state, &block.prompt) {
            let src = PromptSources {
                f_i: ri,
                f_l: rl,
                f_mm: cm.f_mm,
                mask_l,
            };
            state = Some(prompt_fuse(tape, s, src, order, p)?);
        }
        f_i = cm.f_fi;
        f_l = cm.f_fl;
        last = Some(cm);
    }
    let cm = last.expect("non-empty");
    Ok(FusionOutput {
        x_tilde_ii: state.filter(|_| blocks.iter().all(|b| b.prompt.is_some())),
        f_fi: cm.f_fi,
        f_fl: cm.f_fl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_tensor;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(store: &mut ParamStore, seed: u64) -> FusionBlockParams {
        FusionBlockParams::new(store, "b", 4, 2, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn order_parsing() {
        assert_eq!("L>I>MM".parse::<FusionOrder>().unwrap(), FusionOrder::language_first());
        assert_eq!("I⇒L⇒MM".parse::<FusionOrder>().unwrap(), FusionOrder::image_first());
        assert_eq!("i=>l=>mm".parse::<FusionOrder>().unwrap(), FusionOrder::image_first());
        assert!("L>L>MM".parse::<FusionOrder>().is_err());
        assert!("L>I".parse::<FusionOrder>().is_err());
        assert_eq!(FusionOrder::default().to_string(), "L>I>MM");
    }

    #[test]
    fn single_tokens_give_two_row_mm() {
        let mut store = ParamStore::new();
        let p = block(&mut store, 1);
        let mut t = Tape::with_params(&store);
        let i = t.constant(Tensor::row_vector(vec![1.0, 0.0, -1.0, 0.5]).unwrap()).unwrap();
        let l = t.constant(Tensor::row_vector(vec![0.2, 0.4, 0.0, -0.3]).unwrap()).unwrap();
        let cm = cross_modal_fuse(&mut t, i, l, None, &p).unwrap();
        assert_eq!(t.value(cm.f_mm).shape(), &[2, 4]);
    }

    #[test]
    fn symmetric_branches() {
        let mut store = ParamStore::new();
        let mut p = block(&mut store, 2);
        p.text_to_image = p.image_to_text.clone();
        p.text_projection = p.image_projection;
        let mut t = Tape::with_params(&store);
        let x = t.constant(Tensor::row_vector(vec![0.3, -0.7, 1.1, 0.0]).unwrap()).unwrap();
        let cm = cross_modal_fuse(&mut t, x, x, None, &p).unwrap();
        assert_eq!(t.value(cm.f_fi), t.value(cm.f_fl));
    }

    #[test]
    fn masked_language_rows_are_ignored() {
        let mut store = ParamStore::new();
        let p = block(&mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fi = normal_tensor(3, 4, 1.0, &mut rng);
        let fl = normal_tensor(3, 4, 1.0, &mut rng);
        let mut fl2 = fl.clone();
        for r in 1..3 {
            for c in 0..4 {
                fl2.set(r, c, 10.0 * (r + c) as f64);
            }
        }
        let mask = TokenMask::new(vec![true, false, false]).unwrap();
        let mut t = Tape::with_params(&store);
        let i = t.constant(fi).unwrap();
        let a = t.constant(fl).unwrap();
        let b = t.constant(fl2).unwrap();
        let x = cross_modal_fuse(&mut t, i, a, Some(&mask), &p).unwrap();
        let y = cross_modal_fuse(&mut t, i, b, Some(&mask), &p).unwrap();
        assert_eq!(t.value(x.f_fi), t.value(y.f_fi));
    }

    fn fused(order: FusionOrder, same: bool) -> Tensor {
        let mut store = ParamStore::new();
        let p = block(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prompt = normal_tensor(2, 4, 1.0, &mut rng);
        let (fi, fl, fm) = if same {
            let row = normal_tensor(1, 4, 1.0, &mut rng);
            (row.clone(), row.clone(), row)
        } else {
            (
                normal_tensor(3, 4, 1.0, &mut rng),
                normal_tensor(2, 4, 1.0, &mut rng),
                normal_tensor(5, 4, 1.0, &mut rng),
            )
        };
        let mut t = Tape::with_params(&store);
        let s = t.constant(prompt).unwrap();
        let src = PromptSources {
            f_i: t.constant(fi).unwrap(),
            f_l: t.constant(fl).unwrap(),
            f_mm: t.constant(fm).unwrap(),
            mask_l: None,
        };
        let out = prompt_fuse(&mut t, s, src, order, p.prompt.as_ref().unwrap()).unwrap();
        t.value(out).clone()
    }

    #[test]
    fn identical_sources_make_order_irrelevant() {
        let a = fused(FusionOrder::language_first(), true);
        let b = fused(FusionOrder::image_first(), true);
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn order_matters_on_random_inputs() {
        let a = fused(FusionOrder::language_first(), false);
        let b = fused(FusionOrder::image_first(), false);
        assert_eq!(a.shape(), &[2, 4]);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn stack_threads_prompt() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let blocks: Vec<_> = (0..2)
            .map(|k| FusionBlockParams::new(&mut store, &format!("b{k}"), 4, 2, true, &mut rng).unwrap())
            .collect();
        let fi = normal_tensor(3, 4, 1.0, &mut rng);
        let fl = normal_tensor(2, 4, 1.0, &mut rng);
        let prompt = normal_tensor(2, 4, 1.0, &mut rng);
        let mut t = Tape::with_params(&store);
        let (i, l, p) = (t.constant(fi).unwrap(), t.constant(fl).unwrap(), t.constant(prompt).unwrap());
        let one = run_stack(&mut t, i, l, None, Some(p), &blocks[..1], FusionOrder::default()).unwrap();
        let two = run_stack(&mut t, i, l, None, Some(p), &blocks, FusionOrder::default()).unwrap();
        let (a, b) = (one.x_tilde_ii.unwrap(), two.x_tilde_ii.unwrap());
        assert_eq!(t.value(two.f_fi).shape(), &[3, 4]);
        assert_eq!(t.value(two.f_fl).shape(), &[2, 4]);
        assert!(t.value(a).max_abs_diff(t.value(b)) > 1e-6);
        assert!(run_stack(&mut t, i, l, None, Some(p), &[], FusionOrder::default()).is_err());
    }
}
