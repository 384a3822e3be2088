//! Learnable latent prompt, answer-bank conditioning and the consistency loss.

use rand::Rng;

use crate::attention::{multi_head_attention, self_attention, AttentionParams, Linear};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PROMPT_INIT_STD: f64 = 0.02;

/// `P×d` matrix with entries drawn from `N(0, 0.02²)`.
pub fn init_prompt<R: Rng>(size: usize, width: usize, rng: &mut R) -> Result<Tensor> {
    if size == 0 || width == 0 {
        return Err(Error::config(format!("prompt size {size}x{width}")));
    }
    Ok(normal_tensor(size, width, PROMPT_INIT_STD, rng))
}

/// Answer-bank sublayers used to generate the prompt.
#[derive(Debug, Clone)]
pub struct LatentPromptParams {
    pub bank_attention: AttentionParams,
    pub bank_projection: Linear,
    pub generation: AttentionParams,
}

impl LatentPromptParams {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            bank_attention: AttentionParams::new(store, "prompt.bank_sa", width, heads, rng)?,
            bank_projection: Linear::new(store, "prompt.bank_proj", width, width, rng),
            generation: AttentionParams::new(store, "prompt.generate_ca", width, heads, rng)?,
        })
    }
}

/// Registers `X_LP` in `store`.
pub fn add_prompt<R: Rng>(store: &mut ParamStore, size: usize, width: usize, rng: &mut R) -> Result<ParamId> {
    Ok(store.add("prompt.latent", init_prompt(size, width, rng)?))
}

/// `F_TA = Proj(SA(X_TA))`.
pub fn process_answer_bank(tape: &mut Tape, x_ta: Var, params: &LatentPromptParams) -> Result<Var> {
    if tape.value(x_ta).rows() == 0 {
        return Err(Error::contract("empty answer bank"));
    }
    let s = self_attention(tape, x_ta, &params.bank_attention, None)?;
    params.bank_projection.forward(tape, s)
}

/// `X̂_LP = CA(X_LP, F_TA, F_TA)`.
pub fn generate_prompt(tape: &mut Tape, x_lp: Var, f_ta: Var, params: &LatentPromptParams) -> Result<Var> {
    multi_head_attention(tape, x_lp, f_ta, &params.generation, None)
}

/// `1 - cos(mean(X̂_LP), mean(X_A))`.
pub fn consistency_loss(tape: &mut Tape, x_hat_lp: Var, x_a: Var) -> Result<Var> {
    let u = tape.mean_rows(x_hat_lp, None)?;
    let v = tape.mean_rows(x_a, None)?;
    let cos = tape.cosine_similarity(u, v)?;
    let one = tape.constant(Tensor::scalar(1.0))?;
    tape.sub(one, cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic() {
        let a = init_prompt(32, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_prompt(32, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[32, 64]);
        assert!(init_prompt(0, 4, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn init_mean_within_bound() {
        let t = init_prompt(32, 64, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 5.0 * PROMPT_INIT_STD / n.sqrt(), "{mean}");
    }

    struct Setup {
        prompt: ParamId,
        params: LatentPromptParams,
    }

    fn setup(width: usize) -> (ParamStore, Setup) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let prompt = add_prompt(&mut store, 3, width, &mut rng).unwrap();
        let params = LatentPromptParams::new(&mut store, width, 2, &mut rng).unwrap();
        (store, Setup { prompt, params })
    }

    #[test]
    fn single_row_bank_is_attended_fully() {
        let (store, p) = setup(4);
        let mut t = Tape::with_params(&store);
        let x = t.constant(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.8, 0.1]).unwrap()).unwrap();
        let f = process_answer_bank(&mut t, x, &p.params).unwrap();
        assert_eq!(t.value(f).shape(), &[1, 4]);
        let lp = t.param(p.prompt).unwrap();
        let out = generate_prompt(&mut t, lp, f, &p.params).unwrap();
        assert_eq!(t.value(out).shape(), &[3, 4]);
    }

    #[test]
    fn duplicated_bank_rows_match_single_row() {
        let (store, p) = setup(4);
        let row = vec![0.5, -1.0, 0.25, 2.0];
        let mut t = Tape::with_params(&store);
        let lp = t.param(p.prompt).unwrap();
        let one = t.constant(Tensor::matrix(1, 4, row.clone()).unwrap()).unwrap();
        let two = t.constant(Tensor::from_rows(&[row.clone(), row]).unwrap()).unwrap();
        let a = generate_prompt(&mut t, lp, one, &p.params).unwrap();
        let b = generate_prompt(&mut t, lp, two, &p.params).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-14);
    }

    #[test]
    fn bank_permutation() {
        let (store, p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = normal_tensor(5, 4, 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select_rows(&perm).unwrap();
        let mut t = Tape::with_params(&store);
        let a = t.constant(x).unwrap();
        let b = t.constant(xp).unwrap();
        let fa = process_answer_bank(&mut t, a, &p.params).unwrap();
        let fb = process_answer_bank(&mut t, b, &p.params).unwrap();
        let permuted = t.value(fa).select_rows(&perm).unwrap();
        assert!(permuted.max_abs_diff(t.value(fb)) < 1e-12);
        let lp = t.param(p.prompt).unwrap();
        let ga = generate_prompt(&mut t, lp, fa, &p.params).unwrap();
        let gb = generate_prompt(&mut t, lp, fb, &p.params).unwrap();
        assert!(t.value(ga).max_abs_diff(t.value(gb)) < 1e-12);
    }

    fn cs(u: Vec<f64>, v: Vec<f64>) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row_vector(u).unwrap()).unwrap();
        let b = t.constant(Tensor::row_vector(v).unwrap()).unwrap();
        let l = consistency_loss(&mut t, a, b).unwrap();
        t.value(l).item()
    }

    #[test]
    fn consistency_constructions() {
        assert!(cs(vec![1.0, 2.0], vec![1.0, 2.0]).abs() < 1e-12);
        assert!((cs(vec![1.0, 0.0], vec![0.0, 3.0]) - 1.0).abs() < 1e-12);
        assert!((cs(vec![1.0, -2.0], vec![-2.0, 4.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_pools_tokens() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let b = t.constant(Tensor::row_vector(vec![2.0, 2.0]).unwrap()).unwrap();
        let l = consistency_loss(&mut t, a, b).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);
    }
}
