//! Configuration parsing, validation and hashing.

use proptest::prelude::*;

use latent_vqa::config::{ModelConfig, PriorKv};
use latent_vqa::fusion::FusionOrder;
use latent_vqa::Error;

#[test]
fn presets_validate() {
    for cfg in [ModelConfig::default(), ModelConfig::tiny(), ModelConfig::large()] {
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn missing_keys_take_defaults() {
    let cfg = ModelConfig::from_toml("prompt_size = 8\nfusion_order = \"I>L>MM\"\n").unwrap();
    assert_eq!(cfg.prompt_size, 8);
    assert_eq!(cfg.fusion_order, FusionOrder::image_first());
    assert_eq!(cfg.d, ModelConfig::default().d);
    assert_eq!(ModelConfig::from_toml("").unwrap(), ModelConfig::default());
}

#[test]
fn bad_documents_are_config_errors() {
    for text in [
        "d = 10\nheads = 4",
        "heads = 0",
        "eta = -0.1",
        "learning_rate = 0.0",
        "theta = -1.0",
        "gat_heads = 3",
        "use_gm = false\nuse_cs = true",
        "use_gm = false\nuse_cs = false\nprior_kv = \"generated\"",
        "target_val_acc = 120.0",
        "fusion_order = \"L>L>MM\"",
        "fusion_order = \"sideways\"",
        "unknown_key = 1",
        "d = \"wide\"",
        "d = 1\nheads = 1\ngat_heads = 1",
    ] {
        assert!(matches!(ModelConfig::from_toml(text), Err(Error::Config(_))), "{text:?}");
    }
}

#[test]
fn hash_tracks_every_field() {
    let base = ModelConfig::default();
    let variants = [
        ModelConfig { seed: 8, ..base.clone() },
        ModelConfig { eta: 0.2, ..base.clone() },
        ModelConfig { fusion_order: FusionOrder::image_first(), ..base.clone() },
        ModelConfig { use_pf: false, ..base.clone() },
        ModelConfig { prior_kv: PriorKv::Generated, ..base.clone() },
        ModelConfig { target_val_acc: Some(90.0), ..base.clone() },
    ];
    let h = base.hash();
    assert_eq!(h.len(), 64);
    for v in variants {
        assert_ne!(v.hash(), h, "{v:?}");
    }
}

fn config() -> impl Strategy<Value = ModelConfig> {
    (
        (1usize..5, 1usize..5, 1usize..4, 1usize..70, 1usize..4),
        (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
        (1e-6f64..1.0, 0.0f64..1.0, any::<u64>(), prop::option::of(0.0f64..100.0)),
        (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()),
    )
        .prop_map(|((heads, mult, blocks, prompt, gat), (alpha, theta, beta, eta), (lr, wd, seed, target), (gm, cs, lf, pf))| {
            ModelConfig {
                d: heads * gat * mult.max(2),
                heads,
                gat_heads: gat,
                n_blocks: blocks,
                prompt_size: prompt,
                fusion_order: if seed % 2 == 0 { FusionOrder::image_first() } else { FusionOrder::language_first() },
                alpha,
                theta,
                beta,
                eta,
                learning_rate: lr,
                weight_decay: wd,
                seed,
                use_gm: gm,
                use_cs: cs && gm,
                use_lf: lf,
                use_pf: pf,
                target_val_acc: target,
                ..ModelConfig::default()
            }
        })
}

proptest! {
    #[test]
    fn valid_configs_round_trip(cfg in config()) {
        cfg.validate().unwrap();
        let back = ModelConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn validation_never_panics(text in "[a-z_ =\"0-9.\\n>-]{0,80}") {
        let _ = ModelConfig::from_toml(&text);
    }

    #[test]
    fn indivisible_widths_fail(d in 2usize..64, heads in 2usize..9) {
        prop_assume!(d % heads != 0);
        let cfg = ModelConfig { d, heads, gat_heads: 1, ..ModelConfig::default() };
        prop_assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_finite_weights_fail(which in 0usize..4, bad in prop::sample::select(vec![f64::NAN, f64::INFINITY, -1.0])) {
        let mut cfg = ModelConfig::default();
        match which {
            0 => cfg.alpha = bad,
            1 => cfg.theta = bad,
            2 => cfg.beta = bad,
            _ => cfg.eta = bad,
        }
        prop_assert!(cfg.validate().is_err());
    }
}
