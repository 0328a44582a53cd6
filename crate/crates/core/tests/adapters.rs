mod common;

use adalink::adapters::{
    apply_multimodal_adalink, count_trainable_params, flops_added, lora_linear_tensor,
    AdaLinkModule, AdapterModules, AdapterSpec, LoraModule, MultimodalAdaLink, Scope,
};
use adalink::backbone::ModelConfig;
use adalink::{Error, Tensor};
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_module(d: usize, r: usize, scope: Scope, nonlinearity: bool, seed: u64) -> AdaLinkModule {
    let mut g = rng(seed);
    AdaLinkModule::from_weights(
        Tensor::randn([d, r], 1.0, &mut g),
        Tensor::randn([r, d], 1.0, &mut g),
        nonlinearity,
        scope,
    )
    .unwrap()
}

fn singular_values(t: &Tensor) -> Vec<f64> {
    let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let mut s: Vec<f64> = m
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
    )
    .unwrap()
}

#[test]
fn residual_has_rank_at_most_r() {
    for nonlinearity in [false, true] {
        let m = random_module(16, 2, Scope::Text, nonlinearity, 1);
        let e = Tensor::randn([10, 16], 1.0, &mut rng(2));
        let s = singular_values(&sub(&m.apply(&e).unwrap(), &e));
        assert!(s[1] > 1e-6, "{s:?}");
        assert!(s[2..].iter().all(|&x| x < 1e-9 * s[0].max(1.0)), "{s:?}");
    }
}

proptest! {
    #[test]
    fn linear_variant_is_homogeneous(seed in 0u64..1000, alpha in -4.0f64..4.0) {
        let m = random_module(8, 3, Scope::Text, false, seed);
        let e = Tensor::randn([5, 8], 1.0, &mut rng(seed + 1));
        let scaled = Tensor::new([5, 8], e.data().iter().map(|x| alpha * x).collect()).unwrap();
        let lhs = m.apply(&scaled).unwrap();
        let rhs = m.apply(&e).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - alpha * b).abs() <= 1e-12 * (1.0 + b.abs() * alpha.abs()));
        }
    }

    #[test]
    fn fresh_module_is_identity(seed in 0u64..1000, rows in 1usize..12) {
        let m = AdaLinkModule::new(8, 4, Scope::Image, seed % 2 == 0, &mut rng(seed)).unwrap();
        let e = Tensor::randn([rows, 8], 1.0, &mut rng(seed + 7));
        prop_assert!(m.apply(&e).unwrap().bit_eq(&e));
    }
}

#[test]
fn modality_modules_do_not_interact() {
    let mm = MultimodalAdaLink {
        text: Some(random_module(8, 2, Scope::Text, false, 1)),
        image: Some(random_module(8, 2, Scope::Image, false, 2)),
        unified: None,
    };
    let img = Tensor::randn([4, 8], 1.0, &mut rng(3));
    let txt = Tensor::randn([3, 8], 1.0, &mut rng(4));
    let (i0, t0) = apply_multimodal_adalink(Some(&img), &txt, &mm).unwrap();

    let mut perturbed = mm.clone();
    perturbed.text.as_mut().unwrap().up.data_mut()[0] += 1.0;
    let (i1, t1) = apply_multimodal_adalink(Some(&img), &txt, &perturbed).unwrap();
    assert!(i0.unwrap().bit_eq(i1.as_ref().unwrap()));
    assert!(!t0.bit_eq(&t1));

    let mut perturbed = mm.clone();
    perturbed.image.as_mut().unwrap().down.data_mut()[3] -= 1.0;
    let (i2, t2) = apply_multimodal_adalink(Some(&img), &txt, &perturbed).unwrap();
    assert!(t0.bit_eq(&t2));
    assert!(!i1.unwrap().bit_eq(&i2.unwrap()));
}

#[test]
fn fresh_multimodal_adapter_is_identity_in_both_layouts() {
    let cfg = small_config();
    let b = backbone(&cfg, 0);
    let img = Tensor::randn([4, 16], 1.0, &mut rng(3));
    let txt = Tensor::randn([3, 16], 1.0, &mut rng(4));
    for spec in [AdapterSpec::adalink(4), AdapterSpec::adalink_unified(8)] {
        let a = adapter(spec, &b, 11);
        let (i, t) = apply_multimodal_adalink(Some(&img), &txt, a.adalink().unwrap()).unwrap();
        assert!(i.unwrap().bit_eq(&img));
        assert!(t.bit_eq(&txt));
    }
}

#[test]
fn unified_at_twice_the_rank_matches_the_per_modality_budget() {
    for (d, r) in [(64, 8), (4096, 64), (16, 1)] {
        let cfg = ModelConfig {
            d_emb: d,
            ..ModelConfig::default()
        };
        let split = count_trainable_params(&AdapterSpec::adalink(r), &cfg, 1, 2);
        let unified = count_trainable_params(&AdapterSpec::adalink_unified(2 * r), &cfg, 1, 2);
        assert_eq!(split, unified);
        assert_eq!(split.total(), (2 * 2 * d * r) as u64);
    }
    let cfg = small_config();
    let b = backbone(&cfg, 0);
    assert_eq!(
        adapter(AdapterSpec::adalink(4), &b, 0).num_params(),
        adapter(AdapterSpec::adalink_unified(8), &b, 0).num_params()
    );
}

#[test]
fn lora_with_zero_b_or_zero_scale_is_the_base_layer() {
    let x = Tensor::randn([3, 6], 1.0, &mut rng(1));
    let w = Tensor::randn([6, 5], 1.0, &mut rng(2));
    let bias = Tensor::randn([5], 1.0, &mut rng(3));
    let base = lora_linear_tensor(
        &x,
        &w,
        &bias,
        &LoraModule::new(6, 5, 2, 1.0, &mut rng(4)).unwrap(),
    )
    .unwrap();
    let mut m = LoraModule::new(6, 5, 2, 0.0, &mut rng(5)).unwrap();
    m.b = Tensor::randn([2, 5], 1.0, &mut rng(6));
    assert!(lora_linear_tensor(&x, &w, &bias, &m).unwrap().bit_eq(&base));
    m.scale = 1.0;
    assert!(!lora_linear_tensor(&x, &w, &bias, &m).unwrap().bit_eq(&base));
}

#[test]
fn lora_covers_encoder_projections_only() {
    let cfg = small_config();
    let b = backbone(&cfg, 0);
    let a = adapter(AdapterSpec::lora(4), &b, 0);
    let AdapterModules::Lora(map) = a.modules() else {
        panic!("expected LoRA modules")
    };
    assert_eq!(map.len(), cfg.n_enc_layers * 6);
    assert!(map.values().all(|m| m.b.data().iter().all(|&x| x == 0.0)));
    assert!(a.named_params().iter().all(|(n, _)| !n.contains("dec")));
}

#[test]
fn set_sizes_equal_closed_form_counts() {
    let cfg = small_config();
    let b = backbone(&cfg, 0);
    for spec in every_kind() {
        let a = adapter(spec.clone(), &b, 0);
        let c = count_trainable_params(&spec, &cfg, 1, 2);
        if spec == AdapterSpec::FullFt {
            assert_eq!(c.total(), b.num_params() as u64);
        } else {
            assert_eq!(a.num_params() as u64, c.total(), "{spec:?}");
        }
    }
}

#[test]
fn adalink_cost_ignores_depth_heads_and_width_of_ffn() {
    let base = ModelConfig::default();
    let spec = AdapterSpec::adalink(8);
    let reference = flops_added(&spec, 12, &base);
    for cfg in [
        ModelConfig {
            n_enc_layers: 8,
            n_dec_layers: 8,
            ..base.clone()
        },
        ModelConfig {
            n_heads: 8,
            ..base.clone()
        },
        ModelConfig {
            d_ff: 1024,
            ..base.clone()
        },
    ] {
        assert_eq!(flops_added(&spec, 12, &cfg), reference);
    }
    let d64 = ModelConfig {
        d_emb: 64,
        ..ModelConfig::default()
    };
    assert_eq!(flops_added(&AdapterSpec::adalink(4), 100, &d64), 51_200);
}

#[test]
fn incompatible_widths_are_rejected() {
    let b = backbone(&small_config(), 0);
    let wide = ModelConfig {
        d_emb: 32,
        n_heads: 2,
        ..small_config()
    };
    for spec in [
        AdapterSpec::adalink(4),
        AdapterSpec::lora(2),
        AdapterSpec::prompt_tuning(),
    ] {
        let a = adapter(spec, &b, 0);
        assert!(matches!(
            a.check_compatible(&wide),
            Err(Error::Dimension { .. })
        ));
    }
}
