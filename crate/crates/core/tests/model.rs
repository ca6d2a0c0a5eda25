mod common;

use common::{central_diff, max_rel_err};
use rand::Rng;
use stochcon_core::distributions::{Hardness, VarianceSource};
use stochcon_core::model::{Distribution, LatentNoise, ModelConfig, Placement, StochConModel, ViewLayout};
use stochcon_core::rng::stream;
use stochcon_core::Tensor;

fn tiny(distribution: Distribution) -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        backbone_hidden: vec![4],
        backbone_dim: 4,
        proj_dim: 3,
        latent_dim: 3,
        distribution,
        n_global: 2,
        n_local: 1,
        infonce: stochcon_core::objective::InfoNceConfig { temperature: 0.5, eps_norm: 1e-12 },
        ..ModelConfig::default()
    }
}

fn random_views(layout: &ViewLayout, dim: usize, seed: u64) -> Tensor {
    let mut r = stream(seed, &[11]);
    Tensor::matrix(layout.rows(), dim, (0..layout.rows() * dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .unwrap()
}

fn flat_params(m: &StochConModel) -> Vec<f64> {
    m.params.iter().flat_map(|p| p.value.data().to_vec()).collect()
}

fn set_flat(m: &mut StochConModel, flat: &[f64]) {
    let mut off = 0;
    for p in m.params.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Full-loss gradient of every parameter against central differences.
fn full_gradient_check(cfg: ModelConfig, seed: u64) -> f64 {
    let mut model = StochConModel::new(cfg.clone(), seed).unwrap();
    // nonzero biases keep tiny ReLU layers from emitting all-zero rows
    let mut jitter = stream(seed, &[13]);
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += jitter.random_range(-0.3..0.3));
    }
    let layout = cfg.layout(2).unwrap();
    let views = random_views(&layout, cfg.input_dim, seed);
    let mut r = stream(seed, &[12]);
    let noise = LatentNoise::draw(&cfg, layout.stochastic_rows().len(), &mut r);
    model.params.zero_grad();
    model.forward_backward(&views, &layout, 0.7, &noise).unwrap();
    let analytic: Vec<f64> = model.params.iter().flat_map(|p| p.grad.data().to_vec()).collect();
    let theta = flat_params(&model);
    let mut probe = model.clone();
    let numeric = central_diff(
        |t| {
            set_flat(&mut probe, t);
            probe.pretrain_loss(&views, &layout, 0.7, &noise).unwrap()
        },
        &theta,
        1e-5,
    );
    max_rel_err(&analytic, &numeric)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut variants = Vec::new();
    for placement in [Placement::Top, Placement::Bottom] {
        variants.push(ModelConfig { placement, ..tiny(Distribution::Bernoulli) });
        variants.push(ModelConfig { placement, ..tiny(Distribution::None) });
        for source in [VarianceSource::SameView, VarianceSource::OpposingView] {
            variants.push(ModelConfig { placement, variance_source: source, ..tiny(Distribution::Gaussian) });
        }
    }
    variants.push(ModelConfig { samples: 2, ..tiny(Distribution::Bernoulli) });
    variants.push(ModelConfig { n_local: 0, ..tiny(Distribution::Gaussian) });
    variants.push(ModelConfig { bottleneck: false, latent_dim: 4, ..tiny(Distribution::Bernoulli) });
    for (i, cfg) in variants.into_iter().enumerate() {
        for seed in 0..5 {
            let err = full_gradient_check(cfg.clone(), seed * 31 + i as u64);
            assert!(err < 1e-4, "variant {i} seed {seed}: {err}");
        }
    }
}

#[test]
fn hard_mode_gradients_reach_encoder() {
    let cfg = ModelConfig { hardness: Hardness::Hard, ..tiny(Distribution::Bernoulli) };
    let mut model = StochConModel::new(cfg.clone(), 4).unwrap();
    let layout = cfg.layout(2).unwrap();
    let views = random_views(&layout, cfg.input_dim, 4);
    let mut r = stream(4, &[12]);
    let noise = LatentNoise::draw(&cfg, layout.stochastic_rows().len(), &mut r);
    let g = model.pretrain_graph(&views, &layout, 0.7, &noise, true).unwrap();
    let enc_grad_nonzero = {
        let mut g = g;
        g.tape.backward(g.loss).unwrap();
        let enc = model.encoder.as_ref().unwrap().weight;
        g.tape.grad(g.bound.var(enc)).unwrap().data().iter().any(|&v| v != 0.0)
    };
    assert!(enc_grad_nonzero);
    model.forward_backward(&views, &layout, 0.7, &noise).unwrap();
    assert!(model.params.iter().all(|p| p.grad.all_finite()));
}

#[test]
fn gaussian_with_zero_noise_and_identity_path_reduces_to_simclr() {
    let none_cfg = ModelConfig { bottleneck: false, latent_dim: 4, ..tiny(Distribution::None) };
    let gauss_cfg = ModelConfig { distribution: Distribution::Gaussian, ..none_cfg.clone() };
    let none = StochConModel::new(none_cfg.clone(), 8).unwrap();
    let mut gauss = StochConModel::new(gauss_cfg.clone(), 8).unwrap();
    // share backbone and head weights
    for p in none.params.iter() {
        let id = gauss.params.id_of(&p.name).unwrap();
        gauss.params.get_mut(id).value = p.value.clone();
    }
    let layout = none_cfg.layout(3).unwrap();
    let views = random_views(&layout, 5, 8);
    let a = none.pretrain_loss(&views, &layout, 1.0, &LatentNoise::none()).unwrap();
    let zeros = LatentNoise::zeros(&gauss_cfg, layout.stochastic_rows().len());
    let b = gauss.pretrain_loss(&views, &layout, 1.0, &zeros).unwrap();
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");

    // Same with an enabled bottleneck whose π mean half and ρ are identities.
    let bott_cfg = ModelConfig { bottleneck: true, ..gauss_cfg };
    let mut bott = StochConModel::new(bott_cfg.clone(), 8).unwrap();
    for p in none.params.iter() {
        let id = bott.params.id_of(&p.name).unwrap();
        bott.params.get_mut(id).value = p.value.clone();
    }
    let enc = bott.encoder.clone().unwrap();
    let dec = bott.decoder.clone().unwrap();
    let w = &mut bott.params.get_mut(enc.weight).value;
    for i in 0..4 {
        for j in 0..4 {
            w.data_mut()[i * 8 + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
    bott.params.get_mut(dec.weight).value = Tensor::identity(4);
    let c = bott.pretrain_loss(&views, &layout, 1.0, &zeros).unwrap();
    assert!((a - c).abs() < 1e-10, "{a} vs {c}");
}

#[test]
fn two_samples_average_two_single_sample_losses() {
    for dist in [Distribution::Bernoulli, Distribution::Gaussian] {
        let k2 = ModelConfig { samples: 2, ..tiny(dist) };
        let k1 = ModelConfig { samples: 1, ..tiny(dist) };
        let m2 = StochConModel::new(k2.clone(), 5).unwrap();
        let m1 = StochConModel::new(k1, 5).unwrap();
        let layout = k2.layout(3).unwrap();
        let views = random_views(&layout, 5, 5);
        let mut r = stream(5, &[1]);
        let noise = LatentNoise::draw(&k2, layout.stochastic_rows().len(), &mut r);
        let both = m2.pretrain_loss(&views, &layout, 0.5, &noise).unwrap();
        let first = LatentNoise { samples: vec![noise.samples[0].clone()] };
        let second = LatentNoise { samples: vec![noise.samples[1].clone()] };
        let l1 = m1.pretrain_loss(&views, &layout, 0.5, &first).unwrap();
        let l2 = m1.pretrain_loss(&views, &layout, 0.5, &second).unwrap();
        assert!((both - 0.5 * (l1 + l2)).abs() < 1e-12);
    }
}

#[test]
fn latent_parameters_only_see_stochastic_views() {
    for placement in [Placement::Top, Placement::Bottom] {
        let cfg = ModelConfig { placement, ..tiny(Distribution::Bernoulli) };
        let model = StochConModel::new(cfg.clone(), 2).unwrap();
        let layout = cfg.layout(2).unwrap();
        let views = random_views(&layout, 5, 2);
        let mut r = stream(2, &[1]);
        let noise = LatentNoise::draw(&cfg, layout.stochastic_rows().len(), &mut r);
        for (rows, expect_flow) in [(layout.deterministic_rows(), false), (layout.stochastic_rows(), true)] {
            let mut g = model.pretrain_graph(&views, &layout, 0.7, &noise, true).unwrap();
            let v = g.representations[0];
            let picked = g.tape.select_rows(v, rows).unwrap();
            let readout = g.tape.sum(picked, None).unwrap();
            g.tape.backward(readout).unwrap();
            for lin in [model.encoder.as_ref().unwrap(), model.decoder.as_ref().unwrap()] {
                let grad = g.tape.grad(g.bound.var(lin.weight)).unwrap();
                assert_eq!(grad.data().iter().any(|&x| x != 0.0), expect_flow, "{placement:?}");
            }
        }
    }
}

#[test]
fn opposing_view_variance_ignores_own_view() {
    for (source, own_flow) in [(VarianceSource::OpposingView, false), (VarianceSource::SameView, true)] {
        let cfg = ModelConfig { variance_source: source, ..tiny(Distribution::Gaussian) };
        let model = StochConModel::new(cfg.clone(), 3).unwrap();
        let layout = cfg.layout(2).unwrap();
        let views = random_views(&layout, 5, 3);
        let noise = LatentNoise::zeros(&cfg, layout.stochastic_rows().len());
        let mut g = model.pretrain_graph_opts(&views, &layout, 1.0, &noise, false, true).unwrap();
        let lv = g.log_var.unwrap();
        let var = g.tape.exp(lv).unwrap();
        let readout = g.tape.sum(var, None).unwrap();
        g.tape.backward(readout).unwrap();
        let grad = g.tape.grad(g.views.unwrap()).unwrap().clone();
        let own: Vec<f64> = layout.stochastic_rows().iter().flat_map(|&r| grad.row(r).to_vec()).collect();
        assert_eq!(own.iter().any(|&x| x != 0.0), own_flow, "{source:?}");
        let opposing: Vec<f64> = layout
            .stochastic_rows()
            .iter()
            .flat_map(|&r| grad.row(layout.opposing_row(r)).to_vec())
            .collect();
        assert_eq!(opposing.iter().any(|&x| x != 0.0), !own_flow);
    }
}

#[test]
fn replay_after_mutation_matches_fresh_build() {
    let cfg = tiny(Distribution::Bernoulli);
    let mut model = StochConModel::new(cfg.clone(), 6).unwrap();
    let layout = cfg.layout(2).unwrap();
    let views = random_views(&layout, 5, 6);
    let mut r = stream(6, &[1]);
    let noise = LatentNoise::draw(&cfg, layout.stochastic_rows().len(), &mut r);
    let mut g = model.pretrain_graph(&views, &layout, 0.7, &noise, true).unwrap();
    for p in model.params.iter_mut() {
        p.value = p.value.map(|v| v * 0.9 + 0.01);
    }
    for (i, p) in model.params.iter().enumerate() {
        g.tape.set_leaf(g.bound.vars()[i], p.value.clone()).unwrap();
    }
    g.tape.replay().unwrap();
    let fresh = model.pretrain_loss(&views, &layout, 0.7, &noise).unwrap();
    assert_eq!(g.tape.item(g.loss).unwrap(), fresh);
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny(Distribution::Gaussian);
    let layout = cfg.layout(3).unwrap();
    let views = random_views(&layout, 5, 1);
    let mut a = StochConModel::new(cfg.clone(), 1).unwrap();
    let mut b = StochConModel::new(cfg, 1).unwrap();
    let la = a.forward_pretrain(&views, &layout, 0.5, 9, 4).unwrap();
    let lb = b.forward_pretrain(&views, &layout, 0.5, 9, 4).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(a.params, b.params);
}
