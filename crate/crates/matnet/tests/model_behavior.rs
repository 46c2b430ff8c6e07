//! Behavioral contracts of the assembled networks: neutral-state analytics,
//! structural counts, conditional independence, regularizer isolation, and
//! end-to-end gradient correctness on a small model.

use matnet::config::FullConfig;
use matnet::dist::LikelihoodKind;
use matnet::model::run::Observation;
use matnet::model::{MatNet, ParamGroup};
use matnet::tensor::ops;
use matnet::{Rng, Tape, Tensor};

fn uncond_cfg() -> matnet::config::ModelConfig {
    FullConfig::from_text(
        "input=1x8x8\nscales=4,fc:12\nchannels=4\nmodules=2,1\nlatent_channels=2\nlatent_fc=4\nz0_dim=6\n",
    )
    .unwrap()
    .model
}

fn cond_cfg() -> matnet::config::ModelConfig {
    FullConfig::from_text(
        "input=1x8x8\nscales=4,fc:12\nchannels=4\nmodules=2,1\nlatent_channels=2\nlatent_fc=4\nz0_dim=6\nconditional=true\n",
    )
    .unwrap()
    .model
}

fn binary_batch(b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 0);
    let data = (0..b * 64).map(|_| f64::from(rng.below(2) as u8)).collect();
    Tensor::from_vec(data, &[b, 1, 8, 8])
}

fn half_mask(b: usize) -> Tensor<f64> {
    // left half known
    let mut data = vec![0.0; b * 64];
    for bi in 0..b {
        for r in 0..8 {
            for c in 0..4 {
                data[bi * 64 + r * 8 + c] = 1.0;
            }
        }
    }
    Tensor::from_vec(data, &[b, 1, 8, 8])
}

#[test]
fn neutral_state_bound_is_data_entropy() {
    let net: MatNet<f64> = MatNet::zeroed(&uncond_cfg()).unwrap();
    let x = binary_batch(3, 5);
    let obs = Observation::full(x);
    let mut t = Tape::new();
    let mut rng = Rng::new(1, 0);
    let report = net.free_energy(&mut t, &obs, &mut rng, 1).unwrap();
    let expect = 64.0 * 2.0f64.ln();
    for v in report.total_bound.data() {
        assert!((v - expect).abs() < 1e-9, "bound {v} vs {expect}");
    }
    for (kl, label) in report.layer_kls.iter().zip(&report.layer_labels) {
        for v in kl.data() {
            assert_eq!(*v, 0.0, "layer {label} KL must be exactly 0");
        }
    }
}

#[test]
fn neutral_generation_is_uniform_bernoulli() {
    let net: MatNet<f64> = MatNet::zeroed(&uncond_cfg()).unwrap();
    let mut t = Tape::inert();
    let mut rng = Rng::new(2, 0);
    let out = net.generate_params(&mut t, 4, &mut rng, None).unwrap();
    let params = out.params.unwrap();
    assert!(params.data().iter().all(|v| *v == 0.0), "logits must be exactly 0");
    // mean output = probability 0.5 per pixel
    let mean = net.generate(4, &mut rng, None, true).unwrap();
    assert!(mean.data().iter().all(|v| *v == 0.5));
}

#[test]
fn latent_record_count_is_depth_plus_one() {
    let cfg = uncond_cfg();
    let net: MatNet<f64> = MatNet::new(&cfg, 11).unwrap();
    let obs = Observation::full(binary_batch(2, 6));
    let mut t = Tape::inert();
    let mut rng = Rng::new(3, 0);
    let inf = net.infer(&mut t, &obs, &mut rng).unwrap();
    assert_eq!(inf.layers.len(), cfg.depth() + 1);
    assert_eq!(inf.layers[0].label, "z0");
    // td features at full input resolution
    assert_eq!(inf.td_features.dims()[2..], [8, 8]);
}

#[test]
fn bound_decomposition_identity() {
    let net: MatNet<f64> = MatNet::new(&uncond_cfg(), 17).unwrap();
    let obs = Observation::full(binary_batch(2, 7));
    let mut t = Tape::new();
    let mut rng = Rng::new(4, 0);
    let report = net.free_energy(&mut t, &obs, &mut rng, 2).unwrap();
    for bi in 0..2 {
        let mut total = report.recon_nll.data()[bi];
        for kl in &report.layer_kls {
            total += kl.data()[bi];
        }
        let reported = report.total_bound.data()[bi];
        let rel = (total - reported).abs() / reported.abs().max(1.0);
        assert!(rel < 1e-6, "decomposition off by {rel}");
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let net: MatNet<f64> = MatNet::new(&uncond_cfg(), 21).unwrap();
    let a = net.generate(3, &mut Rng::new(9, 1), None, false).unwrap();
    let b = net.generate(3, &mut Rng::new(9, 1), None, false).unwrap();
    assert_eq!(a.data(), b.data());
    let c = net.generate(3, &mut Rng::new(10, 1), None, false).unwrap();
    assert_ne!(a.data(), c.data());
}

#[test]
fn conditional_known_pixels_pass_through_bit_exactly() {
    let net: MatNet<f64> = MatNet::new(&cond_cfg(), 23).unwrap();
    let x = binary_batch(2, 8);
    let mask = half_mask(2);
    let obs = Observation::masked(x.clone(), mask.clone()).unwrap();
    let mut rng = Rng::new(5, 0);
    let out = net.generate(2, &mut rng, Some(&obs), false).unwrap();
    for i in 0..x.numel() {
        if mask.data()[i] == 1.0 {
            assert_eq!(out.data()[i], x.data()[i], "known pixel {i} altered");
        }
    }
}

/// Perturb every parameter with noise so readouts leave the zero-init state.
fn randomize<SN: matnet::Scalar>(net: &mut MatNet<SN>, seed: u64, std: f64) {
    let root = Rng::new(seed, 0);
    net.for_each_param_mut(&mut |name, _, t| {
        let mut r = root.split_named(&name);
        let noise: Tensor<SN> = Tensor::randn(t.dims(), std, &mut r);
        let sum: Vec<SN> = t.data().iter().zip(noise.data()).map(|(a, b)| *a + *b).collect();
        *t = Tensor::from_vec(sum, t.dims());
    });
}

#[test]
fn conditional_independence_probe() {
    // generation-path quantities carry exactly zero gradient from unknown
    // pixels; inference posteriors carry nonzero gradient
    let mut net: MatNet<f64> = MatNet::new(&cond_cfg(), 29).unwrap();
    randomize(&mut net, 77, 0.05);
    let x = binary_batch(1, 9);
    let mask = half_mask(1);
    let obs = Observation::masked(x.clone(), mask.clone()).unwrap();

    // generation path
    let mut t = Tape::new();
    let mut rng = Rng::new(6, 0);
    let gen = net.generate_params(&mut t, 1, &mut rng, Some(&obs)).unwrap();
    let mut root = ops::sum_all(&mut t, &gen.params.clone().unwrap()).unwrap();
    for p in &gen.priors {
        let a = ops::sum_all(&mut t, p.mu()).unwrap();
        let b = ops::sum_all(&mut t, p.log_var()).unwrap();
        root = ops::add(&mut t, &root, &a).unwrap();
        root = ops::add(&mut t, &root, &b).unwrap();
    }
    let grads = t.backward(&root).unwrap();
    let gx = grads.wrt(&x);
    for i in 0..x.numel() {
        if mask.data()[i] == 0.0 {
            assert_eq!(gx.data()[i], 0.0, "generation depends on unknown pixel {i}");
        }
    }

    // inference path
    let mut t = Tape::new();
    let mut rng = Rng::new(7, 0);
    let inf = net.infer(&mut t, &obs, &mut rng).unwrap();
    let mut root: Option<Tensor<f64>> = None;
    for layer in &inf.layers {
        let a = ops::sum_all(&mut t, layer.posterior.mu()).unwrap();
        root = Some(match root {
            None => a,
            Some(prev) => ops::add(&mut t, &prev, &a).unwrap(),
        });
    }
    let grads = t.backward(&root.unwrap()).unwrap();
    let gx = grads.wrt(&x);
    let unknown_grad: f64 = (0..x.numel())
        .filter(|i| mask.data()[*i] == 0.0)
        .map(|i| gx.data()[i].abs())
        .sum();
    assert!(unknown_grad > 1e-12, "posteriors must use unknown pixels");
}

#[test]
fn regularizer_reaches_only_inference_parameters() {
    let net: MatNet<f64> = MatNet::new(&uncond_cfg(), 31).unwrap();
    let mut t = Tape::new();
    let mut rng = Rng::new(8, 0);
    let loss = net.inference_regularizer(&mut t, 2, &mut rng, None, false).unwrap();
    let grads = t.backward(&loss).unwrap();

    let mut inference_nonzero = false;
    net.for_each_param(&mut |name, group, tensor| {
        let g = grads.get(tensor);
        if group.is_inference_side() {
            if let Some(g) = g {
                if g.data().iter().any(|v| v.abs() > 0.0) {
                    inference_nonzero = true;
                }
            }
        } else {
            assert!(
                g.is_none(),
                "generator-side parameter {name} ({group:?}) received gradient from the regularizer"
            );
        }
    });
    assert!(inference_nonzero, "at least one inference parameter must receive gradient");
}

#[test]
fn full_model_loss_gradcheck_depth2() {
    // end-to-end gradient check on a depth-2 toy model: perturb a sample of
    // parameters from every group and compare against central differences,
    // holding the noise fixed via a frozen rng stream
    let cfg = FullConfig::from_text(
        "input=1x4x4\nscales=4,fc:6\nchannels=3\nmodules=1,1\nlatent_channels=1\nlatent_fc=3\nz0_dim=4\n",
    )
    .unwrap()
    .model;
    let net: MatNet<f64> = MatNet::new(&cfg, 37).unwrap();
    let x = Tensor::from_vec(
        (0..16).map(|i| f64::from((i % 3 == 0) as u8)).collect(),
        &[1, 1, 4, 4],
    );

    let loss_of = |net: &MatNet<f64>, t: &mut Tape<f64>| -> Tensor<f64> {
        let obs = Observation::full(x.clone());
        let mut rng = Rng::new(1234, 7);
        let report = net.free_energy(t, &obs, &mut rng, 1).unwrap();
        report.mean_bound(t).unwrap()
    };

    let mut t = Tape::new();
    let loss = loss_of(&net, &mut t);
    let grads = t.backward(&loss).unwrap();

    let named = net.named_params();
    let mut rng = Rng::new(55, 0);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, _, tensor) in &named {
        let analytic = grads.wrt(tensor);
        for _ in 0..2 {
            let ci = rng.below(tensor.numel());
            let x0 = tensor.data()[ci];
            let eps = 1e-4;
            let eval = |v: f64| -> f64 {
                let mut probe = net.clone();
                probe.for_each_param_mut(&mut |n, _, t| {
                    if n == *name {
                        *t = t.with_coord(ci, v);
                    }
                });
                let mut inert = Tape::inert();
                loss_of(&probe, &mut inert).item()
            };
            let fd = (eval(x0 + eps) - eval(x0 - eps)) / (2.0 * eps);
            let an = analytic.data()[ci];
            let err = matnet::check::rel_err(an, fd);
            worst = worst.max(err);
            assert!(
                err < 1e-4,
                "{name}[{ci}]: analytic {an:.6e} vs fd {fd:.6e} (rel {err:.2e})"
            );
            checked += 1;
        }
    }
    assert!(checked > 20);
    println!("full-model gradcheck: {checked} coords, worst rel err {worst:.3e}");
}

#[test]
fn eval_nll_neutral_state_is_exact_for_any_k() {
    let net: MatNet<f64> = MatNet::zeroed(&uncond_cfg()).unwrap();
    let obs = Observation::full(binary_batch(2, 10));
    let expect = 64.0 * 2.0f64.ln();
    for k in [1usize, 8, 64] {
        let mut rng = Rng::new(12, 0);
        let (mean, per) = net.eval_nll(&obs, k, &mut rng).unwrap();
        assert!((mean - expect).abs() < 1e-9, "k={k}: {mean} vs {expect}");
        for v in per {
            assert!((v - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn impute_two_stage_contracts() {
    let cfg1 = cond_cfg();
    let mut cfg2 = cond_cfg();
    cfg2.stage2 = true;
    let stage1: MatNet<f64> = MatNet::new(&cfg1, 41).unwrap();
    let stage2: MatNet<f64> = MatNet::new(&cfg2, 43).unwrap();
    let x = binary_batch(2, 11);

    // mask of all ones: nothing unknown, output equals input exactly
    let ones = Tensor::full(&[2, 1, 8, 8], 1.0);
    let obs = Observation::masked(x.clone(), ones).unwrap();
    let mut rng = Rng::new(13, 0);
    let out = matnet::model::run::impute_two_stage(&stage1, &stage2, &obs, &mut rng).unwrap();
    assert_eq!(out.data(), x.data());

    // half mask: known pixels preserved, deterministic under a fixed seed
    let mask = half_mask(2);
    let obs = Observation::masked(x.clone(), mask.clone()).unwrap();
    let out1 = matnet::model::run::impute_two_stage(&stage1, &stage2, &obs, &mut Rng::new(14, 0)).unwrap();
    let out2 = matnet::model::run::impute_two_stage(&stage1, &stage2, &obs, &mut Rng::new(14, 0)).unwrap();
    assert_eq!(out1.data(), out2.data());
    for i in 0..x.numel() {
        if mask.data()[i] == 1.0 {
            assert_eq!(out1.data()[i], x.data()[i]);
        }
    }

    // stage ordering is enforced
    assert!(matnet::model::run::impute_two_stage(&stage1, &stage1, &obs, &mut rng).is_err());
}

#[test]
fn ar_head_model_bound_and_equivalence() {
    let cfg = FullConfig::from_text(
        "input=1x8x8\nscales=4,fc:12\nchannels=4\nmodules=1,1\nlatent_channels=1\nlatent_fc=4\nz0_dim=4\nar_head=true\nar_layers=3\nar_features=6\n",
    )
    .unwrap()
    .model;
    let net: MatNet<f64> = MatNet::new(&cfg, 47).unwrap();
    let x = binary_batch(2, 12);
    let obs = Observation::full(x.clone());
    let mut t = Tape::new();
    let mut rng = Rng::new(15, 0);
    let report = net.free_energy(&mut t, &obs, &mut rng, 1).unwrap();
    assert!(report.total_bound.data().iter().all(|v| v.is_finite()));

    // neutral parameters: bound equals data entropy under Bernoulli
    let zeroed: MatNet<f64> = MatNet::zeroed(&cfg).unwrap();
    let mut t = Tape::new();
    let mut rng = Rng::new(16, 0);
    let report = zeroed.free_energy(&mut t, &obs, &mut rng, 1).unwrap();
    let expect = 64.0 * 2.0f64.ln();
    for v in report.total_bound.data() {
        assert!((v - expect).abs() < 1e-9);
    }
}

#[test]
fn mixture_prior_model_runs_and_reports_responsibilities() {
    let cfg = FullConfig::from_text(
        "input=1x8x8\nscales=4,fc:12\nchannels=4\nmodules=1,1\nlatent_channels=1\nlatent_fc=4\nz0_dim=4\nprior=mixture:3\n",
    )
    .unwrap()
    .model;
    let net: MatNet<f64> = MatNet::new(&cfg, 53).unwrap();
    let obs = Observation::full(binary_batch(4, 13));
    let mut t = Tape::new();
    let mut rng = Rng::new(17, 0);
    let report = net.free_energy(&mut t, &obs, &mut rng, 1).unwrap();
    let resp = report.responsibilities.unwrap();
    assert_eq!(resp.dims(), &[4, 3]);
    for bi in 0..4 {
        let s: f64 = resp.data()[bi * 3..(bi + 1) * 3].iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert!(report.entropy.is_some());
    // generation with a mixture prior is deterministic under a fixed seed
    let a = net.generate(2, &mut Rng::new(18, 0), None, false).unwrap();
    let b = net.generate(2, &mut Rng::new(18, 0), None, false).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn group_partition_covers_expected_groups() {
    let net: MatNet<f64> = MatNet::new(&cond_cfg(), 59).unwrap();
    let mut groups = std::collections::HashSet::new();
    net.for_each_param(&mut |_, g, _| {
        groups.insert(g);
    });
    for g in [ParamGroup::TdGen, ParamGroup::BuInf, ParamGroup::MergeInf, ParamGroup::BuGen, ParamGroup::MergeGen] {
        assert!(groups.contains(&g), "missing group {g:?}");
    }
}

#[test]
fn bernoulli_checked_mode_rejects_grayscale() {
    let net: MatNet<f64> = MatNet::new(&uncond_cfg(), 61).unwrap();
    let gray = Tensor::full(&[1, 1, 8, 8], 0.37);
    let obs = Observation::full(gray);
    let mut t = Tape::new().with_checked(true);
    let mut rng = Rng::new(19, 0);
    assert!(net.free_energy(&mut t, &obs, &mut rng, 1).is_err());
    let kind = net.cfg.likelihood;
    assert_eq!(kind, LikelihoodKind::Bernoulli);
}
