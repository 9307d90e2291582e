use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::imaging::{FaceMask, ImageRGB};
use crate::nn::{ParamStore, Tensor};

fn tiny_arch(resolution: usize) -> ArchDescriptor {
    ArchDescriptor {
        resolution,
        gen_channels: vec![3, 4],
        disc_channels: vec![2, 3],
    }
}

fn random_image(rng: &mut ChaCha8Rng, r: usize) -> ImageRGB {
    ImageRGB::from_raw(r, r, (0..r * r * 3).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, r: usize) -> TrainingSample {
    let mut mask = FaceMask::empty(r, r);
    for y in r / 4..3 * r / 4 {
        for x in r / 4..3 * r / 4 {
            mask.set(x, y, true);
        }
    }
    TrainingSample {
        occluded: random_image(rng, r),
        synthesis: random_image(rng, r),
        ground_truth: random_image(rng, r),
        mask,
    }
}

fn random_batch(seed: u64, n: usize, r: usize) -> GanBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<_> = (0..n).map(|_| random_sample(&mut rng, r)).collect();
    GanBatch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap()
}

fn one_hot(k: usize) -> LossWeights {
    let mut v = [0.0; 6];
    v[k] = 1.0;
    LossWeights {
        lambda1: v[0],
        lambda2: v[1],
        lambda3: v[2],
        lambda4: v[3],
        lambda5: v[4],
        lambda6: v[5],
    }
}

#[test]
fn generator_output_shape_and_range() {
    let arch = tiny_arch(16);
    let g = Generator::new(&arch, 3).unwrap();
    let batch = random_batch(1, 2, 16);
    let out = g.forward(&batch.generator_input(), Mode::Train).unwrap().output;
    assert_eq!((out.n, out.c, out.h, out.w), (2, 3, 16, 16));
    assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    let wrong = Tensor::zeros(1, 5, 16, 16);
    assert!(g.forward(&wrong, Mode::Eval).is_err());
}

#[test]
fn zero_output_layer_gives_one_half() {
    let mut g = Generator::new(&tiny_arch(16), 0).unwrap();
    g.zero_output_layer();
    let out = g.forward(&random_batch(2, 2, 16).generator_input(), Mode::Eval).unwrap().output;
    assert!(out.data.iter().all(|&v| v == 0.5));
}

#[test]
fn zero_projection_gives_one_half() {
    let mut d = Discriminator::new(&tiny_arch(16), "d", 0).unwrap();
    d.zero_projection();
    let probs = d.forward(&random_batch(3, 3, 16).ground_truth, Mode::Train).unwrap().probs;
    assert_eq!(probs, vec![0.5; 3]);
}

#[test]
fn discriminator_layout_follows_resolution() {
    let d = Discriminator::new(&ArchDescriptor::default(), "d", 0).unwrap();
    assert_eq!(d.num_conv_layers(), 7);
    assert_eq!(d.strides(), vec![2, 2, 2, 2, 2, 2, 1]);
    let one = Tensor::zeros(1, 3, 64, 64);
    let p = d.forward(&one, Mode::Eval).unwrap().probs;
    assert_eq!(p.len(), 1);
    assert!(p[0] > 0.0 && p[0] < 1.0);
}

#[test]
fn disabled_skip_changes_output() {
    let g = Generator::new(&tiny_arch(16), 5).unwrap();
    assert_eq!(g.num_skips(), 1);
    let x = random_batch(4, 2, 16).generator_input();
    let all = g.forward_with_skips(&x, Mode::Train, &[true]).unwrap().output;
    let none = g.forward_with_skips(&x, Mode::Train, &[false]).unwrap().output;
    let diff: f64 = all.data.iter().zip(&none.data).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6);
    assert!(g.forward_with_skips(&x, Mode::Train, &[true, true]).is_err());
}

#[test]
fn forced_half_losses() {
    let mut net = NetworkParams::new(&tiny_arch(16), 7).unwrap();
    net.d_global.zero_projection();
    net.d_local.zero_projection();
    let batch = random_batch(5, 2, 16);
    let (dg, dl) = discriminator_losses(&net, &batch).unwrap();
    assert!((dg - 2.0 * LN_2).abs() < 1e-9);
    assert!((dl - 2.0 * LN_2).abs() < 1e-9);
    let w = LossWeights::default();
    let (total, c) = generator_loss(&net, &batch, &w, Stage::Two).unwrap();
    assert!((c.l_adv_g - LN_2).abs() < 1e-9);
    assert!((c.l_adv_l.unwrap() - LN_2).abs() < 1e-9);
    assert!((total - (10.0 * c.l_gen + 2.0 * LN_2)).abs() < 1e-10);
}

#[test]
fn bce_clamps_at_boundaries() {
    let (l, g) = bce_real(&[0.0]);
    assert!((l + LOG_CLAMP.ln()).abs() < 1e-12);
    assert_eq!(g, vec![0.0]);
    let (l, g) = bce_fake(&[1.0]);
    assert!((l + LOG_CLAMP.ln()).abs() < 1e-8);
    assert_eq!(g, vec![0.0]);
    let (l, _) = bce_real(&[1.0]);
    assert!(l.abs() < 1e-6);
}

#[test]
fn reconstruction_terms_vanish_at_target() {
    let batch = random_batch(6, 2, 8);
    let (l, _) = l1_loss(&batch.ground_truth, &batch.ground_truth);
    assert_eq!(l, 0.0);
    let flat = Tensor::from_vec(2, 3, 8, 8, vec![0.3; 2 * 3 * 64]).unwrap();
    let (tv, grad) = tv_loss(&flat);
    assert_eq!(tv, 0.0);
    assert!(grad.data.iter().all(|&v| v == 0.0));
}

#[test]
fn tv_matches_direct_formula() {
    let batch = random_batch(7, 2, 8);
    let t = &batch.ground_truth;
    let mut expected = 0.0;
    for i in 0..t.n {
        let at = |c: usize, y: usize, x: usize| t.data[((i * 3 + c) * 8 + y) * 8 + x];
        let (mut sx, mut sy) = (0.0, 0.0);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    if x < 7 {
                        sx += (at(c, y, x + 1) - at(c, y, x)).powi(2);
                    }
                    if y < 7 {
                        sy += (at(c, y + 1, x) - at(c, y, x)).powi(2);
                    }
                }
            }
        }
        expected += (sx / 168.0).sqrt() + (sy / 168.0).sqrt();
    }
    expected /= 2.0;
    assert!((tv_loss(t).0 - expected).abs() < 1e-12);
}

#[test]
fn masking_is_idempotent() {
    let batch = random_batch(8, 2, 8);
    let once = batch.ground_truth.mul_mask(&batch.mask);
    assert_eq!(once.mul_mask(&batch.mask).data, once.data);
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central differences of `f` at sampled flat indices of `store(net)`.
fn check_gradient(
    net: &mut NetworkParams,
    analytic: &ParamStore,
    store: fn(&mut NetworkParams) -> &mut ParamStore,
    f: &dyn Fn(&NetworkParams) -> f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let h = 1e-5;
    let n = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..n);
        let orig = store(net).flat_get(i);
        store(net).flat_set(i, orig + h);
        let fp = f(net);
        store(net).flat_set(i, orig - h);
        let fm = f(net);
        store(net).flat_set(i, orig);
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic.flat_get(i), numeric));
    }
    worst
}

#[test]
fn generator_gradients_match_finite_differences() {
    let arch = tiny_arch(8);
    let batch = random_batch(9, 2, 8);
    for (k, stage) in [(0, Stage::One), (1, Stage::One), (2, Stage::One), (3, Stage::Two)] {
        let mut net = NetworkParams::new(&arch, 11).unwrap();
        let w = one_hot(k);
        let (_, grads) = generator_gradients(&net, &batch, &w, stage).unwrap();
        let f = |n: &NetworkParams| generator_loss(n, &batch, &w, stage).unwrap().0;
        let err = check_gradient(&mut net, &grads, |n| &mut n.generator.params, &f, 40, k as u64);
        assert!(err < 1e-3, "component {k}: relative error {err}");
    }
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let arch = tiny_arch(8);
    let batch = random_batch(10, 2, 8);
    let mut net = NetworkParams::new(&arch, 12).unwrap();
    let (_, _, g_global, g_local) = discriminator_gradients(&net, &batch, &one_hot(5), Stage::Two).unwrap();
    let f = |n: &NetworkParams| discriminator_losses(n, &batch).unwrap().0;
    let err = check_gradient(&mut net, &g_global, |n| &mut n.d_global.params, &f, 40, 1);
    assert!(err < 1e-3, "global: {err}");
    let (_, _, _, g_local_only) = discriminator_gradients(&net, &batch, &one_hot(4), Stage::Two).unwrap();
    assert!(g_local.is_some());
    let f = |n: &NetworkParams| discriminator_losses(n, &batch).unwrap().1;
    let err = check_gradient(&mut net, &g_local_only.unwrap(), |n| &mut n.d_local.params, &f, 40, 2);
    assert!(err < 1e-3, "local: {err}");
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        stage1_epochs: 1,
        stage2_epochs: 1,
        image_resolution: 32,
        checkpoint_interval: 1,
        ..TrainConfig::default()
    }
}

fn small_samples(n: usize) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..n).map(|_| random_sample(&mut rng, 32)).collect()
}

#[test]
fn steps_are_detached() {
    let net = NetworkParams::new(&tiny_arch(32), 13).unwrap();
    let mut tr = Trainer::new(net, small_config(), LossWeights::default()).unwrap();
    let batch = random_batch(14, 2, 32);
    let gen = tr.net.generator.forward(&batch.generator_input(), Mode::Train).unwrap();
    let g_before = tr.net.generator.params.clone();
    tr.discriminator_step(&batch, &gen.output, Stage::Two).unwrap();
    assert_eq!(tr.net.generator.params, g_before);
    let d_before = (tr.net.d_global.clone(), tr.net.d_local.clone());
    tr.generator_step(&batch, &gen, Stage::Two).unwrap();
    assert_eq!(tr.net.d_global.params, d_before.0.params);
    assert_eq!(tr.net.d_global.buffers, d_before.0.buffers);
    assert_eq!(tr.net.d_local.params, d_before.1.params);
    assert_ne!(tr.net.generator.params, g_before);
}

#[test]
fn stage_one_leaves_local_discriminator_alone() {
    let net = NetworkParams::new(&tiny_arch(32), 15).unwrap();
    let before = net.d_local.clone();
    let mut tr = Trainer::new(net, small_config(), LossWeights::default()).unwrap();
    let c = tr.train_batch(&random_batch(16, 2, 32), Stage::One).unwrap();
    assert!(c.l_dl.is_none() && c.l_adv_l.is_none() && c.l_tv.is_some());
    assert_eq!(tr.net.d_local.params, before.params);
}

#[test]
fn training_is_deterministic_and_logs_stages() {
    let samples = small_samples(4);
    let run = || {
        let net = NetworkParams::new(&tiny_arch(32), 17).unwrap();
        train(net, &samples, &small_config(), &LossWeights::default(), None).unwrap()
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a.generator.params, b.generator.params);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 2);
    assert!(log_a[0].means.l_tv.is_some() && log_a[0].means.l_dl.is_none());
    assert!(log_a[1].means.l_tv.is_none() && log_a[1].means.l_adv_l.is_some());
    assert!(!log_a[1].to_line().contains("L_tv"));
    assert!(log_a[0].to_line().contains("L_tv="));
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let samples = small_samples(4);
    let cfg = small_config();
    let net = NetworkParams::new(&tiny_arch(32), 18).unwrap();
    let mut full = Trainer::new(net.clone(), cfg.clone(), LossWeights::default()).unwrap();
    full.run(&samples, None).unwrap();

    let mut first = Trainer::new(net, cfg.clone(), LossWeights::default()).unwrap();
    first.run_epoch(&samples).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.net.generator.params, first.net.generator.params);
    assert_eq!(ck.epochs_done, 1);
    let mut resumed = Trainer::from_checkpoint(ck, cfg, LossWeights::default()).unwrap();
    resumed.run(&samples, None).unwrap();
    assert_eq!(resumed.net.generator.params, full.net.generator.params);
    assert_eq!(resumed.net.d_local.params, full.net.d_local.params);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let net = NetworkParams::new(&tiny_arch(32), 19).unwrap();
    save_checkpoint(&path, &Checkpoint::for_network(net)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes).replacen("version 1", "version 9", 1);
    std::fs::write(&path, text.as_bytes()).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetworkParams::new(&tiny_arch(32), 21).unwrap();
    train(net, &small_samples(2), &small_config(), &LossWeights::default(), Some(dir.path())).unwrap();
    for f in ["train_log.tsv", "model.ckpt", "checkpoint_epoch_0001.ckpt", "checkpoint_epoch_0002.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn non_finite_training_aborts() {
    let mut net = NetworkParams::new(&tiny_arch(32), 22).unwrap();
    net.generator.params.flat_set(0, f64::NAN);
    let err = train(net, &small_samples(2), &small_config(), &LossWeights::default(), None).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite(_)), "{err}");
}

#[test]
fn eval_inference_is_deterministic() {
    let net = NetworkParams::new(&tiny_arch(16), 23).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (a, b) = (random_image(&mut rng, 16), random_image(&mut rng, 16));
    let x = deocclude(&net, &a, &b).unwrap();
    assert_eq!(x, deocclude(&net, &a, &b).unwrap());
    assert!(deocclude(&net, &random_image(&mut rng, 8), &b).is_err());
}

#[test]
fn arch_text_round_trip() {
    let a = ArchDescriptor::default();
    assert_eq!(ArchDescriptor::from_text(&a.to_text()).unwrap(), a);
    let bad = ArchDescriptor {
        resolution: 48,
        ..ArchDescriptor::default()
    };
    assert!(bad.validate().is_err());
}
