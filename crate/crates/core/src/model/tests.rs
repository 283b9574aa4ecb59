use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_discriminator, load_generator, save_discriminator, save_generator, TensorArchive};
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor<T: Real>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let data = (0..shape.iter().product()).map(|_| T::lit(r.gen_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn small(size: usize, depth: usize, base: usize) -> UNetConfig {
    UNetConfig {
        base_channels: base,
        ..UNetConfig::generator(size, depth)
    }
}

#[test]
fn generator_shapes_and_bounds() {
    for (size, depth, base) in [(64, 12, 8), (256, 16, 4)] {
        let cfg = small(size, depth, base);
        let g: Generator<f32> = build_generator(&cfg, &mut rng(1)).unwrap();
        let x = random_tensor::<f32>([1, 4, size, size], 2);
        let y = g.forward(&x, Noise::Off).unwrap();
        assert_eq!(y.shape(), [1, 3, size, size]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // Bottleneck is 1×1 for these pairings.
        assert_eq!(size >> cfg.levels(), 1);
    }
}

#[test]
fn mismatched_sizes_are_rejected() {
    assert!(matches!(UNetConfig::generator(64, 16).validate(), Err(Error::Config(_))));
    assert!(UNetConfig::generator(64, 13).validate().is_err());
    let g: Generator<f32> = build_generator(&small(64, 12, 4), &mut rng(0)).unwrap();
    let bad = Tensor::<f32>::zeros([1, 3, 64, 64]);
    assert!(matches!(g.forward(&bad, Noise::Off), Err(Error::ShapeMismatch(_))));
    let bad = Tensor::<f32>::zeros([1, 4, 48, 48]);
    assert!(g.forward(&bad, Noise::Off).is_err());
}

#[test]
fn skip_wiring_matches_encoder_outputs() {
    let cfg = small(256, 16, 8);
    let g: Generator<f32> = build_generator(&cfg, &mut rng(0)).unwrap();
    let blocks = g.0.blocks();
    let k = cfg.levels();
    let enc = &blocks[..k];
    let dec = &blocks[k..];
    assert_eq!(dec[0].in_channels, enc[k - 1].out_channels);
    for j in 1..k {
        assert_eq!(dec[j].in_channels, dec[j - 1].out_channels + enc[k - 1 - j].out_channels, "dec.{j}");
    }
    // Channel cap.
    assert!(enc.iter().all(|b| b.out_channels <= 8 * cfg.base_channels));
    assert_eq!(enc[k - 1].out_channels, 8 * cfg.base_channels);
    // Batch norm everywhere but the first, innermost and output blocks.
    assert!(!enc[0].batch_norm && !enc[k - 1].batch_norm && !dec[k - 1].batch_norm);
    assert!(enc[1..k - 1].iter().chain(&dec[..k - 1]).all(|b| b.batch_norm));
    assert_eq!(dec[k - 1].activation, Activation::Tanh);
    assert_eq!(dec.iter().filter(|b| b.dropout).count(), NOISY_DECODER_BLOCKS);
}

#[test]
fn critic_mirrors_generator() {
    let gcfg = small(64, 12, 8);
    let g: Generator<f32> = build_generator(&gcfg, &mut rng(0)).unwrap();
    let d: Discriminator<f32> = build_discriminator(&UNetConfig::critic_for(&gcfg), &mut rng(0)).unwrap();
    let (gb, db) = (g.0.blocks(), d.0.blocks());
    assert_eq!(gb.len(), db.len());
    assert_eq!(d.config().depth, g.config().depth);
    let last = gb.len() - 1;
    for (i, (a, b)) in gb.iter().zip(&db).enumerate() {
        assert_eq!(a.kind, b.kind);
        assert_eq!(a.batch_norm, b.batch_norm);
        if i != 0 {
            assert_eq!(a.in_channels, b.in_channels, "{}", a.name);
        }
        if i != last {
            assert_eq!(a.out_channels, b.out_channels, "{}", a.name);
        }
    }
    assert_eq!(db[0].in_channels, 7);
    assert_eq!(db[last].out_channels, 1);
    assert_eq!(db[last].activation, Activation::Identity);
}

#[test]
fn critic_output_shapes() {
    let cfg = UNetConfig::critic_for(&small(64, 12, 4));
    let d: Discriminator<f32> = build_discriminator(&cfg, &mut rng(3)).unwrap();
    let out = d.forward(&random_tensor([2, 7, 64, 64], 4)).unwrap();
    assert_eq!(out.map.shape(), [2, 1, 64, 64]);
    assert_eq!(out.global.len(), 2);
    assert_eq!(out.combined().len(), 2);
}

#[test]
fn noise_off_is_deterministic_and_dropout_is_not() {
    let g: Generator<f32> = build_generator(&small(64, 12, 8), &mut rng(5)).unwrap();
    let x = random_tensor::<f32>([1, 4, 64, 64], 6);
    assert_eq!(g.forward(&x, Noise::Off).unwrap(), g.forward(&x, Noise::Off).unwrap());
    let mut r = rng(7);
    let mut differing = 0;
    for _ in 0..10 {
        let a = g.forward(&x, Noise::Dropout(&mut r)).unwrap();
        let b = g.forward(&x, Noise::Dropout(&mut r)).unwrap();
        if a != b {
            differing += 1;
        }
    }
    assert_eq!(differing, 10);
}

#[test]
fn zero_critic_scores_zero() {
    let cfg = UNetConfig::critic_for(&small(64, 12, 4));
    let mut d: Discriminator<f64> = build_discriminator(&cfg, &mut rng(1)).unwrap();
    d.0.zero_parameters();
    let out = d.forward(&random_tensor([2, 7, 64, 64], 2)).unwrap();
    assert!(out.global.iter().all(|&v| v == 0.0));
    assert!(out.map.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.mean_combined(), 0.0);
}

#[test]
fn linear_toy_critic_is_homogeneous() {
    // Two convolutions, no normalization, identity-like leaky slope, zero biases.
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 3,
        in_channels: 7,
        out_channels: 1,
        norm: false,
        leaky_slope: 1.0,
        input_size: 8,
    };
    let d: Discriminator<f64> = build_discriminator(&cfg, &mut rng(2)).unwrap();
    let x = random_tensor::<f64>([1, 7, 8, 8], 3);
    let base = d.forward(&x).unwrap();

    // Doubling the final linear maps doubles both heads.
    let mut last = d.clone();
    for p in last.0.params_mut() {
        if p.name == "dec.0.conv.weight" || p.name == "global.weight" {
            p.data.iter_mut().for_each(|v| *v *= 2.0);
        }
    }
    let out = last.forward(&x).unwrap();
    for (a, b) in out.combined().iter().zip(base.combined()) {
        assert!((a - 2.0 * b).abs() < 1e-12 * b.abs().max(1.0));
    }

    // Scaling every weight by α composes two linear layers: α².
    let alpha = 3.0;
    let mut all = d.clone();
    for p in all.0.params_mut() {
        p.data.iter_mut().for_each(|v| *v *= alpha);
    }
    let out = all.forward(&x).unwrap();
    for (a, b) in out.map.data().iter().zip(base.map.data()) {
        assert!((a - alpha * alpha * b).abs() < 1e-12);
    }
    assert!((out.global[0] - alpha * alpha * base.global[0]).abs() < 1e-12);
}

#[test]
fn clip_weights_clamps_every_parameter() {
    let cfg = UNetConfig::critic_for(&small(64, 12, 4));
    let mut d: Discriminator<f32> = build_discriminator(&cfg, &mut rng(1)).unwrap();
    d.0.params_mut()[0].data[0] = 0.5;
    d.0.params_mut()[0].data[1] = -0.003;
    d.clip_weights(0.01);
    assert_eq!(d.0.params()[0].data[0], 0.01);
    assert_eq!(d.0.params()[0].data[1], -0.003);
    assert!(d.max_abs_param() <= 0.01);
    // Batch-norm scales start near 1 and are clipped too.
    assert!(d.0.params().iter().filter(|p| p.name.ends_with("gamma")).all(|p| p.data.iter().all(|v| *v == 0.01)));
}

#[test]
fn gradient_reaches_every_encoder_layer() {
    let cfg = small(64, 12, 4);
    let g: Generator<f64> = build_generator(&cfg, &mut rng(9)).unwrap();
    let x = random_tensor::<f64>([2, 4, 64, 64], 10);
    let (y, cache) = g.forward_train(&x, Noise::Off).unwrap();
    let mean_grad = Tensor::filled(y.shape(), 1.0 / y.data().len() as f64);
    let grads = g.backward(&cache, &mean_grad);
    for (p, gr) in g.0.params().iter().zip(&grads.0) {
        if p.name.starts_with("enc.") && p.name.ends_with("weight") {
            assert!(gr.iter().any(|v| *v != 0.0), "{} has no gradient", p.name);
        }
    }
}

/// Central-difference check of the full network in f64.
fn check_net_gradients(role: Role) {
    let mut cfg = UNetConfig {
        depth: 6,
        base_channels: 2,
        ..UNetConfig::generator(8, 6)
    };
    if role == Role::Critic {
        cfg = UNetConfig::critic_for(&cfg);
    }
    let net: UNet<f64> = UNet::new(cfg.clone(), role, &mut rng(11)).unwrap();
    let x = random_tensor::<f64>([2, cfg.in_channels, 8, 8], 12);
    let (out, global, cache) = net.forward(&x, Noise::Off, true).unwrap();
    let r_out = random_tensor::<f64>(out.shape(), 13);
    let r_glob = [0.7, -1.3];
    let objective = |net: &UNet<f64>, x: &Tensor<f64>| {
        let (o, g, _) = net.forward(x, Noise::Off, false).unwrap();
        let mut s: f64 = o.data().iter().zip(r_out.data()).map(|(a, b)| a * b).sum();
        if let Some(g) = g {
            s += g.iter().zip(r_glob).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    };
    let (grads, gin) = net.backward(
        &cache.unwrap(),
        &r_out,
        global.as_ref().map(|_| &r_glob[..]),
        true,
    );
    let h = 1e-6;
    let close = |a: f64, n: f64, what: &str| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        assert!(err < 1e-4, "{what}: analytic {a} vs numeric {n}");
    };
    let mut probe = rng(14);
    for (pi, p) in net.params().iter().enumerate() {
        for _ in 0..3 {
            let i = probe.gen_range(0..p.data.len());
            let mut plus = net.clone();
            plus.params_mut()[pi].data[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi].data[i] -= h;
            let numeric = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            close(grads.0[pi][i], numeric, &format!("{}[{i}]", p.name));
        }
    }
    let gin = gin.unwrap();
    for _ in 0..10 {
        let i = probe.gen_range(0..x.data().len());
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
        close(gin.data()[i], numeric, &format!("input[{i}]"));
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    check_net_gradients(Role::Generator);
}

#[test]
fn critic_gradients_match_finite_differences() {
    check_net_gradients(Role::Critic);
}

#[test]
fn combined_backward_matches_readout() {
    let cfg = UNetConfig::critic_for(&small(16, 4, 2));
    let d: Discriminator<f64> = build_discriminator(&cfg, &mut rng(20)).unwrap();
    let x = random_tensor::<f64>([2, 7, 16, 16], 21);
    let (out, cache) = d.forward_train(&x).unwrap();
    let w = [1.5, -0.5];
    let (_, gin) = d.backward_combined(&cache, out.map.shape(), &w, true);
    let gin = gin.unwrap();
    let f = |x: &Tensor<f64>| -> f64 {
        let c = d.forward(x).unwrap().combined();
        c[0] * w[0] + c[1] * w[1]
    };
    let h = 1e-6;
    for i in [0, 77, 300, 1000, 3000] {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
        assert!((gin.data()[i] - numeric).abs() < 1e-6 * numeric.abs().max(1.0), "{i}");
    }
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gcfg = small(64, 12, 4);
    let g: Generator<f32> = build_generator(&gcfg, &mut rng(30)).unwrap();
    let d: Discriminator<f32> = build_discriminator(&UNetConfig::critic_for(&gcfg), &mut rng(31)).unwrap();
    let (gp, dp) = (dir.path().join("g.nck"), dir.path().join("d.nck"));
    save_generator(&g, &gp).unwrap();
    save_discriminator(&d, &dp).unwrap();
    assert_eq!(load_generator::<f32>(&gp).unwrap(), g);
    assert_eq!(load_discriminator::<f32>(&dp).unwrap(), d);
    // Role is checked.
    assert!(matches!(load_generator::<f32>(&dp), Err(Error::Checkpoint { .. })));
    // Truncation and bad magic are reported.
    let bytes = std::fs::read(&gp).unwrap();
    std::fs::write(&gp, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_generator::<f32>(&gp), Err(Error::Checkpoint { .. })));
    std::fs::write(&gp, b"garbage!garbage!").unwrap();
    assert!(matches!(TensorArchive::load(&gp), Err(Error::Checkpoint { .. })));
}

#[test]
fn generate_matches_input_size() {
    let g: Generator<f32> = build_generator(&small(64, 12, 4), &mut rng(4)).unwrap();
    let sketch = image::GrayImage::from_pixel(64, 64, image::Luma([255]));
    let out = g.generate(&sketch, None).unwrap();
    assert_eq!((out.width(), out.height()), (64, 64));
    assert_eq!(g.generate(&sketch, None).unwrap(), out);
    let wrong = crate::geometry::BinaryMask::empty(32, 32);
    assert!(g.generate(&sketch, Some(&wrong)).is_err());
}
