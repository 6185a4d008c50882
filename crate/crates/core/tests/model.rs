mod common;

use common::{random_image, rng, to_tensor_err, GRAD_TOL};
use rand::Rng;
use sarfah_core::hfde::DeformPlacement;
use sarfah_core::lfsp::OdeConfig;
use sarfah_core::model::{images_to_tensor, tensor_to_images, wavelet_plumbing};
use sarfah_core::{loss_l1, param_count, Image, Model, ModelConfig};
use sarfah_tensor::gradcheck::{check, random_tensor, GradCheckOpts};
use sarfah_tensor::{Graph, Mode, Tensor};

fn tiny(train_size: usize) -> ModelConfig {
    ModelConfig {
        channels: 4,
        train_size,
        ..ModelConfig::default()
    }
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn norm(c: usize) -> usize {
    2 * c
}

#[test]
fn output_matches_input_size() {
    let m = Model::init(&tiny(64), 1).unwrap();
    let out = m.predict(&[random_image(128, 128, 2, 0.0, 255.0)]).unwrap();
    assert_eq!((out[0].width(), out[0].height()), (128, 128));
    let out = m.predict(&[random_image(24, 40, 3, 0.0, 255.0)]).unwrap();
    assert_eq!((out[0].width(), out[0].height()), (24, 40));
}

#[test]
fn sides_must_be_divisible_by_four() {
    let m = Model::init(&tiny(16), 1).unwrap();
    assert!(m.predict(&[random_image(18, 16, 2, 0.0, 255.0)]).is_err());
    assert!(m.predict(&[random_image(16, 10, 2, 0.0, 255.0)]).is_err());
}

#[test]
fn identity_stages_reconstruct_the_input() {
    for (w, h, seed) in [(8, 8, 1), (16, 12, 2), (64, 32, 3)] {
        let img = random_image(w, h, seed, 0.0, 255.0);
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(images_to_tensor(std::slice::from_ref(&img)).unwrap());
        let y = wavelet_plumbing(&mut g, x, |_, b| Ok(b)).unwrap();
        let back = &tensor_to_images(g.value(y)).unwrap()[0];
        assert!(back.max_abs_diff(&img) < 1e-12);
    }
}

#[test]
fn loss_matches_a_loop() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (w, h) = (r.random_range(1..20), r.random_range(1..20));
        let a = random_image(w, h, r.random(), -50.0, 300.0);
        let b = random_image(w, h, r.random(), -50.0, 300.0);
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                sum += (a.get(x, y) - b.get(x, y)).abs();
            }
        }
        assert!((loss_l1(&a, &b).unwrap() - sum / (w * h) as f64).abs() < 1e-12);
    }
}

#[test]
fn end_to_end_loss_gradients() {
    let cfg = tiny(8);
    let mut m = Model::init(&cfg, 6).unwrap();
    m.params.randomize(7, 0.2);
    let x = random_tensor(&[2, 1, 8, 8], 8, 0.0, 255.0);
    let target = random_tensor(&[2, 1, 8, 8], 9, 0.0, 255.0);
    for mode in [Mode::Eval, Mode::Train] {
        let opts = GradCheckOpts {
            max_coords: 2,
            seed: 10,
            ..Default::default()
        };
        let report = check(Some(&m.params), std::slice::from_ref(&x), mode, opts, |g, v| {
            let y = m.net.forward(g, v[0], 11).map_err(to_tensor_err)?;
            let t = g.constant(target.clone());
            g.l1_loss(y, t)
        })
        .unwrap();
        let sampled: usize = report
            .checks
            .iter()
            .filter(|c| c.name != "input0")
            .map(|c| c.coords)
            .sum();
        assert!(
            sampled * 100 >= m.param_count(),
            "{sampled} of {} parameters sampled",
            m.param_count()
        );
        if let Some(c) = report.worst_failure(GRAD_TOL) {
            panic!("{mode:?} {}: rel error {:.3e}", c.name, c.rel_error);
        }
    }
}

#[test]
fn hand_audited_count_for_four_channels() {
    // C = 4, default flags, 64px patches: 32px bands, 8px bottleneck.
    let lift = 4 * conv(1, 4, 3);
    let lfsp_convs = conv(5, 4, 3) + norm(4) + 5 * (conv(4, 4, 3) + norm(4)) + conv(4, 4, 3);
    let dass = |c: usize, side: usize| {
        let hidden = (c / 16).max(1);
        let cbam = conv(c, hidden, 1) + conv(hidden, c, 1) + conv(2, 1, 7);
        let branch = conv(c, c, 1) + 3 * c * 8 + c;
        let vss = conv(c, c, 1)
            + c * side * side
            + norm(c)
            + conv(c, c, 1)
            + (9 * c + c)
            + conv(c, c, 1)
            + 4 * branch
            + norm(c)
            + conv(c, c, 1)
            + conv(c, 2 * c, 1)
            + conv(2 * c, c, 1);
        let fc_hidden = (2 * c / 16).max(1);
        let fusion = 4 * (c * 2 * c + c) + (2 * c * fc_hidden + fc_hidden) + (fc_hidden * 4 + 4);
        cbam + vss + fusion + norm(c)
    };
    assert_eq!(dass(4, 32), 5069);
    assert_eq!(dass(8, 8), 2989);
    let lfsp = lfsp_convs + 2 * dass(4, 32);
    let offsets = conv(2, 18, 3);
    let cbr = |cin, cout| conv(cin, cout, 3) + norm(cout);
    let hfde = cbr(4, 2)
        + conv(2, 1, 1)
        + conv(1, 2, 1)
        + cbr(2, 4)
        + cbr(4, 8)
        + cbr(8, 8)
        + cbr(8, 8)
        + offsets
        + dass(8, 8)
        + cbr(8, 4)
        + offsets
        + cbr(4, 2)
        + offsets
        + cbr(2, 4)
        + cbr(4, 4);
    assert_eq!(hfde, 6314);
    let cfre = conv(16, 16, 1) + cbr(16, 16) + conv(16, 16, 3) + norm(16) + conv(16, 4, 1);
    let total = lift + lfsp + 3 * hfde + cfre;
    assert_eq!(total, 35404);
    assert_eq!(param_count(&tiny(64)).unwrap(), total);
}

#[test]
fn outputs_stay_finite() {
    let m = Model::init(&tiny(16), 12).unwrap();
    let mut r = rng(13);
    for _ in 0..100 {
        let img = random_image(16, 16, r.random(), 0.0, r.random_range(1.0..1e4));
        let out = m.predict(&[img]).unwrap();
        assert!(out[0].pixels().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let m = Model::init(&tiny(16), 14).unwrap();
    let batch = [random_image(16, 16, 15, 0.0, 255.0), random_image(16, 16, 16, 0.0, 255.0)];
    let a = m.predict(&batch).unwrap();
    let b = m.predict(&batch).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.pixels(), y.pixels());
    }
}

#[test]
fn count_ignores_solver_steps() {
    let counts: Vec<usize> = (1..=6)
        .map(|steps| {
            param_count(&ModelConfig {
                ode: OdeConfig {
                    steps,
                    ..OdeConfig::default()
                },
                ..tiny(16)
            })
            .unwrap()
        })
        .collect();
    assert!(counts.iter().all(|&c| c == counts[0]));
    let off = param_count(&ModelConfig {
        ode_enabled: false,
        ..tiny(16)
    })
    .unwrap();
    assert_eq!(off, counts[0]);
}

#[test]
fn dropping_dual_branch_blocks_shrinks_the_model() {
    let count = |lfsp, hfde| {
        param_count(&ModelConfig {
            dass_in_lfsp: lfsp,
            dass_in_hfde: hfde,
            ..tiny(16)
        })
        .unwrap()
    };
    let full = count(true, true);
    let no_lfsp = count(false, true);
    let no_hfde = count(true, false);
    let none = count(false, false);
    assert!(no_lfsp < full && no_hfde < full);
    assert!(none < no_lfsp && none < no_hfde);
}

#[test]
fn sharing_the_band_modules_shrinks_the_model() {
    for c in [4, 8] {
        let base = ModelConfig {
            channels: c,
            ..tiny(16)
        };
        let shared = param_count(&ModelConfig {
            shared_hfde: true,
            ..base
        })
        .unwrap();
        assert!(shared < param_count(&base).unwrap());
    }
}

#[test]
fn ablation_variants_have_distinct_counts() {
    let base = tiny(16);
    let variants = [
        base,
        ModelConfig {
            shared_hfde: true,
            ..base
        },
        ModelConfig {
            dass_in_lfsp: false,
            ..base
        },
        ModelConfig {
            dass_in_hfde: false,
            ..base
        },
        ModelConfig {
            dass_in_lfsp: false,
            dass_in_hfde: false,
            ..base
        },
    ];
    let counts: Vec<usize> = variants.iter().map(|c| param_count(c).unwrap()).collect();
    for i in 0..counts.len() {
        for j in i + 1..counts.len() {
            assert_ne!(counts[i], counts[j], "variants {i} and {j}");
        }
    }
    let placement: Vec<usize> = [
        DeformPlacement::None,
        DeformPlacement::Encoder,
        DeformPlacement::Decoder,
        DeformPlacement::Both,
    ]
    .iter()
    .map(|&deforconv| param_count(&ModelConfig { deforconv, ..base }).unwrap())
    .collect();
    assert!(placement[0] < placement[2]);
    assert_eq!(placement[1], placement[2]);
    assert!(placement[2] < placement[3]);
    for v in &variants {
        assert!(Model::init(v, 0).unwrap().predict(&[Image::filled(16, 16, 100.0)]).is_ok());
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ModelConfig {
        shared_hfde: true,
        deforconv: DeformPlacement::Both,
        ..tiny(16)
    };
    let mut m = Model::init(&cfg, 17).unwrap();
    m.params.randomize(18, 0.1);
    m.save(&path, "note=1\n").unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.cfg(), &cfg);
    let img = random_image(16, 16, 19, 0.0, 255.0);
    assert_eq!(
        m.predict(std::slice::from_ref(&img)).unwrap()[0].pixels(),
        back.predict(&[img]).unwrap()[0].pixels()
    );
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Model::load(&path).is_err());
    assert!(Model::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn training_mode_batch_shapes() {
    let m = Model::init(&tiny(16), 20).unwrap();
    let mut g = Graph::with_params(&m.params, Mode::Train);
    let x = g.input(Tensor::full(&[3, 1, 16, 16], 80.0));
    let y = m.net.forward(&mut g, x, 0).unwrap();
    assert_eq!(g.shape(y), &[3, 1, 16, 16]);
}
