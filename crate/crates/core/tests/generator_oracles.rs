mod common;

use motionrag::autograd::Mat;
use motionrag::corpus::{synthesize_video, Frames, RenderDims};
use motionrag::generator::{
    adapter_attention, forward_diffuse, video_to_tokens, Generator, GeneratorConfig, NoiseSchedule,
};
use rand::Rng;

use common::*;

/// With a single motion token every query's softmax is exactly 1, so the
/// adapter reduces to `Z + s·(m W_v) W_o` regardless of `W_q` and `W_k`.
#[test]
fn single_token_adapter_matches_hand_computation() {
    let mut c = generator_case(3);
    c.generator.adapters_mut().scale = 0.7;
    let cfg = *c.generator.config();
    let mut r = rng(5);
    let z = gaussian((6, cfg.hidden), 1.0, &mut r);
    let m = gaussian((1, cfg.motion_dim), 1.0, &mut r);
    let set = c.generator.adapters().params();
    let w = |name: &str| set.get(set.slot(name).unwrap()).clone();
    let (wv, wo) = (w("adapter1.v.weight"), w("adapter1.o.weight"));
    let per_row = m.dot(&wv).dot(&wo);
    let mut expected = z.clone();
    for mut row in expected.rows_mut() {
        row.scaled_add(0.7, &per_row.row(0));
    }
    let got = adapter_attention(&z, &m, c.generator.adapters(), 1).unwrap();
    let worst = (&got - &expected)
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(worst < 1e-12, "max deviation {worst}");
}

#[test]
fn adapter_rejects_bad_shapes() {
    let c = generator_case(1);
    let cfg = *c.generator.config();
    let z = Mat::zeros((3, cfg.hidden));
    assert!(adapter_attention(
        &z,
        &Mat::zeros((2, cfg.motion_dim + 1)),
        c.generator.adapters(),
        0
    )
    .is_err());
    assert!(adapter_attention(
        &z,
        &Mat::zeros((0, cfg.motion_dim)),
        c.generator.adapters(),
        0
    )
    .is_err());
    assert!(adapter_attention(
        &z,
        &Mat::zeros((2, cfg.motion_dim)),
        c.generator.adapters(),
        9
    )
    .is_err());
}

/// Monte-Carlo check that `x_t − √ᾱ_t·x0` has variance `1 − ᾱ_t`.
#[test]
fn forward_diffusion_variance_matches_schedule() {
    let schedule = NoiseSchedule::from_config(&GeneratorConfig::default());
    let mut r = rng(11);
    let video = Frames::from_shape_simple_fn((2, 2, 2, 3), || r.random_range(0.0..1.0));
    let draws = 10_000;
    for t in [0usize, 10, 25, 49] {
        let a = schedule.alpha_bar(t).unwrap();
        let (mut sum, mut sq) = (0.0, 0.0);
        for d in 0..draws {
            let noise = video.mapv(|_| r.sample::<f64, _>(rand_distr::StandardNormal));
            let x = forward_diffuse(&schedule, &video, t, &noise).unwrap();
            let idx = (d % 2, (d / 2) % 2, (d / 4) % 2, (d / 8) % 3);
            let resid = x[idx] - a.sqrt() * video[idx];
            sum += resid;
            sq += resid * resid;
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        let expected = 1.0 - a;
        assert!(
            (var - expected).abs() <= 0.03 * expected,
            "t={t}: variance {var} vs {expected}"
        );
    }
}

#[test]
fn alpha_bar_is_strictly_decreasing_and_ends_near_zero() {
    let s = NoiseSchedule::from_config(&GeneratorConfig::default());
    assert_eq!(s.steps(), 50);
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bars[49] < 1e-3);
    // Independent recomputation of the linear reference grid.
    let prod: f64 = (0..1000)
        .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
        .product();
    assert!((s.alpha_bars[49] - prod).abs() < 1e-15);
}

#[test]
fn zero_adapters_make_motion_a_no_op() {
    let cfg = GeneratorConfig::default();
    let g = Generator::new(cfg, &mut rng(2)).unwrap();
    let dims = RenderDims::default();
    let v = synthesize_video(4, 2, dims).unwrap();
    let enc = motionrag::encoders::Encoders::new(&Default::default());
    let cond = motionrag::generator::ImageCondition {
        frame: v.first_frame(),
        features: enc.image.encode(v.first_frame().view()).unwrap().tokens,
    };
    let motion = gaussian((8, cfg.motion_dim), 3.0, &mut rng(8));
    let a = g.sample(&cond, Some(&motion), 10, 21).unwrap();
    let b = g.sample(&cond, None, 10, 21).unwrap();
    assert!(a
        .iter()
        .zip(b.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn patch_tokens_cover_every_pixel_once() {
    let dims = RenderDims::default();
    let v = synthesize_video(1, 5, dims).unwrap();
    let tokens = video_to_tokens(&v.frames, 8).unwrap();
    assert_eq!(tokens.dim(), (8 * 16, 192));
    let total: f64 = tokens.sum();
    assert!((total - v.frames.sum()).abs() < 1e-9);
}
