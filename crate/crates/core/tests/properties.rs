use proptest::prelude::*;
use svedit_core::audio::{concat_transition, scale_volume, Waveform};
use svedit_core::denoiser::x0_from_noise;
use svedit_core::flow::{decode_flow, encode_flow, warp, FlowDirection, WarpPlan};
use svedit_core::numerics::{stream_key, Rng};
use svedit_core::sampler::{background_substitute, feather_alpha, global_composite};
use svedit_core::schedule::make_linear_schedule;
use svedit_core::{FlowField, Grid, Video};

fn grid(shape: &[usize], seed: u64) -> Grid {
    let mut rng = Rng::new(seed);
    Grid::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn field(h: usize, w: usize, reach: f64, seed: u64, direction: FlowDirection) -> FlowField {
    let mut rng = Rng::new(seed);
    let reach = reach.min(h.max(w) as f64);
    let u = Grid::from_fn(&[h, w], |_| rng.uniform_in(-reach, reach));
    let v = Grid::from_fn(&[h, w], |_| rng.uniform_in(-reach, reach));
    FlowField::new(u, v, direction).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreases_inside_unit_interval(steps in 2usize..300, lo in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let s = make_linear_schedule::<f64>(steps, lo, lo + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_noising_inverts_with_known_noise(t in 1usize..=100, seed in any::<u64>()) {
        let s = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let x0 = grid(&[2, 4, 4], seed);
        let eps = grid(&[2, 4, 4], seed ^ 0x55);
        let xt = s.noise(&x0, &eps, t).unwrap();
        prop_assert!(x0_from_noise(&xt, &eps, t, &s).unwrap().max_abs_diff(&x0).unwrap() < 1e-10);
    }

    #[test]
    fn warp_adjoint_satisfies_inner_product_identity(h in 2usize..9, w in 2usize..9, seed in any::<u64>()) {
        let plan = WarpPlan::new(&field(h, w, 2.5, seed, FlowDirection::Forward));
        let a = grid(&[2, h, w], seed.wrapping_add(1));
        let b = grid(&[2, h, w], seed.wrapping_add(2));
        let lhs = plan.apply(&a).unwrap().dot(&b).unwrap();
        let rhs = a.dot(&plan.adjoint(&b).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn zero_flow_warp_is_identity(h in 2usize..10, w in 2usize..10, seed in any::<u64>()) {
        let f = grid(&[3, h, w], seed);
        let (out, valid) = warp(&f, &FlowField::zeros(h, w, FlowDirection::Forward)).unwrap();
        prop_assert!(valid.all());
        prop_assert!(out.bitwise_eq(&f));
    }

    #[test]
    fn integer_shift_moves_pixels_exactly(dx in -3i64..=3, dy in -3i64..=3, seed in any::<u64>()) {
        let (h, w) = (8usize, 9usize);
        let f = grid(&[1, h, w], seed);
        let flow = FlowField::constant(h, w, dx as f64, dy as f64, FlowDirection::Forward).unwrap();
        let (out, valid) = warp(&f, &flow).unwrap();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sx, sy) = (x + dx, y + dy);
                let inside = (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy);
                let p = (y * w as i64 + x) as usize;
                prop_assert_eq!(valid.bits[p], inside);
                if inside {
                    let q = (sy * w as i64 + sx) as usize;
                    prop_assert!((out.data()[p] - f.data()[q]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn flow_bytes_round_trip_for_single_precision_values(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let f = field(h, w, 3.0, seed, FlowDirection::Backward);
        let rounded = FlowField::new(
            f.u.map(|x| x as f32 as f64),
            f.v.map(|x| x as f32 as f64),
            FlowDirection::Backward,
        ).unwrap();
        let back: FlowField = decode_flow(&encode_flow(&rounded), FlowDirection::Backward).unwrap();
        prop_assert!(back.u.bitwise_eq(&rounded.u) && back.v.bitwise_eq(&rounded.v));
    }

    #[test]
    fn volume_scaling_stays_in_range(gain in 0.0f64..8.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let w = Waveform::new((0..64).map(|_| rng.uniform_in(-1.0, 1.0)).collect(), 16_000).unwrap();
        let s = scale_volume(&w, gain).unwrap();
        prop_assert_eq!(s.len(), w.len());
        for (a, b) in w.samples().iter().zip(s.samples()) {
            prop_assert!(b.abs() <= 1.0);
            prop_assert!((b - (a * gain).clamp(-1.0, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn crossfade_overlaps_exactly(la in 20usize..200, lb in 20usize..200, ms in 0.0f64..1.0) {
        let a = Waveform::new(vec![0.5; la], 16_000).unwrap();
        let b = Waveform::new(vec![-0.25; lb], 16_000).unwrap();
        let n = (ms * 16.0).round() as usize;
        let joined = concat_transition(&a, &b, ms).unwrap();
        prop_assert_eq!(joined.len(), la + lb - n);
        prop_assert_eq!(joined.samples()[0], 0.5);
        prop_assert_eq!(*joined.samples().last().unwrap(), -0.25);
    }

    #[test]
    fn substitution_keeps_outside_pixels_bitwise(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = Rng::new(seed);
        let src = Video::new((0..n).map(|i| grid(&[3, 6, 6], seed ^ i as u64)).collect()).unwrap();
        let out = Video::new((0..n).map(|i| grid(&[3, 6, 6], !seed ^ i as u64)).collect()).unwrap();
        let masks = Video::new((0..n).map(|_| Grid::from_fn(&[1, 6, 6], |_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 })).collect()).unwrap();
        let mixed = background_substitute(&out, &src, &masks).unwrap();
        for i in 0..n {
            for k in 0..3 * 36 {
                let want = if masks.frame(i).data()[k % 36] == 1.0 { out.frame(i).data()[k] } else { src.frame(i).data()[k] };
                prop_assert_eq!(mixed.frame(i).data()[k].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn feather_alpha_is_a_symmetric_ramp(h in 1usize..12, w in 1usize..12, f in 0usize..5) {
        prop_assume!(2 * f <= h.min(w) + 1);
        let a = feather_alpha(h, w, f);
        for y in 0..h {
            for x in 0..w {
                let v = a[y * w + x];
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v, a[(h - 1 - y) * w + (w - 1 - x)]);
            }
        }
    }

    #[test]
    fn stream_keys_depend_on_every_part(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(stream_key(&[a, b]), stream_key(&[a, b]));
        prop_assert_ne!(stream_key(&[a, b]), stream_key(&[a, b.wrapping_add(1)]));
        prop_assert_ne!(stream_key(&[a]), stream_key(&[a, b]));
    }
}

#[test]
fn unfeathered_global_composite_returns_the_result() {
    let src = Video::new(vec![grid(&[3, 4, 4], 1)]).unwrap();
    let out = Video::new(vec![grid(&[3, 4, 4], 2)]).unwrap();
    assert!(global_composite(&out, &src, 0).unwrap().bitwise_eq(&out));
    assert!(global_composite(&out, &src, 3).is_err());
}
