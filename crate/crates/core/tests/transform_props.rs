use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tactile_fscil::transform::{
    apply_amplitude, apply_inverse, apply_inverse_adjoint, apply_transform, grid_sample, grid_sample_adjoint,
    make_grid, sample_pseudo_context, ContextBounds, ContextParams, SampleGrid,
};
use tactile_fscil::{SpecShape, Spectrogram};

fn spec_strategy() -> impl Strategy<Value = Spectrogram> {
    (1usize..3, 2usize..14, 2usize..14).prop_flat_map(|(c, f, t)| {
        prop::collection::vec(-3.0f64..3.0, c * f * t)
            .prop_map(move |v| Spectrogram::new(SpecShape::new(c, f, t), v).unwrap())
    })
}

fn context_strategy() -> impl Strategy<Value = ContextParams> {
    (-0.15f64..0.15, 0.85f64..1.18, -0.3f64..0.3, -0.15f64..0.15)
        .prop_map(|(d, t, b, s)| ContextParams::new(d, t, b, s))
}

fn max_abs(a: &Spectrogram, b: &Spectrogram) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &Spectrogram, b: &Spectrogram) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

fn weights(shape: SpecShape) -> Spectrogram {
    Spectrogram::from_fn(shape, |c, f, t| ((c * 31 + f * 7 + t * 3) as f64 * 0.61).sin())
}

proptest! {
    #[test]
    fn identity_context_is_exact(m in spec_strategy()) {
        let out = apply_transform(&m, &ContextParams::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        prop_assert_eq!(out.values(), m.values());
    }

    #[test]
    fn amplitude_terms_compose_additively(
        m in spec_strategy(), b1 in -0.3f64..0.3, s1 in -0.15f64..0.15, b2 in -0.3f64..0.3, s2 in -0.15f64..0.15,
    ) {
        let twice = apply_amplitude(&apply_amplitude(&m, b1, s1), b2, s2);
        prop_assert!(max_abs(&twice, &apply_amplitude(&m, b1 + b2, s1 + s2)) <= 1e-12);
    }

    #[test]
    fn amplitude_only_inverse_is_exact(m in spec_strategy(), b in -0.3f64..0.3, s in -0.15f64..0.15) {
        let c = ContextParams::new(0.0, 1.0, b, s);
        let back = apply_inverse(&apply_transform(&m, &c).unwrap(), &c).unwrap();
        prop_assert!(max_abs(&back, &m) <= 1e-12);
    }

    #[test]
    fn sampler_is_linear(
        m in spec_strategy(), c in context_strategy(), a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = m.shape();
        let m2 = Spectrogram::from_fn(shape, |_, _, _| rand::Rng::gen_range(&mut rng, -3.0..3.0));
        let g = make_grid(&c, shape.mel_bins, shape.frames).unwrap();
        let lhs = grid_sample(&m.lin_comb(a, &m2, b).unwrap(), &g).unwrap();
        let rhs = grid_sample(&m, &g).unwrap().lin_comb(a, &grid_sample(&m2, &g).unwrap(), b).unwrap();
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn grid_is_monotone_and_clipped(c in context_strategy(), f in 2usize..40, t in 2usize..40) {
        let g = make_grid(&c, f, t).unwrap();
        prop_assert!(g.freq.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(g.time.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(g.freq.iter().chain(&g.time).all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pseudo_contexts_stay_in_bounds(seed in any::<u64>(), k in 0.05f64..=1.0) {
        let bounds = ContextBounds::default().scaled(k);
        prop_assert!(bounds.validate().is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let c = sample_pseudo_context(&bounds, &mut rng);
            prop_assert!(bounds.contains(&c));
            prop_assert!(ContextBounds::default().contains(&c));
        }
    }

    #[test]
    fn sampler_adjoint_matches_differences(m in spec_strategy(), c in context_strategy()) {
        let shape = m.shape();
        let g = make_grid(&c, shape.mel_bins, shape.frames).unwrap();
        let w = weights(shape);
        let grad = grid_sample_adjoint(&m, &g, &w).unwrap();
        // The sampler is linear in its input, so the input gradient is exact.
        let probe = Spectrogram::from_fn(shape, |c, f, t| ((c + 2 * f + 5 * t) as f64 * 0.37).cos());
        let lhs = dot(&grad.input, &probe);
        let rhs = dot(&w, &grid_sample(&probe, &g).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));

        let h = 1e-7;
        for (i, &active) in g.freq_active.iter().enumerate() {
            if !active || g.freq[i].abs() > 1.0 - 2.0 * h {
                continue;
            }
            let shifted = |d: f64| {
                let mut g2: SampleGrid = g.clone();
                g2.freq[i] += d;
                dot(&w, &grid_sample(&m, &g2).unwrap())
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            prop_assert!((fd - grad.freq[i]).abs() <= 1e-3 * (1.0 + fd.abs()), "bin {}: {} vs {}", i, fd, grad.freq[i]);
        }
    }

    #[test]
    fn inverse_adjoint_matches_differences(m in spec_strategy(), c in context_strategy()) {
        let w = weights(m.shape());
        let (_, dc) = apply_inverse_adjoint(&m, &c, &w).unwrap();
        let loss = |c: &ContextParams| dot(&w, &apply_inverse(&m, c).unwrap());
        let h = 1e-7;
        let base = c.to_array();
        for k in 0..4 {
            let mut up = base;
            let mut down = base;
            up[k] += h;
            down[k] -= h;
            let at = |a: [f64; 4]| ContextParams::new(a[0], a[1], a[2], a[3]);
            let fd = (loss(&at(up)) - loss(&at(down))) / (2.0 * h);
            prop_assert!((fd - dc[k]).abs() <= 1e-3 * (1.0 + fd.abs()), "component {}: {} vs {}", k, fd, dc[k]);
        }
    }
}

#[test]
fn scaled_bounds_shrink_about_identity() {
    let b = ContextBounds::default();
    let h = b.scaled(0.5);
    assert!((h.delta_max - 0.075).abs() < 1e-15);
    assert!((h.tau_min - 0.85f64.sqrt()).abs() < 1e-12);
    assert!((h.tau_max - 1.18f64.sqrt()).abs() < 1e-12);
    assert_eq!(b.scaled(1.0), b);
    assert!(h.contains(&ContextParams::new(0.0, 1.0, 0.0, 0.0)));
}
