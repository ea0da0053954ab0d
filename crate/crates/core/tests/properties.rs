use bgcut::backbone::kept_count;
use bgcut::checkpoint::Archive;
use bgcut::frame::{Frame, Mask};
use bgcut::pipeline::eval::band;
use bgcut::pipeline::{composite, feathered_alpha, mean_iou, CompositeSpec};
use bgcut::tensor::Tensor;
use bgcut::train::{poly_lr, window_indices, TrainConfig};
use proptest::prelude::*;

fn masks() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(0u8..2, w * h),
            proptest::collection::vec(0u8..2, w * h),
        )
            .prop_map(move |(a, b)| (Mask::new(w, h, a).unwrap(), Mask::new(w, h, b).unwrap()))
    })
}

fn invert(m: &Mask) -> Mask {
    Mask::new(m.width, m.height, m.data.iter().map(|v| 1 - v).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_bounded_symmetric_and_label_swap_invariant((p, g) in masks()) {
        let a = mean_iou(&[p.clone()], &[g.clone()]).unwrap();
        for v in [a.background, a.foreground, a.mean] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(a, mean_iou(&[g.clone()], &[p.clone()]).unwrap());
        let s = mean_iou(&[invert(&p)], &[invert(&g)]).unwrap();
        prop_assert_eq!((s.background, s.foreground), (a.foreground, a.background));
        prop_assert_eq!(mean_iou(&[g.clone()], &[g]).unwrap().mean, 1.0);
    }

    #[test]
    fn band_contains_the_boundary_and_is_nested((_, g) in masks(), w in 1usize..6) {
        let inner = band(&g, w);
        let outer = band(&g, w + 1);
        prop_assert!(inner.iter().zip(&outer).all(|(i, o)| !i || *o));
        prop_assert_eq!(band(&g, 1).iter().filter(|&&b| b).count() == 0, g.data.iter().all(|&v| v == g.data[0]));
    }

    #[test]
    fn composite_stays_between_frame_and_background(
        (m, _) in masks(),
        seed in any::<u64>(),
        feather in 0usize..4,
    ) {
        let (w, h) = (m.width, m.height);
        let f = Frame::new(w, h, (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect()).unwrap();
        let b = Frame::new(w, h, (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect()).unwrap();
        let out = composite(&f, &m, &CompositeSpec { background: b.clone(), feather }).unwrap();
        for i in 0..w * h * 3 {
            prop_assert!(out.data[i] >= f.data[i].min(b.data[i]) && out.data[i] <= f.data[i].max(b.data[i]));
        }
        let alpha = feathered_alpha(&m, feather);
        prop_assert!(alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        if feather == 0 {
            prop_assert!(alpha.iter().zip(&m.data).all(|(a, &v)| *a == f64::from(v)));
        }
    }

    #[test]
    fn windows_are_clamped_sorted_and_centered(t in 0usize..40, n in 0usize..5, extra in 1usize..40) {
        let len = t + extra;
        let w = window_indices(t, n, len);
        prop_assert_eq!(w.len(), 2 * n + 1);
        prop_assert_eq!(w[n], t);
        prop_assert!(w.iter().all(|&i| i < len));
        prop_assert!(w.windows(2).all(|p| p[0] <= p[1] && p[1] - p[0] <= 1));
    }

    #[test]
    fn kept_count_is_a_monotone_ceiling(n in 1usize..600, r in 0.01f64..=1.0) {
        let k = kept_count(n, r);
        prop_assert!(k >= 1 && k <= n);
        // Smallest count that keeps at least the fraction `r`, up to rounding.
        let want = r * n as f64;
        prop_assert!(k as f64 >= want - 1e-6);
        prop_assert!(k == 1 || ((k - 1) as f64) < want + 1e-6);
        prop_assert!(kept_count(n + 1, r) >= k);
    }

    #[test]
    fn poly_schedule_is_bounded_and_nonincreasing(max in 1usize..5000, i in 0usize..5000, base in 1e-5f64..1.0) {
        let c = TrainConfig { base_lr: base, ..Default::default() };
        let i = i.min(max);
        let lr = poly_lr(i, max, &c).unwrap();
        prop_assert!(lr >= 0.0 && lr <= base);
        if i < max {
            prop_assert!(poly_lr(i + 1, max, &c).unwrap() <= lr);
        }
    }

    #[test]
    fn checkpoint_round_trips_arbitrary_tensors(
        shapes in proptest::collection::vec(proptest::collection::vec(0usize..5, 0..4), 0..6),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = Archive::new();
        for (i, s) in shapes.iter().enumerate() {
            if i % 2 == 0 {
                a.put_tensor(format!("t{i}"), &Tensor::<f32>::randn(s.clone(), 1.0, &mut r));
            } else {
                a.put_tensor(format!("t{i}"), &Tensor::<f64>::randn(s.clone(), 1.0, &mut r));
            }
        }
        let bytes = a.to_bytes();
        prop_assert_eq!(bytes.len(), a.layout().total());
        let b = Archive::from_bytes(&bytes).unwrap();
        for name in a.names() {
            prop_assert_eq!(a.get(name), b.get(name));
        }
        prop_assert_eq!(b.to_bytes(), bytes);
    }
}
