use proptest::prelude::*;

use prdfe::eval::dice;
use prdfe::field::{accumulate, field_mse, jacobian_determinant_map, upsample_scale, ResidualFieldSet};
use prdfe::io::{decode_array, decode_checkpoint, encode_array, encode_checkpoint, Checkpoint};
use prdfe::loss::{loss, loss_with, SmoothReduction};
use prdfe::sampler::{warp, warp_labels};
use prdfe::train::TrainConfig;
use prdfe::{config, Array, DisplacementField, Graph, Labels, ModelConfig, Variant};

fn array(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Array<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Array::from_vec(&shape, v).unwrap())
}

/// A `(1, H, W)` image with a matching `(2, H, W)` field.
fn image_and_field(max_disp: f64) -> impl Strategy<Value = (Array<f64>, DisplacementField<f64>)> {
    (2usize..7, 2usize..7).prop_flat_map(move |(h, w)| {
        (
            array(vec![1, h, w], -1.0, 1.0),
            array(vec![2, h, w], -max_disp, max_disp).prop_map(|a| DisplacementField::new(1, a).unwrap()),
        )
    })
}

fn close(a: &Array<f64>, b: &Array<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

fn smooth_of(a: &Array<f64>) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(a.clone()).unwrap();
    let s = g.smoothness(v).unwrap();
    g.value(s).data()[0]
}

fn total_loss(fixed: &Array<f64>, warped: &Array<f64>, field: &Array<f64>, lambda: f64, r: SmoothReduction) -> (f64, f64) {
    let mut g = Graph::new();
    let f = g.constant(fixed.clone()).unwrap();
    let w = g.constant(warped.clone()).unwrap();
    let u = g.constant(field.clone()).unwrap();
    let t = loss_with(&mut g, f, w, u, lambda, r).unwrap();
    (g.value(t.total).data()[0], g.value(t.similarity).data()[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_is_linear_in_the_image((x, u) in image_and_field(4.0), a in -2.0..2.0f64, b in -2.0..2.0f64, seed in 0u64..1000) {
        let y = x.map(|v| (v * 7.3 + seed as f64).sin());
        let lhs = warp(&x.scale(a).add(&y.scale(b)).unwrap(), &u).unwrap();
        let rhs = warp(&x, &u).unwrap().scale(a).add(&warp(&y, &u).unwrap().scale(b)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn warp_stays_within_the_input_range((x, u) in image_and_field(10.0)) {
        let w = warp(&x, &u).unwrap();
        prop_assert!(w.min() >= x.min() - 1e-12 && w.max() <= x.max() + 1e-12);
    }

    #[test]
    fn zero_field_warp_is_identity((x, _) in image_and_field(1.0)) {
        let u = DisplacementField::zeros(1, x.spatial());
        prop_assert_eq!(warp(&x, &u).unwrap(), x);
    }

    #[test]
    fn integer_shift_moves_labels_exactly(h in 4usize..9, w in 4usize..9, dy in -2i32..3, dx in -2i32..3, bits in prop::collection::vec(0u32..3, 81)) {
        let labels = Labels::new(&[h, w], bits[..h * w].to_vec()).unwrap();
        let u = DisplacementField::constant(1, &[h, w], &[dy as f64, dx as f64]).unwrap();
        let out = warp_labels(&labels, &u).unwrap();
        for y in 0..h {
            for x in 0..w {
                let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                prop_assert_eq!(out.data()[y * w + x], labels.data()[sy * w + sx]);
            }
        }
    }

    #[test]
    fn upsample_scale_is_linear_and_doubles_constants(
        u in array(vec![2, 3, 4], -3.0, 3.0),
        v in array(vec![2, 3, 4], -3.0, 3.0),
        a in -2.0..2.0f64,
        c in -5.0..5.0f64,
        from in 2usize..5,
    ) {
        let up = |x: &Array<f64>| upsample_scale(&DisplacementField::new(from, x.clone()).unwrap(), 1).unwrap().into_vectors();
        let lhs = up(&u.scale(a).add(&v).unwrap());
        let rhs = up(&u).scale(a).add(&up(&v)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-9));
        let f = (1usize << (from - 1)) as f64;
        let k = up(&Array::full(&[2, 3, 4], c));
        prop_assert!(k.data().iter().all(|&x| (x - c * f).abs() < 1e-9));
    }

    #[test]
    fn smoothness_ignores_translation_and_is_nonnegative(u in array(vec![2, 5, 4], -3.0, 3.0), t in -10.0..10.0f64) {
        let s = smooth_of(&u);
        prop_assert!(s >= 0.0);
        prop_assert!((smooth_of(&u.map(|x| x + t)) - s).abs() <= 1e-9 * (1.0 + s));
    }

    #[test]
    fn loss_without_penalty_is_mse_and_grows_with_lambda(
        fixed in array(vec![1, 4, 4], -1.0, 1.0),
        warped in array(vec![1, 4, 4], -1.0, 1.0),
        field in array(vec![2, 4, 4], -2.0, 2.0),
        l1 in 0.0..1.0f64,
        dl in 0.0..1.0f64,
    ) {
        for r in [SmoothReduction::Sum, SmoothReduction::Mean] {
            let (t0, mse) = total_loss(&fixed, &warped, &field, 0.0, r);
            prop_assert_eq!(t0, mse);
            let (a, _) = total_loss(&fixed, &warped, &field, l1, r);
            let (b, _) = total_loss(&fixed, &warped, &field, l1 + dl, r);
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn accumulate_is_additive(r1 in prop::collection::vec(array(vec![2, 8, 8], -1.0, 1.0), 4), r2 in prop::collection::vec(array(vec![2, 8, 8], -1.0, 1.0), 4), k in 1usize..4) {
        let set = |rs: &[Array<f64>]| {
            let mut s = ResidualFieldSet::new(&[8, 8], 4).unwrap();
            for (i, r) in rs.iter().enumerate() {
                let level = i + 1;
                let e = 8 >> i;
                let data: Vec<f64> = r.data()[..2 * e * e].to_vec();
                s.set(DisplacementField::new(level, Array::from_vec(&[2, e, e], data).unwrap()).unwrap()).unwrap();
            }
            s
        };
        let sum: Vec<Array<f64>> = r1.iter().zip(&r2).map(|(a, b)| a.add(b).unwrap()).collect();
        let lhs = accumulate(&set(&sum), k).unwrap().into_vectors();
        let rhs = accumulate(&set(&r1), k).unwrap().into_vectors().add(&accumulate(&set(&r2), k).unwrap().into_vectors()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-9));
    }

    #[test]
    fn jacobian_of_an_affine_field_is_constant(a in -0.5..0.5f64, b in -0.5..0.5f64, c in -0.5..0.5f64, d in -0.5..0.5f64, t in -3.0..3.0f64) {
        let (h, w) = (5, 6);
        let v = Array::from_fn(&[2, h, w], |i| {
            let (comp, y, x) = (i / (h * w), (i / w % h) as f64, (i % w) as f64);
            if comp == 0 { a * y + b * x + t } else { c * y + d * x - t }
        });
        let j = jacobian_determinant_map(&DisplacementField::new(1, v).unwrap());
        let expect = (1.0 + a) * (1.0 + d) - b * c;
        prop_assert!(j.data().iter().all(|&x| (x - expect).abs() < 1e-9));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(bits in prop::collection::vec((0u32..3, 0u32..3), 1..60)) {
        let n = bits.len();
        let a = Labels::new(&[n], bits.iter().map(|p| p.0).collect()).unwrap();
        let b = Labels::new(&[n], bits.iter().map(|p| p.1).collect()).unwrap();
        for label in 0..3 {
            let d = dice(&a, &b, label).unwrap();
            prop_assert_eq!(d, dice(&b, &a, label).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }
        prop_assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn field_mse_is_symmetric_and_zero_on_the_diagonal(u in array(vec![2, 3, 3], -5.0, 5.0), v in array(vec![2, 3, 3], -5.0, 5.0)) {
        let (u, v) = (DisplacementField::new(1, u).unwrap(), DisplacementField::new(1, v).unwrap());
        prop_assert_eq!(field_mse(&u, &u).unwrap(), 0.0);
        prop_assert_eq!(field_mse(&u, &v).unwrap(), field_mse(&v, &u).unwrap());
    }

    #[test]
    fn containers_round_trip_bit_exactly(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let bits: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_mul(i + 1) >> 2)).collect();
        let a = Array::from_vec(&shape, bits).unwrap();
        let back = decode_array(&encode_array(&a)).unwrap().into_typed::<f64>().unwrap();
        prop_assert_eq!(back.shape(), a.shape());
        prop_assert!(back.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let f = a.cast::<f32>();
        prop_assert!(decode_array(&encode_array(&f)).unwrap().into_typed::<f64>().is_err());
    }

    #[test]
    fn config_text_round_trips(
        v in 0usize..4,
        lambda in 0.0..10.0f64,
        lr in 1e-6..1.0f64,
        batch in 1usize..16,
        steps in 0usize..100_000,
        seed in any::<u64>(),
        channels in prop::collection::vec(1usize..64, 2..6),
        mean in any::<bool>(),
    ) {
        let mut c = TrainConfig { lambda, lr, batch, steps, seed, ..TrainConfig::default() };
        c.model.variant = Variant::ALL[v];
        c.model.decoder = channels.iter().map(|x| x + 1).collect();
        c.model.encoder.channels = channels;
        c.smooth_reduction = if mean { SmoothReduction::Mean } else { SmoothReduction::Sum };
        let text = config::to_text(&c);
        let back = config::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(config::to_text(&back), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(v in 0usize..4, seed in any::<u64>(), step in any::<u64>()) {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig { variant: Variant::ALL[v], ..ModelConfig::default() };
        cfg.model.encoder.channels = vec![2, 3, 3];
        cfg.model.decoder = vec![2, 2, 2];
        let params = cfg.model.init_params::<f32>(seed).unwrap();
        let ck = Checkpoint { config: cfg, step, params };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}

#[test]
fn plain_loss_matches_hand_computed_values() {
    // warped = fixed + 1 everywhere, field ramps by 1 along x: mse 1, smoothness 3 * 4 = 12.
    let fixed = Array::<f64>::zeros(&[1, 4, 4]);
    let warped = Array::full(&[1, 4, 4], 1.0);
    let field = Array::from_fn(&[2, 4, 4], |i| if i < 16 { (i % 4) as f64 } else { 0.0 });
    let mut g = Graph::new();
    let (f, w, u) = (
        g.constant(fixed).unwrap(),
        g.constant(warped).unwrap(),
        g.constant(field).unwrap(),
    );
    let t = loss(&mut g, f, w, u, 0.5).unwrap();
    assert_eq!(g.value(t.smooth).data()[0], 12.0);
    assert_eq!(g.value(t.total).data()[0], 7.0);
}
