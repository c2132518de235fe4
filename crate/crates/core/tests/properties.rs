use mtsedge::data::{apply_op, AugmentOp, Sample};
use mtsedge::eval::{binarize, match_edges, thin, BinaryMap};
use mtsedge::mts::{gts_forward, patch_embed, patch_unembed, GtsParams};
use mtsedge::training::{compute_class_weights, weighted_bce};
use mtsedge::{mode_n_product, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0..2.0f64, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn shape3() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 3)
}

fn close(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= TOL * (1.0 + x.abs()))
}

fn bits(h: usize, w: usize) -> impl Strategy<Value = BinaryMap> {
    prop::collection::vec(prop::bool::weighted(0.3), h * w).prop_map(move |b| BinaryMap::new(h, w, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mode_products_on_distinct_modes_commute(
        (x, a, b) in shape3().prop_flat_map(|s| {
            let (n0, n2) = (s[0], s[2]);
            (tensor(s), (1usize..5).prop_flat_map(move |m| tensor(vec![m, n0])),
             (1usize..5).prop_flat_map(move |m| tensor(vec![m, n2])))
        })
    ) {
        let ab = mode_n_product(&mode_n_product(&x, &a, 0).unwrap(), &b, 2).unwrap();
        let ba = mode_n_product(&mode_n_product(&x, &b, 2).unwrap(), &a, 0).unwrap();
        prop_assert!(close(&ab, &ba));
    }

    #[test]
    fn repeated_mode_product_composes_factors(
        (x, a, b) in shape3().prop_flat_map(|s| {
            let n1 = s[1];
            (tensor(s), (1usize..5).prop_flat_map(move |m| {
                (tensor(vec![m, n1]), (1usize..5).prop_flat_map(move |p| tensor(vec![p, m])))
            }))
        }).prop_map(|(x, (a, b))| (x, a, b))
    ) {
        let twice = mode_n_product(&mode_n_product(&x, &a, 1).unwrap(), &b, 1).unwrap();
        let ba = mode_n_product(&a, &b, 0).unwrap();
        prop_assert!(close(&twice, &mode_n_product(&x, &ba, 1).unwrap()));
    }

    #[test]
    fn gts_is_linear_in_its_input_and_additive_in_terms(
        (x, y, t1, t2) in shape3().prop_flat_map(|s| {
            let factors = |s: Vec<usize>| {
                s.into_iter().map(|n| (1usize..4).prop_flat_map(move |m| tensor(vec![m, n]))).collect::<Vec<_>>()
            };
            (tensor(s.clone()), tensor(s.clone()), factors(s.clone()), factors(s))
        }),
        c in -3.0..3.0f64,
    ) {
        // Second term must share output extents with the first.
        let t2: Vec<Tensor> = t1.iter().zip(&t2).map(|(a, b)| {
            Tensor::from_fn(a.shape(), |i| b.get(&[i[0] % b.shape()[0], i[1]]))
        }).collect();
        let one = GtsParams::new(vec![t1.clone()]).unwrap();
        let both = GtsParams::new(vec![t1, t2.clone()]).unwrap();
        let two = GtsParams::new(vec![t2]).unwrap();
        let mixed = x.add(&y.scale(c)).unwrap();
        let lhs = gts_forward(&mixed, &one).unwrap();
        let rhs = gts_forward(&x, &one).unwrap().add(&gts_forward(&y, &one).unwrap().scale(c)).unwrap();
        prop_assert!(close(&lhs, &rhs));
        let sum = gts_forward(&x, &one).unwrap().add(&gts_forward(&x, &two).unwrap()).unwrap();
        prop_assert!(close(&gts_forward(&x, &both).unwrap(), &sum));
    }

    #[test]
    fn patch_embedding_round_trips(
        (x, w, rows, cols) in (1usize..5, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(w, r, c, ch)| {
            (tensor(vec![r * w, c * w, ch]), Just(w), Just(r), Just(c))
        })
    ) {
        let p = patch_embed(&x, w).unwrap();
        prop_assert_eq!(p.shape()[..3].to_vec(), vec![rows * cols, w, w]);
        prop_assert_eq!(patch_unembed(&p, rows, cols).unwrap(), x);
    }

    #[test]
    fn match_counts_partition_both_maps(
        (p, g) in (2usize..12, 2usize..12).prop_flat_map(|(h, w)| (bits(h, w), bits(h, w))),
        tol in 0.01..0.3f64,
    ) {
        let r = match_edges(&p, &g, tol).unwrap();
        prop_assert_eq!((r.tp + r.fp) as usize, p.count());
        prop_assert_eq!((r.tp + r.fn_) as usize, g.count());
        let f = r.f();
        prop_assert!((0.0..=1.0).contains(&f));
        let swapped = match_edges(&g, &p, tol).unwrap();
        prop_assert_eq!((swapped.tp + swapped.fp) as usize, g.count());
    }

    #[test]
    fn thinning_is_an_idempotent_subset(m in (3usize..12, 3usize..12).prop_flat_map(|(h, w)| bits(h, w))) {
        let t = thin(&m);
        prop_assert!(t.bits.iter().zip(&m.bits).all(|(&a, &b)| !a || b));
        prop_assert_eq!(thin(&t), t);
    }

    #[test]
    fn binarization_is_monotone_in_threshold(
        y in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| prop::collection::vec(0.0..1.0f64, h * w)
            .prop_map(move |d| Tensor::new(&[h, w, 1], d).unwrap())),
        t in 0.0..1.0f64,
        dt in 0.0..0.5f64,
    ) {
        let lo = binarize(&y, t).unwrap();
        let hi = binarize(&y, t + dt).unwrap();
        prop_assert!(hi.bits.iter().zip(&lo.bits).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn loss_is_invariant_to_pixel_permutation(
        (labels, preds, perm) in (2usize..40).prop_flat_map(|n| (
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..1.0f64], n),
            prop::collection::vec(0.01..0.99f64, n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )),
        lambda in 0.5..2.0f64,
    ) {
        prop_assume!(labels.iter().any(|&v| v == 0.0 || v >= 0.3));
        let n = labels.len();
        let as_map = |d: Vec<f64>| Tensor::new(&[1, n, 1], d).unwrap();
        let (y, p) = (as_map(labels.clone()), as_map(preds.clone()));
        let yp = as_map(perm.iter().map(|&i| labels[i]).collect());
        let pp = as_map(perm.iter().map(|&i| preds[i]).collect());
        let w = compute_class_weights(&y, lambda, 0.3).unwrap();
        prop_assert_eq!(w, compute_class_weights(&yp, lambda, 0.3).unwrap());
        let a = weighted_bce(&y, &p, &w).unwrap();
        let b = weighted_bce(&yp, &pp, &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn class_weights_scale_with_lambda_only_on_negatives(
        labels in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..1.0f64], 1..50),
        lambda in 0.1..3.0f64,
        k in 0.1..4.0f64,
    ) {
        let y = Tensor::new(&[1, labels.len(), 1], labels).unwrap();
        let Ok(w) = compute_class_weights(&y, lambda, 0.3) else { return Ok(()); };
        let wk = compute_class_weights(&y, lambda * k, 0.3).unwrap();
        prop_assert!((wk.alpha - k * w.alpha).abs() <= 1e-12);
        prop_assert_eq!(wk.beta, w.beta);
        prop_assert!((w.alpha / lambda + w.beta - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn flips_are_involutions_and_turns_cycle(
        (image, label) in (2usize..7).prop_flat_map(|s| (
            tensor(vec![s, s, 3]).prop_map(|t| t.map(|v| v.abs() / 2.0)),
            prop::collection::vec(0.0..1.0f64, s * s).prop_map(move |d| Tensor::new(&[s, s, 1], d).unwrap()),
        )),
        hflip in any::<bool>(),
        vflip in any::<bool>(),
    ) {
        let s = image.shape()[0];
        let sample = Sample::new("x", image, label).unwrap();
        let op = |hflip, vflip, quarter_turns| AugmentOp { top: 0, left: 0, size: s, hflip, vflip, quarter_turns };
        let once = apply_op(&sample, &op(hflip, vflip, 0), 0);
        let twice = apply_op(&once, &op(hflip, vflip, 0), 0);
        prop_assert_eq!(&twice.image, &sample.image);
        prop_assert_eq!(&twice.label, &sample.label);
        let mut turned = sample.clone();
        for _ in 0..4 {
            turned = apply_op(&turned, &op(false, false, 1), 0);
        }
        prop_assert_eq!(&turned.image, &sample.image);
    }
}
