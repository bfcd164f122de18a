use proptest::collection::vec;
use proptest::prelude::*;

use memtrack::autodiff::Tape;
use memtrack::checkpoint;
use memtrack::config::Config;
use memtrack::dataset::{format_boxes, parse_boxes};
use memtrack::geometry::{iou, BoundingBox, Roi};
use memtrack::image::{crop_resize, Image};
use memtrack::memory::{allocation_weight, memory_key, Memory, ReadMode};
use memtrack::metrics::compute_metrics;
use memtrack::numerics::{conv2d, cosine_similarity, cross_correlate, softmax};
use memtrack::params::ParamStore;
use memtrack::train::gt_response;
use memtrack::Tensor;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// HWC map strategy: `(h, w, c, data)`.
fn map(max_hw: usize, max_c: usize) -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1..=max_hw, 1..=max_hw, 1..=max_c)
        .prop_flat_map(|(h, w, c)| (Just(h), Just(w), Just(c), vec(-2.0..2.0f64, h * w * c)))
}

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::from_top_left(x, y, w, h).unwrap())
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(0.01..1.0f64, n).prop_map(|v| {
        let t: f64 = v.iter().sum();
        v.into_iter().map(|x| x / t).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_simplex(v in vec(-30.0..30.0f64, 1..40)) {
        let p = softmax(&v).unwrap();
        prop_assert!(p.iter().all(|&x| x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_is_scale_invariant_and_bounded(x in vec(-5.0..5.0f64, 2..20), y in vec(-5.0..5.0f64, 2..20), a in 0.01..100.0f64) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let ax: Vec<f64> = x.iter().map(|v| v * a).collect();
        prop_assert!((cosine_similarity(x, &ax).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!(cosine_similarity(x, y).unwrap().abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn xcorr_matches_sliding_dot_product((h, w, c, s) in map(16, 8), n in 1usize..6, seed in any::<u64>()) {
        let n = n.min(h).min(w);
        let t: Vec<f64> = (0..n * n * c).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64 - 48.0) / 17.0).collect();
        let got = cross_correlate(&tensor(&[h, w, c], s.clone()), &tensor(&[n, n, c], t.clone())).unwrap();
        let (oh, ow) = (h - n + 1, w - n + 1);
        prop_assert_eq!(got.shape(), &[oh, ow]);
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..n {
                    for dx in 0..n {
                        for k in 0..c {
                            acc += s[((y + dy) * w + x + dx) * c + k] * t[(dy * n + dx) * c + k];
                        }
                    }
                }
                prop_assert!((got.data()[y * ow + x] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_nested_loops(input in vec(-1.0..1.0f64, 5 * 5 * 2), kernel in vec(-1.0..1.0f64, 3 * 3 * 2 * 4), stride in 1usize..3) {
        let got = conv2d(&tensor(&[5, 5, 2], input.clone()), &tensor(&[3, 3, 2, 4], kernel.clone()), stride).unwrap();
        let o = (5 - 3) / stride + 1;
        prop_assert_eq!(got.shape(), &[o, o, 4]);
        for y in 0..o {
            for x in 0..o {
                for co in 0..4 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for ci in 0..2 {
                                acc += input[((y * stride + ky) * 5 + x * stride + kx) * 2 + ci]
                                    * kernel[((ky * 3 + kx) * 2 + ci) * 4 + co];
                            }
                        }
                    }
                    prop_assert!((got.data()[(y * o + x) * 4 + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn allocation_is_one_hot_at_first_minimum(access in vec(0u8..4, 1..12)) {
        let a: Vec<f64> = access.iter().map(|&v| v as f64).collect();
        let w = allocation_weight(&a);
        let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = a.iter().position(|&v| v == min).unwrap();
        prop_assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 1);
        prop_assert_eq!(w[first], 1.0);
    }

    #[test]
    fn memory_write_invariants(
        slots in vec(vec(-1.0..1.0f64, 2 * 2 * 3), 4),
        access in vec(0.0..2.0f64, 4),
        key in vec(-1.0..1.0f64, 3),
        beta in 1.0..20.0f64,
        gates in simplex(3),
        decay in 0.05..0.95f64,
        t_new in vec(-1.0..1.0f64, 2 * 2 * 3),
    ) {
        let shape = [2, 2, 3];
        let mut tape = Tape::<f64>::new();
        let mut mem = Memory::zeros(&mut tape, 4, &shape, 0.99).unwrap();
        for (j, s) in slots.iter().enumerate() {
            mem.slots[j] = tape.constant(tensor(&shape, s.clone()));
            mem.keys[j] = memory_key(&mut tape, mem.slots[j]).unwrap();
        }
        mem.access = access.clone();
        let k = tape.constant(tensor(&[3], key));
        let b = tape.scalar_constant(beta);
        let read = mem.read(&mut tape, k, b, ReadMode::Soft).unwrap();
        let wr = tape.value(read.weights).data().to_vec();
        prop_assert!(wr.iter().all(|&x| x >= 0.0) && (wr.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let g = tape.constant(tensor(&[3], gates.clone()));
        let d = tape.scalar_constant(decay);
        let t = tape.constant(tensor(&shape, t_new));
        let ww = mem.write_positive(&mut tape, t, g, read.weights, d).unwrap();
        prop_assert!((ww.iter().sum::<f64>() - gates[1] - gates[2]).abs() < 1e-12);
        for j in 0..4 {
            prop_assert!(mem.access[j] >= 0.0);
            prop_assert!((mem.access[j] - (0.99 * access[j] + wr[j] + ww[j])).abs() < 1e-12);
            let fresh = memory_key(&mut tape, mem.slots[j]).unwrap();
            let (a, b) = (tape.value(fresh).data(), tape.value(mem.keys[j]).data());
            prop_assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_curves_are_monotone(pairs in vec((bbox(), bbox()), 1..30)) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let r = compute_metrics(&p, &g, None).unwrap();
        prop_assert!(r.precision_curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.success_curve.windows(2).all(|w| w[0] >= w[1]));
        let overlapping = r.per_frame.iter().filter(|f| f.iou > 0.0).count() as f64 / p.len() as f64;
        prop_assert_eq!(r.success_curve[0], overlapping);
        prop_assert_eq!(r.to_json(), compute_metrics(&p, &g, None).unwrap().to_json());
    }

    #[test]
    fn box_files_round_trip(boxes in vec(bbox(), 1..20)) {
        prop_assert_eq!(parse_boxes(&format_boxes(&boxes)).unwrap(), boxes);
    }

    #[test]
    fn label_maps_are_balanced(oy in 0.0..16.0f64, ox in 0.0..16.0f64, r in 0.0..4.0f64) {
        let l = gt_response((oy, ox), 17, r).unwrap();
        prop_assert!(l.positives() >= 1);
        prop_assert!((l.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_frames_crop_to_constants(rgb in any::<[u8; 3]>(), cx in -50.0..150.0f64, cy in -50.0..150.0f64, side in 2.0..300.0f64) {
        let img = Image::filled(97, 61, rgb);
        let t = crop_resize::<f64>(&img, &Roi { cx, cy, side }, 9).unwrap();
        for (i, &v) in t.data().iter().enumerate() {
            prop_assert!((v - rgb[i % 3] as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoints_round_trip(values in vec(-1e6..1e6f32, 1..50)) {
        let mut store = ParamStore::<f32>::new();
        store.insert("a/w", Tensor::new(vec![values.len()], values.clone()).unwrap());
        store.insert("b", Tensor::vector(vec![1.5f32]));
        let mut buf = Vec::new();
        checkpoint::write(&store, &mut buf).unwrap();
        let back: ParamStore<f32> = checkpoint::read(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, store);
    }
}

#[test]
fn config_text_round_trips() {
    for cfg in [Config::desk(), Config::full()] {
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
