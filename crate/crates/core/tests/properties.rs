use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ricau::attention::{CaConfig, CoordinateAttention, Gate, RicaBlock};
use ricau::data::{augment, window_hu, AugmentConfig, SliceMeta, SliceSample};
use ricau::evaluation::{agatston_per_lesion, dice_per_class};
use ricau::layers::Activation;
use ricau::losses::{loss_from_probs, weighted_focal_from_probs, LossConfig, LossVariant};
use ricau::network::checkpoint::Checkpoint;
use ricau::network::{ArchConfig, ParameterStore, RicauNet};
use ricau::tensor::io as tns;
use ricau::{Graph, Mask, Tensor};

fn uniform(dims: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi)).unwrap()
}

fn random_mask(dims: Vec<usize>, classes: u8, rng: &mut ChaCha8Rng) -> Mask {
    let len = dims.iter().product();
    Mask::new(dims, (0..len).map(|_| rng.gen_range(0..classes)).collect()).unwrap()
}

fn brute_dice(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for i in 0..pred.len() {
        let a = pred[i] == class;
        let b = truth[i] == class;
        p += a as usize;
        t += b as usize;
        inter += (a && b) as usize;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ca_keeps_shape_and_gates_inside_unit_interval(
        n in 1usize..3, c in 1usize..20, h in 1usize..9, w in 1usize..9,
        reduction in 1usize..40, min_mid in 1usize..10, hardswish in any::<bool>(), seed in any::<u64>(),
    ) {
        let cfg = CaConfig {
            reduction_ratio: reduction,
            min_mid_channels: min_mid,
            activation: if hardswish { Activation::HardSwish } else { Activation::Relu },
        };
        let ca = CoordinateAttention::new("ca", c, cfg).unwrap();
        let store = ca.init_store::<f64>(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(vec![n, c, h, w], -3.0, 3.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let maps = ca.attention_maps(&mut g, &p, &mut store.eval_access(), xv, Gate::Sigmoid).unwrap();
        let y = ca.forward(&mut g, &p, &mut store.eval_access(), xv).unwrap();
        prop_assert_eq!(g.dims(y), x.dims());
        for v in g.value(maps.a_h).data().iter().chain(g.value(maps.a_w).data()) {
            prop_assert!(*v > 0.0 && *v < 1.0, "attention value {}", v);
        }
        let ones = ca.forward_gated(&mut g, &p, &mut store.eval_access(), xv, Gate::Ones).unwrap();
        prop_assert_eq!(g.value(ones), &x);
    }

    #[test]
    fn softmax_sums_to_one(n in 1usize..3, h in 1usize..6, w in 1usize..6, scale in 0.1f64..30.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(vec![n, 6, h, w], -scale, scale, &mut rng).cast::<f32>();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let s = g.softmax_channel(xv).unwrap();
        let v = g.value(s);
        for b in 0..n {
            for i in 0..h * w {
                let sum: f64 = (0..6).map(|c| v.data()[(b * 6 + c) * h * w + i] as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6, "pixel sum {}", sum);
            }
        }
    }

    #[test]
    fn dice_matches_brute_force_and_is_symmetric(seed in any::<u64>(), classes in 1u8..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_mask(vec![8, 8], classes, &mut rng);
        let truth = random_mask(vec![8, 8], classes, &mut rng);
        let r = dice_per_class(&pred, &truth).unwrap();
        let swapped = dice_per_class(&truth, &pred).unwrap();
        // shuffle both masks by the same permutation
        let mut order: Vec<usize> = (0..64).collect();
        for i in (1..64).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let perm = |m: &Mask| Mask::new(vec![8, 8], order.iter().map(|&i| m.data()[i]).collect()).unwrap();
        let permuted = dice_per_class(&perm(&pred), &perm(&truth)).unwrap();
        for c in 0..6u8 {
            let expect = brute_dice(pred.data(), truth.data(), c);
            prop_assert_eq!(r.dice[c as usize], expect);
            prop_assert_eq!(swapped.dice[c as usize], expect);
            prop_assert_eq!(permuted.dice[c as usize], expect);
        }
    }

    #[test]
    fn agatston_is_additive_and_monotone(
        side_a in 1usize..5, side_b in 1usize..5, extra in 1usize..4,
        peak_a in 130.0f32..900.0, peak_b in 130.0f32..900.0, label_a in 2u8..6, label_b in 2u8..6,
        area in 0.2f64..4.0,
    ) {
        let (h, w) = (24, 24);
        let paint = |parts: &[(usize, usize, usize, u8, f32)]| {
            let mut labels = vec![0u8; h * w];
            let mut hu = vec![-1000.0f32; h * w];
            for &(y0, x0, side, label, peak) in parts {
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        labels[y * w + x] = label;
                        hu[y * w + x] = peak;
                    }
                }
            }
            agatston_per_lesion(&Mask::new(vec![h, w], labels).unwrap(), &Tensor::new(vec![1, h, w], hu).unwrap(), area).unwrap()
        };
        let a = (1, 1, side_a, label_a, peak_a);
        let b = (12, 12, side_b, label_b, peak_b);
        let both = paint(&[a, b]);
        let (ra, rb) = (paint(&[a]), paint(&[b]));
        for v in 0..4 {
            prop_assert!((both.scores[v] - ra.scores[v] - rb.scores[v]).abs() < 1e-9);
        }
        let grown = paint(&[(1, 1, side_a + extra, label_a, peak_a)]);
        prop_assert!(grown.total >= ra.total);
    }

    #[test]
    fn focal_never_increases_with_true_class_probability(seed in any::<u64>(), bump in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (3, 3);
        let target = random_mask(vec![1, h, w], 6, &mut rng);
        let raw = uniform(vec![1, 6, h, w], 0.05, 1.0, &mut rng);
        let mut probs = raw.clone();
        for i in 0..h * w {
            let s: f64 = (0..6).map(|c| raw.data()[c * h * w + i]).sum();
            for c in 0..6 {
                probs.data_mut()[c * h * w + i] /= s;
            }
        }
        let pixel = rng.gen_range(0..h * w);
        let t = target.data()[pixel] as usize;
        let mut raised = probs.clone();
        let p = probs.data()[t * h * w + pixel];
        let q = p + bump * (1.0 - p);
        for c in 0..6 {
            let v = &mut raised.data_mut()[c * h * w + pixel];
            *v = if c == t { q } else { *v * (1.0 - q) / (1.0 - p) };
        }
        let cfg = LossConfig { class_weights: (0..6).map(|_| rng.gen_range(0.1..3.0)).collect(), ..LossConfig::default() };
        let focal = |probs: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(probs).unwrap();
            let l = weighted_focal_from_probs(&mut g, v, &target, &cfg).unwrap();
            g.value(l).data()[0]
        };
        prop_assert!(focal(raised) <= focal(probs) + 1e-15);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_perfect_prediction(seed in any::<u64>(), variant in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_mask(vec![2, 4, 4], 6, &mut rng);
        let cfg = LossConfig { variant: LossVariant::ALL[variant], ..LossConfig::default() };
        let eval = |probs: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(probs).unwrap();
            let l = loss_from_probs(&mut g, v, &target, &cfg).unwrap();
            g.value(l).data()[0]
        };
        let logits = uniform(vec![2, 6, 4, 4], -4.0, 4.0, &mut rng);
        let mut g = Graph::new();
        let lv = g.constant(logits).unwrap();
        let sm = g.softmax_channel(lv).unwrap();
        prop_assert!(eval(g.value(sm).clone()) >= 0.0);
        let perfect = ricau::losses::one_hot::<f64>(&target, 6);
        prop_assert!(eval(perfect).abs() < 1e-6);
    }

    #[test]
    fn network_output_matches_input_extent(hq in 1usize..5, wq in 1usize..5, n in 1usize..3, ca in any::<bool>(), seed in any::<u64>()) {
        let arch = ArchConfig { levels: 2, base_channels: 2, ca_enabled: ca, ..ArchConfig::default() };
        let net = RicauNet::new(arch).unwrap();
        let store = net.init_store::<f32>(seed).unwrap();
        let (h, w) = (4 * hq, 4 * wq);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(vec![n, 1, h, w], 0.0, 1.0, &mut rng).cast::<f32>();
        let before = Checkpoint::from_store(&store).encode();
        let y = net.predict(&store, &x).unwrap();
        prop_assert_eq!(y.dims(), &[n, 6, h, w][..]);
        prop_assert_eq!(Checkpoint::from_store(&store).encode(), before);
    }

    #[test]
    fn augmentation_emits_only_source_labels(seed in any::<u64>(), labels in prop::collection::vec(0u8..6, 1..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (64, 64);
        let mask: Vec<u8> = (0..h * w).map(|_| labels[rng.gen_range(0..labels.len())]).collect();
        let image = Tensor::from_fn(vec![1, h, w], |_| rng.gen_range(-1000.0..1000.0)).unwrap();
        let sample = SliceSample::new(image, Mask::new(vec![h, w], mask.clone()).unwrap(), SliceMeta::default()).unwrap();
        let cfg = AugmentConfig {
            p_rotate: 1.0, p_crop: 1.0, p_blur: 1.0, p_noise: 1.0, p_salt_pepper: 1.0,
            ..AugmentConfig::default().scaled_to(64)
        };
        let out = augment(&sample, &cfg, &mut rng).unwrap();
        prop_assert_eq!(out.mask.dims(), &[h, w][..]);
        for l in out.mask.data() {
            prop_assert!(labels.contains(l));
        }
    }

    #[test]
    fn tensor_files_round_trip_bit_exactly(dims in prop::collection::vec(1usize..5, 2..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(dims.clone(), |_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).unwrap();
        let back = tns::read(&mut tns::encode_f32(&t).as_slice()).unwrap().into_f32().unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let m = random_mask(dims[..dims.len().min(3)].to_vec(), 6, &mut rng);
        prop_assert_eq!(tns::read(&mut tns::encode_mask(&m).as_slice()).unwrap().into_mask().unwrap(), m);
    }

    #[test]
    fn window_is_idempotent_after_inverse_scaling(v in -3000.0f32..3000.0) {
        let once = window_hu(v);
        let back = -150.0 + once * 380.0;
        prop_assert!((window_hu(back) - once).abs() <= 1e-6);
    }
}

#[test]
fn rica_output_is_the_sum_of_its_paths() {
    let block = RicaBlock::new("b", 3, 5, CaConfig::default()).unwrap();
    let mut store: ParameterStore<f32> = block.init_store(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(vec![2, 3, 6, 5], -1.0, 1.0, &mut rng).cast::<f32>();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false).unwrap();
    let xv = g.constant(x).unwrap();
    let paths = block.paths(&mut g, &p, &mut store.train_access(), xv).unwrap();
    let y = block.forward(&mut g, &p, &mut store.eval_access(), xv).unwrap();
    let mut g2 = Graph::new();
    let p2 = store.bind(&mut g2, false).unwrap();
    let xv2 = g2.constant(g.value(xv).clone()).unwrap();
    let fresh = block.paths(&mut g2, &p2, &mut store.eval_access(), xv2).unwrap();
    let sum: Vec<f32> = g2.value(fresh.main).data().iter().zip(g2.value(fresh.skip).data()).map(|(a, b)| a + b).collect();
    assert_eq!(g.value(y).data(), &sum[..]);
    assert_eq!(g.dims(paths.main), g.dims(paths.skip));
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let y = g.add(x, x).unwrap();
    let l = g.mean_all(y).unwrap();
    g.backward(l).unwrap();
    let expect = 2.0 / 3.0;
    assert!(g.grad(x).unwrap().data().iter().all(|&v| (v - expect).abs() < 1e-15));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = RicauNet::new(ArchConfig::desk()).unwrap();
    let store = net.init_store::<f32>(21).unwrap();
    let ck = Checkpoint::from_store(&store);
    let back = Checkpoint::read(&mut ck.encode().as_slice()).unwrap();
    assert_eq!(back.encode(), ck.encode());
    let mut restored = net.init_store::<f32>(0).unwrap();
    back.load_into(&mut restored).unwrap();
    let x = Tensor::from_fn(vec![1, 1, 16, 16], |i| (i % 7) as f32 / 7.0).unwrap();
    let a = net.predict(&store, &x).unwrap();
    let b = net.predict(&restored, &x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
