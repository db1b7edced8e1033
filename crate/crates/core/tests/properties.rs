//! Property tests for the invariants the tokenizer depends on.

use std::path::Path;

use proptest::prelude::*;
use trajtok::config::Config;
use trajtok::matching::{brute_force_match, hungarian_match};
use trajtok::metrics::{
    flops_estimate, passes_filters, trajectory_miou, trajectory_miou_brute_force, FilterConfig,
    FlopsConfig, FlopsModel,
};
use trajtok::model::ModelConfig;
use trajtok::segmenter::{chunk_video, harden};
use trajtok::tensor_file::{Payload, TensorFile};
use trajtok::train::{batch_indices, Schedule};
use trajtok::video::split;
use trajtok::{Tape, Tensor};

fn matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(
            prop::collection::vec(prop_oneof![(0u8..4).prop_map(f64::from), -5.0..5.0f64], c),
            r,
        )
    })
}

fn masks(count: usize, len: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
    prop::collection::vec(prop::collection::vec(any::<bool>(), len), count)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hungarian_agrees_with_exhaustive_search(cost in matrix(6)) {
        let a = hungarian_match(&cost).unwrap();
        let b = brute_force_match(&cost).unwrap();
        prop_assert_eq!(&a.pairs, &b.pairs);
        prop_assert!((a.cost - b.cost).abs() < 1e-12);
        prop_assert_eq!(a.pairs.len(), cost.len().min(cost[0].len()));
    }

    #[test]
    fn miou_matching_agrees_with_exhaustive_search(
        (pred, gt) in (1usize..=6, 1usize..=6).prop_flat_map(|(p, g)| (masks(p, 20), masks(g, 20)))
    ) {
        let a = trajectory_miou(&pred, &gt).unwrap();
        let b = trajectory_miou_brute_force(&pred, &gt).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn softmax_slices_sum_to_one(data in prop::collection::vec(-30.0..30.0f64, 12), axis in 0usize..2) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], data).unwrap());
        let s = tape.softmax(x, axis).unwrap();
        let v = tape.value(s);
        let (outer, inner) = if axis == 0 { (4, 3) } else { (3, 4) };
        for o in 0..outer {
            let total: f64 = (0..inner)
                .map(|i| if axis == 0 { v.at(&[i, o]) } else { v.at(&[o, i]) })
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_masks_pick_the_first_maximum(data in prop::collection::vec(0u8..3, 15)) {
        let soft = Tensor::new(&[3, 5], data.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let hard = harden(&soft).unwrap();
        for pos in 0..5 {
            let column: Vec<f64> = (0..3).map(|k| soft.at(&[k, pos])).collect();
            let max = column.iter().cloned().fold(f64::MIN, f64::max);
            let first = column.iter().position(|&v| v == max).unwrap();
            prop_assert_eq!(hard.winner(pos), first);
            prop_assert_eq!((0..3).filter(|&k| hard.contains(k, pos)).count(), 1);
        }
    }

    #[test]
    fn rope_preserves_norms_and_relative_logits(
        q in prop::collection::vec(-3.0..3.0f64, 8),
        k in prop::collection::vec(-3.0..3.0f64, 8),
        m in 0usize..500,
        n in 0usize..500,
        shift in 0usize..5000,
    ) {
        let logit = |a: usize, b: usize| {
            let mut tape = Tape::new();
            let qv = tape.constant(Tensor::new(&[1, 8], q.clone()).unwrap());
            let kv = tape.constant(Tensor::new(&[1, 8], k.clone()).unwrap());
            let qr = tape.rope(qv, 10_000.0, a).unwrap();
            let kr = tape.rope(kv, 10_000.0, b).unwrap();
            let (qr, kr) = (tape.value(qr).clone(), tape.value(kr).clone());
            let dot: f64 = qr.data().iter().zip(kr.data()).map(|(x, y)| x * y).sum();
            (dot, qr.norm())
        };
        let (base, norm) = logit(m, n);
        let q_norm = Tensor::new(&[8], q.clone()).unwrap().norm();
        prop_assert!((norm - q_norm).abs() <= 1e-12 * (1.0 + q_norm));
        let (shifted, _) = logit(m + shift, n + shift);
        prop_assert!((shifted - base).abs() < 1e-9);
    }

    #[test]
    fn tensor_files_round_trip_bit_exactly(
        dims in prop::collection::vec(1usize..4, 0..4),
        seed in any::<u64>(),
        kind in 0u8..3,
    ) {
        let count: usize = dims.iter().product();
        let mut rng = trajtok::rng::Rng::new(seed);
        let payload = match kind {
            0 => Payload::F32((0..count).map(|_| f32::from_bits(rng.next_u64() as u32)).filter(|v| !v.is_nan()).chain(std::iter::repeat(0.5)).take(count).collect()),
            1 => Payload::F64((0..count).map(|_| f64::from_bits(rng.next_u64())).filter(|v| !v.is_nan()).chain(std::iter::repeat(0.5)).take(count).collect()),
            _ => Payload::I32((0..count).map(|_| rng.next_u64() as i32).collect()),
        };
        let file = TensorFile::new(&dims, payload).unwrap();
        let bytes = file.encode();
        let back = TensorFile::decode(&bytes, Path::new("p.ttkt")).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncated_tensor_files_are_rejected(cut in 1usize..40) {
        let bytes = TensorFile::f64(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).encode();
        let cut = cut.min(bytes.len());
        prop_assert!(TensorFile::decode(&bytes[..bytes.len() - cut], Path::new("t.ttkt")).is_err());
    }

    #[test]
    fn configs_round_trip(
        videos in 1usize..1000,
        lr in 1e-6..1.0f64,
        temperature in 0.01..1.0f64,
        widths in prop::collection::vec(1usize..64, 3),
        detach in any::<bool>(),
        linear in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut c = Config::default();
        c.data.videos = videos;
        c.train.learning_rate = lr;
        c.loss.temperature = temperature;
        c.model.encoder.stage_widths = widths;
        c.model.segmenter.detach_features = detach;
        c.train.schedule = if linear { Schedule::Linear } else { Schedule::Cosine };
        c.train.seed = seed;
        let text = c.serialize();
        let back = Config::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.serialize(), text);
    }

    #[test]
    fn flops_grow_in_every_extent(t in 1usize..64, hw in 1usize..8, model_kind in 0u8..2) {
        let kind = if model_kind == 0 { FlopsModel::TrajTok } else { FlopsModel::Vit3d };
        let model = ModelConfig::default();
        let cfg = FlopsConfig { height: 32 * hw, width: 32 * hw, ..FlopsConfig::default() };
        let base = flops_estimate(kind, 2 * t, &model, &cfg);
        prop_assert!(flops_estimate(kind, 2 * t + 2, &model, &cfg) > base);
        let taller = FlopsConfig { height: cfg.height + 32, ..cfg.clone() };
        let wider = FlopsConfig { width: cfg.width + 32, ..cfg.clone() };
        prop_assert!(flops_estimate(kind, 2 * t, &model, &taller) > base);
        prop_assert!(flops_estimate(kind, 2 * t, &model, &wider) > base);
    }

    #[test]
    fn trajtok_share_shrinks_with_duration(t in 1usize..64) {
        let model = ModelConfig::default();
        let cfg = FlopsConfig::default();
        let ratio = |frames| {
            flops_estimate(FlopsModel::TrajTok, frames, &model, &cfg) / flops_estimate(FlopsModel::Vit3d, frames, &model, &cfg)
        };
        prop_assert!(ratio(8 * (t + 1)) < ratio(8 * t));
    }

    #[test]
    fn each_epoch_visits_every_item_once(len in 1usize..40, batch in 1usize..9, seed in any::<u64>()) {
        let steps = (2 * len).div_ceil(batch);
        let seen: Vec<usize> = (0..steps).flat_map(|s| batch_indices(seed, s, batch, len)).collect();
        for epoch in seen.chunks(len).take(2).filter(|e| e.len() == len) {
            let mut sorted = epoch.to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..len).collect::<Vec<_>>());
        }
    }

    #[test]
    fn split_partitions_the_input(len in 1usize..100, fraction in 0.0..0.5f64, seed in any::<u64>()) {
        let items: Vec<usize> = (0..len).collect();
        let (train, val) = split(&items, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), len);
        prop_assert_eq!(val.len(), (len as f64 * fraction).round() as usize);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }

    #[test]
    fn chunks_concatenate_back_to_the_video(frames in 1usize..20, chunk in 1usize..9) {
        let video = Tensor::from_fn(&[frames, 2, 2, 3], |i| i as f64);
        let chunks = chunk_video(&video, chunk).unwrap();
        prop_assert_eq!(chunks.len(), frames.div_ceil(chunk));
        let joined: Vec<f64> = chunks.iter().flat_map(|c| c.data().iter().copied()).collect();
        prop_assert_eq!(joined.as_slice(), video.data());
    }
}

#[test]
fn filters_are_inclusive_at_both_thresholds() {
    let cfg = FilterConfig::default();
    let len = 100;
    let region =
        |range: std::ops::Range<usize>| (0..len).map(|i| range.contains(&i)).collect::<Vec<bool>>();
    // Ten objects covering exactly 80 of 100 positions.
    let exact: Vec<Vec<bool>> = (0..10).map(|k| region(8 * k..8 * k + 8)).collect();
    assert!(passes_filters(&exact, &cfg));
    let nine: Vec<Vec<bool>> = (0..9).map(|k| region(9 * k..9 * k + 9)).collect();
    assert!(!passes_filters(&nine, &cfg));
    let mut thin = exact.clone();
    thin[9] = region(72..79);
    assert!(!passes_filters(&thin, &cfg));
}
