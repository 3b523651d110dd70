mod common;

use std::collections::BTreeSet;

use modelab_core::data::*;
use proptest::prelude::*;

fn shapes_params() -> GenParams {
    GenParams { size: 16, num_digits: 2, seq_len: 8, input_len: 4, speed_min: 1.0, speed_max: 3.0, sprite_size: 5 }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn trajectories_stay_on_canvas(x in 0.0f64..10.0, y in 0.0f64..10.0, vx in -4.0f64..4.0, vy in -4.0f64..4.0) {
        let mut t = Trajectory { pos: [x, y], vel: [vx, vy], limit: [10.0, 10.0] };
        let speed = (vx * vx + vy * vy).sqrt();
        for _ in 0..50 {
            t.step();
            prop_assert!((0.0..=10.0).contains(&t.pos[0]) && (0.0..=10.0).contains(&t.pos[1]));
            let [px, py] = t.pixel();
            prop_assert!(px <= 10 && py <= 10);
            let s = (t.vel[0].powi(2) + t.vel[1].powi(2)).sqrt();
            prop_assert!((s - speed).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_and_bounded(seed in any::<u64>(), count in 0usize..5) {
        let p = shapes_params();
        let a = generate_moving_shapes(count, seed, &p).unwrap();
        let b = generate_moving_shapes(count, seed, &p).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        prop_assert_eq!(a.len(), count);
        prop_assert!(a.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        let occ = a.occupancy.as_ref().unwrap();
        for (v, o) in a.frames.iter().zip(occ) {
            prop_assert_eq!(*v > 0.0, *o);
        }
    }

    #[test]
    fn store_bytes_round_trip_to_quantized_values(seed in any::<u64>()) {
        let store = generate_moving_shapes(3, seed, &shapes_params()).unwrap();
        let back = SequenceStore::from_bytes(&store.to_bytes(), "t").unwrap();
        prop_assert_eq!(back.len(), 3);
        for (a, b) in store.frames.iter().zip(&back.frames) {
            prop_assert_eq!(quantize(*a), quantize(*b));
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        prop_assert_eq!(back.to_bytes(), store.to_bytes());
    }

    #[test]
    fn every_sequence_appears_once_per_epoch(len in 1usize..30, bs in 1usize..8, seed in any::<u64>(), epoch in 0u64..5) {
        let per = batches_per_epoch(len, bs) as u64;
        let mut seen = Vec::new();
        for it in epoch * per..(epoch + 1) * per {
            let b = batch_indices(len, bs, seed, it);
            prop_assert!(!b.is_empty() && b.len() <= bs);
            seen.extend(b);
        }
        seen.sort();
        prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
    }
}

#[test]
fn quantization_rule() {
    assert_eq!(quantize(0.0), 0);
    assert_eq!(quantize(1.0), 255);
    assert_eq!(quantize(0.5), 128);
    assert_eq!(quantize(-3.0), 0);
    assert_eq!(quantize(7.0), 255);
}

#[test]
fn different_seeds_give_different_stores() {
    let p = shapes_params();
    let a = generate_moving_shapes(4, 7, &p).unwrap();
    let b = generate_moving_shapes(4, 8, &p).unwrap();
    assert_ne!(a.checksum(), b.checksum());
    assert_eq!(a.checksum(), generate_moving_shapes(4, 7, &p).unwrap().checksum());
    assert_eq!(a.ids[2], "shapes:7:2");
}

#[test]
fn prefix_of_a_larger_store_is_stable() {
    let p = shapes_params();
    let small = generate_moving_shapes(3, 5, &p).unwrap();
    let big = generate_moving_shapes(6, 5, &p).unwrap();
    assert_eq!(small.frames[..], big.frames[..small.frames.len()]);
}

#[test]
fn thread_count_does_not_change_output() {
    let p = shapes_params();
    std::env::set_var("MODELAB_THREADS", "1");
    let one = generate_moving_shapes(6, 9, &p).unwrap();
    std::env::set_var("MODELAB_THREADS", "3");
    let three = generate_moving_shapes(6, 9, &p).unwrap();
    std::env::remove_var("MODELAB_THREADS");
    assert_eq!(one.to_bytes(), three.to_bytes());
}

#[test]
fn empty_store_is_valid_and_round_trips() {
    let store = generate_moving_shapes(0, 1, &shapes_params()).unwrap();
    assert!(store.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.mdsq");
    write_sequence_store(&path, &store).unwrap();
    let back = read_sequence_store(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.seq_len, 8);
}

#[test]
fn stores_reject_bad_input() {
    let mut s = SequenceStore::empty(3, 1, 1, 2, 2).unwrap();
    assert!(s.push("a".into(), &[0.5; 11]).is_err());
    assert!(s.push("a".into(), &[1.5; 12]).is_err());
    s.push("a".into(), &[0.5; 12]).unwrap();
    assert!(s.batch(&[1]).is_err());
    assert!(s.batch(&[]).is_err());
    let bytes = s.to_bytes();
    assert!(SequenceStore::from_bytes(&bytes[..bytes.len() - 1], "x").is_err());
    assert!(SequenceStore::from_bytes(&bytes[..10], "x").is_err());
    assert!(SequenceStore::empty(3, 3, 1, 2, 2).is_err());
    let bad = GenParams { sprite_size: 20, ..shapes_params() };
    assert!(generate_moving_shapes(1, 0, &bad).is_err());
}

#[test]
fn idx_round_trip_and_digit_generation() {
    let sprites: Vec<DigitSprite> = (0..3)
        .map(|d| DigitSprite {
            bitmap: (0..DIGIT_SIZE * DIGIT_SIZE).map(|i| if (i + d) % 7 == 0 { 1.0 } else { 0.0 }).collect(),
            label: d as u8,
        })
        .collect();
    let (images, labels) = encode_idx(&sprites);
    let parsed = parse_idx_images(&images).unwrap();
    assert_eq!(parse_idx_labels(&labels).unwrap(), vec![0, 1, 2]);
    assert_eq!(parsed[1], sprites[1].bitmap);
    assert!(parse_idx_images(&labels).is_err());
    assert!(parse_idx_images(&images[..images.len() - 1]).is_err());

    let p = GenParams { size: 32, seq_len: 6, input_len: 3, ..GenParams::default() };
    let store = generate_moving_mnist(&sprites, 2, PINNED_TEST_SEED, &p).unwrap();
    assert_eq!(store.len(), 2);
    assert_eq!(store.frame_len(), 32 * 32);
    let ids: BTreeSet<&String> = store.ids.iter().collect();
    assert_eq!(ids.len(), 2);
}
