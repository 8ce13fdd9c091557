use std::collections::HashMap;

use proptest::prelude::*;

use ibn_core::autograd::grad_check;
use ibn_core::nn::{self, count_params, gelu, sigmoid, ActivationKind, OptimizerState};
use ibn_core::oracle;
use ibn_core::pipeline::train::{mask_count, mask_positions, MASK_RATE};
use ibn_core::tensor::{row_softmax, transpose, Matrix, RngState};
use ibn_core::tokenizer::{build_vocab, Vocabulary, CONTINUATION, SPECIALS, UNK_ID};

const CORPUS: [&str; 6] = [
    "Show me Cisco routers up since a year",
    "How many switches are up for more than 2 hours ?",
    "Configure vlan 20 on Juniper switches in Paris",
    "Count the firewalls that are down",
    "Set the bandwidth of Arista routers to 10 Gbps",
    "Show me routers and switches in Lyon",
];

fn vocab() -> Vocabulary {
    let corpus: Vec<&str> = CORPUS.iter().copied().cycle().take(CORPUS.len() * 3).collect();
    build_vocab(&corpus, 250).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let m = Matrix::gaussian(rows, cols, &mut RngState::new(seed)).scale(5.0);
        let s = row_softmax(&m);
        for r in 0..rows {
            prop_assert!(s.row(r).iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1 && p == 1.0));
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn transpose_is_an_exact_involution(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let m = Matrix::gaussian(rows, cols, &mut RngState::new(seed));
        prop_assert_eq!(transpose(&transpose(&m)), m);
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let a = Matrix::gaussian(3, 4, &mut RngState::new(seed));
        let b = Matrix::gaussian(4, 2, &mut RngState::new(seed ^ 1));
        let x = ibn_core::tensor::matmul(&a, &b).unwrap();
        let y = ibn_core::tensor::matmul(&a, &b).unwrap();
        prop_assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn every_op_matches_finite_differences(seed in 0u64..10_000, k in 0..oracle::OP_KINDS.len()) {
        let mut tape = oracle::op_tape(oracle::OP_KINDS[k], seed).unwrap();
        let err = grad_check(&mut tape, &HashMap::new(), 1e-6).unwrap();
        prop_assert!(err < oracle::OP_TOLERANCE, "{} seed {}: {}", oracle::OP_KINDS[k], seed, err);
    }

    #[test]
    fn activation_ranges(z in -15.0f64..15.0) {
        prop_assert!(z.tanh() > -1.0 && z.tanh() < 1.0);
        prop_assert!(sigmoid(z) > 0.0 && sigmoid(z) < 1.0);
    }

    #[test]
    fn gelu_is_negative_left_of_zero(z in -2.999f64..-1e-6) {
        prop_assert!(gelu(z) < 0.0);
    }

    #[test]
    fn count_params_is_additive(sizes in prop::collection::vec(1usize..50, 3..6), cut in 1usize..4) {
        let cut = cut.min(sizes.len() - 2);
        let whole = count_params(&sizes).unwrap();
        let left = count_params(&sizes[..=cut]).unwrap();
        let right = count_params(&sizes[cut..]).unwrap();
        prop_assert_eq!(whole, left + right);
    }

    #[test]
    fn zero_momentum_is_plain_descent(grads in prop::collection::vec(-5.0f64..5.0, 1..20), eta in 0.001f64..1.0) {
        let mut plain = OptimizerState::plain(eta).unwrap();
        let mut heavy = OptimizerState::momentum(eta, 0.0).unwrap();
        let (mut a, mut b) = (Matrix::scalar(0.3), Matrix::scalar(0.3));
        for g in grads {
            plain.update("p", &mut a, &Matrix::scalar(g)).unwrap();
            heavy.update("p", &mut b, &Matrix::scalar(g)).unwrap();
            prop_assert_eq!(a.item().to_bits(), b.item().to_bits());
        }
    }

    #[test]
    fn segmentation_is_total_and_deterministic(text in "\\PC{0,40}") {
        let v = vocab();
        let a = v.segment(&text);
        prop_assert_eq!(&a, &v.segment(&text));
        prop_assert!(a.iter().all(|&id| id < v.len()));
    }

    #[test]
    fn greedy_pieces_cannot_be_extended(word in "[a-z0-9]{1,14}") {
        let v = vocab();
        let ids = v.segment_word(&word);
        if ids == [UNK_ID] {
            return Ok(());
        }
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        for id in ids {
            let piece = v.piece(id).unwrap();
            let len = piece.trim_start_matches(CONTINUATION).chars().count();
            for end in start + len + 1..=chars.len() {
                let mut longer = if start > 0 { CONTINUATION.to_string() } else { String::new() };
                longer.extend(&chars[start..end]);
                prop_assert!(!v.contains(&longer), "{} extends {}", longer, piece);
            }
            start += len;
        }
        prop_assert_eq!(start, chars.len());
    }

    #[test]
    fn mask_positions_skip_specials_and_count_exactly(usable in 3usize..60, seed in any::<u64>()) {
        let pos = mask_positions(usable, MASK_RATE, &mut RngState::new(seed));
        prop_assert_eq!(pos.len(), mask_count(usable, MASK_RATE));
        prop_assert_eq!(pos.len(), (MASK_RATE * usable as f64).ceil() as usize);
        prop_assert!(pos.iter().all(|&p| (1..=usable).contains(&p)));
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn gelu_approaches_relu_far_from_zero() {
    for x in [-10.0, 10.0] {
        let relu = nn::apply_activation(ActivationKind::Relu, x);
        assert!((gelu(x) - relu).abs() < 1e-6);
    }
}

#[test]
fn vocabulary_file_round_trip_is_bit_exact() {
    let v = vocab();
    let mut bytes = Vec::new();
    v.write_to(&mut bytes).unwrap();
    let back = Vocabulary::read_from(&bytes[..]).unwrap();
    assert_eq!(back, v);
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(again, bytes);
    assert!(v.len() <= 250);
    for (i, s) in SPECIALS.iter().enumerate() {
        assert_eq!(v.id(s), Some(i));
    }
}
