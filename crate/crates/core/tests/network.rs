mod common;

use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;

use stationflow::config::Fingerprint;
use stationflow::dataset::Standardizer;
use stationflow::network::{
    decode, encode, encode_observed, loss_and_grad, lstm_step, mse_loss, predict_head, predict_sequence,
    Checkpoint, LstmParams, LstmState, Masks, ModelParams, Objective,
};

use common::*;

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

#[test]
fn lstm_matches_scalar_recurrence() {
    let mut r = rng(3);
    let p = LstmParams {
        w_input: random_matrix(&mut r, 2, 12, -0.8, 0.8),
        w_hidden: random_matrix(&mut r, 3, 12, -0.8, 0.8),
        bias: random_matrix(&mut r, 1, 12, -0.5, 0.5),
    };
    let xs: Vec<Array2<f64>> = (0..5).map(|_| random_matrix(&mut r, 2, 2, -2.0, 2.0)).collect();
    let state = encode(&p, &xs, None).unwrap();
    for row in 0..2 {
        let seq: Vec<Vec<f64>> = xs.iter().map(|x| x.row(row).to_vec()).collect();
        let (h, c) = lstm_oracle(&rows(&p.w_input), &rows(&p.w_hidden), p.bias.row(0).as_slice().unwrap(), &seq, &[0.0; 3], &[0.0; 3]);
        for u in 0..3 {
            assert_abs_diff_eq!(state.h[[row, u]], h[u], epsilon = 1e-12);
            assert_abs_diff_eq!(state.c[[row, u]], c[u], epsilon = 1e-12);
        }
    }
}

#[test]
fn lstm_hand_set_single_step() {
    // All weights zero, biases zero: i = f = o = 1/2, g = 0, so c = c0 / 2.
    let p = LstmParams::zeros(1, 1);
    let state = LstmState {
        h: array![[0.0]],
        c: array![[0.8]],
    };
    let next = lstm_step(&p, &array![[5.0]], &state, None).unwrap();
    assert_abs_diff_eq!(next.c[[0, 0]], 0.4, epsilon = 1e-15);
    assert_abs_diff_eq!(next.h[[0, 0]], 0.5 * 0.4f64.tanh(), epsilon = 1e-15);
}

#[test]
fn single_step_window_is_one_lstm_step() {
    let mut r = rng(4);
    let p = LstmParams::init(2, 4, &mut r);
    let x = random_matrix(&mut r, 3, 2, -1.0, 1.0);
    let enc = encode(&p, std::slice::from_ref(&x), None).unwrap();
    let step = lstm_step(&p, &x, &LstmState::zeros(3, 4), None).unwrap();
    assert_eq!(enc, step);
}

#[test]
fn identical_stations_get_identical_states() {
    let mut r = rng(5);
    let p = LstmParams::init(2, 4, &mut r);
    let xs: Vec<Array2<f64>> = (0..6)
        .map(|_| {
            let row = random_matrix(&mut r, 1, 2, -1.0, 1.0);
            Array2::from_shape_fn((3, 2), |(_, j)| row[[0, j]])
        })
        .collect();
    let st = encode(&p, &xs, None).unwrap();
    for i in 1..3 {
        assert_eq!(st.h.row(0), st.h.row(i));
        assert_eq!(st.c.row(0), st.c.row(i));
    }
}

#[test]
fn decoder_with_no_steps_reads_encoder_state() {
    let mut r = rng(6);
    let h = hyper(3, 4, false, 0.0);
    let params = ModelParams::init(&h, &mut r);
    let xs: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(&mut r, 3, 2, -1.0, 1.0)).collect();
    let enc = encode(&params.encoder, &xs, None).unwrap();
    let out = decode(&params.decoder, &params.readout, &enc, &[], None).unwrap();
    assert_eq!(out, params.readout.forward(&enc.h));
}

#[test]
fn encoder_reuses_one_mask_set_for_every_step() {
    let mut r = rng(7);
    let h = hyper(3, 4, false, 0.5);
    let params = ModelParams::init(&h, &mut r);
    let xs: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(&mut r, 3, 2, -1.0, 1.0)).collect();
    let masks = Masks::sample(&h, 3, 0.5, &mut r);
    let enc_masks = masks.encoder.as_ref().unwrap();
    let mut seen = Vec::new();
    encode_observed(&params.encoder, &xs, Some(enc_masks), |t, m| {
        seen.push((t, m.map(|m| m as *const _)));
    })
    .unwrap();
    assert_eq!(seen.len(), 4);
    assert!(seen.iter().all(|(_, p)| *p == Some(enc_masks as *const _)));
}

#[test]
fn mse_examples() {
    assert_eq!(mse_loss(&array![[1.0, 2.0]], &array![[3.0, 2.0]]).unwrap(), 2.0);
    assert_eq!(mse_loss(&array![[1.0]], &array![[1.0]]).unwrap(), 0.0);
    assert!(mse_loss(&array![[1.0, 2.0]], &array![[1.0]]).is_err());
}

fn permute_rows(a: &Array2<f64>, stations: usize, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.dim(), |(row, j)| {
        let (w, s) = (row / stations, row % stations);
        a[[w * stations + perm[s], j]]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn station_permutation_is_equivariant_without_graphs(seed in 0u64..1000, shift in 1usize..4) {
        let mut r = rng(seed);
        let h = hyper(4, 5, false, 0.0);
        let params = ModelParams::init(&h, &mut r);
        let batch = random_batch(&h, 2, &mut r);
        let perm: Vec<usize> = (0..4).map(|s| (s + shift) % 4).collect();
        let mut permuted = batch.clone();
        permuted.inputs = batch.inputs.iter().map(|x| permute_rows(x, 4, &perm)).collect();
        permuted.context = permute_rows(&batch.context, 4, &perm);
        for objective in [true, false] {
            let (a, b) = if objective {
                (
                    predict_sequence(&h, &params, &[], &batch, &Masks::none()).unwrap(),
                    predict_sequence(&h, &params, &[], &permuted, &Masks::none()).unwrap(),
                )
            } else {
                (
                    predict_head(&h, &params, &[], &batch, &Masks::none()).unwrap(),
                    predict_head(&h, &params, &[], &permuted, &Masks::none()).unwrap(),
                )
            };
            let expect = permute_rows(&a, 4, &perm);
            for (x, y) in expect.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn check_gradients(graphs: bool, dropout: f64, objective: Objective, seed: u64) {
    let h = hyper(4, 8, graphs, dropout);
    let mut r = rng(seed);
    let params = random_params(&h, &mut r);
    let g = random_graphs(&h, &mut r);
    let batch = random_batch(&h, 2, &mut r);
    let masks = if dropout > 0.0 {
        Masks::sample(&h, batch.rows(), dropout, &mut r)
    } else {
        Masks::none()
    };
    for c in finite_difference_check(&h, &params, &g, &batch, objective, &masks) {
        assert!(
            c.relative_error < 1e-4,
            "{:?} {}: relative error {:.3e} (numeric norm {:.3e})",
            objective,
            c.tensor,
            c.relative_error,
            c.numeric_norm
        );
    }
}

#[test]
fn gradients_match_finite_differences_sequence() {
    check_gradients(true, 0.0, Objective::Sequence, 11);
}

#[test]
fn gradients_match_finite_differences_head() {
    check_gradients(true, 0.0, Objective::Head { through_encoder: true }, 12);
}

#[test]
fn gradients_match_finite_differences_with_masks() {
    check_gradients(true, 0.3, Objective::Sequence, 13);
    check_gradients(true, 0.3, Objective::Head { through_encoder: true }, 14);
}

#[test]
fn gradients_match_finite_differences_without_graphs() {
    check_gradients(false, 0.0, Objective::Sequence, 15);
}

#[test]
fn unused_tensors_get_exactly_zero_gradient() {
    let h = hyper(4, 6, true, 0.0);
    let mut r = rng(21);
    let params = random_params(&h, &mut r);
    let g = random_graphs(&h, &mut r);
    let batch = random_batch(&h, 2, &mut r);
    let (_, seq) = loss_and_grad(&h, &params, &g, &batch, Objective::Sequence, &Masks::none()).unwrap();
    for (name, t) in seq.tensors() {
        if name.starts_with("head.") {
            assert!(t.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    let (_, head) = loss_and_grad(&h, &params, &g, &batch, Objective::Head { through_encoder: false }, &Masks::none()).unwrap();
    for (name, t) in head.tensors() {
        if !name.starts_with("head.") {
            assert!(t.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn doubling_the_residual_doubles_gradients() {
    // With the readout weight at zero the prediction is the readout bias, so
    // doubling every residual doubles d(loss)/d(bias).
    let h = hyper(3, 4, false, 0.0);
    let mut r = rng(22);
    let mut params = ModelParams::init(&h, &mut r);
    params.readout.weight.fill(0.0);
    params.readout.bias.fill(0.0);
    let mut batch = random_batch(&h, 2, &mut r);
    let grad = |b: &stationflow::network::WindowBatch| {
        loss_and_grad(&h, &params, &[], b, Objective::Sequence, &Masks::none()).unwrap()
    };
    batch.target.fill(1.0);
    let (l1, g1) = grad(&batch);
    batch.target.fill(2.0);
    let (l2, g2) = grad(&batch);
    assert_abs_diff_eq!(l2, 4.0 * l1, epsilon = 1e-12);
    for (a, b) in g1.readout.bias.iter().zip(g2.readout.bias.iter()) {
        assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let h = hyper(3, 4, true, 0.2);
    let mut r = rng(30);
    let params = random_params(&h, &mut r);
    let graphs = random_graphs(&h, &mut r);
    let ckpt = Checkpoint {
        hyper: h.clone(),
        params,
        graphs,
        standardizer: Standardizer {
            flow_mean: random_matrix(&mut r, 3, 2, 0.0, 5.0),
            flow_std: random_matrix(&mut r, 3, 2, 0.5, 2.0),
            context_mean: random_matrix(&mut r, 1, 3, -1.0, 1.0),
            context_std: random_matrix(&mut r, 1, 3, 0.5, 2.0),
        },
        noise_sigma: random_matrix(&mut r, 3, 2, 0.1, 1.0),
        fingerprint: Fingerprint::of("x"),
    };
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::read(&bytes[..]).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params, ckpt.params);
    assert_eq!(back.graphs, ckpt.graphs);
    let batch = random_batch(&h, 2, &mut r);
    assert_eq!(back.predict(&batch).unwrap(), ckpt.predict(&batch).unwrap());
    let truncated = &bytes[..bytes.len() / 2];
    assert!(Checkpoint::read(truncated).is_err());
}
