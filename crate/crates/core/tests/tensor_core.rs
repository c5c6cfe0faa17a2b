use fprune::tensor::BnMode;
use fprune::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn ce(logits: &Tensor, labels: &[usize]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), true);
    let loss = tape.softmax_cross_entropy(x, labels).unwrap();
    tape.backward(loss).unwrap();
    (tape.value(loss).data()[0], tape.grad(x).unwrap().to_vec())
}

fn logits_and_labels() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1usize..6, 2usize..7).prop_flat_map(|(n, c)| {
        (
            Just(n),
            Just(c),
            prop::collection::vec(-8.0f64..8.0, n * c),
            prop::collection::vec(0..c, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cross_entropy_is_mean_negative_log_likelihood((n, c, data, labels) in logits_and_labels()) {
        let (loss, _) = ce(&tensor(vec![n, c], data.clone()), &labels);
        prop_assert!(loss >= 0.0);
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / z).ln();
        }
        prop_assert!((loss - want / n as f64).abs() < 1e-10, "{} vs {}", loss, want / n as f64);
    }

    #[test]
    fn batch_gradient_is_the_mean_of_sample_gradients((n, c, data, labels) in logits_and_labels()) {
        let (_, batch) = ce(&tensor(vec![n, c], data.clone()), &labels);
        for i in 0..n {
            let (_, single) = ce(&tensor(vec![1, c], data[i * c..(i + 1) * c].to_vec()), &labels[i..=i]);
            for k in 0..c {
                prop_assert!((batch[i * c + k] - single[k] / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_split_is_bit_identical(
        n in 1usize..3,
        widths in prop::collection::vec(1usize..5, 1..4),
        hw in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f64::from_bits((state >> 12) | 0x3ff0_0000_0000_0000) - 1.5
        };
        let parts: Vec<Tensor> = widths
            .iter()
            .map(|&w| Tensor::from_fn(&[n, w, hw, hw], |_| next()))
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let joined = Tensor::concat_channels(&refs).unwrap();
        prop_assert_eq!(joined.shape()[1], widths.iter().sum::<usize>());
        let back = joined.split_channels(&widths).unwrap();
        for (a, b) in parts.iter().zip(&back) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn inference_batch_norm_inverts_algebraically(
        c in 1usize..5,
        data in prop::collection::vec(-5.0f64..5.0, 40),
        gamma in prop::collection::vec(0.1f64..3.0, 4),
        beta in prop::collection::vec(-2.0f64..2.0, 4),
        mean in prop::collection::vec(-1.0f64..1.0, 4),
        var in prop::collection::vec(0.01f64..4.0, 4),
    ) {
        let n = 2;
        let inner = 40 / (n * c);
        let x = tensor(vec![n, c, inner], data[..n * c * inner].to_vec());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(tensor(vec![c], gamma[..c].to_vec()));
        let b = tape.constant(tensor(vec![c], beta[..c].to_vec()));
        let mode = BnMode::Eval { mean: &mean[..c], var: &var[..c] };
        let (y, stats) = tape.batch_norm(xv, g, b, mode).unwrap();
        prop_assert!(stats.is_none());
        let y = tape.value(y).data().to_vec();
        const EPS: f64 = 1e-5;
        for (i, (&yi, &xi)) in y.iter().zip(x.data()).enumerate() {
            let ch = (i / inner) % c;
            let inv = (yi - beta[ch]) / gamma[ch] * (var[ch] + EPS).sqrt() + mean[ch];
            prop_assert!((inv - xi).abs() < 1e-6, "{} vs {}", inv, xi);
        }
    }
}
