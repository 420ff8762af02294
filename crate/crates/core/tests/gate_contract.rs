mod common;

use common::{rng, synth_corpus, Setup};
use glass_core::corpus::Partition;
use glass_core::model::{gate_fuse, ModelParams};
use glass_core::tensor::Tensor;
use rand::Rng;

fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

#[test]
fn fused_output_lies_between_inputs() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let rows = r.random_range(1..6);
        let d = r.random_range(1..9);
        let zs = random_tensor(&mut r, rows, d, 3.0);
        let zr = random_tensor(&mut r, rows, d, 3.0);
        let w = random_tensor(&mut r, 2 * d, d, 2.0);
        let (z, g) = gate_fuse(&zs, &zr, &w).unwrap();
        for i in 0..rows * d {
            let (s, t, o) = (zs.data()[i], zr.data()[i], z.data()[i]);
            assert!(o >= s.min(t) - 1e-12 && o <= s.max(t) + 1e-12);
            assert!((0.0..=1.0).contains(&g.data()[i]));
            assert!((o - ((1.0 - g.data()[i]) * s + g.data()[i] * t)).abs() < 1e-12);
        }
    }
}

#[test]
fn saturated_gates_select_one_input() {
    let mut r = rng(2);
    for _ in 0..50 {
        let (rows, d) = (3, 8);
        let zs = Tensor::from_vec(rows, d, (0..rows * d).map(|_| r.random_range(0.1..1.0)).collect()).unwrap();
        let zr = Tensor::from_vec(rows, d, (0..rows * d).map(|_| r.random_range(0.1..1.0)).collect()).unwrap();
        let open = Tensor::from_vec(2 * d, d, vec![100.0; 2 * d * d]).unwrap();
        let shut = Tensor::from_vec(2 * d, d, vec![-100.0; 2 * d * d]).unwrap();
        let (z_open, _) = gate_fuse(&zs, &zr, &open).unwrap();
        let (z_shut, _) = gate_fuse(&zs, &zr, &shut).unwrap();
        for i in 0..rows * d {
            assert!((z_open.data()[i] - zr.data()[i]).abs() < 1e-9);
            assert!((z_shut.data()[i] - zs.data()[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn gate_weight_gradients_match_central_differences() {
    let s = Setup::new(synth_corpus(12, 80, 60, 3), [4, 4, 4], 1);
    let builder = s.builder(4, true);
    let mut m = ModelParams::new(s.model_config(4, true), 21).unwrap();
    assert_eq!(m.config().d, 8);
    let batch: Vec<_> = s.corpus.examples(Partition::Test).take(3).map(|ex| builder.train_example(ex).unwrap()).collect();
    assert!(batch.iter().any(|ex| !ex.input.retrieved_tokens.is_empty()));
    let (_, grads) = m.batch_gradients(&batch, 0, 0, false).unwrap();
    let mut r = rng(4);
    let h = 1e-5;
    for wg in m.gate_params() {
        let analytic = grads[wg.0].clone().unwrap();
        for _ in 0..12 {
            let k = r.random_range(0..analytic.data().len());
            let orig = m.store().get(wg).data()[k];
            m.store_mut().get_mut(wg).data_mut()[k] = orig + h;
            let up = m.eval_loss(&batch).unwrap();
            m.store_mut().get_mut(wg).data_mut()[k] = orig - h;
            let down = m.eval_loss(&batch).unwrap();
            m.store_mut().get_mut(wg).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-9, "k={k} fd={fd} analytic={an}");
        }
    }
}

#[test]
fn decode_step_gate_is_a_probability() {
    let s = Setup::new(synth_corpus(8, 60, 40, 5), [4, 4, 4], 2);
    let builder = s.builder(4, true);
    let m = ModelParams::new(s.model_config(4, true), 3).unwrap();
    let mut r = rng(6);
    for ex in s.corpus.examples(Partition::Test) {
        let user = builder.user_context(ex).unwrap();
        let enc = m.encode_user(&user.input).unwrap();
        let c0 = r.random_range(0..4);
        let (_, tokens) = user.retrieve(c0).unwrap();
        let prefix = vec![m.vocab().bos(), m.vocab().token(0, c0)];
        let step = m.decode_step(&enc, &prefix, &tokens).unwrap();
        assert!((0.0..=1.0).contains(&step.mean_gate));
    }
}
