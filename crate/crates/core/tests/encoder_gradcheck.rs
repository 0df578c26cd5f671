//! Finite-difference validation of a full object-encoder layer: every
//! parameter and every input stream, against a weighted-sum readout.

use romtrack_core::encoder::{encoder_layer_forward, AttnVars, LayerVars, StreamVars};
use romtrack_core::tape::{Tape, Var};
use romtrack_core::tensor::Tensor;

const FD_H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn pseudo(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut h = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(11);
    (0..n)
        .map(|_| {
            h ^= h >> 33;
            h = h.wrapping_mul(0xFF51AFD7ED558CCD);
            h ^= h >> 33;
            ((h >> 11) as f64 / 2f64.powi(53) - 0.5) * 2.0 * scale
        })
        .collect()
}

struct LayerInputs {
    tensors: Vec<Tensor>,
}

/// Input order: [it, hs, vt, wq, bq, wk, bk, wv, bv, wo, bo, ln1g, ln1b,
/// ln2g, ln2b, w1, b1, w2, b2]
fn make_inputs(d: usize, n_t: usize, n_sr: usize) -> LayerInputs {
    let mut tensors = Vec::new();
    tensors.push(Tensor::new(vec![1, n_t, d], pseudo(1, n_t * d, 0.8)).unwrap());
    tensors.push(Tensor::new(vec![1, n_t + n_sr, d], pseudo(2, (n_t + n_sr) * d, 0.8)).unwrap());
    tensors.push(Tensor::new(vec![1, n_t, d], pseudo(3, n_t * d, 0.8)).unwrap());
    for seed in 4..8 {
        tensors.push(Tensor::new(vec![d, d], pseudo(seed, d * d, 0.4)).unwrap());
        tensors.push(Tensor::new(vec![d], pseudo(seed + 40, d, 0.1)).unwrap());
    }
    tensors.push(Tensor::new(vec![d], pseudo(50, d, 0.2).iter().map(|x| 1.0 + x).collect()).unwrap());
    tensors.push(Tensor::new(vec![d], pseudo(51, d, 0.1)).unwrap());
    tensors.push(Tensor::new(vec![d], pseudo(52, d, 0.2).iter().map(|x| 1.0 + x).collect()).unwrap());
    tensors.push(Tensor::new(vec![d], pseudo(53, d, 0.1)).unwrap());
    tensors.push(Tensor::new(vec![d, 4 * d], pseudo(54, d * 4 * d, 0.3)).unwrap());
    tensors.push(Tensor::new(vec![4 * d], pseudo(55, 4 * d, 0.1)).unwrap());
    tensors.push(Tensor::new(vec![4 * d, d], pseudo(56, 4 * d * d, 0.3)).unwrap());
    tensors.push(Tensor::new(vec![d], pseudo(57, d, 0.1)).unwrap());
    LayerInputs { tensors }
}

fn readout(tape: &mut Tape, vars: &[Var], n_t: usize, heads: usize) -> Var {
    let lp = LayerVars {
        attn: AttnVars {
            wq: vars[3],
            bq: vars[4],
            wk: vars[5],
            bk: vars[6],
            wv: vars[7],
            bv: vars[8],
            wo: vars[9],
            bo: vars[10],
        },
        ln1_g: vars[11],
        ln1_b: vars[12],
        ln2_g: vars[13],
        ln2_b: vars[14],
        ffn_w1: vars[15],
        ffn_b1: vars[16],
        ffn_w2: vars[17],
        ffn_b2: vars[18],
    };
    let (out, _) = encoder_layer_forward(
        tape,
        &StreamVars {
            it: Some(vars[0]),
            hs: vars[1],
        },
        Some(vars[2]),
        n_t,
        &lp,
        heads,
        1e-6,
    )
    .unwrap();
    // weighted readout over both streams so every output influences the loss
    let it_sq = tape.mul(out.it.unwrap(), out.it.unwrap()).unwrap();
    let hs_sq = tape.mul(out.hs, out.hs).unwrap();
    let a = tape.sum_all(it_sq);
    let b = tape.sum_all(hs_sq);
    tape.add(a, b).unwrap()
}

#[test]
fn rom_layer_full_finite_difference() {
    let (d, n_t, n_sr, heads) = (8, 3, 5, 2);
    let inputs = make_inputs(d, n_t, n_sr);

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = readout(&mut tape, &vars, n_t, heads);
        tape.value(loss).scalar_value().unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = readout(&mut tape, &vars, n_t, heads);
    tape.backward(loss).unwrap();

    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (pi, t) in inputs.tensors.iter().enumerate() {
        let analytic = tape.grad(vars[pi]).expect("grad").clone();
        // subsample large tensors to keep the test quick
        let stride = (t.numel() / 24).max(1);
        for ei in (0..t.numel()).step_by(stride) {
            let mut plus = inputs.tensors.clone();
            plus[pi].data_mut()[ei] += FD_H;
            let mut minus = inputs.tensors.clone();
            minus[pi].data_mut()[ei] -= FD_H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let a = analytic.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(
                rel < REL_TOL,
                "input {pi} elem {ei}: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
            );
            checked += 1;
        }
    }
    assert!(checked > 200, "checked {checked} coordinates (worst rel {worst:.2e})");
}
