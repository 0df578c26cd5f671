//! Property tests over the numeric invariants.

use proptest::prelude::*;
use romtrack_core::encoder::{mixed_cross_attention, MixedQkv};
use romtrack_core::image::Image;
use romtrack_core::layout::TokenLayout;
use romtrack_core::patch::{embed, patchify, unpatchify, PosEmbed};
use romtrack_core::tape::Tape;
use romtrack_core::tensor::Tensor;

fn finite_vals(n: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-bound..bound, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in finite_vals(6 * 7, 50.0)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![6, 7], vals).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let out = tape.value(s);
        for r in 0..6 {
            let sum: f64 = out.data()[r * 7..(r + 1) * 7].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn softmax_row_shift_invariance(vals in finite_vals(5, 40.0), c in -10.0f64..10.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 5], vals.clone()).unwrap());
        let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
        let y = tape.constant(Tensor::new(vec![1, 5], shifted).unwrap());
        let sx = tape.softmax_rows(x).unwrap();
        let sy = tape.softmax_rows(y).unwrap();
        prop_assert!(tape.value(sx).max_abs_diff(tape.value(sy)) < 1e-12);
    }

    #[test]
    fn patchify_roundtrip(gh in 1usize..4, gw in 1usize..4, p in 1usize..5, seed in 0u64..1000) {
        let (h, w) = (gh * p, gw * p);
        let mut img = Image::new(h, w);
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        for v in img.data_mut() {
            state ^= state >> 33;
            state = state.wrapping_mul(0xFF51AFD7ED558CCD);
            *v = ((state >> 11) as f64 / 2f64.powi(53)).clamp(0.0, 1.0);
        }
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.tokens(), gh * gw);
        prop_assert_eq!(unpatchify(&patches), img);
    }

    #[test]
    fn embed_is_linear_in_patches(seed in 0u64..500) {
        // superposition: embed(p1 + p2, proj, 0) = embed(p1) + embed(p2)
        let p = 2usize;
        let d = 3usize;
        let mk_img = |s: u64| {
            let mut img = Image::new(4, 4);
            let mut state = s.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(7);
            for v in img.data_mut() {
                state ^= state >> 29;
                state = state.wrapping_mul(0xBF58476D1CE4E5B9);
                *v = ((state >> 12) as f64 / 2f64.powi(52)) * 0.5;
            }
            img
        };
        let i1 = mk_img(seed);
        let i2 = mk_img(seed + 1);
        let mut sum_img = i1.clone();
        for (a, b) in sum_img.data_mut().iter_mut().zip(i2.data()) {
            *a += b;
        }
        let pa = patchify(&i1, p).unwrap();
        let pb = patchify(&i2, p).unwrap();
        let ps = patchify(&sum_img, p).unwrap();
        let cols = 3 * p * p;
        let proj = Tensor::new(
            vec![cols, d],
            (0..cols * d).map(|i| ((i * 31 % 15) as f64 - 7.0) * 0.07).collect(),
        )
        .unwrap();
        let zero_pos = PosEmbed {
            grid_h: pa.grid_h,
            grid_w: pa.grid_w,
            table: Tensor::zeros(vec![pa.tokens(), d]),
        };
        let ea = embed(&pa, &proj, &zero_pos).unwrap();
        let eb = embed(&pb, &proj, &zero_pos).unwrap();
        let es = embed(&ps, &proj, &zero_pos).unwrap();
        for i in 0..es.numel() {
            prop_assert!((es.data()[i] - ea.data()[i] - eb.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn kv_joint_permutation_invariance(seed in 0u64..300) {
        let (n_q, n_kv, d) = (2usize, 5usize, 4usize);
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(3);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    state ^= state >> 33;
                    state = state.wrapping_mul(0xFF51AFD7ED558CCD);
                    ((state >> 11) as f64 / 2f64.powi(53) - 0.5) * 2.0
                })
                .collect()
        };
        let q = Tensor::new(vec![1, n_q, d], draw(n_q * d)).unwrap();
        let k = Tensor::new(vec![1, n_kv, d], draw(n_kv * d)).unwrap();
        let v = Tensor::new(vec![1, n_kv, d], draw(n_kv * d)).unwrap();
        // rotate rows by a seed-dependent amount
        let shift = (seed as usize) % n_kv;
        let rot = |t: &Tensor| {
            let mut out = Tensor::zeros(vec![1, n_kv, d]);
            for i in 0..n_kv {
                let j = (i + shift) % n_kv;
                out.data_mut()[j * d..(j + 1) * d].copy_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            out
        };
        let layout = TokenLayout { n_vt: 0, n_it: 0, n_ht: 0, n_sr: n_kv };
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let base = mixed_cross_attention(&mut tape, &MixedQkv { q_z: qv, k_z: kv, v_z: vv, layout }, 2).unwrap();
        let (kp, vp) = (tape.constant(rot(&k)), tape.constant(rot(&v)));
        let perm = mixed_cross_attention(&mut tape, &MixedQkv { q_z: qv, k_z: kp, v_z: vp, layout }, 2).unwrap();
        prop_assert!(
            tape.value(base.context).max_abs_diff(tape.value(perm.context)) < 1e-12
        );
    }

    #[test]
    fn focal_loss_nonnegative(p in 0.0f64..1.0, t in 0.0f64..1.0) {
        let c = Tensor::new(vec![1], vec![p]).unwrap();
        let chat = Tensor::new(vec![1], vec![t]).unwrap();
        let w = romtrack_core::head::LossWeights::default();
        let l = romtrack_core::head::focal_loss(&c, &chat, &w).unwrap();
        prop_assert!(l >= -1e-12);
    }

    #[test]
    fn giou_bounds(cx1 in 0.1f64..0.9, cy1 in 0.1f64..0.9, w1 in 0.05f64..0.5,
                   cx2 in 0.1f64..0.9, cy2 in 0.1f64..0.9, w2 in 0.05f64..0.5) {
        let a = romtrack_core::geom::BBox { cx: cx1, cy: cy1, w: w1, h: w1 };
        let b = romtrack_core::geom::BBox { cx: cx2, cy: cy2, w: w2, h: w2 };
        let l = romtrack_core::head::giou_loss(&a, &b).unwrap();
        prop_assert!((0.0..2.0).contains(&l), "giou loss {l} out of [0,2)");
        // GIoU <= IoU always
        let (ax1, ay1, ax2, ay2) = a.corners();
        let (bx1, by1, bx2, by2) = b.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = w1 * w1 + w2 * w2 - inter;
        let iou = inter / union;
        let giou = 1.0 - l;
        prop_assert!(giou <= iou + 1e-12);
    }
}
