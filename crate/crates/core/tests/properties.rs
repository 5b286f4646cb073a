mod common;

use common::*;
use mcakd::csi_data::{CsiTensor, ChannelGenConfig, generate_channel};
use mcakd::distill::{attention_side_loss, cos_sim, row_cosine_loss, DistillLosses};
use mcakd::model::{Batch, ModelConfig, ModelState, Role};
use mcakd::tokenize_mask::{make_mask, patchify, unpatchify, MaskSpec, PatchSpec, TokenGrid};
use num_complex::Complex32;
use proptest::prelude::*;

fn vec_pair(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cosine_components_in_range((x, y) in vec_pair(16)) {
        prop_assume!(nonzero(&x) && nonzero(&y));
        let c = cos_sim(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let (l, _) = row_cosine_loss(&to_mat(&[x.clone()]), &to_mat(&[y.clone()])).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
    }

    #[test]
    fn attention_loss_bounds_and_scale_invariance(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let t = flatten_stack(&random_stack(&mut r, 2, 2, 4));
        let s = flatten_stack(&random_stack(&mut r, 2, 2, 4));
        let tr: Vec<&[f64]> = t.iter().map(|v| &v[..]).collect();
        let sr: Vec<&[f64]> = s.iter().map(|v| &v[..]).collect();
        let (base, _) = attention_side_loss(&tr, &sr).unwrap();
        prop_assert!((0.0..=2.0).contains(&base));
        let scaled: Vec<Vec<f64>> = s.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let sc: Vec<&[f64]> = scaled.iter().map(|v| &v[..]).collect();
        let (other, _) = attention_side_loss(&tr, &sc).unwrap();
        prop_assert!((base - other).abs() < 1e-6);
    }

    #[test]
    fn exact_sum(a in 0.0f64..2.0, e in 0.0f64..2.0, h in 0.0f64..4.0, m in 0.0f64..10.0) {
        let l = DistillLosses::from_components(a, e, h, m);
        prop_assert_eq!(l.l_mcakd, a + e + h);
        prop_assert_eq!(l.l_mse, m);
    }

    #[test]
    fn forward_attention_rows_sum_to_one(seed in any::<u64>(), ratio in 0.2f64..0.8) {
        let cfg = ModelConfig {
            depth_enc: 1,
            depth_dec: 1,
            heads: 2,
            dim: 8,
            mlp_ratio: 2.0,
            patch: PatchSpec::new(1, 2, 2),
            max_tokens: 64,
        };
        let state = ModelState::<f32>::init(&cfg, Role::Student, seed % 7).unwrap();
        let gen = ChannelGenConfig { t: 4, k: 4, n_v: 2, n_h_ant: 1, ..Default::default() };
        let h = generate_channel(&gen, seed).unwrap();
        let grid = cfg.grid(h.dims()).unwrap();
        let mask = make_mask(MaskSpec::Random { ratio }, &grid, seed).unwrap();
        prop_assume!(!mask.visible_idx.is_empty() && !mask.masked_idx.is_empty());
        let batch = Batch::new(&[&h], vec![mask], &grid).unwrap();
        let taps = state.forward_batch(&batch).unwrap().taps;
        for layer in taps.attn_enc.iter().chain(&taps.attn_dec) {
            let seq = (layer.len() as f64 / taps.heads as f64).sqrt() as usize;
            for row in layer.chunks(seq) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn patchify_round_trip(pt in 1usize..3, pk in 1usize..3, pn in 1usize..3, mt in 1usize..3, mk in 1usize..3, mn in 1usize..3, seed in any::<u64>()) {
        let spec = PatchSpec::new(pt, pk, pn);
        let (t, k, n) = (pt * mt, pk * mk, pn * mn);
        let mut r = rng(seed);
        use rand::Rng;
        let h = CsiTensor::from_fn(t, k, n, |_, _, _| Complex32::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        let tokens = patchify::<f32>(&h, spec).unwrap();
        let back = unpatchify(&tokens, spec, (t, k, n)).unwrap();
        prop_assert_eq!(back, h);
    }

    #[test]
    fn masks_partition_tokens(seed in any::<u64>(), ratio in 0.05f64..0.95, boundary in 1usize..4) {
        let grid = TokenGrid::new(PatchSpec::new(1, 1, 2), (4, 4, 2)).unwrap();
        for spec in [MaskSpec::Random { ratio }, MaskSpec::Time { boundary }, MaskSpec::Frequency { boundary }] {
            let m = make_mask(spec, &grid, seed).unwrap();
            let mut all: Vec<usize> = m.visible_idx.iter().chain(&m.masked_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..grid.num_tokens()).collect::<Vec<_>>());
            prop_assert_eq!(make_mask(spec, &grid, seed).unwrap(), m);
        }
    }
}
