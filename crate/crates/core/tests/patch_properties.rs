use diffmavil::patch::{patchify, unpatchify, MaskingPlan, PatchSpec};
use diffmavil::tensor::Tensor;
use proptest::prelude::*;

fn half_even(x: f64) -> usize {
    let f = x.floor();
    let frac = x - f;
    let n = if frac > 0.5 || (frac == 0.5 && f % 2.0 != 0.0) {
        f + 1.0
    } else {
        f
    };
    n as usize
}

proptest! {
    #[test]
    fn audio_round_trip_is_bit_exact(
        gt in 1usize..6, gf in 1usize..5, pt in 1usize..5, pf in 1usize..5,
        seed in any::<u64>(),
    ) {
        let shape = [gt * pt, gf * pf];
        let n = shape[0] * shape[1];
        let mut s = seed;
        let data: Vec<f64> = (0..n).map(|_| { s = diffmavil::rng::mix(s); (s as f64 / u64::MAX as f64) * 2.0 - 1.0 }).collect();
        let x = Tensor::new(shape.to_vec(), data).unwrap();
        let grid = patchify(&x, PatchSpec::Audio { time: pt, freq: pf }).unwrap();
        prop_assert_eq!(grid.num_patches(), gt * gf);
        let back = unpatchify(&grid.patches, &grid).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn video_round_trip_is_bit_exact(
        gt in 1usize..4, gh in 1usize..3, gw in 1usize..3, tp in 1usize..3, sp in 1usize..4, ch in 1usize..4,
        seed in any::<u64>(),
    ) {
        let shape = [gt * tp, gh * sp, gw * sp, ch];
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data: Vec<f64> = (0..n).map(|_| { s = diffmavil::rng::mix(s); s as f64 }).collect();
        let x = Tensor::new(shape.to_vec(), data).unwrap();
        let spec = PatchSpec::Video { temporal: tp, height: sp, width: sp, channels: ch };
        let grid = patchify(&x, spec).unwrap();
        prop_assert_eq!(grid.num_patches(), gt * gh * gw);
        prop_assert_eq!(grid.patch_dim, tp * sp * sp * ch);
        prop_assert_eq!(unpatchify(&grid.patches, &grid).unwrap(), x);
    }

    #[test]
    fn plans_partition_and_restore(total in 2usize..600, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let expected_visible = half_even((1.0 - ratio) * total as f64);
        match MaskingPlan::random(total, ratio, seed) {
            Ok(plan) => {
                prop_assert_eq!(plan.num_visible(), expected_visible);
                let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
                let tags: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
                let restored: Vec<usize> = plan.restore.iter().map(|&r| tags[r]).collect();
                prop_assert_eq!(restored, (0..total).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(expected_visible == 0 || expected_visible == total),
        }
    }

    #[test]
    fn plans_are_seed_deterministic(total in 2usize..300, seed in any::<u64>()) {
        let a = MaskingPlan::random(total.max(4), 0.5, seed).unwrap();
        let b = MaskingPlan::random(total.max(4), 0.5, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn different_seeds_give_different_plans() {
    let mut differing = 0;
    for trial in 0..100u64 {
        let a = MaskingPlan::random(64, 0.75, trial * 2).unwrap();
        let b = MaskingPlan::random(64, 0.75, trial * 2 + 1).unwrap();
        if a.visible != b.visible {
            differing += 1;
        }
    }
    assert!(differing >= 1);
}

#[test]
fn gather_then_restore_is_identity_on_tagged_rows() {
    let x = Tensor::new(vec![8, 8], (0..64).map(f64::from).collect()).unwrap();
    let grid = patchify(&x, PatchSpec::Audio { time: 2, freq: 2 }).unwrap();
    for seed in 0..50 {
        let plan = MaskingPlan::random(grid.num_patches(), 0.7, seed).unwrap();
        let vis = plan.gather_visible(&grid).unwrap();
        let masked = plan.gather_masked(&grid).unwrap();
        assert_eq!(plan.restore_order(&vis, &masked).unwrap(), grid.patches);
    }
}
