//! Generator-level properties of synthetic pairs.

use mtreg::eval::evaluate_registration;
use mtreg::synth::{gen_pair, gen_smooth_field, FieldSpec, PhantomSpec};
use mtreg::warp::{jacobian_det, jacobian_stats};
use mtreg::DisplacementField;

fn seeded(seed: u64) -> (PhantomSpec, FieldSpec) {
    (
        PhantomSpec {
            seed,
            ..Default::default()
        },
        FieldSpec {
            seed,
            ..Default::default()
        },
    )
}

#[test]
fn ground_truth_fields_never_fold() {
    for seed in 0..20 {
        let field = gen_smooth_field(
            &FieldSpec {
                seed,
                ..Default::default()
            },
            [24; 3],
        )
        .unwrap();
        let stats = jacobian_stats(&jacobian_det(&field).unwrap()).unwrap();
        assert_eq!(stats.folding_fraction, 0.0, "seed {seed}");
    }
    for amplitude in [3.0, 6.0] {
        let field = gen_smooth_field(
            &FieldSpec {
                amplitude,
                seed: 1,
                ..Default::default()
            },
            [16; 3],
        )
        .unwrap();
        let stats = jacobian_stats(&jacobian_det(&field).unwrap()).unwrap();
        assert_eq!(stats.folding_fraction, 0.0, "amplitude {amplitude}");
    }
}

#[test]
fn seed_seven_pair_is_stable() {
    let (p, f) = seeded(7);
    let pair = gen_pair(&p, &f).unwrap();
    assert_eq!(pair, gen_pair(&p, &f).unwrap());
    assert!(
        (pair.gt_field.max_norm() - 4.716104).abs() <= 1e-5,
        "{}",
        pair.gt_field.max_norm()
    );
    assert_eq!(pair.moving_seg.labels(), vec![1, 2, 3]);
    let (lo, hi) = pair.moving.min_max();
    assert!(lo == 0.0 && (hi - 1.0).abs() <= 1e-6, "{lo} {hi}");
}

#[test]
fn ground_truth_recovers_fixed_segmentation() {
    for seed in [3, 7, 11] {
        let (p, f) = seeded(seed);
        let pair = gen_pair(&p, &f).unwrap();
        let labels = [1, 2, 3];
        let zero = DisplacementField::zeros(*pair.moving.grid());
        let before =
            evaluate_registration(&zero, &pair.moving_seg, &pair.fixed_seg, &labels).unwrap();
        let gt = evaluate_registration(&pair.gt_field, &pair.moving_seg, &pair.fixed_seg, &labels)
            .unwrap();
        assert!(
            gt.dice.values().all(|&d| d == 1.0),
            "seed {seed}: {:?}",
            gt.dice
        );
        assert!(
            before.mean_dice() < 0.9,
            "seed {seed}: the pair is already aligned"
        );
        assert_eq!(gt.folding_pct, 0.0);
    }
}
