//! Training-loop contracts on a small synthetic pair.

#[path = "common/oracles.rs"]
mod oracles;

use mtreg::regnet::ModelParams;
use mtreg::synth::{gen_pair, FieldSpec, PhantomSpec};
use mtreg::trainer::{mc_seed, train, train_step, Mode, StepRecord, TrainConfig, TrainState};
use mtreg::uncertainty::mc_sample;
use mtreg::{Error, Volume};
use oracles::{uncertainty_oracle, weights_oracle};

fn small_pair() -> (Volume, Volume) {
    let p = PhantomSpec {
        size: [8; 3],
        num_blobs: 1,
        seed: 4,
        ..Default::default()
    };
    let pair = gen_pair(
        &p,
        &FieldSpec {
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    (pair.fixed, pair.moving)
}

fn cfg(steps: usize, mode: Mode) -> TrainConfig {
    TrainConfig {
        steps,
        mode,
        lr: 1e-3,
        seed: 3,
        ..Default::default()
    }
}

fn flat(p: &ModelParams) -> Vec<f32> {
    p.tensors().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn no_dropout_collapses_weights() {
    let c = TrainConfig {
        dropout_rate: 0.0,
        ..cfg(6, Mode::AsAtc)
    };
    let out = train(&c, &[small_pair()]).unwrap();
    for r in &out.log {
        assert_eq!((r.lambda_phi, r.lambda_c), (0.0, 0.0), "step {}", r.step);
        assert!(
            (r.loss_total - r.loss_sim).abs() <= 1e-12,
            "step {}",
            r.step
        );
    }
}

#[test]
fn teacher_is_ema_of_student_after_one_step() {
    let c = cfg(1, Mode::AsAtc);
    let (fixed, moving) = small_pair();
    let mut state = TrainState::new(&c).unwrap();
    let teacher0 = flat(&state.teacher);
    train_step(&mut state, &fixed, &moving, &c).unwrap();
    let student1 = flat(&state.student);
    assert_ne!(student1, teacher0);
    for ((t, t0), s1) in flat(&state.teacher).iter().zip(&teacher0).zip(&student1) {
        let want = 0.99 * *t0 as f64 + 0.01 * *s1 as f64;
        assert!(
            (*t as f64 - want).abs() <= 1e-7 * want.abs().max(1e-3),
            "{t} vs {want}"
        );
    }
}

#[test]
fn frozen_teacher_is_never_modified() {
    let c = TrainConfig {
        alpha_ema: 1.0,
        ..cfg(4, Mode::AsAtc)
    };
    let (fixed, moving) = small_pair();
    let mut state = TrainState::new(&c).unwrap();
    let teacher0 = state.teacher.clone();
    for _ in 0..4 {
        train_step(&mut state, &fixed, &moving, &c).unwrap();
    }
    assert_eq!(state.teacher, teacher0);
    assert_ne!(state.student, teacher0);
}

#[test]
fn logged_weights_match_oracle() {
    let c = cfg(3, Mode::AsAtc);
    let (fixed, moving) = small_pair();
    let mut state = TrainState::new(&c).unwrap();
    for s in 0..3 {
        let samples = mc_sample(
            &c.effective_arch(),
            &state.teacher,
            &fixed,
            &moving,
            c.n_mc,
            mc_seed(&c, s),
        )
        .unwrap();
        let (u_phi, u_app) = uncertainty_oracle(&samples, c.eps_phi, c.eps_app);
        let (lp, lc) = weights_oracle(&u_phi, &u_app, c.k1, c.k2, c.tau1, c.tau2);
        let r = train_step(&mut state, &fixed, &moving, &c).unwrap();
        assert!(
            (r.lambda_phi - lp).abs() <= 1e-10,
            "step {s}: {} vs {lp}",
            r.lambda_phi
        );
        assert!(
            (r.lambda_c - lc).abs() <= 1e-10,
            "step {s}: {} vs {lc}",
            r.lambda_c
        );
    }
}

fn lambdas(log: &[StepRecord]) -> Vec<(f64, f64)> {
    log.iter().map(|r| (r.lambda_phi, r.lambda_c)).collect()
}

#[test]
fn modes_log_their_weights() {
    let pairs = [small_pair()];
    let st = train(&cfg(3, Mode::STc), &pairs).unwrap();
    assert!(lambdas(&st.log).iter().all(|&l| l == (3.0, 0.5)));
    let as_tc = train(&cfg(3, Mode::AsTc), &pairs).unwrap();
    assert!(as_tc
        .log
        .iter()
        .all(|r| r.lambda_c == 0.5 && r.lambda_phi <= 5.0));
    let as_only = train(&cfg(3, Mode::As), &pairs).unwrap();
    assert!(as_only.log.iter().all(|r| r.lambda_c == 0.0));
    let fixed = train(&cfg(3, Mode::Fixed(3.0)), &pairs).unwrap();
    for r in &fixed.log {
        assert_eq!((r.lambda_phi, r.lambda_c), (3.0, 0.0));
        assert_eq!((r.frac_over_tau1, r.frac_over_tau2), (0.0, 0.0));
    }
    let full = train(&cfg(3, Mode::AsAtc), &pairs).unwrap();
    for r in full.log.iter().chain(&as_tc.log).chain(&as_only.log) {
        assert!((0.0..=5.0).contains(&r.lambda_phi) && (0.0..=1.0).contains(&r.lambda_c));
        assert!(r.loss_sim >= 0.0 && r.loss_smooth >= 0.0 && r.loss_cons >= 0.0);
    }
}

#[test]
fn training_is_reproducible() {
    let c = cfg(4, Mode::AsAtc);
    let pairs = [small_pair()];
    let a = train(&c, &pairs).unwrap();
    let b = train(&c, &pairs).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let other = train(&TrainConfig { seed: 4, ..c }, &pairs).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn zero_steps_is_rejected() {
    let err = train(&cfg(0, Mode::AsAtc), &[small_pair()]).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    assert!(matches!(
        train(&cfg(1, Mode::AsAtc), &[]),
        Err(Error::Validation(_))
    ));
}

#[test]
fn divergence_aborts_with_step_and_component() {
    let c = TrainConfig {
        lr: 1e30,
        ..cfg(10, Mode::Fixed(1.0))
    };
    match train(&c, &[small_pair()]) {
        Err(Error::NonFinite { step, component }) => {
            assert!(step >= 1, "the first step starts from finite parameters");
            assert!(
                [
                    "similarity loss",
                    "smoothness loss",
                    "consistency loss",
                    "total loss",
                    "gradient",
                    "teacher field",
                    "student field"
                ]
                .contains(&component.as_str()),
                "{component}"
            );
        }
        other => panic!(
            "expected a non-finite abort, got {:?}",
            other.map(|o| o.log.len())
        ),
    }
}
