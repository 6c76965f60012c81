mod common;

use common::*;

const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[test]
fn every_layer_kind_matches_finite_differences() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for (name, g, x) in layer_zoo(&mut r) {
            let e = check_graph(&g, &x, &mut r);
            assert!(e < TOL, "{name} seed {seed}: rel err {e:e}");
        }
    }
}

#[test]
fn frozen_stats_backward_matches_pinned_network() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for (name, g) in projectors(&mut r) {
            let x = randn(&[3, 4, 3, 3], &mut r);
            let e = check_graph_frozen(&g, &x, &mut r);
            assert!(e < TOL, "{name} seed {seed}: rel err {e:e}");
        }
    }
}

#[test]
fn attention_block_matches_finite_differences() {
    for seed in SEEDS {
        for residual in [false, true] {
            let e = check_rfam(residual, &mut rng(seed));
            assert!(e < TOL, "residual {residual} seed {seed}: rel err {e:e}");
        }
    }
}

#[test]
fn projectors_match_finite_differences() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for (name, g) in projectors(&mut r) {
            let x = randn(&[3, 4, 3, 3], &mut r);
            let e = check_graph(&g, &x, &mut r);
            assert!(e < TOL, "{name} seed {seed}: rel err {e:e}");
        }
    }
}

#[test]
fn kd_loss_and_cross_entropy_match_finite_differences() {
    for seed in SEEDS {
        let e = check_kd(&mut rng(seed));
        assert!(e < TOL, "kd seed {seed}: {e:e}");
        let e = check_ce(&mut rng(seed));
        assert!(e < TOL, "ce seed {seed}: {e:e}");
    }
}

#[test]
fn full_student_loss_matches_finite_differences() {
    for seed in SEEDS {
        let e = check_student_loss(seed, &mut rng(seed + 100));
        assert!(e < TOL, "student seed {seed}: rel err {e:e}");
    }
}

#[test]
fn teacher_classification_loss_matches_finite_differences() {
    for seed in SEEDS {
        let e = check_teacher_loss(seed, &mut rng(seed + 200));
        assert!(e < TOL, "teacher seed {seed}: rel err {e:e}");
    }
}

#[test]
fn rotation_loss_gradient_matches_finite_differences() {
    let mut r = rng(7);
    for d in [4, 7, 10, 16] {
        for n in [2, 5, 8] {
            let e = check_rotation_loss(d, n, &mut r);
            assert!(e < 1e-5, "d {d} n {n}: abs err {e:e}");
        }
    }
}
