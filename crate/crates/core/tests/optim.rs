//! Optimizers on the convex quadratic `½‖x − x*‖²`.

use rand::Rng;
use stochcon_core::model::{ParamKind, ParamStore};
use stochcon_core::optim::{lr_at, LrSchedule, Optimizer, OptimizerConfig};
use stochcon_core::rng::stream;
use stochcon_core::Tensor;

const STEPS: u64 = 10_000;

/// Returns the distance trace, stopping once it drops below 1e-3.
fn descend(config: OptimizerConfig, sched: LrSchedule, x0: Vec<f64>, target: &[f64]) -> Vec<f64> {
    let mut p = ParamStore::new();
    p.add("x", ParamKind::Weight, Tensor::vector(x0));
    let mut opt = Optimizer::new(config, &p).unwrap();
    let dist = |p: &ParamStore| {
        p.iter().next().unwrap().value.data().iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut trace = vec![dist(&p)];
    for t in 0..STEPS {
        let param = p.iter_mut().next().unwrap();
        let g: Vec<f64> = param.value.data().iter().zip(target).map(|(a, b)| a - b).collect();
        param.grad = Tensor::vector(g);
        opt.step(&mut p, lr_at(t, &sched)).unwrap();
        trace.push(dist(&p));
        if *trace.last().unwrap() < 1e-3 {
            break;
        }
    }
    trace
}

fn assert_monotone_convergence(name: &str, trace: &[f64]) {
    assert!(*trace.last().unwrap() < 1e-3, "{name}: ended at {}", trace.last().unwrap());
    for w in trace.windows(2) {
        assert!(w[1] <= w[0], "{name}: distance rose from {} to {}", w[0], w[1]);
    }
}

fn problem(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = stream(seed, &[41]);
    let x0 = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let target = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    (x0, target)
}

#[test]
fn sgd_momentum_converges_monotonically() {
    for seed in 0..5 {
        let (x0, target) = problem(seed);
        let trace = descend(OptimizerConfig::sgd(), LrSchedule::Constant { base_lr: 1e-3 }, x0, &target);
        assert_monotone_convergence("sgd", &trace);
    }
}

#[test]
fn adam_converges_monotonically() {
    for seed in 0..5 {
        let (x0, target) = problem(seed);
        let trace = descend(OptimizerConfig::adam(), LrSchedule::Constant { base_lr: 3e-4 }, x0, &target);
        assert_monotone_convergence("adam", &trace);
    }
}

#[test]
fn lars_converges_monotonically() {
    for seed in 0..5 {
        let (x0, _) = problem(seed);
        // the trust ratio scales steps by ‖x‖, so the well-posed target is the origin
        let target = vec![0.0; 6];
        let trace = descend(OptimizerConfig::lars(), LrSchedule::Constant { base_lr: 1.0 }, x0, &target);
        assert_monotone_convergence("lars", &trace);
    }
}
