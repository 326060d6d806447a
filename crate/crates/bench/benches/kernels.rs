use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lagkit::adjoint::LearnedModel;
use lagkit::keypoints::{gaussian_blobs, spatial_softmax, WorldFrame, DEFAULT_SIGMA};
use lagkit::learn::{estimate_velocity, generate_dataset, DataConfig};
use lagkit::{rollout, Benchmark, DynamicsParams, RolloutConfig};

fn accel(c: &mut Criterion) {
    for b in [Benchmark::pendulum(), Benchmark::cartpole(), Benchmark::acrobot()] {
        let sys = b.analytic_system(b.actuators.len());
        let x = b.sample_state(&mut lagkit::rng::stream(0, "bench", 0)).0;
        let v = vec![0.3; b.k()];
        let u = vec![0.5; b.actuators.len()];
        c.bench_function(&format!("accel/analytic/{}", b.name()), |bn| {
            bn.iter(|| sys.constrained_accel(black_box(&x), black_box(&v), black_box(&u)).unwrap())
        });
        let params = DynamicsParams::init(b.k(), b.actuators.len(), 0);
        let model = LearnedModel::new(&b.constraints, &params).unwrap();
        c.bench_function(&format!("accel/learned/{}", b.name()), |bn| {
            bn.iter(|| model.system().constrained_accel(black_box(&x), black_box(&v), black_box(&u)).unwrap())
        });
    }
}

fn rollouts(c: &mut Criterion) {
    let b = Benchmark::acrobot();
    let sys = b.analytic_system(0);
    let (x, v) = b.sample_state(&mut lagkit::rng::stream(0, "bench", 1));
    c.bench_function("rollout/acrobot/50", |bn| {
        bn.iter(|| rollout(&sys, black_box(&x), black_box(&v), &[], 50, 0.02).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let b = Benchmark::pendulum();
    let cfg = DataConfig {
        num_sequences: 1,
        ..DataConfig::default()
    };
    let data = generate_dataset(&b, &cfg, 0).unwrap();
    let seq = &data.sequences[0];
    let vel = estimate_velocity(&b.constraints, &seq.states, seq.h).unwrap();
    let params = DynamicsParams::init(2, 0, 0);
    let model = LearnedModel::new(&b.constraints, &params).unwrap();
    let rc = RolloutConfig::default();
    let mut grad = vec![0.0; params.param_count()];
    c.bench_function("gradient/pendulum/sequence", |bn| {
        bn.iter(|| {
            grad.iter_mut().for_each(|g| *g = 0.0);
            model.dynamics_loss_grad(&seq.states, &vel, &seq.u, &rc, &mut grad).unwrap()
        })
    });
}

fn softmax(c: &mut Criterion) {
    let frame = WorldFrame::square(64, 1.2);
    let s = gaussian_blobs(&[0.3, -0.4, -0.2, 0.5], &frame, DEFAULT_SIGMA).unwrap().ln();
    c.bench_function("softmax/64x64x2", |bn| bn.iter(|| spatial_softmax(black_box(&s))));
}

criterion_group!(benches, accel, rollouts, gradient, softmax);
criterion_main!(benches);
