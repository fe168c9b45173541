use criterion::{black_box, criterion_group, criterion_main, Criterion};

use mdvae_core::corpus::{generate_motion, MotionKind};
use mdvae_core::denoiser::{denoise_regression, DenoiserConfig, DenoiserModel, NoisyObservationSeq, OutputMode};
use mdvae_core::kinematics::{forward_kinematics, inject_pose_noise, BodyShape};
use mdvae_core::motion_dvae::{elbo_value_and_grad, fit_stats, make_windows, Batch, DvaeConfig, DvaeModel, ElboWeights, Window};
use mdvae_core::trajectory_fit::{fit_global_trajectory, Detection2D, PinholeCamera, TrajectoryConfig};

fn prior_config() -> DvaeConfig {
    DvaeConfig {
        d_z: 16,
        hidden: 64,
        embed: 32,
        mlp_hidden: 64,
        integrate_body: true,
        ..DvaeConfig::default()
    }
}

fn fk(c: &mut Criterion) {
    let seq = generate_motion(MotionKind::SmoothRandom, 2.0, 30.0, &BodyShape::default(), 1).unwrap();
    let states = seq.states().unwrap();
    c.bench_function("forward_kinematics_60_frames", |b| {
        b.iter(|| {
            for s in &states {
                black_box(forward_kinematics(s, &seq.betas));
            }
        })
    });
}

fn elbo(c: &mut Criterion) {
    let seqs: Vec<_> = (0..8)
        .map(|i| generate_motion(MotionKind::ALL[i % 4], 2.0, 30.0, &BodyShape::default(), i as u64).unwrap())
        .collect();
    let windows = make_windows(&seqs, 60, 60).unwrap();
    let model = DvaeModel::new(prior_config(), fit_stats(&windows).unwrap()).unwrap();
    let refs: Vec<&Window> = windows.iter().collect();
    let batch = Batch::new(&model.stats, &refs).unwrap();
    c.bench_function("elbo_value_and_grad_batch8_len60", |b| {
        b.iter(|| black_box(elbo_value_and_grad(&model, &model.params, &batch, 0, &ElboWeights::default(), 1.0)))
    });
}

fn regression(c: &mut Criterion) {
    let seqs: Vec<_> = (0..4)
        .map(|i| generate_motion(MotionKind::ALL[i], 2.0, 30.0, &BodyShape::default(), i as u64).unwrap())
        .collect();
    let windows = make_windows(&seqs, 60, 60).unwrap();
    let mut prior = DvaeModel::new(prior_config(), fit_stats(&windows).unwrap()).unwrap();
    prior.trained = true;
    let mut model = DenoiserModel::from_prior(&prior, DenoiserConfig::default(), 1e6).unwrap();
    model.trained = true;
    let mut y = seqs[0].clone();
    y.frames = inject_pose_noise(&seqs[0].frames, 0.15, 3, true).unwrap();
    let y = NoisyObservationSeq::new(y).unwrap();
    c.bench_function("denoise_regression_60_frames_10_samples", |b| {
        b.iter(|| black_box(denoise_regression(&model, &y, 10, 0, OutputMode::PurePrior).unwrap()))
    });
}

fn trajectory(c: &mut Criterion) {
    let seq = generate_motion(MotionKind::Walk, 1.0, 30.0, &BodyShape::default(), 2).unwrap();
    let camera = PinholeCamera::looking_at([0.0, 1.3, -4.0], [0.0, 0.9, 0.0], 1000.0, 1280.0, 720.0).unwrap();
    let dets: Vec<_> = seq.observations().iter().map(|o| Detection2D::render(&o.joints, &camera, 1.0)).collect();
    let mut group = c.benchmark_group("trajectory");
    group.sample_size(10);
    group.bench_function("fit_global_trajectory_30_frames", |b| {
        b.iter(|| black_box(fit_global_trajectory(&dets, &seq.frames, &seq.betas, &camera, &TrajectoryConfig::default()).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, fk, elbo, regression, trajectory);
criterion_main!(benches);
