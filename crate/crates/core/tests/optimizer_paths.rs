use lograd::galore::{
    decode_checkpoint, encode_checkpoint, full_adamw_step, AdamParams, FullAdamState, GaloreConfig,
    GaloreParamState, LrSchedule, OptimizerConfig, ProjectionMethod,
};
use lograd::synth::{planted_matrix, Spectrum};
use lograd::toytrain::{
    train_toy, LinearRegressionToy, RegressionConfig, RegressionProblem, TrainSettings,
};
use lograd::DenseMatrix;

#[test]
fn rank8_quadratic_converges_with_srft_projection() {
    // f(W) = ½‖W − W*‖², W* of rank 8
    let target = planted_matrix(32, 48, Spectrum::ExactRank { rank: 8 }, 5).unwrap();
    let cfg = GaloreConfig {
        rank: 8,
        refresh_interval: 50,
        method: ProjectionMethod::Srft,
        ..Default::default()
    };
    let mut st = GaloreParamState::new("w", (32, 48), cfg, AdamParams::default()).unwrap();
    let sched = LrSchedule::cosine(5e-2, 5e-4, 500);
    let mut w = DenseMatrix::zeros(32, 48);
    let loss = |w: &DenseMatrix| 0.5 * w.sub(&target).unwrap().frobenius_norm().powi(2);
    let initial = loss(&w);
    for step in 0..500 {
        let g = w.sub(&target).unwrap();
        st.galore_step(&mut w, &g, sched.lr(step), 0.0).unwrap();
    }
    assert!(loss(&w) <= 1e-3 * initial, "{} vs {initial}", loss(&w));

    // the full-matrix oracle also converges under the same schedule
    let mut w = DenseMatrix::zeros(32, 48);
    let mut full = FullAdamState::new(32, 48);
    for step in 0..500 {
        let g = w.sub(&target).unwrap();
        full_adamw_step(
            &mut w,
            &g,
            &mut full,
            sched.lr(step),
            &AdamParams::default(),
            0.0,
        )
        .unwrap();
    }
    assert!(loss(&w) <= 1e-3 * initial);
}

#[test]
fn regression_parity_over_seeds() {
    for seed in 0..5 {
        let toy = || {
            LinearRegressionToy::new(RegressionConfig {
                noise: 0.1,
                seed,
                ..Default::default()
            })
            .unwrap()
        };
        let sched = LrSchedule::cosine(5e-2, 5e-4, 500);
        let run = |optimizer| {
            train_toy(
                &mut RegressionProblem::new(toy()),
                &TrainSettings {
                    epochs: 500,
                    schedule: sched,
                    optimizer,
                },
            )
            .unwrap()
            .final_loss
        };
        let full = run(OptimizerConfig::full(AdamParams::default(), 0.0));
        let gal = run(OptimizerConfig::galore(
            GaloreConfig {
                rank: 8,
                refresh_interval: 50,
                seed,
                ..Default::default()
            },
            AdamParams::default(),
            0.0,
        ));
        assert!(
            (gal - full).abs() <= 0.05 * full,
            "seed {seed}: {gal} vs {full}"
        );
    }
}

#[test]
fn checkpoint_file_resumes_mid_run() {
    let cfg = GaloreConfig {
        rank: 4,
        refresh_interval: 3,
        seed: 9,
        ..Default::default()
    };
    let target = planted_matrix(12, 20, Spectrum::PowerLaw { exponent: 1.0 }, 1).unwrap();
    let mut st = GaloreParamState::new("w", (12, 20), cfg, AdamParams::default()).unwrap();
    let mut w = DenseMatrix::zeros(12, 20);
    for _ in 0..5 {
        let g = w.sub(&target).unwrap();
        st.galore_step(&mut w, &g, 1e-2, 0.0).unwrap();
    }
    let path = std::env::temp_dir().join(format!("lograd-ckpt-{}.bin", std::process::id()));
    std::fs::write(&path, encode_checkpoint(&st)).unwrap();
    let mut resumed = decode_checkpoint(&std::fs::read(&path).unwrap()).unwrap();
    std::fs::remove_file(&path).ok();
    let mut w2 = w.clone();
    for _ in 0..7 {
        let g = w.sub(&target).unwrap();
        st.galore_step(&mut w, &g, 1e-2, 0.0).unwrap();
        let g2 = w2.sub(&target).unwrap();
        resumed.galore_step(&mut w2, &g2, 1e-2, 0.0).unwrap();
    }
    assert_eq!(w, w2);
    assert_eq!(st.refresh_steps(), resumed.refresh_steps());
}
