use kerrvapor_core::bucket::{self, CosineFitOptions};
use kerrvapor_core::interferometry::{self, KerrScene, RetrievalOptions};
use kerrvapor_core::montecarlo::{self, RunConfig};
use kerrvapor_core::AtomicSystem;

fn scene() -> KerrScene {
    KerrScene {
        size: 256,
        waist_px: 45.0,
        reference_waist_px: 180.0,
        ..KerrScene::default()
    }
    .with_peak_phase(-12.0, 100.0)
}

#[test]
fn fourier_and_bucket_see_the_same_curve() {
    let scene = scene();
    let (frame, warning) = scene.frame(100.0, 100.0, 0).unwrap();
    assert!(warning.is_none());
    let intensity = scene.intensity_map(100.0);
    let r = interferometry::retrieve(&frame, &intensity, &RetrievalOptions::default(), false).unwrap();
    let trace = bucket::synthetic_ramp(&scene, 100.0, 100, 4, 1e-3).unwrap();
    let b = bucket::fit_cosine(&trace, &CosineFitOptions::default()).unwrap();
    for i in [10.0, 30.0, 60.0, 100.0] {
        let truth = scene.phase_at(i);
        assert!((r.fit.nonlinear(i) - truth).abs() < 0.02 * 12.0, "fourier at {i}");
        assert!((b.phase(i) - truth).abs() < 0.02 * 12.0, "bucket at {i}");
    }
    assert!(b.total_phase > 11.0 && !b.weak_phase);
}

#[test]
fn conjugate_satellite_negates_the_phase() {
    let scene = scene();
    let (frame, _) = scene.frame(100.0, 100.0, 3).unwrap();
    let intensity = scene.intensity_map(100.0);
    let opts = RetrievalOptions::default();
    let a = interferometry::retrieve(&frame, &intensity, &opts, false).unwrap();
    let b = interferometry::retrieve(&frame, &intensity, &opts, true).unwrap();
    assert!((a.fit.n2 + b.fit.n2).abs() < 1e-3 * a.fit.n2.abs());
}

#[test]
fn small_monte_carlo_run_is_red_detuned_defocusing_and_thread_independent() {
    let system = AtomicSystem::rb87_d2();
    let cfg = RunConfig {
        n_traj: 24,
        n_classes: 2,
        grid_size: 12,
        ..RunConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| montecarlo::simulate_waist(&system, &cfg, 0.5e-3, &[17.8]).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one, three);
    assert!(one[0].delta_n < 0.0, "{}", one[0].delta_n);
    assert_eq!(one[0].stats.failed, 0);
}
