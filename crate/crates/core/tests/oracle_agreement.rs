use coherent_bayes::experiment::RunConfig;
use coherent_bayes::model::NoiseModel;
use coherent_bayes::oracle::{compare, TOLERANCE};
use coherent_bayes::smc::{ResampleConfig, ResampleScheme};
use coherent_bayes::PolicyParams;

fn small(seed: u64) -> RunConfig {
    RunConfig {
        n_particles: 10_000,
        radius_r0: 3.0,
        max_shots: 50,
        seed,
        policy: PolicyParams::uniform(),
        resample: ResampleConfig { scheme: ResampleScheme::Systematic, ..ResampleConfig::default() },
        ..RunConfig::default()
    }
}

#[test]
fn particle_filter_tracks_grid_posterior() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let report = compare(&small(seed), 0, 300).unwrap();
        worst = worst.max(report.discrepancy);
    }
    assert!(worst < TOLERANCE, "worst discrepancy {worst}");
}

#[test]
fn noisy_runs_track_grid_posterior_on_typical_seeds() {
    let mut discrepancies = Vec::new();
    for seed in 0..20 {
        let cfg = RunConfig { noise: NoiseModel { p_error: 0.1 }, ..small(seed) };
        discrepancies.push(compare(&cfg, 0, 300).unwrap().discrepancy);
    }
    discrepancies.sort_by(f64::total_cmp);
    let passed = discrepancies.iter().filter(|d| **d < TOLERANCE).count();
    assert!(discrepancies[10] < TOLERANCE / 2.0, "{discrepancies:?}");
    assert!(passed >= 15, "{discrepancies:?}");
}

#[test]
fn adaptive_sequences_agree_in_the_bulk() {
    let mut discrepancies = Vec::new();
    for seed in 0..20 {
        let cfg = RunConfig { policy: PolicyParams::default(), ..small(seed) };
        discrepancies.push(compare(&cfg, 0, 300).unwrap().discrepancy);
    }
    discrepancies.sort_by(f64::total_cmp);
    assert!(discrepancies[10] < TOLERANCE, "{discrepancies:?}");
}

#[test]
fn starved_filter_diverges() {
    let mut failures = 0;
    for seed in 0..10 {
        let cfg = RunConfig { n_particles: 10, ..small(seed) };
        if !compare(&cfg, 0, 300).unwrap().passed() {
            failures += 1;
        }
    }
    assert!(failures >= 5, "{failures} of 10 starved runs failed");
}
