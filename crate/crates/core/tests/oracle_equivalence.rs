use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rot_cfi::sim::SimConfig;
use rot_cfi::{FirmwareProfile, LatencyMode};
use rot_cfi_testkit::harness::check_run;
use rot_cfi_testkit::{random_trace, TraceShape};

fn random_config(rng: &mut impl Rng) -> SimConfig {
    let profile = match rng.gen_range(0..4) {
        0 => FirmwareProfile::irq(),
        1 => FirmwareProfile::polling(),
        2 => FirmwareProfile::optimized(),
        _ => {
            let mut p = FirmwareProfile::uniform("custom", 0);
            p.call_cycles = rng.gen_range(0..40);
            p.return_cycles = rng.gen_range(0..40);
            p
        }
    };
    let mut c = SimConfig::new(profile, [1, 2, 3, 8][rng.gen_range(0..4)]);
    c.bus_width_bits = [32, 64, 128][rng.gen_range(0..3)];
    c.transfer_cost_per_beat = rng.gen_range(0..3);
    if rng.gen_bool(0.3) {
        c.latency_mode = LatencyMode::Averaged;
    }
    c.policy_params.shadow_stack =
        rot_cfi::policy::ShadowStackConfig::with_capacity(rng.gen_range(2..16));
    c
}

#[test]
fn engine_matches_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..300 {
        let shape = TraceShape::random(&mut rng, 2000);
        let trace = random_trace(&mut rng, &shape);
        let config = random_config(&mut rng);
        if let Err(e) = check_run(&trace, &config) {
            panic!("trace {i} ({shape:?}, {:?}): {e}", config.summary());
        }
    }
}

#[test]
fn dense_dual_commit_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let shape = TraceShape {
            len: 500,
            cf_density: 1.0,
            dual: 0.9,
            max_gap: 0,
            long_gap: 0,
            corrupt: 0.0,
        };
        let trace = random_trace(&mut rng, &shape);
        for depth in [1, 2, 8] {
            check_run(&trace, &SimConfig::new(FirmwareProfile::optimized(), depth)).unwrap();
            check_run(
                &trace,
                &SimConfig::new(FirmwareProfile::uniform("zero", 0), depth),
            )
            .unwrap();
        }
    }
}
