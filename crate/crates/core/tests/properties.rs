use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rot_cfi::sim::{run, SimConfig};
use rot_cfi::FirmwareProfile;
use rot_cfi_testkit::{random_trace, records, TraceShape};

fn trace(seed: u64, len: usize, dual: f64) -> Vec<rot_cfi::TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = TraceShape::random(&mut rng, len);
    shape.dual = dual;
    records(&random_trace(&mut rng, &shape))
}

fn cfi(records: &[rot_cfi::TraceRecord], profile: FirmwareProfile, depth: usize) -> u64 {
    run(records, &SimConfig::new(profile, depth))
        .unwrap()
        .cfi_cycles
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conservation(seed: u64, depth in 1usize..10) {
        let t = trace(seed, 800, 0.3);
        for p in FirmwareProfile::builtins() {
            let r = run(&t, &SimConfig::new(p, depth)).unwrap();
            prop_assert_eq!(r.retired_instructions, t.len() as u64);
            prop_assert!(r.cfi_cycles >= r.baseline_cycles);
        }
    }

    #[test]
    fn deeper_queue_never_slower(seed: u64, depth in 1usize..10) {
        let t = trace(seed, 800, 0.3);
        let p = FirmwareProfile::polling();
        prop_assert!(cfi(&t, p.clone(), depth + 1) <= cfi(&t, p, depth));
    }

    #[test]
    fn slower_checks_never_faster(seed: u64, call in 0u64..200, ret in 0u64..200, extra in 0u64..50, depth in 1usize..4) {
        let t = trace(seed, 600, 0.3);
        let mut fast = FirmwareProfile::uniform("fast", 0);
        fast.call_cycles = call;
        fast.return_cycles = ret;
        let mut slow = fast.clone();
        slow.call_cycles += extra;
        let mut slower_ret = fast.clone();
        slower_ret.return_cycles += extra;
        prop_assert!(cfi(&t, fast.clone(), depth) <= cfi(&t, slow, depth));
        prop_assert!(cfi(&t, fast, depth) <= cfi(&t, slower_ret, depth));
    }

    #[test]
    fn zero_latency_identity(seed: u64, depth in 1usize..10) {
        let t = trace(seed, 800, 0.0);
        let r = run(&t, &SimConfig::new(FirmwareProfile::uniform("zero", 0), depth)).unwrap();
        prop_assert_eq!(r.cfi_cycles, r.baseline_cycles);
        prop_assert_eq!(r.stalls.total(), 0);
    }

    #[test]
    fn profile_ordering(seed: u64, depth in prop::sample::select(vec![1usize, 2, 8])) {
        let t = trace(seed, 800, 0.3);
        let [irq, poll, opt] = FirmwareProfile::builtins().map(|p| run(&t, &SimConfig::new(p, depth)).unwrap());
        prop_assert!(opt.cfi_cycles <= poll.cfi_cycles);
        prop_assert!(poll.cfi_cycles <= irq.cfi_cycles);
    }
}
