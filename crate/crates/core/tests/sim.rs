use std::collections::HashMap;

use proptest::prelude::*;
use uop::sim::{CloudConfig, CloudSim, Resources, SimError, VmId, VmSpec, VmStatus};
use uop::Mode;

#[derive(Debug, Clone)]
enum Op {
    Create(VmSpec),
    Resize { pick: usize, target: VmSpec, mode: Mode },
    Terminate { pick: usize },
    Restore { pick: usize, spec: VmSpec },
    Advance(f64),
    Settle,
}

fn arb_spec() -> impl Strategy<Value = VmSpec> {
    (1u32..6, 1u32..8, 1u32..40).prop_map(|(c, r, d)| VmSpec::new(c, r, d))
}

fn arb_op() -> impl Strategy<Value = Op> {
    let mode = prop_oneof![Just(Mode::Continuous), Just(Mode::NonContinuous)];
    prop_oneof![
        2 => arb_spec().prop_map(Op::Create),
        4 => (any::<usize>(), arb_spec(), mode).prop_map(|(pick, target, mode)| Op::Resize { pick, target, mode }),
        1 => any::<usize>().prop_map(|pick| Op::Terminate { pick }),
        1 => (any::<usize>(), arb_spec()).prop_map(|(pick, spec)| Op::Restore { pick, spec }),
        2 => (0.0f64..120.0).prop_map(Op::Advance),
        1 => Just(Op::Settle),
    ]
}

fn small_cloud(seed: u64) -> CloudConfig {
    CloudConfig {
        capacity: Resources::new(16, 32, 200),
        rng_seed: seed,
        ..CloudConfig::default()
    }
}

/// Applies `op`, resolving `pick` against the live VMs in id order.
fn apply(sim: &mut CloudSim, op: &Op) -> Result<(), SimError> {
    let mut live: Vec<VmId> = sim.live_vms().map(|vm| vm.id).collect();
    live.sort();
    let pick = |i: usize| live.get(i % live.len().max(1)).copied();
    match op {
        Op::Create(spec) => sim.create_vm(*spec).map(drop),
        Op::Resize { pick: i, target, mode } => match pick(*i) {
            Some(id) => sim.resize_vm(id, *target, *mode).map(drop),
            None => Ok(()),
        },
        Op::Terminate { pick: i } => match pick(*i) {
            Some(id) => sim.terminate_vm(id),
            None => Ok(()),
        },
        Op::Restore { pick: i, spec } => {
            // Only a spec no larger than what the VM holds is a faithful reversal.
            if let Some(id) = pick(*i) {
                let held = sim.vm(id).unwrap().spec;
                let spec = VmSpec::new(
                    spec.vcpus.min(held.vcpus),
                    spec.ram_gb.min(held.ram_gb),
                    spec.disk_gb.min(held.disk_gb),
                );
                sim.restore_spec(id, spec);
            }
            Ok(())
        }
        Op::Advance(dt) => {
            sim.advance(*dt);
            Ok(())
        }
        Op::Settle => {
            sim.run_until_idle();
            Ok(())
        }
    }
}

fn assert_conserved(sim: &CloudSim) -> Result<(), TestCaseError> {
    let pool = sim.pool();
    prop_assert_eq!(pool.available().add(&sim.committed()), pool.capacity());
    prop_assert!(pool.available().fits_in(&pool.capacity()));
    Ok(())
}

fn allowed(from: VmStatus, to: VmStatus) -> bool {
    use VmStatus::*;
    from == to
        || matches!(
            (from, to),
            (Building, Active) | (Active, Resizing) | (Resizing, Active) | (_, Deleted)
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pool_is_conserved_after_every_command(seed: u64, ops in prop::collection::vec(arb_op(), 1..60)) {
        let mut sim = CloudSim::new(small_cloud(seed)).unwrap();
        for op in &ops {
            let before = sim.pool().available();
            let committed = sim.committed();
            if apply(&mut sim, op).is_err() {
                // A rejected command changes nothing.
                prop_assert_eq!(sim.pool().available(), before);
                prop_assert_eq!(sim.committed(), committed);
            }
            assert_conserved(&sim)?;
        }
        sim.run_until_idle();
        assert_conserved(&sim)?;
        let live: Resources = sim
            .live_vms()
            .fold(Resources::default(), |acc, vm| acc.add(&vm.spec));
        prop_assert_eq!(sim.pool().available().add(&live), sim.pool().capacity());
    }

    #[test]
    fn status_moves_only_along_the_lifecycle(seed: u64, ops in prop::collection::vec(arb_op(), 1..60)) {
        let mut sim = CloudSim::new(small_cloud(seed)).unwrap();
        let mut seen: HashMap<VmId, VmStatus> = HashMap::new();
        for op in &ops {
            let _ = apply(&mut sim, op);
            for id in (1..=seen.len() as u64 + 4).map(VmId) {
                if let Some(vm) = sim.vm(id) {
                    let prev = seen.insert(id, vm.status).unwrap_or(VmStatus::Building);
                    prop_assert!(allowed(prev, vm.status), "{}: {:?} -> {:?}", id, prev, vm.status);
                }
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_traces(seed: u64, ops in prop::collection::vec(arb_op(), 1..40)) {
        let run = || {
            let mut sim = CloudSim::new(small_cloud(seed)).unwrap();
            let results: Vec<String> = ops.iter().map(|op| format!("{:?}", apply(&mut sim, op))).collect();
            sim.run_until_idle();
            let delays: Vec<u64> = sim.delay_log().iter().map(|(_, d)| d.t.to_bits()).collect();
            (results, sim.trace().to_vec(), delays)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn disk_shrink_is_always_rejected(
        current in arb_spec(),
        target in arb_spec(),
        mode in prop_oneof![Just(Mode::Continuous), Just(Mode::NonContinuous)],
    ) {
        prop_assume!(target.disk_gb < current.disk_gb);
        let mut sim = CloudSim::new(small_cloud(1)).unwrap();
        let (id, _) = sim.create_vm(current).unwrap();
        sim.run_until_idle();
        let available = sim.pool().available();
        let result = sim.resize_vm(id, target, mode);
        prop_assert!(matches!(result, Err(SimError::UnsupportedOperation(_))), "{:?}", result);
        prop_assert_eq!(sim.vm(id).unwrap().spec, current);
        prop_assert_eq!(sim.vm(id).unwrap().status, VmStatus::Active);
        prop_assert_eq!(sim.pool().available(), available);
    }

    #[test]
    fn delays_are_never_negative(seed: u64, ops in prop::collection::vec(arb_op(), 1..40)) {
        let mut sim = CloudSim::new(CloudConfig { noise_sigma: 40.0, ..small_cloud(seed) }).unwrap();
        for op in &ops {
            let _ = apply(&mut sim, op);
        }
        prop_assert!(sim.delay_log().iter().all(|(_, d)| d.t >= 0.0));
    }
}

#[test]
fn advance_zero_finalizes_nothing() {
    let mut sim = CloudSim::new(small_cloud(3)).unwrap();
    sim.create_vm(VmSpec::new(1, 1, 1)).unwrap();
    assert!(sim.advance(0.0).is_empty());
    assert!(!sim.is_idle());
}

#[test]
fn create_then_advance_past_delay_activates() {
    let mut sim = CloudSim::new(CloudConfig {
        noise_sigma: 0.0,
        ..small_cloud(3)
    })
    .unwrap();
    let (id, delay) = sim.create_vm(VmSpec::new(2, 2, 10)).unwrap();
    assert_eq!(delay, 30.0);
    assert!(sim.advance(29.999).is_empty());
    assert_eq!(sim.vm(id).unwrap().status, VmStatus::Building);
    let events = sim.advance(0.002);
    assert_eq!(events.len(), 1);
    assert_eq!(sim.vm(id).unwrap().status, VmStatus::Active);
}

#[test]
fn trace_csv_exports_every_record() {
    let mut sim = CloudSim::new(small_cloud(5)).unwrap();
    let (id, _) = sim.create_vm(VmSpec::new(1, 1, 1)).unwrap();
    sim.run_until_idle();
    sim.resize_vm(id, VmSpec::new(2, 1, 1), Mode::Continuous).unwrap();
    sim.run_until_idle();
    sim.terminate_vm(id).unwrap();
    let mut out = Vec::new();
    sim.write_trace_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_virtual,event,vm_id,detail"));
    let events: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(events, ["create", "active", "resize", "resized", "terminate"]);
}
