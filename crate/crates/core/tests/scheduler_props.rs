use chiplet_moe_sim::analysis::{run_end_to_end, BlockRecord, E2eParams, RunOptions};
use chiplet_moe_sim::scheduler::{
    full_mask, icv_allocate, icv_release, paired_load_order, schedule_layer,
    token_buffering_update, BufferDecision, BufferingParams, Icv, LayerWork, Mask, OrderPolicy,
    SchedAction, TrajectoryScheduler,
};
use chiplet_moe_sim::workload::Request;
use chiplet_moe_sim::{HardwareConfig, ModelConfig, Strategy, WorkloadParams};
use proptest::prelude::*;

#[test]
fn icv_algebra_exhaustive() {
    for c in 1..=8usize {
        let full = full_mask(c);
        for icv in 0..=full {
            for m in 0..=full {
                let a = icv_allocate(Icv(icv), m);
                let r = icv_release(Icv(icv), m);
                assert_eq!(a.0, icv & !m);
                assert_eq!(r.0, icv | m);
                assert_eq!(icv_allocate(a, m), a);
                assert_eq!(icv_release(r, m), r);
                if m & icv == m {
                    assert_eq!(icv_release(a, m).0, icv, "c={c} icv={icv:b} m={m:b}");
                }
            }
            assert_eq!(icv_allocate(Icv(icv), 0).0, icv);
        }
    }
}

#[test]
fn icv_round_trip_survives_disjoint_allocations() {
    for c in 1..=6usize {
        let full = full_mask(c);
        for icv in 0..=full {
            for m in (0..=full).filter(|m| m & icv == *m) {
                for m2 in (0..=full).filter(|m2| m2 & m == 0) {
                    let x = icv_allocate(icv_allocate(Icv(icv), m), m2);
                    assert_eq!(icv_release(x, m), icv_allocate(Icv(icv), m2));
                }
            }
        }
    }
}

/// Straight-line restatement of the buffering rule with signed arithmetic.
fn oracle(timer: i64, counter: u64, n: u64, cold: bool) -> (i64, u64, bool) {
    let (mut t, mut c) = (timer, counter);
    if c >= n {
        t += 1;
        c = 0;
    }
    if cold && t > 0 {
        (t - 1, c, true)
    } else {
        (t, c, false)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn buffering_matches_oracle(
        slack in prop::sample::select(vec![10u32, 20, 30, 50, 100]),
        tokens in 1usize..512,
        steps in prop::collection::vec((prop::collection::vec(0u32..12, 0..6), any::<bool>()), 1..200),
    ) {
        let p = BufferingParams::from_slack(slack, tokens);
        let mut r = Request::new(0, vec![0]);
        let (mut t, mut c) = (0i64, 0u64);
        for (counts, pass_done) in steps {
            let before = r.qos_timer;
            let cold = counts.iter().any(|&n| n < p.theta_min);
            let d = token_buffering_update(&mut r, &counts, &p);
            let (t2, c2, defer) = oracle(t, c, p.n_threshold as u64, cold);
            prop_assert!(t2 >= 0);
            prop_assert_eq!(r.qos_timer as i64, t2);
            prop_assert_eq!(r.fw_counter as u64, c2);
            prop_assert_eq!(d == BufferDecision::Defer, defer);
            if defer {
                let granted = u32::from(c >= p.n_threshold as u64);
                prop_assert_eq!(r.qos_timer, before + granted - 1);
            }
            t = t2;
            c = c2;
            if pass_done && !defer {
                r.fw_counter += 1;
                c += 1;
            }
        }
    }

    #[test]
    fn increment_only_at_threshold(n_pct in prop::sample::select(vec![10u32, 20, 30]), counter in 0u32..20) {
        let p = BufferingParams::from_slack(n_pct, 64);
        let mut r = Request::new(0, vec![0]);
        r.fw_counter = counter;
        token_buffering_update(&mut r, &[], &p);
        if counter >= p.n_threshold {
            prop_assert_eq!((r.qos_timer, r.fw_counter), (1, 0));
        } else {
            prop_assert_eq!((r.qos_timer, r.fw_counter), (0, counter));
        }
    }

    #[test]
    fn paired_order_covers_each_activated_expert_once(counts in prop::collection::vec(0u32..20, 0..40)) {
        let order = paired_load_order(&counts);
        let mut seen: Vec<usize> = order.iter().flat_map(|&(a, b)| std::iter::once(a).chain(b)).collect();
        seen.sort_unstable();
        let want: Vec<usize> = (0..counts.len()).filter(|&e| counts[e] > 0).collect();
        prop_assert_eq!(seen, want);
        for (a, b) in &order {
            if let Some(b) = b {
                prop_assert!(a != b);
                prop_assert!(counts[*a] >= counts[*b]);
            }
        }
    }

    #[test]
    fn paired_order_depends_only_on_counts(counts in prop::collection::vec(1u32..6, 1..20), seed in any::<u64>()) {
        // Relabeling experts leaves the sequence of paired counts unchanged.
        let order = paired_load_order(&counts);
        let n = counts.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = seed;
        for i in (1..n).rev() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (rng >> 33) as usize % (i + 1));
        }
        let mut relabeled = vec![0; n];
        for e in 0..n {
            relabeled[perm[e]] = counts[e];
        }
        let rank = |c: &[u32], order: &[(usize, Option<usize>)]| -> Vec<(u32, Option<u32>)> {
            order.iter().map(|&(a, b)| (c[a], b.map(|b| c[b]))).collect()
        };
        prop_assert_eq!(rank(&counts, &order), rank(&relabeled, &paired_load_order(&relabeled)));
    }

    #[test]
    fn dispatch_respects_idle_set(
        chiplets in 1usize..=8,
        masks in prop::collection::vec(1u64..256, 1..12),
        strict in any::<bool>(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 64),
    ) {
        let full = full_mask(chiplets);
        let masks: Vec<Mask> = masks.iter().map(|m| (m & full).max(1)).collect();
        let mut tokens = vec![vec![Vec::new(); chiplets]; masks.len()];
        for (e, m) in masks.iter().enumerate() {
            for c in 0..chiplets {
                if m >> c & 1 == 1 {
                    tokens[e][c].push(e);
                }
            }
        }
        let work = LayerWork { num_chiplets: chiplets, tokens };
        let sched = schedule_layer(&work, 0, OrderPolicy::Paired, &[]);
        let mut ts = TrajectoryScheduler::new(&sched, chiplets, strict, false);
        let mut dispatched = vec![0; sched.groups.len()];
        let mut picks = picks.into_iter();
        let mut now = 0.0;
        while !ts.finished() {
            let before = ts.idle();
            for a in ts.poll(now) {
                let SchedAction::Dispatch { group, c_star, .. } = a else { continue };
                dispatched[group] += 1;
                let m = sched.groups[group].union_mask;
                prop_assert!(m >> c_star & 1 == 1);
                if strict {
                    prop_assert_eq!(m & before.0, m);
                }
            }
            for rec in &ts.log {
                let m = sched.groups[rec.group].union_mask;
                prop_assert!(m & rec.idle_before != 0);
                prop_assert_eq!(rec.c_star, (m & rec.idle_before).trailing_zeros() as usize);
                prop_assert_eq!(rec.idle_after, rec.idle_before & !m);
            }
            let running = ts.running().to_vec();
            prop_assert!(!running.is_empty(), "stalled with nothing running");
            let i = picks.next().map_or(0, |p| p.index(running.len()));
            ts.on_complete(running[i]);
            now += 1.0;
        }
        prop_assert!(dispatched.iter().all(|&d| d == 1));
    }
}

fn e2e_blocks(slack: u32, tokens: usize, seed: u64) -> (Vec<BlockRecord>, Vec<u32>, Vec<u32>) {
    let hw = HardwareConfig::test_chip();
    let mut model = ModelConfig::qwen3_a3b().scaled_down(8).with_micro_slices(4);
    model.num_layers = 4;
    let w = WorkloadParams::long_tail(tokens, seed);
    let e2e = E2eParams {
        iterations: 40,
        initial_context: 16,
    };
    let opts = RunOptions {
        slack_pct: Some(slack),
        ..RunOptions::default()
    };
    let rep = run_end_to_end(&w, Strategy::FsedpBuffered, &hw, &model, &e2e, &opts).unwrap();
    (rep.blocks, rep.deferrals, rep.passes)
}

#[test]
fn deferred_pass_resumes_at_same_layer_with_same_gating() {
    let mut total = 0;
    for seed in 0..4 {
        let (blocks, _, _) = e2e_blocks(30, 64, seed);
        for d in blocks.iter().filter(|b| b.deferred) {
            total += 1;
            let next: Vec<&BlockRecord> = blocks
                .iter()
                .filter(|b| {
                    b.iteration == d.iteration + 1 && b.request == d.request && b.pass == d.pass
                })
                .collect();
            if d.iteration + 1 == 40 {
                continue;
            }
            assert!(!next.is_empty(), "deferred pass never resumed: {d:?}");
            assert_eq!(next[0].layer, d.layer, "resumed at another layer: {d:?}");
            assert_eq!(
                next[0].gates, d.gates,
                "gating changed across deferral: {d:?}"
            );
            assert!(next.windows(2).all(|w| w[1].layer == w[0].layer + 1));
        }
    }
    assert!(total > 0, "no deferral exercised");
}

#[test]
fn zero_slack_never_defers() {
    let (blocks, deferrals, _) = e2e_blocks(0, 64, 1);
    assert!(blocks.iter().all(|b| !b.deferred));
    assert!(deferrals.iter().all(|&d| d == 0));
}

#[test]
fn deferrals_within_slack_budget() {
    for seed in 0..4 {
        for slack in [10, 20, 30] {
            let (_, deferrals, passes) = e2e_blocks(slack, 64, seed);
            for (d, p) in deferrals.iter().zip(&passes) {
                let n = (100.0 / slack as f64).round() as u32;
                assert!(*d <= p / n, "slack {slack}: {d} deferrals over {p} passes");
                if 100 % slack == 0 {
                    assert!(*d as f64 <= (slack as f64 / 100.0 * *p as f64).floor());
                }
            }
        }
    }
}
