use std::collections::HashSet;

use proptest::prelude::*;

use sparsetrain::topology::{
    build_interleaver, build_interleavers, build_network, build_network_with, BuildOptions, Interleaver, JunctionSpec,
    NetworkSpec, TopologyError,
};

fn assert_sound(ilv: &Interleaver) {
    let j = *ilv.junction();
    assert!(ilv.verify_clash_free().clash_free, "seed {} clashes", ilv.seed());
    assert!(ilv.fan_out_histogram().iter().all(|&c| c == j.d_out));
    for k in 0..ilv.clocks() {
        let banks: HashSet<usize> = ilv
            .bank_addresses_for_clock(k)
            .unwrap()
            .iter()
            .map(|b| b.bank)
            .collect();
        assert_eq!(banks.len(), j.z, "clock {k} reuses a bank");
    }
}

#[test]
fn hundred_seeds_are_clash_free() {
    let net = build_network(&NetworkSpec::reference()).unwrap();
    for seed in 0..100 {
        for ilv in build_interleavers(&net, seed).unwrap() {
            assert_sound(&ilv);
        }
    }
}

#[test]
fn table_network_shape() {
    let net = build_network(&NetworkSpec::reference()).unwrap();
    let d_in: Vec<usize> = net.junctions().iter().map(|j| j.d_in).collect();
    assert_eq!(d_in, vec![64, 32]);
    assert_eq!(net.total_weights(), 4096 + 1024);
    let npc: Vec<usize> = net.junctions().iter().map(|j| j.neurons_per_clock()).collect();
    assert_eq!(npc, vec![2, 1]);
    assert!(net.junctions().iter().all(|j| j.weight_sets() == 32));
}

#[test]
fn right_neurons_see_distinct_left_neurons() {
    let net = build_network(&NetworkSpec::reference()).unwrap();
    for ilv in build_interleavers(&net, 3).unwrap() {
        let j = *ilv.junction();
        for n in 0..j.n_right {
            let left: HashSet<u32> = ilv.map()[n * j.d_in..(n + 1) * j.d_in].iter().copied().collect();
            assert_eq!(left.len(), j.d_in);
        }
    }
}

#[test]
fn junction_seeds_are_offset() {
    let net = build_network(&NetworkSpec::reference()).unwrap();
    let a = build_interleavers(&net, 10).unwrap();
    let b = build_interleavers(&net, 9).unwrap();
    assert_eq!(a[0].seed(), 10);
    assert_eq!(a[1].seed(), 11);
    assert_eq!(a[0].map(), build_interleaver(net.junction(1), 10).unwrap().map());
    assert_ne!(a[0].map(), b[0].map());
}

#[test]
fn clashing_map_is_detected() {
    let j = JunctionSpec::new(8, 8, 2, 4).unwrap();
    // clock 0 reads left neurons 0 and 4, both in bank 0
    let map = vec![0, 4, 1, 2, 3, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7];
    let ilv = Interleaver::from_map(j, map).unwrap();
    let r = ilv.verify_clash_free();
    assert!(!r.clash_free);
    assert_eq!(r.first_violation, Some(0));
}

#[test]
fn invalid_networks_are_rejected() {
    let mut s = NetworkSpec::reference();
    s.z = vec![128, 16];
    assert!(matches!(
        build_network(&s),
        Err(TopologyError::Junction { junction: 2, .. })
    ));
    // non-integral d_in
    assert!(JunctionSpec::new(10, 3, 2, 1).is_err());
    let mut s = NetworkSpec::reference();
    s.d_out = vec![3, 16];
    assert!(build_network(&s).is_err());
}

#[test]
fn csv_export_has_one_row_per_slot() {
    let net = build_network(&NetworkSpec::reference()).unwrap();
    let ilv = &build_interleavers(&net, 1).unwrap()[1];
    let mut buf = Vec::new();
    ilv.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 1024);
    assert!(text.starts_with("slot,left_index,bank,address"));
}

/// Power-of-two junctions with `d_in | z` and `z | N_left`.
fn junctions() -> impl Strategy<Value = JunctionSpec> {
    (1u32..=8, 0u32..=6, 0u32..=8)
        .prop_filter_map("shape", |(nl, nr, d)| {
            let (n_left, n_right) = (1usize << nl, 1usize << nr);
            let d_out = 1usize << d.min(nr);
            let j = JunctionSpec::new(n_left, n_right, d_out, 1).ok()?;
            Some((j, n_left))
        })
        .prop_flat_map(|(j, n_left)| {
            let max = n_left.trailing_zeros();
            (Just(j), 0..=max)
        })
        .prop_filter_map("z", |(j, zexp)| {
            let z = 1usize << zexp;
            let j = JunctionSpec { z, ..j };
            j.validate(true).ok().map(|_| j)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn random_junctions_are_clash_free(j in junctions(), seed in any::<u64>()) {
        let ilv = build_interleaver(&j, seed).unwrap();
        assert_sound(&ilv);
        // deterministic in the seed
        let again = build_interleaver(&j, seed).unwrap();
        prop_assert_eq!(ilv.map(), again.map());
    }

    #[test]
    fn relaxed_build_accepts_fc_counterparts(h in 1u32..=6, o in 1u32..=5) {
        let spec = NetworkSpec {
            layer_sizes: vec![1 << (h + 2), 1 << h, 1 << o],
            d_out: vec![1, 1],
            z: vec![1, 1],
            clock_hz: 1.0,
        };
        let fc = spec.fully_connected_counterpart();
        let net = build_network_with(&fc, BuildOptions::relaxed()).unwrap();
        for j in net.junctions() {
            prop_assert!(j.is_fully_connected());
            prop_assert_eq!(j.weight_sets(), j.n_right);
        }
    }
}
