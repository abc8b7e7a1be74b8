use proptest::prelude::*;

use sparsetrain::fixedpoint::FixedFormat;
use sparsetrain::resources::{
    doubling_candidates, estimate, fit_check, input_data_bits, sweep_z, DeviceProfile, DspPolicy, ResourceError,
};
use sparsetrain::topology::NetworkSpec;

#[test]
fn table_configuration_counts() {
    let est = estimate(&NetworkSpec::reference(), FixedFormat::reference_default()).unwrap();
    assert_eq!(est.ff_multipliers, 160);
    assert_eq!(est.bp_multipliers, 64);
    assert_eq!(est.dsp_mapped(DspPolicy::FfBp), 224);
    assert_eq!(est.dsp_mapped(DspPolicy::All), 384);
    assert_eq!(est.up_multipliers, 160);
    assert_eq!(est.sigmoid_lut_count, 3);
    assert_eq!(est.block_cycle_clocks, 34);
    assert!((est.block_cycle_seconds * 1e6 - 2.2667).abs() < 5e-5);
    assert_eq!(est.bp_partial_sums, 32);
    assert_eq!(est.weight_banks, vec![(128, 33), (32, 33)]);
}

#[test]
fn widest_doubling_reaches_six_clocks() {
    let mut spec = NetworkSpec::reference();
    spec.z = vec![1024, 256];
    let est = estimate(&spec, FixedFormat::reference_default()).unwrap();
    assert_eq!(est.block_cycle_clocks, 6);
    assert!((est.block_cycle_seconds * 1e6 - 0.4).abs() < 1e-9);
}

#[test]
fn doubling_sweep() {
    let cands = doubling_candidates(&[128, 32], 4);
    assert_eq!(
        cands,
        vec![vec![128, 32], vec![256, 64], vec![512, 128], vec![1024, 256]]
    );
    let sweep = sweep_z(&NetworkSpec::reference(), &cands, FixedFormat::reference_default());
    let clocks: Vec<usize> = sweep.rows.iter().map(|r| r.block_cycle_clocks).collect();
    assert_eq!(clocks, vec![34, 18, 10, 6]);
    assert!(sweep.skipped.is_empty());
    // unequal block cycles are reported, not silently dropped
    let bad = sweep_z(
        &NetworkSpec::reference(),
        &[vec![128, 64]],
        FixedFormat::reference_default(),
    );
    assert!(bad.rows.is_empty());
    assert_eq!(bad.skipped.len(), 1);
}

#[test]
fn artix_fit_and_streaming() {
    let est = estimate(&NetworkSpec::reference(), FixedFormat::reference_default()).unwrap();
    let dev = DeviceProfile::artix7();
    let fit = fit_check(&est, &dev, DspPolicy::FfBp);
    assert!(fit.dsp_fits);
    assert!(fit.memory_fits);
    assert!(fit.must_stream_inputs);
    assert_eq!(input_data_bits(12544), 78_675_968);
    assert!(fit.warnings.iter().any(|w| w.starts_with("must stream inputs")));

    let all = fit_check(&est, &dev, DspPolicy::All);
    assert!(!all.dsp_fits);
    assert!(all.warnings.iter().any(|w| w.starts_with("over capacity")));
}

#[test]
fn device_profiles_from_toml() {
    let dev = DeviceProfile::from_toml_str("name = \"tiny\"\ndsp_count = 8\nbram_kbits = 100.0\n").unwrap();
    assert_eq!(dev.dsp_count, 8);
    let est = estimate(&NetworkSpec::reference(), FixedFormat::reference_default()).unwrap();
    assert!(!fit_check(&est, &dev, DspPolicy::FfBp).fits());
    assert!(matches!(
        DeviceProfile::from_toml_str("name = \"x\"\ndsp_count = 1\nbram_kbits = -1.0\n"),
        Err(ResourceError::Profile(_))
    ));
    assert_eq!(DeviceProfile::builtin("xc7a100t"), Some(DeviceProfile::artix7()));
}

proptest! {
    /// Closed-form relations hold across the whole doubling range.
    #[test]
    fn counts_scale_with_z(step in 0u32..=3) {
        let mut spec = NetworkSpec::reference();
        spec.z = vec![128 << step, 32 << step];
        let est = estimate(&spec, FixedFormat::reference_default()).unwrap();
        prop_assert_eq!(est.ff_multipliers, est.z_total());
        prop_assert_eq!(est.up_multipliers, est.z_total());
        prop_assert_eq!(est.bp_multipliers, 2 * spec.z[1]);
        prop_assert_eq!(est.block_cycle_clocks, (32 >> step) + 2);
        prop_assert_eq!(est.sigmoid_lut_count, 3 << step);
        prop_assert!((est.throughput * est.block_cycle_seconds - 1.0).abs() < 1e-12);
    }
}
