use ccsbesr_core::suite::{run_block, run_suite, SuiteOptions, SUITE_BLOCKS};

#[test]
fn every_block_passes() {
    let reports = run_suite(&SuiteOptions::default()).unwrap();
    assert_eq!(reports.len(), SUITE_BLOCKS.len());
    for r in &reports {
        println!("{r:?}");
    }
    for r in &reports {
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn other_seeds_pass_for_the_heads() {
    for seed in [3, 11] {
        for block in ["pam_fusion", "full_model"] {
            let r = run_block(block, &SuiteOptions { seed, ..SuiteOptions::default() }).unwrap();
            assert!(r.passed(), "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn corrupted_conv_adjoint_is_caught() {
    let r = run_block(
        "res_block",
        &SuiteOptions {
            fault: Some("conv2d"),
            ..SuiteOptions::default()
        },
    )
    .unwrap();
    assert!(!r.passed(), "{r:?}");
}
