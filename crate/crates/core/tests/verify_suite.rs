use minpro_lab::verify::{render_table, run_suite, VerifyOptions};

#[test]
fn suite_passes_on_analytic_score() {
    let results = run_suite(&VerifyOptions::default());
    println!("{}", render_table(&results));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
    assert_eq!(results.len(), 9);
}

#[test]
fn corrupted_score_is_caught() {
    let results = run_suite(&VerifyOptions {
        corrupt_score: true,
        ..VerifyOptions::default()
    });
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.contains(&"score_identity_vs_finite_diff"), "{failed:?}");
}
