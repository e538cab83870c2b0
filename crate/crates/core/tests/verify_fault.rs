use apollo::polyexpand::set_fault_injection;
use apollo::verify::run_checks;

#[test]
fn flipped_shortcut_sign_is_caught_by_name() {
    set_fault_injection(true);
    let out = run_checks(|n| n.starts_with("oracle") || n.starts_with("probe"));
    set_fault_injection(false);
    let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    assert!(failed.contains(&"oracle_ccp"), "{failed:?}");

    let clean = run_checks(|n| n == "oracle_ccp");
    assert!(clean[0].passed, "{}", clean[0].detail);
}
