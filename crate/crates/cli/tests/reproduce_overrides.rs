use std::fs;
use std::process::Command;

fn reproduce(override_text: &str) -> (Option<i32>, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("override.toml");
    fs::write(&cfg, override_text).unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_magtrap"))
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "reproduce-paper"])
        .output()
        .unwrap();
    let report = fs::read_to_string(out.join("report.csv")).unwrap_or_default();
    (o.status.code(), report)
}

fn rows<'a>(report: &'a str, check: &str) -> Vec<&'a str> {
    report
        .lines()
        .filter(|l| l.split(',').nth(1).is_some_and(|c| c.starts_with(check)))
        .collect()
}

#[test]
fn doubled_kappa_fails_linewidth_rows_only() {
    let (code, report) = reproduce("[gas]\nkappa_hz_per_mbar = 126.0\n");
    assert_eq!(code, Some(2));
    let gamma = rows(&report, "gamma vs table ");
    assert_eq!(gamma.len(), 12);
    assert!(gamma.iter().all(|l| l.ends_with(",FAIL")), "{gamma:#?}");
    let f0 = rows(&report, "f0 ");
    assert_eq!(f0.len(), 24);
    assert!(f0.iter().all(|l| l.ends_with(",PASS")), "{f0:#?}");
}

#[test]
fn zero_susceptibility_fails_the_trap_fit() {
    let (code, report) = reproduce("[trap]\nchi_si = 0.0\n");
    assert_eq!(code, Some(2));
    let fit = rows(&report, "coefficient fit");
    assert_eq!(fit.len(), 1);
    assert!(fit[0].to_lowercase().contains("equilibrium") && fit[0].ends_with(",FAIL"), "{fit:?}");
    assert!(report.lines().any(|l| l.starts_with("C2,") && l.ends_with(",PASS")));
}
