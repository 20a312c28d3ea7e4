//! Plot-ready CSV serialization of the experiment reports.
//!
//! One header row, one data row per cell, stable column order, decimals at
//! six significant digits. Identical reports serialize to identical bytes.

use std::fs;
use std::path::Path;

use crate::approximator::{AccuracyReport, LengthSearchResult};
use crate::harness::{RewardAttackReport, RewardRow, TimebombReport, TransferReport};

/// Formats with six significant digits, plain decimal notation.
pub fn fmt_sig(x: f64) -> String {
    const SIG: i32 = 6;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // Round at the provisional precision first, then re-derive the digit
    // position so values that round across a decade (0.999... -> 1.0)
    // still print exactly six significant digits.
    let exp = x.abs().log10().floor() as i32;
    let p = 10f64.powi(exp - (SIG - 1));
    let rounded = (x / p).round() * p;
    let exp = if rounded == 0.0 { 0 } else { rounded.abs().log10().floor() as i32 };
    let decimals = SIG - 1 - exp;
    if decimals <= 0 {
        let p = 10f64.powi(-decimals);
        format!("{:.0}", (rounded / p).round() * p)
    } else {
        format!("{:.*}", decimals as usize, rounded)
    }
}

fn fmt_count(n: usize) -> String {
    n.to_string()
}

fn reward_row(label: &str, r: &RewardRow) -> String {
    format!(
        "{label},{},{},{},{},{},{},{}\n",
        fmt_sig(r.epsilon),
        fmt_sig(r.mean_l2),
        fmt_sig(r.mean_linf),
        fmt_sig(r.mean_reward),
        fmt_sig(r.std_reward),
        fmt_sig(r.min_reward),
        fmt_count(r.episodes)
    )
}

pub fn reward_attack_csv(report: &RewardAttackReport) -> String {
    let mut out =
        String::from("method,epsilon,mean_l2,mean_linf,mean_reward,std_reward,min_reward,episodes\n");
    out.push_str(&reward_row("clean", &report.clean));
    for row in &report.rows {
        out.push_str(&reward_row(row.method.expect("attack row").id(), row));
    }
    out
}

pub fn transfer_csv(report: &TransferReport) -> String {
    let mut out = String::from("method,epsilon,mean_l2,flips,total,ratio\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method.id(),
            fmt_sig(r.epsilon),
            fmt_sig(r.mean_l2),
            fmt_count(r.flips),
            fmt_count(r.total),
            fmt_sig(r.ratio)
        ));
    }
    out
}

pub fn timebomb_csv(report: &TimebombReport) -> String {
    let mut out = String::from("delay,successes,trials,rate\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_count(r.delay),
            fmt_count(r.successes),
            fmt_count(r.trials),
            fmt_sig(r.rate)
        ));
    }
    out
}

pub fn length_search_csv(result: &LengthSearchResult) -> String {
    let mut out = String::from("candidate_n,eval_accuracy,chosen\n");
    for &(n, acc) in &result.candidates {
        let acc_s = acc.map(fmt_sig).unwrap_or_else(|| "".into());
        out.push_str(&format!("{},{},{}\n", n, acc_s, if n == result.chosen { 1 } else { 0 }));
    }
    out
}

pub fn accuracy_csv(report: &AccuracyReport) -> String {
    let mut out = String::from("output_step,accuracy\n");
    for (j, acc) in report.per_step.iter().enumerate() {
        out.push_str(&format!("{},{}\n", j, fmt_sig(*acc)));
    }
    out.push_str(&format!("mean,{}\n", fmt_sig(report.mean)));
    out.push_str(&format!("exact_match,{}\n", fmt_sig(report.exact_match)));
    out
}

pub fn training_curve_csv(curve: &[(u64, f64)]) -> String {
    let mut out = String::from("step,eval_mean_reward\n");
    for &(s, v) in curve {
        out.push_str(&format!("{},{}\n", s, fmt_sig(v)));
    }
    out
}

/// Writes CSV content, refusing to overwrite unless forced.
pub fn write_csv(path: &Path, content: &str, force: bool) -> Result<(), std::io::Error> {
    if path.exists() && !force {
        return Err(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("refusing to overwrite {} (use force)", path.display()),
        ));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, content)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackMethod;
    use crate::envs::EnvKind;
    use crate::harness::DelayRow;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(0.5), "0.500000");
        assert_eq!(fmt_sig(500.0), "500.000");
        assert_eq!(fmt_sig(123456789.0), "123457000");
        assert_eq!(fmt_sig(-0.001234567), "-0.00123457");
        assert_eq!(fmt_sig(499.9999999), "500.000");
        assert_eq!(fmt_sig(0.99999999), "1.00000");
    }

    fn sample_reward_report() -> RewardAttackReport {
        let mk = |method, eps, reward| RewardRow {
            method: Some(method),
            epsilon: eps,
            mean_l2: eps * 2.0,
            mean_linf: eps,
            mean_reward: reward,
            std_reward: 1.5,
            min_reward: reward - 3.0,
            episodes: 20,
        };
        RewardAttackReport {
            env: EnvKind::CartPole,
            agent_algorithm: "dqn".into(),
            input_len: 50,
            output_len: 1,
            runs: 20,
            clean: RewardRow {
                method: None,
                epsilon: 0.0,
                mean_l2: 0.0,
                mean_linf: 0.0,
                mean_reward: 500.0,
                std_reward: 0.0,
                min_reward: 500.0,
                episodes: 20,
            },
            rows: vec![
                mk(AttackMethod::Fgsm, 0.01, 420.0),
                mk(AttackMethod::Fgsm, 0.1, 180.0),
                mk(AttackMethod::Gaussian, 0.01, 460.0),
            ],
        }
    }

    #[test]
    fn reward_csv_has_header_clean_row_and_cells() {
        let csv = reward_attack_csv(&sample_reward_report());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 1 + 3);
        assert_eq!(lines[0], "method,epsilon,mean_l2,mean_linf,mean_reward,std_reward,min_reward,episodes");
        assert!(lines[1].starts_with("clean,0,"));
        assert!(lines[2].starts_with("fgsm,0.0100000,"));
    }

    #[test]
    fn timebomb_csv_one_row_per_delay() {
        let report = TimebombReport {
            env: EnvKind::CartPole,
            source_algorithm: "dqn".into(),
            target_algorithm: "a2c".into(),
            method: AttackMethod::Pgd,
            epsilon: 0.3,
            rows: (1..=9)
                .map(|d| DelayRow { delay: d, successes: d, trials: 10, rate: d as f64 / 10.0 })
                .collect(),
        };
        let csv = timebomb_csv(&report);
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn reexport_is_byte_identical() {
        let a = reward_attack_csv(&sample_reward_report());
        let b = reward_attack_csv(&sample_reward_report());
        assert_eq!(a.into_bytes(), b.into_bytes());
    }
}
