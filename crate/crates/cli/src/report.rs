//! Consolidated ablation table.

use std::fmt::Write;

use etc_core::eval::EvalReport;
use etc_core::train::Ablation;

/// One row per ablation in canonical order; all reports must share thresholds.
pub fn ablation_table(reports: &[(Ablation, EvalReport)]) -> etc_core::Result<String> {
    let Some((_, first)) = reports.first() else {
        return Err(etc_core::Error::Data("no reports to tabulate".into()));
    };
    let thresholds: Vec<f64> = first.recall.iter().map(|r| r.threshold).collect();
    for (a, r) in reports {
        let t: Vec<f64> = r.recall.iter().map(|r| r.threshold).collect();
        if t != thresholds {
            return Err(etc_core::Error::Data(format!(
                "{} report uses thresholds {t:?}, expected {thresholds:?}",
                a.label()
            )));
        }
    }
    let mut s = format!("{:<10}", "method");
    for t in &thresholds {
        let _ = write!(s, " | R1@{t:<5}");
    }
    s.push_str(" |   mIoU | mass[0.8,1]\n");
    for a in Ablation::ALL {
        for (_, r) in reports.iter().filter(|(b, _)| *b == a) {
            let _ = write!(s, "{:<10}", a.label());
            for x in &r.recall {
                let _ = write!(s, " | {:>8.2}", 100.0 * x.recall);
            }
            let _ = write!(s, " | {:>6.2}", 100.0 * r.mean_iou);
            match &r.histogram {
                Some(h) => {
                    let _ = writeln!(s, " | {:>11.3}", h.mass_from(0.8));
                }
                None => s.push_str(" |           -\n"),
            }
        }
    }
    Ok(s)
}
