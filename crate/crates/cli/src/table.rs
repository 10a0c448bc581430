use fedbt_core::eval::{mean_sd, FoldReport, METRIC_NAMES};

/// `96.06±0.57`: a fraction's mean and SD as percentages.
pub fn format_pm(mean: f64, sd: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * sd)
}

/// Mean and SD of each metric over the per-fold GTA values, recomputed from
/// the fold records rather than read from the report's summary.
pub fn recompute(report: &FoldReport) -> [(f64, f64); 4] {
    let mut out = [(0.0, 0.0); 4];
    for (m, slot) in out.iter_mut().enumerate() {
        let column: Vec<f64> = report.folds.iter().map(|f| f.gta.values()[m]).collect();
        *slot = mean_sd(&column);
    }
    out
}

/// One row per run, one `mean±SD` column per metric.
pub fn render(rows: &[(String, FoldReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:width$}", "Method");
    for name in METRIC_NAMES {
        out += &format!("  {name:>13}");
    }
    out += "\n";
    for (name, report) in rows {
        out += &format!("{name:width$}");
        for (mean, sd) in recompute(report) {
            out += &format!("  {:>13}", format_pm(mean, sd));
        }
        out += "\n";
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_style_formatting() {
        assert_eq!(format_pm(0.9606, 0.0057), "96.06±0.57");
        assert_eq!(format_pm(1.0, 0.0), "100.00±0.00");
    }
}
