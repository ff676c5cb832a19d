use std::fmt::Write as _;

use super::metrics::PrecisionRecall;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub modality: String,
    pub class: Option<usize>,
    pub value: f64,
}

/// Flat metric table plus the config digest it was computed under.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub config_digest: String,
}

impl MetricReport {
    pub fn push(&mut self, metric: &str, modality: &str, class: Option<usize>, value: f64) {
        self.rows.push(MetricRow { metric: metric.into(), modality: modality.into(), class, value });
    }

    /// Per-class and macro rows for one precision/recall table.
    pub fn push_precision_recall(&mut self, prefix: &str, modality: &str, pr: &PrecisionRecall) {
        for s in &pr.per_class {
            if let Some(p) = s.precision {
                self.push(&format!("{prefix}_precision"), modality, Some(s.class), p);
            }
            if let Some(r) = s.recall {
                self.push(&format!("{prefix}_recall"), modality, Some(s.class), r);
            }
        }
        self.push(&format!("{prefix}_precision"), modality, None, pr.macro_precision);
        self.push(&format!("{prefix}_recall"), modality, None, pr.macro_recall);
        self.push(&format!("{prefix}_accuracy"), modality, None, pr.accuracy);
        self.push(&format!("{prefix}_count"), modality, None, pr.count as f64);
    }

    pub fn get(&self, metric: &str, modality: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.modality == modality && r.class.is_none())
            .map(|r| r.value)
    }

    /// `metric,modality,class,value`; macro rows use class `all`. Values are
    /// printed with round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,modality,class,value\n");
        for r in &self.rows {
            let class = r.class.map_or_else(|| "all".to_string(), |c| c.to_string());
            writeln!(s, "{},{},{},{:?}", r.metric, r.modality, class, r.value).unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("metric report (config {})\n", self.config_digest);
        for r in self.rows.iter().filter(|r| r.class.is_none()) {
            writeln!(s, "  {:<28} {:<12} {:.4}", r.metric, r.modality, r.value).unwrap();
        }
        s
    }
}
