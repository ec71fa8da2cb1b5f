//! Plain-text result tables.

use sparsemod::trainer::{samples_to_threshold, MetricsRecord};

use crate::config::SummarySection;

/// Column-aligned text table.
#[derive(Debug, Clone, Default)]
pub struct TextTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for i in 0..cols {
                let c = cells.get(i).map(String::as_str).unwrap_or("");
                if i > 0 {
                    s.push_str(" | ");
                }
                s.push_str(c);
                s.extend(std::iter::repeat_n(' ', width[i] - c.chars().count()));
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub fn pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.1}%", 100.0 * v),
        None => "-".into(),
    }
}

pub fn samples(x: Option<u64>) -> String {
    match x {
        None => "never".into(),
        Some(s) if s >= 1_000_000 => format!("{:.2}M", s as f64 / 1e6),
        Some(s) if s >= 1_000 => format!("{:.1}k", s as f64 / 1e3),
        Some(s) => s.to_string(),
    }
}

/// Headline numbers of one finished run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunSummary {
    pub n_terms: usize,
    pub q: u64,
    pub mse: f64,
    pub acc_05: Option<f64>,
    pub acc_1: Option<f64>,
    pub samples_to_threshold: Option<u64>,
    pub final_step: u64,
}

impl RunSummary {
    pub fn from_history(n_terms: usize, q: u64, history: &[MetricsRecord], bars: &SummarySection) -> Option<Self> {
        let last = history.last()?;
        Some(Self {
            n_terms,
            q,
            mse: last.eval_mse,
            acc_05: last.accuracy_at(0.005),
            acc_1: last.accuracy_at(0.01),
            samples_to_threshold: samples_to_threshold(history, bars.loss_bar, bars.acc_bar, bars.tau),
            final_step: last.step,
        })
    }

    pub fn table(&self, bars: &SummarySection) -> String {
        let mut t = TextTable::new([
            "N".to_string(),
            "q".into(),
            "MSE".into(),
            "τ=0.5% Accuracy".into(),
            "τ=1% Accuracy".into(),
            format!("samples to loss<{} and {}", bars.loss_bar, pct(Some(bars.acc_bar))),
        ]);
        t.push(vec![
            self.n_terms.to_string(),
            self.q.to_string(),
            format!("{:.2}", self.mse),
            pct(self.acc_05),
            pct(self.acc_1),
            samples(self.samples_to_threshold),
        ]);
        t.render()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_line_up() {
        let mut t = TextTable::new(["N", "accuracy"]);
        t.push(vec!["128".into(), "9.0%".into()]);
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "N   | accuracy");
        assert_eq!(lines[1], "----+---------");
        assert_eq!(lines[2], "128 | 9.0%");
    }

    #[test]
    fn sample_counts_are_abbreviated() {
        assert_eq!(samples(Some(600_000)), "600.0k");
        assert_eq!(samples(Some(4_500_000)), "4.50M");
        assert_eq!(samples(None), "never");
    }
}
