//! Confusion-matrix accumulation, OA/AA/Kappa, and classification-map
//! rendering.

use crate::error::{Error, Result};

/// K x K counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn accumulate(&mut self, true_label: usize, predicted: usize) -> Result<()> {
        if true_label >= self.classes || predicted >= self.classes {
            return Err(Error::LabelOutOfRange {
                index: 0,
                value: true_label.max(predicted),
                num_classes: self.classes,
            });
        }
        self.counts[true_label * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, true_label: usize, predicted: usize) -> u64 {
        self.counts[true_label * self.classes + predicted]
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("confusion_matrix", "rows must be square"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    /// Elementwise merge of a shard; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merge: class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }

    /// Comma-separated rows of counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|j| self.get(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Metrics stored as unit-interval values; the text report displays x100.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Per-class recall; NaN for classes with no true samples (these are
    /// excluded from AA).
    pub per_class: Vec<f64>,
    pub total: u64,
}

impl MetricsReport {
    /// One metric per line, values x100 to two decimals.
    pub fn to_report_text(&self) -> String {
        let per_class: Vec<String> = self
            .per_class
            .iter()
            .map(|v| {
                if v.is_nan() {
                    "-".to_string()
                } else {
                    format!("{:.2}", v * 100.0)
                }
            })
            .collect();
        format!(
            "oa: {:.2}\naa: {:.2}\nkappa: {:.2}\nper_class: {}\n",
            self.oa * 100.0,
            self.aa * 100.0,
            self.kappa * 100.0,
            per_class.join(" ")
        )
    }
}

/// OA, AA over nonempty classes, and Cohen's kappa.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("compute_metrics", "empty confusion matrix"));
    }
    let n = total as f64;
    let oa = cm.trace() as f64 / n;
    let mut per_class = Vec::with_capacity(cm.classes());
    let mut aa_sum = 0.0;
    let mut aa_count = 0usize;
    for k in 0..cm.classes() {
        let row = cm.row_sum(k);
        if row == 0 {
            per_class.push(f64::NAN);
        } else {
            let recall = cm.get(k, k) as f64 / row as f64;
            per_class.push(recall);
            aa_sum += recall;
            aa_count += 1;
        }
    }
    let aa = aa_sum / aa_count as f64;
    let pe: f64 = (0..cm.classes())
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    // pe == 1 only in degenerate single-cell cases; dividing would be 0/0.
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        if (oa - 1.0).abs() < 1e-15 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(MetricsReport {
        oa,
        aa,
        kappa,
        per_class,
        total,
    })
}

/// Full-saturation hue for class k in 1..=K via the standard hue-sector
/// conversion; channels rounded half-up.
pub fn class_color(class: u16, classes: usize) -> [u8; 3] {
    debug_assert!(class >= 1 && (class as usize) <= classes);
    let hue = (class as f64 - 1.0) * 360.0 / classes as f64;
    let sector = hue / 60.0;
    let x = 1.0 - ((sector % 2.0) - 1.0).abs();
    let (r, g, b) = match sector as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |v: f64| (v * 255.0 + 0.5).floor() as u8;
    [q(r), q(g), q(b)]
}

/// Render a class grid as a binary portable pixmap (P6). Class 0 is black;
/// classes 1..=K get evenly spaced hues.
pub fn render_map(grid: &[u16], width: usize, height: usize, classes: usize) -> Result<Vec<u8>> {
    if grid.len() != width * height {
        return Err(Error::shape(
            "render_map",
            format!("{} values for {width}x{height} grid", grid.len()),
        ));
    }
    for &v in grid {
        if v as usize > classes {
            return Err(Error::invalid(
                "render_map",
                format!("class value {v} exceeds {classes}"),
            ));
        }
    }
    let mut out = Vec::with_capacity(32 + 3 * width * height);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    for &v in grid {
        if v == 0 {
            out.extend_from_slice(&[0, 0, 0]);
        } else {
            out.extend_from_slice(&class_color(v, classes));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_basics() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(1, 1).unwrap();
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.total(), 1);
        cm.accumulate(0, 2).unwrap();
        assert_eq!(cm.total(), 2);
        assert!(cm.accumulate(3, 0).is_err());

        // Order independence.
        let mut a = ConfusionMatrix::new(2);
        let mut b = ConfusionMatrix::new(2);
        for (t, p) in [(0, 1), (1, 1), (0, 0)] {
            a.accumulate(t, p).unwrap();
        }
        for (t, p) in [(0, 0), (0, 1), (1, 1)] {
            b.accumulate(t, p).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn diagonal_matrix_is_perfect() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 3]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.aa, 1.0);
        assert_eq!(m.kappa, 1.0);
    }

    #[test]
    fn uniform_matrix_has_zero_kappa() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert!((m.oa - 0.5).abs() < 1e-15);
        assert!(m.kappa.abs() < 1e-15);
    }

    #[test]
    fn hand_case_3124() {
        // [[3,1],[2,4]]: oa 0.7, aa (0.75 + 4/6)/2, pe 0.5, kappa 0.4
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert!((m.oa - 0.7).abs() < 1e-15);
        assert!((m.aa - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((m.kappa - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = ConfusionMatrix::new(2);
        assert!(compute_metrics(&cm).is_err());
    }

    #[test]
    fn report_text_displays_x100() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        let text = m.to_report_text();
        assert!(text.starts_with("oa: 70.00\n"), "{text}");
        assert!(text.contains("kappa: 40.00"), "{text}");
        assert!(text.contains("per_class: 75.00 66.67"), "{text}");
    }

    #[test]
    fn render_single_black_pixel() {
        let bytes = render_map(&[0], 1, 1, 4).unwrap();
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 0, 0]);
    }

    #[test]
    fn render_class1_of_6_is_red() {
        assert_eq!(class_color(1, 6), [255, 0, 0]);
        // hue 60 -> yellow
        assert_eq!(class_color(2, 6), [255, 255, 0]);
    }

    #[test]
    fn render_length_and_range_check() {
        let grid: Vec<u16> = vec![0, 1, 2, 3, 4, 5];
        let bytes = render_map(&grid, 3, 2, 5).unwrap();
        let header_len = b"P6\n3 2\n255\n".len();
        assert_eq!(bytes.len(), header_len + 3 * 6);
        assert!(render_map(&[7], 1, 1, 5).is_err());
    }
}
