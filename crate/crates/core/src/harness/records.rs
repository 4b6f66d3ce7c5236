use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Evaluation mode: the plain network, or the gated intuition layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    NoIntuition,
    Threshold(f64),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::NoIntuition => f.write_str("none"),
            Mode::Threshold(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            return Ok(Mode::NoIntuition);
        }
        match s.parse::<f64>() {
            Ok(t) if (0.0..=1.0).contains(&t) => Ok(Mode::Threshold(t)),
            _ => Err(HarnessError::Usage(format!(
                "mode must be `none` or a threshold in [0, 1], got `{s}`"
            ))),
        }
    }
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // the limits are exactly 0 and 1 at the extremes; avoid rounding there
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRecord {
    pub s: usize,
    pub mode: Mode,
    pub correct: usize,
    pub n: usize,
    /// Images that took the intuition path.
    pub activations: usize,
}

impl AccuracyRecord {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        wilson_interval(self.correct, self.n)
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    s: usize,
    mode: String,
    accuracy: String,
    n: usize,
    correct: usize,
    activations: usize,
    ci95_low: String,
    ci95_high: String,
}

/// Writes the records as CSV with a header row. Reals are printed with six
/// decimals so the file is stable across platforms.
pub fn write_records<W: Write>(w: W, records: &[AccuracyRecord]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        let (lo, hi) = r.interval();
        out.serialize(Row {
            s: r.s,
            mode: r.mode.to_string(),
            accuracy: format!("{:.6}", r.accuracy()),
            n: r.n,
            correct: r.correct,
            activations: r.activations,
            ci95_low: format!("{lo:.6}"),
            ci95_high: format!("{hi:.6}"),
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<AccuracyRecord>, HarnessError> {
    let mut input = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in input.deserialize() {
        let row: Row = row?;
        let mode = row.mode.parse().map_err(|_| HarnessError::Data(format!("bad mode `{}`", row.mode)))?;
        if row.correct > row.n || row.activations > row.n {
            return Err(HarnessError::Data(format!("row for s = {} has counts above n", row.s)));
        }
        out.push(AccuracyRecord {
            s: row.s,
            mode,
            correct: row.correct,
            n: row.n,
            activations: row.activations,
        });
    }
    Ok(out)
}

/// Table of no-intuition against threshold `t` accuracy, one row per `s`.
pub fn render_report(records: &[AccuracyRecord], t: f64) -> Result<String, HarnessError> {
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for r in records.iter().filter(|r| r.mode == Mode::NoIntuition) {
        let with = records
            .iter()
            .find(|o| o.s == r.s && o.mode == Mode::Threshold(t))
            .ok_or_else(|| HarnessError::Data(format!("no record for s = {} at threshold {t}", r.s)))?;
        rows.push((r.s, r.accuracy(), with.accuracy()));
    }
    if rows.is_empty() {
        return Err(HarnessError::Data("no no-intuition records".into()));
    }
    rows.sort_by_key(|r| r.0);
    let head = format!("Threshold: {t} (%)");
    let mut out = format!("{:>3}  {:>17}  {:>w$}  {:>8}\n", "s", "No Intuition (%)", head, "diff", w = head.len());
    for (s, none, with) in rows {
        out += &format!(
            "{s:>3}  {:>17.2}  {:>w$.2}  {:>+8.2}\n",
            100.0 * none,
            100.0 * with,
            100.0 * (with - none),
            w = head.len()
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_known_values() {
        // 50/100: center 0.5, half width 0.0961 (standard table value)
        let (lo, hi) = wilson_interval(50, 100);
        assert!((lo - 0.403_831).abs() < 1e-5, "{lo}");
        assert!((hi - 0.596_169).abs() < 1e-5, "{hi}");
        let (lo, hi) = wilson_interval(0, 10);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.277_54).abs() < 1e-4, "{hi}");
        let (lo, hi) = wilson_interval(10, 10);
        assert!((lo - 0.722_46).abs() < 1e-4);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn mode_round_trip() {
        for m in [Mode::NoIntuition, Mode::Threshold(0.9), Mode::Threshold(0.95), Mode::Threshold(0.0)] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("1.5".parse::<Mode>().is_err());
        assert!("off".parse::<Mode>().is_err());
    }

    fn sample() -> Vec<AccuracyRecord> {
        let mut v = Vec::new();
        for s in 0..3 {
            v.push(AccuracyRecord {
                s,
                mode: Mode::NoIntuition,
                correct: 90 - 10 * s,
                n: 100,
                activations: 0,
            });
            v.push(AccuracyRecord {
                s,
                mode: Mode::Threshold(0.9),
                correct: 88 - 5 * s,
                n: 100,
                activations: 10 + s,
            });
        }
        v
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_records(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s,mode,accuracy,n,correct,activations,ci95_low,ci95_high\n"));
        assert!(text.contains("\n2,0.9,0.780000,100,78,12,"));
        assert_eq!(read_records(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn report_rows() {
        let table = render_report(&sample(), 0.9).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("No Intuition (%)") && lines[0].contains("Threshold: 0.9 (%)"));
        assert!(lines[3].trim_start().starts_with('2'));
        assert!(lines[3].contains("70.00") && lines[3].contains("78.00") && lines[3].contains("+8.00"));
        assert!(render_report(&sample(), 0.5).is_err());
    }
}
