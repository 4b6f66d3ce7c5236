use std::io::Write;

use super::records::{AccuracyRecord, Mode};
use super::HarnessError;
use crate::cnn::CnnModel;
use crate::dataset::DeficientSet;
use crate::intuition::{InferencePath, IntuitionLayer};

/// Per-image predictions of one set under every evaluated mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPredictions {
    pub s: usize,
    pub labels: Vec<u8>,
    /// `[mode][image]`, modes in evaluation order.
    pub predicted: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub modes: Vec<Mode>,
    pub records: Vec<AccuracyRecord>,
    pub predictions: Vec<SetPredictions>,
}

/// Scores every set under the no-intuition mode and each threshold.
///
/// Each image runs the standard network once; the intuition path runs at most
/// once, and only when the gate opens at the largest threshold.
pub fn evaluate(
    sets: &[DeficientSet],
    model: &CnnModel,
    layer: Option<&IntuitionLayer<'_>>,
    thresholds: &[f64],
) -> Result<Evaluation, HarnessError> {
    if !thresholds.is_empty() && layer.is_none() {
        return Err(HarnessError::Usage("thresholds need a memory layer".into()));
    }
    let modes: Vec<Mode> = std::iter::once(Mode::NoIntuition)
        .chain(thresholds.iter().map(|&t| Mode::Threshold(t)))
        .collect();
    let up_to = thresholds.iter().copied().fold(0.0, f64::max);

    let mut records = Vec::new();
    let mut predictions = Vec::new();
    for set in sets {
        let n = set.images.len();
        let mut correct = vec![0usize; modes.len()];
        let mut activations = vec![0usize; modes.len()];
        let mut predicted = vec![Vec::with_capacity(n); modes.len()];
        for img in &set.images {
            let label = img.label() as usize;
            let mut push = |m: usize, class: usize, intuition: bool| {
                predicted[m].push(class as u8);
                correct[m] += usize::from(class == label);
                activations[m] += usize::from(intuition);
            };
            match layer {
                None => push(0, model.forward_full(img)?.predicted(), false),
                Some(layer) => {
                    let analysis = layer.analyze(img, up_to)?;
                    push(0, analysis.standard.predicted(), false);
                    for (m, &t) in thresholds.iter().enumerate() {
                        let d = analysis.decide(t, layer.options())?;
                        push(m + 1, d.predicted(), d.path == InferencePath::Intuition);
                    }
                }
            }
        }
        for (m, &mode) in modes.iter().enumerate() {
            records.push(AccuracyRecord {
                s: set.s,
                mode,
                correct: correct[m],
                n,
                activations: activations[m],
            });
        }
        log::info!(
            "s = {:2}: no intuition {:.2}%",
            set.s,
            100.0 * correct[0] as f64 / n.max(1) as f64
        );
        predictions.push(SetPredictions {
            s: set.s,
            labels: set.images.iter().map(|i| i.label()).collect(),
            predicted,
        });
    }
    Ok(Evaluation {
        modes,
        records,
        predictions,
    })
}

impl Evaluation {
    /// Records for the requested modes only, in set order.
    pub fn records_for(&self, modes: &[Mode]) -> Vec<AccuracyRecord> {
        self.records.iter().filter(|r| modes.contains(&r.mode)).cloned().collect()
    }

    /// Predictions of one mode across all sets, `[set][image]`.
    pub fn predictions_for(&self, mode: Mode) -> Option<Vec<&[u8]>> {
        let m = self.modes.iter().position(|&x| x == mode)?;
        Some(self.predictions.iter().map(|p| p.predicted[m].as_slice()).collect())
    }

    /// One CSV row per (set, image): `s,index,label,<mode>...`.
    pub fn write_predictions<W: Write>(&self, modes: &[Mode], w: W) -> Result<(), HarnessError> {
        let cols: Vec<usize> = modes
            .iter()
            .map(|m| {
                self.modes
                    .iter()
                    .position(|x| x == m)
                    .ok_or_else(|| HarnessError::Usage(format!("mode {m} was not evaluated")))
            })
            .collect::<Result<_, _>>()?;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["s".to_string(), "index".into(), "label".into()];
        header.extend(modes.iter().map(|m| m.to_string()));
        out.write_record(&header)?;
        for set in &self.predictions {
            for (i, label) in set.labels.iter().enumerate() {
                let mut row = vec![set.s.to_string(), i.to_string(), label.to_string()];
                row.extend(cols.iter().map(|&c| set.predicted[c][i].to_string()));
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Logs thresholds whose activation count drops by more than 2% of `n` as
/// `s` grows. More deficiency should mean more gating; this is a soft check.
pub fn check_activation_trend(records: &[AccuracyRecord]) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut by_mode: Vec<(f64, Vec<&AccuracyRecord>)> = Vec::new();
    for r in records {
        if let Mode::Threshold(t) = r.mode {
            match by_mode.iter_mut().find(|(x, _)| *x == t) {
                Some((_, v)) => v.push(r),
                None => by_mode.push((t, vec![r])),
            }
        }
    }
    for (t, mut rs) in by_mode {
        rs.sort_by_key(|r| r.s);
        for w in rs.windows(2) {
            let slack = 0.02 * w[1].n as f64;
            if (w[1].activations as f64) < w[0].activations as f64 - slack {
                warnings.push(format!(
                    "threshold {t}: activations fall from {} at s = {} to {} at s = {}",
                    w[0].activations, w[0].s, w[1].activations, w[1].s
                ));
            }
        }
    }
    warnings
}
