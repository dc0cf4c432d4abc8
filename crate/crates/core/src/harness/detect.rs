//! Correlation-threshold event detection over class signatures.

use serde::{Deserialize, Serialize};

use crate::flow::{ClassSignatureBank, SyntheticLatent};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedEvent {
    pub category: String,
    pub onset: f64,
    pub offset: f64,
    pub confidence: f64,
}

impl DetectedEvent {
    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Projects every frame onto each known signature, marks frames whose
/// projection reaches `threshold` and merges consecutive marked frames into
/// one segment per run. Output is ordered by onset, then label.
pub fn detect_events(latent: &SyntheticLatent, bank: &ClassSignatureBank, threshold: f64) -> Vec<DetectedEvent> {
    let frames = latent.frames();
    let width = latent.frame_width();
    let mut out = Vec::new();
    for label in bank.labels() {
        let sig = bank.get(label).expect("label from bank");
        let proj: Vec<f64> = (0..frames).map(|t| latent.x.row(t).iter().zip(sig).map(|(a, b)| a * b).sum()).collect();
        let mut t = 0;
        while t < frames {
            if proj[t] >= threshold {
                let start = t;
                while t < frames && proj[t] >= threshold {
                    t += 1;
                }
                let mean = proj[start..t].iter().sum::<f64>() / (t - start) as f64;
                out.push(DetectedEvent {
                    category: label.to_string(),
                    onset: start as f64 * width,
                    offset: if t == frames { latent.clip_duration } else { t as f64 * width },
                    confidence: mean.clamp(0.0, 1.0),
                });
            } else {
                t += 1;
            }
        }
    }
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.category.cmp(&b.category)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_rng;
    use crate::flow::synth_target;
    use crate::tensor::Matrix;
    use crate::timeline::{EventSpec, Timeline};

    #[test]
    fn single_clean_event_is_found_within_a_frame() {
        let bank = ClassSignatureBank::new(2, 16, &["dog", "cat", "car"]);
        let tl = Timeline::new(10.0, vec![EventSpec::new("cat", 2.03, 4.71, 1.0)]).unwrap();
        let latent = synth_target(&tl, &bank, 64, 0.0, &mut init_rng(0));
        let det = detect_events(&latent, &bank, DEFAULT_THRESHOLD);
        assert_eq!(det.len(), 1);
        assert_eq!(det[0].category, "cat");
        let w = latent.frame_width();
        assert!((det[0].onset - 2.03).abs() <= w && (det[0].offset - 4.71).abs() <= w);
    }

    #[test]
    fn silence_and_high_thresholds_detect_nothing() {
        let bank = ClassSignatureBank::new(2, 16, &["dog"]);
        let zero = SyntheticLatent { x: Matrix::zeros(64, 16), clip_duration: 10.0 };
        assert!(detect_events(&zero, &bank, DEFAULT_THRESHOLD).is_empty());
        let tl = Timeline::new(10.0, vec![EventSpec::new("dog", 1.0, 4.0, 1.0)]).unwrap();
        let latent = synth_target(&tl, &bank, 64, 0.0, &mut init_rng(0));
        assert!(detect_events(&latent, &bank, 1.0 + 1e-9).is_empty());
    }
}
