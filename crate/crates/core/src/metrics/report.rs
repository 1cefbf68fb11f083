use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::moments::MomentDistance;
use super::probes::{FidelityResult, RecoverabilityResult};
use crate::metadata::AttributeKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    pub ssim: f64,
    pub psnr: f64,
}

/// Collected evaluation outputs, emitted as JSON or a plain-text table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairScore>,
    pub mean_ssim: Option<f64>,
    pub mean_psnr: Option<f64>,
    pub moment_distance: Option<MomentDistance>,
    pub recoverability: Vec<RecoverabilityResult>,
    pub fidelity: Vec<FidelityResult>,
}

impl MetricReport {
    pub fn push_pair(&mut self, pair: PairScore) {
        self.pairs.push(pair);
        let n = self.pairs.len() as f64;
        self.mean_ssim = Some(self.pairs.iter().map(|p| p.ssim).sum::<f64>() / n);
        self.mean_psnr = Some(self.pairs.iter().map(|p| p.psnr).sum::<f64>() / n);
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if !self.pairs.is_empty() {
            let _ = writeln!(s, "{:<24} {:>8} {:>8}", "pair", "ssim", "psnr");
            for p in &self.pairs {
                let _ = writeln!(s, "{:<24} {:>8.4} {:>8.2}", p.id, p.ssim, p.psnr);
            }
            let _ = writeln!(
                s,
                "{:<24} {:>8.4} {:>8.2}",
                "mean",
                self.mean_ssim.unwrap_or(f64::NAN),
                self.mean_psnr.unwrap_or(f64::NAN)
            );
        }
        if let Some(m) = &self.moment_distance {
            let ridge = if m.ridge_applied { " (ridge applied)" } else { "" };
            let _ = writeln!(s, "moment distance: {:.6}{ridge}", m.value);
        }
        if !self.recoverability.is_empty() {
            let _ = write!(s, "{:<10} {:>7}", "fusion", "missing");
            for k in AttributeKind::ALL {
                let _ = write!(s, " {:>9}", k.name());
            }
            s.push('\n');
            for r in &self.recoverability {
                let _ = write!(s, "{:<10} {:>7}", format!("{:?}", r.fusion).to_lowercase(), r.missing);
                for m in r.mae {
                    let _ = write!(s, " {:>9.3}", m);
                }
                s.push('\n');
            }
        }
        for f in &self.fidelity {
            let _ = writeln!(
                s,
                "fidelity {} -> {:?}: spearman {:.3} (pooled {:.3})",
                f.attribute, f.statistic, f.spearman, f.pooled
            );
        }
        s
    }
}
