//! Equal error rate, normalized minimum tandem detection cost, accuracy,
//! and the score-file and report formats.
//!
//! Higher scores mean "more bonafide". At threshold `t` a spoof is falsely
//! accepted when `score ≥ t` and a bonafide is falsely rejected when
//! `score < t`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub label: Label,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(utt_id: impl Into<String>, label: Label, score: f64) -> Self {
        Self {
            utt_id: utt_id.into(),
            label,
            score,
        }
    }
}

/// False acceptance / rejection rates at every distinct score plus `+∞`.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub thresholds: Vec<f64>,
    pub far: Vec<f64>,
    pub frr: Vec<f64>,
}

fn split(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::invalid(format!("score for '{}' is not finite", r.utt_id)));
        }
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::invalid(format!(
            "need both classes, got {} bonafide and {} spoof",
            bona.len(),
            spoof.len()
        )));
    }
    Ok((bona, spoof))
}

/// Operating points at thresholds `t_1 < … < t_m` (the distinct scores)
/// followed by `+∞`, where everything is rejected.
pub fn sweep(records: &[ScoreRecord]) -> Result<Sweep> {
    let (mut bona, mut spoof) = split(records)?;
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let (mut ib, mut is) = (0usize, 0usize);
    let mut far = Vec::with_capacity(thresholds.len() + 1);
    let mut frr = Vec::with_capacity(thresholds.len() + 1);
    for &t in &thresholds {
        while ib < bona.len() && bona[ib] < t {
            ib += 1;
        }
        while is < spoof.len() && spoof[is] < t {
            is += 1;
        }
        frr.push(ib as f64 / nb);
        far.push((spoof.len() - is) as f64 / ns);
    }
    thresholds.push(f64::INFINITY);
    far.push(0.0);
    frr.push(1.0);
    Ok(Sweep { thresholds, far, frr })
}

/// Locates the FAR/FRR crossing on a sweep: the first point with
/// `FAR ≤ FRR`, linearly interpolated against the previous point.
pub fn crossing(s: &Sweep) -> (f64, f64) {
    let k = (0..s.far.len())
        .find(|&k| s.far[k] - s.frr[k] <= 0.0)
        .expect("sweep ends with FAR 0, FRR 1");
    let dk = s.far[k] - s.frr[k];
    if k == 0 || dk == 0.0 {
        let t = if s.thresholds[k].is_finite() { s.thresholds[k] } else { s.thresholds[k - 1] };
        return (s.far[k], t);
    }
    let dp = s.far[k - 1] - s.frr[k - 1];
    let lam = dp / (dp - dk);
    let eer = s.far[k - 1] + lam * (s.far[k] - s.far[k - 1]);
    let (t0, t1) = (s.thresholds[k - 1], s.thresholds[k]);
    let t = if t1.is_finite() { t0 + lam * (t1 - t0) } else { t0 };
    (eer, t)
}

/// `(EER, threshold)`.
pub fn eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    Ok(crossing(&sweep(records)?))
}

/// Cost model of a countermeasure placed in front of a fixed speaker
/// verification system. Priors cover target, non-target and spoof trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfCosts {
    pub p_target: f64,
    pub p_nontarget: f64,
    pub p_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    /// Verification miss rate on target trials at its operating point.
    pub asv_miss: f64,
    /// Verification false-alarm rate on non-target trials.
    pub asv_fa: f64,
    /// Verification miss rate on spoof trials.
    pub asv_spoof_miss: f64,
}

impl Default for TdcfCosts {
    fn default() -> Self {
        Self {
            p_target: 0.95 * 0.99,
            p_nontarget: 0.95 * 0.01,
            p_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            asv_miss: 0.01,
            asv_fa: 0.01,
            asv_spoof_miss: 0.10,
        }
    }
}

impl TdcfCosts {
    /// `(C1, C2)`: weights of the countermeasure miss and false-alarm rates.
    pub fn coefficients(&self) -> (f64, f64) {
        let c1 = self.p_target * (self.c_miss_cm - self.c_miss_asv * self.asv_miss)
            - self.p_nontarget * self.c_fa_asv * self.asv_fa;
        let c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.asv_spoof_miss);
        (c1, c2)
    }

    pub fn validate(&self) -> Result<()> {
        let priors = [self.p_target, self.p_nontarget, self.p_spoof];
        if priors.iter().any(|p| !(0.0..=1.0).contains(p)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("priors {priors:?} must lie in [0, 1] and sum to 1")));
        }
        let costs = [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm];
        if costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::invalid(format!("costs {costs:?} must be positive")));
        }
        let rates = [self.asv_miss, self.asv_fa, self.asv_spoof_miss];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid(format!("verification rates {rates:?} must lie in [0, 1]")));
        }
        let (c1, c2) = self.coefficients();
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::invalid(format!(
                "cost model is degenerate: C1 = {c1}, C2 = {c2} (both must be positive)"
            )));
        }
        Ok(())
    }
}

/// `min_t (C1·P_miss(t) + C2·P_fa(t)) / min(C1, C2)` over the full sweep.
pub fn min_tdcf(records: &[ScoreRecord], costs: &TdcfCosts) -> Result<f64> {
    costs.validate()?;
    let s = sweep(records)?;
    let (c1, c2) = costs.coefficients();
    let norm = c1.min(c2);
    Ok(s.frr
        .iter()
        .zip(&s.far)
        .map(|(miss, fa)| (c1 * miss + c2 * fa) / norm)
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of records with `(score ≥ threshold) == bonafide`; 0 when empty.
pub fn accuracy(records: &[ScoreRecord], threshold: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| (r.score >= threshold) == r.label.is_bonafide())
        .count();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub accuracy: f64,
    pub accuracy_threshold: f64,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

impl MetricsReport {
    pub fn compute(records: &[ScoreRecord], costs: &TdcfCosts, accuracy_threshold: f64) -> Result<Self> {
        let (eer_value, eer_threshold) = eer(records)?;
        Ok(Self {
            eer: eer_value,
            eer_threshold,
            min_tdcf: min_tdcf(records, costs)?,
            accuracy: accuracy(records, accuracy_threshold),
            accuracy_threshold,
            n_bonafide: records.iter().filter(|r| r.label.is_bonafide()).count(),
            n_spoof: records.iter().filter(|r| !r.label.is_bonafide()).count(),
        })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "eer={}", self.eer);
        let _ = writeln!(s, "eer_threshold={}", self.eer_threshold);
        let _ = writeln!(s, "min_tdcf={}", self.min_tdcf);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "accuracy_threshold={}", self.accuracy_threshold);
        let _ = writeln!(s, "n_bonafide={}", self.n_bonafide);
        let _ = writeln!(s, "n_spoof={}", self.n_spoof);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("report is missing '{key}'")))
        };
        let num = |v: String| v.parse::<f64>().map_err(|e| Error::Format(format!("bad number '{v}': {e}")));
        let int = |v: String| v.parse::<usize>().map_err(|e| Error::Format(format!("bad count '{v}': {e}")));
        Ok(Self {
            eer: num(get("eer")?)?,
            eer_threshold: num(get("eer_threshold")?)?,
            min_tdcf: num(get("min_tdcf")?)?,
            accuracy: num(get("accuracy")?)?,
            accuracy_threshold: num(get("accuracy_threshold")?)?,
            n_bonafide: int(get("n_bonafide")?)?,
            n_spoof: int(get("n_spoof")?)?,
        })
    }
}

/// `utt_id<TAB>label<TAB>score` per line; scores use the shortest decimal
/// form that parses back to the same value.
pub fn write_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}", r.utt_id, r.label, r.score);
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let at = |msg: String| Error::Format(format!("{}:{}: {msg}", path.display(), n + 1));
        if cols.len() != 3 {
            return Err(at(format!("expected 3 columns, found {}", cols.len())));
        }
        let label = cols[1].parse::<Label>().map_err(|e| at(e.to_string()))?;
        let score = cols[2]
            .parse::<f64>()
            .map_err(|e| at(format!("bad score '{}': {e}", cols[2])))?;
        if !score.is_finite() {
            return Err(at(format!("score '{}' is not finite", cols[2])));
        }
        out.push(ScoreRecord::new(cols[0], label, score));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn records(bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
        let mut v: Vec<ScoreRecord> = bona
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRecord::new(format!("b{i}"), Label::Bonafide, s))
            .collect();
        v.extend(
            spoof
                .iter()
                .enumerate()
                .map(|(i, &s)| ScoreRecord::new(format!("s{i}"), Label::Spoof, s)),
        );
        v
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&records(&[0.9, 0.8, 0.7], &[0.6, 0.5, 0.4])).unwrap().0, 0.0);
        let (e, t) = eer(&records(&[0.8, 0.4], &[0.6, 0.2])).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
        assert_eq!(t, 0.6);
        assert_eq!(eer(&records(&[0.2], &[0.8])).unwrap().0, 1.0);
        assert!(eer(&records(&[0.2], &[])).is_err());
        assert!(eer(&records(&[f64::NAN], &[0.1])).is_err());
    }

    #[test]
    fn eer_interpolates_between_points() {
        let r = records(&[1.0, 3.0, 4.0], &[2.0, 0.5]);
        let s = sweep(&r).unwrap();
        let (e, _) = crossing(&s);
        assert!(e > 0.0 && e < 1.0);
        // hand check: t=2 → FAR 0.5, FRR 1/3; t=3 → FAR 0, FRR 1/3
        // d: 1/6 then −1/3 → λ = 1/3 → EER = 0.5 − 0.5/3 = 1/3
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tdcf_bounds_and_separation() {
        let costs = TdcfCosts::default();
        costs.validate().unwrap();
        assert_eq!(min_tdcf(&records(&[2.0, 3.0], &[0.0, 1.0]), &costs).unwrap(), 0.0);
        let v = min_tdcf(&records(&[0.1, 0.5, 0.3], &[0.4, 0.2, 0.6]), &costs).unwrap();
        assert!((0.0..=1.0).contains(&v));
        let bad = TdcfCosts {
            p_spoof: 0.5,
            ..costs
        };
        assert!(min_tdcf(&records(&[1.0], &[0.0]), &bad).is_err());
        let degenerate = TdcfCosts {
            asv_spoof_miss: 1.0,
            ..costs
        };
        assert!(degenerate.validate().is_err());
    }

    #[test]
    fn accuracy_counts() {
        let r = records(&[1.0, 2.0], &[-1.0, -2.0]);
        assert_eq!(accuracy(&r, 0.0), 1.0);
        let inv = records(&[-1.0, -2.0], &[1.0, 2.0]);
        assert_eq!(accuracy(&inv, 0.0), 0.0);
        let three = records(&[1.0, 2.0], &[-1.0, 0.5]);
        assert_eq!(accuracy(&three, 0.0), 0.75);
        assert_eq!(accuracy(&[], 0.0), 0.0);
        // ties accept
        assert_eq!(accuracy(&records(&[0.0], &[]), 0.0), 1.0);
    }

    #[test]
    fn score_file_and_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = records(&[0.1 + 0.2, 1e-300, -3.5], &[std::f64::consts::PI, -0.0]);
        let p = dir.path().join("scores.tsv");
        write_scores(&p, &r).unwrap();
        assert_eq!(read_scores(&p).unwrap(), r);

        let rep = MetricsReport::compute(&r, &TdcfCosts::default(), 0.0).unwrap();
        assert_eq!(MetricsReport::parse(&rep.to_text()).unwrap(), rep);
        assert!(MetricsReport::parse("eer=0.1\n").is_err());

        fs::write(&p, "a\tbonafide\n").unwrap();
        assert!(read_scores(&p).is_err());
        fs::write(&p, "a\tbonafide\tinf\n").unwrap();
        assert!(read_scores(&p).is_err());
    }
}
