//! Detection metrics over countermeasure scores (higher means bonafide).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::data::{Key, ProtocolEntry};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    pub key: Key,
}

/// Pre-normalised coefficients of `C0 + C1·Pmiss + C2·Pfa`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl CostCoefficients {
    pub fn new(c0: f64, c1: f64, c2: f64) -> Result<Self> {
        let c = Self { c0, c1, c2 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.c0, self.c1, self.c2];
        if !all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config(format!(
                "t-DCF coefficients must be finite and nonnegative, got {all:?}"
            )));
        }
        if self.c1 == 0.0 && self.c2 == 0.0 {
            return Err(Error::Config("t-DCF needs C1 > 0 or C2 > 0".into()));
        }
        Ok(())
    }

    fn cost(&self, p: &DetPoint) -> f64 {
        self.c0 + self.c1 * p.p_miss() + self.c2 * p.p_fa()
    }
}

/// One operating point: bonafide below `threshold` are misses, spoofs at or
/// above it are false alarms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub misses: usize,
    pub false_alarms: usize,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

impl DetPoint {
    pub fn p_miss(&self) -> f64 {
        self.misses as f64 / self.n_bonafide as f64
    }

    pub fn p_fa(&self) -> f64 {
        self.false_alarms as f64 / self.n_spoof as f64
    }

    /// `|Pmiss − Pfa|` scaled by `n_bonafide·n_spoof`, exact in integers.
    fn gap(&self) -> u128 {
        let a = self.misses as u128 * self.n_spoof as u128;
        let b = self.false_alarms as u128 * self.n_bonafide as u128;
        a.abs_diff(b)
    }
}

/// Operating points at `−∞`, every distinct score and `+∞`, in increasing
/// threshold order.
pub fn det_sweep(records: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    let mut bona: Vec<f64> = Vec::new();
    let mut spoof: Vec<f64> = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite(format!("score of {}", r.id)));
        }
        match r.key {
            Key::Bonafide => bona.push(r.score),
            Key::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Data(format!(
            "metrics need both classes: {} bonafide and {} spoof scores",
            bona.len(),
            spoof.len()
        )));
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nb, ns) = (bona.len(), spoof.len());
    let point = |threshold, misses, false_alarms| DetPoint {
        threshold,
        misses,
        false_alarms,
        n_bonafide: nb,
        n_spoof: ns,
    };
    let mut out = Vec::with_capacity(thresholds.len() + 2);
    out.push(point(f64::NEG_INFINITY, 0, ns));
    let (mut bi, mut si) = (0, 0);
    for &t in &thresholds {
        while bi < nb && bona[bi] < t {
            bi += 1;
        }
        while si < ns && spoof[si] < t {
            si += 1;
        }
        out.push(point(t, bi, ns - si));
    }
    out.push(point(f64::INFINITY, nb, 0));
    Ok(out)
}

/// Equal error rate `(Pmiss + Pfa)/2` at the point minimising
/// `|Pmiss − Pfa|`, with its threshold.  Ties go to the lower threshold.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let sweep = det_sweep(records)?;
    let best = sweep
        .iter()
        .reduce(|best, p| if p.gap() < best.gap() { p } else { best })
        .expect("sweep has sentinels");
    Ok(((best.p_miss() + best.p_fa()) / 2.0, best.threshold))
}

/// Minimum of `C0 + C1·Pmiss + C2·Pfa` over all sweep thresholds.
pub fn compute_min_tdcf(records: &[ScoreRecord], coeffs: &CostCoefficients) -> Result<f64> {
    coeffs.validate()?;
    let sweep = det_sweep(records)?;
    Ok(sweep.iter().map(|p| coeffs.cost(p)).fold(f64::INFINITY, f64::min))
}

/// `(minimum, mean)` of a metric where lower is better.
pub fn best_avg(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Data("best/avg of an empty list".into()));
    }
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let avg = values.iter().sum::<f64>() / values.len() as f64;
    Ok((best, avg))
}

/// Score file text: `<id> <score>` with six decimals, sorted by id.
pub fn format_scores(scores: &[(String, f64)]) -> String {
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    sorted.iter().map(|(id, s)| format!("{id} {s:.6}\n")).collect()
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, f64)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |detail: String| Error::Data(format!("score line {}: {detail}", i + 1));
        match fields.as_slice() {
            [] => continue,
            [id, score] => {
                let score: f64 = score
                    .parse()
                    .map_err(|_| bad(format!("cannot parse score {score:?}")))?;
                if !score.is_finite() {
                    return Err(bad(format!("non-finite score for {id}")));
                }
                if !seen.insert(id.to_string()) {
                    return Err(bad(format!("duplicate utterance id {id:?}")));
                }
                out.push((id.to_string(), score));
            }
            _ => return Err(bad(format!("expected `<utt_id> <score>`, found {} fields", fields.len()))),
        }
    }
    Ok(out)
}

pub fn write_scores(path: &Path, scores: &[(String, f64)]) -> Result<()> {
    fs::write(path, format_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text).map_err(|e| Error::Format {
        path: path.into(),
        detail: e.to_string(),
    })
}

/// Attaches protocol keys to scores; every scored id must be in the
/// protocol.  Protocol entries without a score are ignored.
pub fn join_scores(scores: &[(String, f64)], protocol: &[ProtocolEntry]) -> Result<Vec<ScoreRecord>> {
    let keys: HashMap<&str, Key> = protocol.iter().map(|e| (e.id.as_str(), e.key)).collect();
    scores
        .iter()
        .map(|(id, score)| {
            let key = *keys
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("utterance {id:?} is not in the protocol")))?;
            Ok(ScoreRecord {
                id: id.clone(),
                score: *score,
                key,
            })
        })
        .collect()
}
