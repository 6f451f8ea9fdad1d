//! Cosine trial scoring, equal error rate, per-condition reports and
//! z-normalized score fusion.

use std::fmt::Write as _;

use crate::data::{Condition, Dataset, TrialList};
use crate::error::{Error, Result};
use crate::model::{ModelState, Modality};
use crate::numerics::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub trial_index: usize,
    pub score: f64,
    pub is_target: bool,
    pub condition: Condition,
}

/// Scores of one system, one row per trial in trial-list order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub system_id: String,
    pub rows: Vec<ScoreRow>,
}

impl ScoreFile {
    /// Header `# system=<id> trials=<n>`, then
    /// `trial_index score target|nontarget heard|unheard` per line with the
    /// score at 9 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(32 + self.rows.len() * 40);
        writeln!(out, "# system={} trials={}", self.system_id, self.rows.len()).unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{} {:.8e} {} {}",
                r.trial_index,
                r.score,
                if r.is_target { "target" } else { "nontarget" },
                r.condition
            )
            .unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("score file is empty"))?;
        let (system_id, declared) = parse_header(header)?;
        let mut rows = Vec::with_capacity(declared);
        for (lineno, line) in lines.enumerate() {
            let bad = || Error::validation(format!("score line {}: {line:?}", lineno + 2));
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let score: f64 = f[1].parse().map_err(|_| bad())?;
            if !score.is_finite() {
                return Err(bad());
            }
            rows.push(ScoreRow {
                trial_index: f[0].parse().map_err(|_| bad())?,
                score,
                is_target: match f[2] {
                    "target" => true,
                    "nontarget" => false,
                    _ => return Err(bad()),
                },
                condition: f[3].parse().map_err(|_| bad())?,
            });
        }
        if rows.len() != declared {
            return Err(Error::validation(format!(
                "header declares {declared} trials but file has {}",
                rows.len()
            )));
        }
        Ok(Self { system_id, rows })
    }

    /// `(score, is_target)` pairs, optionally restricted to one condition.
    pub fn labelled(&self, condition: Option<Condition>) -> Vec<(f64, bool)> {
        self.rows
            .iter()
            .filter(|r| condition.is_none_or(|c| r.condition == c))
            .map(|r| (r.score, r.is_target))
            .collect()
    }
}

fn parse_header(line: &str) -> Result<(String, usize)> {
    let bad = || Error::validation(format!("bad score header {line:?}"));
    let rest = line.strip_prefix("# ").ok_or_else(bad)?;
    let (sys, trials) = rest.rsplit_once(' ').ok_or_else(bad)?;
    let system_id = sys.strip_prefix("system=").ok_or_else(bad)?;
    let n = trials
        .strip_prefix("trials=")
        .and_then(|n| n.parse().ok())
        .ok_or_else(bad)?;
    Ok((system_id.to_string(), n))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Cosine similarity between face and voice embeddings for every trial.
pub fn score_trials(
    model: &ModelState,
    dataset: &Dataset,
    trials: &TrialList,
    system_id: &str,
) -> Result<ScoreFile> {
    let n = dataset.samples.len();
    let mut face_rows: Vec<Option<usize>> = vec![None; n];
    let mut voice_rows: Vec<Option<usize>> = vec![None; n];
    let mut face_ids = Vec::new();
    let mut voice_ids = Vec::new();
    for t in &trials.trials {
        dataset.sample(t.face_id)?;
        dataset.sample(t.voice_id)?;
        if face_rows[t.face_id].is_none() {
            face_rows[t.face_id] = Some(face_ids.len());
            face_ids.push(t.face_id);
        }
        if voice_rows[t.voice_id].is_none() {
            voice_rows[t.voice_id] = Some(voice_ids.len());
            voice_ids.push(t.voice_id);
        }
    }
    let embed = |ids: &[usize], modality: Modality| -> Result<Matrix> {
        let width = match modality {
            Modality::Face => dataset.face_dim(),
            Modality::Voice => dataset.voice_dim(),
        };
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let s = &dataset.samples[id];
            data.extend_from_slice(match modality {
                Modality::Face => &s.face,
                Modality::Voice => &s.voice,
            });
        }
        let (e, _) = model
            .encoder(modality)
            .forward(&Matrix::new(ids.len(), width, data)?)?;
        Ok(e)
    };
    let face_emb = embed(&face_ids, Modality::Face)?;
    let voice_emb = embed(&voice_ids, Modality::Voice)?;

    let mut rows = Vec::with_capacity(trials.len());
    for (trial_index, t) in trials.trials.iter().enumerate() {
        let f = face_emb.row(face_rows[t.face_id].unwrap());
        let v = voice_emb.row(voice_rows[t.voice_id].unwrap());
        let score = cosine(f, v).ok_or_else(|| {
            let which = if dot(f, f) == 0.0 {
                format!("face sample {}", t.face_id)
            } else {
                format!("voice sample {}", t.voice_id)
            };
            Error::numeric(format!("zero-norm embedding for {which}"))
        })?;
        rows.push(ScoreRow {
            trial_index,
            score,
            is_target: t.is_target,
            condition: t.condition,
        });
    }
    Ok(ScoreFile {
        system_id: system_id.to_string(),
        rows,
    })
}

/// Equal error rate in percent.
///
/// Operating points are taken at every distinct score θ with
/// `FRR(θ) = #{targets < θ}/T` and `FAR(θ) = #{nontargets ≥ θ}/N`, plus
/// θ = +∞. The first point (lowest threshold) with `FRR ≥ FAR` is the
/// crossing; if the two rates are not equal there, the EER is linearly
/// interpolated between it and the preceding point.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<f64> {
    let n_target = scores.iter().filter(|s| s.1).count();
    let n_non = scores.len() - n_target;
    if n_target == 0 || n_non == 0 {
        return Err(Error::validation(
            "EER needs at least one target and one nontarget score",
        ));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::numeric("non-finite score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (t, n) = (n_target as f64, n_non as f64);
    let mut targets_below = 0usize;
    let mut nontargets_below = 0usize;
    // point at θ = lowest score
    let mut prev = (0.0, 1.0);
    let mut i = 0;
    loop {
        // advance past the group at the current threshold
        let at = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == at {
            if sorted[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
        // threshold = next distinct score, or +∞
        let frr = targets_below as f64 / t;
        let far = (n_non - nontargets_below) as f64 / n;
        if frr >= far {
            let (frr0, far0) = prev;
            if frr == far {
                return Ok(100.0 * frr);
            }
            let before = far0 - frr0;
            let after = frr - far;
            let w = before / (before + after);
            return Ok(100.0 * (frr0 + w * (frr - frr0)));
        }
        prev = (frr, far);
        if i == sorted.len() {
            unreachable!("FRR reaches 1 and FAR reaches 0 at +inf");
        }
    }
}

/// Arithmetic mean of per-condition EERs.
pub fn overall_score(eers: &[f64]) -> Result<f64> {
    if eers.is_empty() {
        return Err(Error::validation("overall score needs at least one EER"));
    }
    Ok(eers.iter().sum::<f64>() / eers.len() as f64)
}

/// z-normalizes each system over all its trials (population std) and
/// averages the normalized scores per trial.
pub fn fuse_scores(systems: &[ScoreFile], system_id: &str) -> Result<ScoreFile> {
    if systems.len() < 2 {
        return Err(Error::validation(format!(
            "fusion needs at least 2 systems, got {}",
            systems.len()
        )));
    }
    let reference = &systems[0];
    for s in &systems[1..] {
        let limit = reference.rows.len().max(s.rows.len());
        for i in 0..limit {
            let same = match (reference.rows.get(i), s.rows.get(i)) {
                (Some(a), Some(b)) => {
                    a.trial_index == b.trial_index
                        && a.is_target == b.is_target
                        && a.condition == b.condition
                }
                _ => false,
            };
            if !same {
                let idx = reference
                    .rows
                    .get(i)
                    .or(s.rows.get(i))
                    .map_or(i, |r| r.trial_index);
                return Err(Error::validation(format!(
                    "system {:?} disagrees with {:?} at trial {idx} (row {i})",
                    s.system_id, reference.system_id
                )));
            }
        }
    }
    if reference.rows.is_empty() {
        return Err(Error::validation("cannot fuse empty score files"));
    }
    let k = systems.len() as f64;
    let mut fused: Vec<f64> = vec![0.0; reference.rows.len()];
    for s in systems {
        let m = s.rows.len() as f64;
        let mean = s.rows.iter().map(|r| r.score).sum::<f64>() / m;
        let var = s.rows.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / m;
        let std = var.sqrt();
        if std.is_nan() || std <= 0.0 {
            return Err(Error::numeric(format!(
                "system {:?} has zero score variance",
                s.system_id
            )));
        }
        for (f, r) in fused.iter_mut().zip(&s.rows) {
            *f += (r.score - mean) / std;
        }
    }
    let rows = reference
        .rows
        .iter()
        .zip(fused)
        .map(|(r, f)| ScoreRow {
            score: f / k,
            ..*r
        })
        .collect();
    Ok(ScoreFile {
        system_id: system_id.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    pub eer: f64,
    pub targets: usize,
    pub nontargets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system_id: String,
    /// Conditions present in the scores, in heard/unheard order.
    pub conditions: Vec<ConditionResult>,
    pub overall: f64,
}

impl EvalReport {
    pub fn eer(&self, condition: Condition) -> Option<f64> {
        self.conditions
            .iter()
            .find(|c| c.condition == condition)
            .map(|c| c.eer)
    }

    pub fn eer_heard(&self) -> Option<f64> {
        self.eer(Condition::Heard)
    }

    pub fn eer_unheard(&self) -> Option<f64> {
        self.eer(Condition::Unheard)
    }

    /// `key=value` lines; absent conditions are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "system={}", self.system_id).unwrap();
        for c in &self.conditions {
            writeln!(out, "eer_{}={:.6}", c.condition, c.eer).unwrap();
        }
        writeln!(out, "overall={:.6}", self.overall).unwrap();
        for c in &self.conditions {
            writeln!(out, "targets_{}={}", c.condition, c.targets).unwrap();
            writeln!(out, "nontargets_{}={}", c.condition, c.nontargets).unwrap();
        }
        out
    }
}

/// Per-condition EERs and their mean, from the labels carried in the score
/// file.
pub fn report_from_scores(scores: &ScoreFile) -> Result<EvalReport> {
    let mut conditions = Vec::new();
    for condition in Condition::ALL {
        let labelled = scores.labelled(Some(condition));
        if labelled.is_empty() {
            continue;
        }
        let targets = labelled.iter().filter(|s| s.1).count();
        conditions.push(ConditionResult {
            condition,
            eer: compute_eer(&labelled)?,
            targets,
            nontargets: labelled.len() - targets,
        });
    }
    let eers: Vec<f64> = conditions.iter().map(|c| c.eer).collect();
    Ok(EvalReport {
        system_id: scores.system_id.clone(),
        overall: overall_score(&eers)?,
        conditions,
    })
}

/// As [`report_from_scores`], after checking that `scores` rows line up with
/// `trials`.
pub fn make_report(scores: &ScoreFile, trials: &TrialList) -> Result<EvalReport> {
    if scores.rows.len() != trials.len() {
        return Err(Error::validation(format!(
            "{} scores for {} trials",
            scores.rows.len(),
            trials.len()
        )));
    }
    for (i, (r, t)) in scores.rows.iter().zip(&trials.trials).enumerate() {
        if r.trial_index != i || r.is_target != t.is_target || r.condition != t.condition {
            return Err(Error::validation(format!(
                "score row {i} does not match trial {i}"
            )));
        }
    }
    report_from_scores(scores)
}
