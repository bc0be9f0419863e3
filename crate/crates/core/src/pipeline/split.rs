//! Speaker subsets and per-speaker data folds.
//!
//! Speakers are grouped into subsets of three, one speaker per severity
//! level. One subset acts as the target speakers; the rest are sources. The
//! joint-adapter step holds out the last source subset for validation, and
//! each target speaker's utterances split into disjoint, exhaustive
//! train/valid/test folds.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::pipeline::corpus::{Severity, SyntheticSpeaker, Utterance};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub source_speakers: Vec<String>,
    pub target_speakers: Vec<String>,
    /// Train/valid/test fractions per target speaker; must sum to 1.
    pub fold_fractions: (f64, f64, f64),
    /// Optional cap on the target training data, as a fraction of a target
    /// speaker's full utterance count (e.g. 0.05).
    pub low_resource_fraction: Option<f64>,
}

impl SplitPlan {
    /// Group speakers into severity-balanced subsets of three and designate
    /// subset `target_subset` as the target speakers.
    pub fn from_corpus(speakers: &[SyntheticSpeaker], target_subset: usize) -> Result<SplitPlan> {
        let subsets = severity_balanced_subsets(speakers)?;
        if target_subset >= subsets.len() {
            return Err(Error::Config(format!(
                "target subset {target_subset} out of range ({} subsets)",
                subsets.len()
            )));
        }
        let mut source = Vec::new();
        let mut target = Vec::new();
        for (i, subset) in subsets.into_iter().enumerate() {
            if i == target_subset {
                target.extend(subset);
            } else {
                source.extend(subset);
            }
        }
        Ok(SplitPlan {
            source_speakers: source,
            target_speakers: target,
            fold_fractions: (0.6, 0.2, 0.2),
            low_resource_fraction: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.fold_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "fold fractions {:?} must be nonnegative and sum to 1",
                self.fold_fractions
            )));
        }
        if self.source_speakers.is_empty() || self.target_speakers.is_empty() {
            return Err(Error::Config("need both source and target speakers".into()));
        }
        let all: BTreeSet<&String> = self
            .source_speakers
            .iter()
            .chain(&self.target_speakers)
            .collect();
        if all.len() != self.source_speakers.len() + self.target_speakers.len() {
            return Err(Error::Config("source/target speaker sets overlap".into()));
        }
        if let Some(f) = self.low_resource_fraction {
            if !(0.0..=1.0).contains(&f) || f == 0.0 {
                return Err(Error::Config(format!(
                    "low_resource_fraction {f} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Training/validation utterances for the joint shared-adapter step:
    /// with more than one source subset, the last subset validates; with a
    /// single subset, a 90/10 per-utterance split is used.
    pub fn joint_adapter_split<'a>(
        &self,
        speakers: &'a [SyntheticSpeaker],
    ) -> Result<(Vec<&'a Utterance>, Vec<&'a Utterance>)> {
        self.validate()?;
        let sources: Vec<&SyntheticSpeaker> = self
            .source_speakers
            .iter()
            .map(|id| find_speaker(speakers, id))
            .collect::<Result<_>>()?;
        let n_subsets = sources.len() / 3;
        if n_subsets >= 2 && sources.len() % 3 == 0 {
            let split_at = (n_subsets - 1) * 3;
            let mut train = Vec::new();
            let mut valid = Vec::new();
            for (i, s) in sources.iter().enumerate() {
                let sink = if i < split_at { &mut train } else { &mut valid };
                sink.extend(s.utterances.iter());
            }
            Ok((train, valid))
        } else {
            let mut train = Vec::new();
            let mut valid = Vec::new();
            for s in &sources {
                let (t, v) = ninety_ten(&s.utterances);
                train.extend(t);
                valid.extend(v);
            }
            Ok((train, valid))
        }
    }

    /// Disjoint, exhaustive train/valid/test folds for one target speaker,
    /// honoring `low_resource_fraction` on the training side.
    pub fn target_folds<'a>(
        &self,
        speaker: &'a SyntheticSpeaker,
    ) -> Result<TargetFolds<'a>> {
        self.validate()?;
        if !self.target_speakers.contains(&speaker.speaker_id) {
            return Err(Error::Config(format!(
                "{} is not a target speaker",
                speaker.speaker_id
            )));
        }
        let n = speaker.utterances.len();
        let (ftr, fva, _) = self.fold_fractions;
        let n_train = ((n as f64) * ftr).floor() as usize;
        let n_valid = ((n as f64) * fva).floor() as usize;
        let train_full = &speaker.utterances[..n_train];
        let valid = &speaker.utterances[n_train..n_train + n_valid];
        let test = &speaker.utterances[n_train + n_valid..];
        let train = match self.low_resource_fraction {
            Some(f) => {
                let want = ((n as f64) * f).ceil() as usize;
                &train_full[..want.min(train_full.len()).max(1)]
            }
            None => train_full,
        };
        Ok(TargetFolds { train, valid, test })
    }
}

pub struct TargetFolds<'a> {
    pub train: &'a [Utterance],
    pub valid: &'a [Utterance],
    pub test: &'a [Utterance],
}

/// Per-speaker 90/10 split by utterance index.
pub fn ninety_ten(utterances: &[Utterance]) -> (&[Utterance], &[Utterance]) {
    let n = utterances.len();
    let n_train = ((n as f64) * 0.9).floor().max(1.0) as usize;
    let n_train = n_train.min(n.saturating_sub(1).max(1));
    utterances.split_at(n_train)
}

pub fn find_speaker<'a>(
    speakers: &'a [SyntheticSpeaker],
    id: &str,
) -> Result<&'a SyntheticSpeaker> {
    speakers
        .iter()
        .find(|s| s.speaker_id == id)
        .ok_or_else(|| Error::Data(format!("speaker `{id}` not in corpus")))
}

/// Group speakers into subsets of three with one speaker per severity level.
pub fn severity_balanced_subsets(speakers: &[SyntheticSpeaker]) -> Result<Vec<Vec<String>>> {
    if speakers.len() % 3 != 0 {
        return Err(Error::Config(format!(
            "{} speakers cannot form severity-balanced subsets of 3",
            speakers.len()
        )));
    }
    let mut by_sev: Vec<Vec<&SyntheticSpeaker>> = vec![Vec::new(); 3];
    for s in speakers {
        let idx = Severity::ALL.iter().position(|&v| v == s.severity).unwrap();
        by_sev[idx].push(s);
    }
    let per = speakers.len() / 3;
    if by_sev.iter().any(|v| v.len() != per) {
        return Err(Error::Config("severity levels are not evenly represented".into()));
    }
    Ok((0..per)
        .map(|i| {
            by_sev
                .iter()
                .map(|v| v[i].speaker_id.clone())
                .collect::<Vec<_>>()
        })
        .collect())
}
