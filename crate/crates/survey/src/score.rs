//! Scoring: one point for each synthetic image the participant selected
//! as real.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::deck::SurveyDeck;
use crate::error::{Result, SurveyError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResponse {
    pub item_id: String,
    pub selected: bool,
    pub duration_ms: u64,
    pub over_limit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub score: usize,
    pub max: usize,
    pub fooled_rate: f64,
    pub per_class_fooled: BTreeMap<String, f64>,
    pub answered: usize,
    pub total: usize,
    pub partial: bool,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score_session(
    session_id: &str,
    deck: &SurveyDeck,
    responses: &HashMap<String, ItemResponse>,
    allow_partial: bool,
) -> Result<SessionScore> {
    let answered = deck.items.iter().filter(|i| responses.contains_key(&i.item_id)).count();
    let complete = answered == deck.items.len();
    if !complete && !allow_partial {
        return Err(SurveyError::Incomplete(session_id.to_string()));
    }
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in deck.items.iter().filter(|i| i.is_synthetic) {
        let entry = per_class.entry(item.class.clone()).or_default();
        entry.1 += 1;
        if responses.get(&item.item_id).is_some_and(|r| r.selected) {
            entry.0 += 1;
        }
    }
    let score: usize = per_class.values().map(|v| v.0).sum();
    let max = deck.synthetic_count();
    Ok(SessionScore {
        score,
        max,
        fooled_rate: rate(score, max),
        per_class_fooled: per_class.into_iter().map(|(k, (s, n))| (k, rate(s, n))).collect(),
        answered,
        total: deck.items.len(),
        partial: !complete,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub sessions: usize,
    pub mean_score: f64,
    pub max: usize,
    pub mean_fooled_rate: f64,
    pub per_class_fooled: BTreeMap<String, f64>,
    /// How many participants selected each image, keyed by image id.
    pub per_item_selected: BTreeMap<String, usize>,
}

/// Aggregates completed sessions. Per-class rates average the sessions'
/// per-class fooled rates; only synthetic items contribute.
pub fn cohort_report<'a>(
    sessions: impl IntoIterator<Item = (&'a SurveyDeck, &'a HashMap<String, ItemResponse>)>,
) -> Result<CohortReport> {
    let mut n = 0usize;
    let mut score_sum = 0usize;
    let mut rate_sum = 0.0;
    let mut max = 0usize;
    let mut class_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut per_item: BTreeMap<String, usize> = BTreeMap::new();
    for (deck, responses) in sessions {
        let s = score_session("", deck, responses, false)?;
        n += 1;
        score_sum += s.score;
        rate_sum += s.fooled_rate;
        max = max.max(s.max);
        for (class, r) in &s.per_class_fooled {
            let e = class_sums.entry(class.clone()).or_default();
            e.0 += r;
            e.1 += 1;
        }
        for item in &deck.items {
            let count = per_item.entry(item.image_id.clone()).or_default();
            if responses.get(&item.item_id).is_some_and(|r| r.selected) {
                *count += 1;
            }
        }
    }
    if n == 0 {
        return Err(SurveyError::Invalid("cohort report needs at least one completed session".into()));
    }
    Ok(CohortReport {
        sessions: n,
        mean_score: score_sum as f64 / n as f64,
        max,
        mean_fooled_rate: rate_sum / n as f64,
        per_class_fooled: class_sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        per_item_selected: per_item,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deck::tests::full_pool;
    use crate::deck::{build_deck, DeckConfig};

    fn answer(deck: &SurveyDeck, pick: impl Fn(usize, &crate::deck::DeckItem) -> bool) -> HashMap<String, ItemResponse> {
        deck.items
            .iter()
            .enumerate()
            .map(|(k, i)| {
                (
                    i.item_id.clone(),
                    ItemResponse {
                        item_id: i.item_id.clone(),
                        selected: pick(k, i),
                        duration_ms: 1000,
                        over_limit: false,
                    },
                )
            })
            .collect()
    }

    fn deck() -> SurveyDeck {
        build_deck(&full_pool(), &DeckConfig::standard(), "s", 3).unwrap()
    }

    #[test]
    fn full_and_zero_scores() {
        let d = deck();
        let all = score_session("a", &d, &answer(&d, |_, i| i.is_synthetic), false).unwrap();
        assert_eq!((all.score, all.max), (51, 51));
        assert_eq!(all.fooled_rate, 1.0);
        let everything = score_session("a", &d, &answer(&d, |_, _| true), false).unwrap();
        assert_eq!(everything.score, 51);
        let none = score_session("a", &d, &answer(&d, |_, _| false), false).unwrap();
        assert_eq!((none.score, none.fooled_rate), (0, 0.0));
    }

    #[test]
    fn incomplete_needs_partial_flag() {
        let d = deck();
        let mut r = answer(&d, |_, _| true);
        let first = d.items[0].item_id.clone();
        r.remove(&first);
        assert!(matches!(score_session("x", &d, &r, false), Err(SurveyError::Incomplete(_))));
        let p = score_session("x", &d, &r, true).unwrap();
        assert!(p.partial);
        assert_eq!(p.answered, 87);
    }

    #[test]
    fn cohort_mean_of_two_sessions() {
        let d = deck();
        let syn: Vec<usize> = (0..d.items.len()).filter(|&k| d.items[k].is_synthetic).collect();
        let r30 = answer(&d, |k, _| syn[..30].contains(&k));
        let r36 = answer(&d, |k, _| syn[..36].contains(&k));
        let rep = cohort_report([(&d, &r30), (&d, &r36)]).unwrap();
        assert_eq!(rep.mean_score, 33.0);
        assert_eq!(rep.sessions, 2);
        let one = cohort_report([(&d, &r30)]).unwrap();
        assert_eq!(one.mean_score, 30.0);
        let counted: usize = one.per_item_selected.values().sum();
        assert_eq!(counted, 30);
        assert!(cohort_report(std::iter::empty()).is_err());
    }

    #[test]
    fn all_real_deck_scores_zero() {
        let cfg = DeckConfig {
            quotas: DeckConfig::standard().quotas.into_iter().map(|mut q| {
                q.synthetic = 0;
                q
            }).collect(),
            ..DeckConfig::standard()
        };
        let d = build_deck(&full_pool(), &cfg, "s", 0).unwrap();
        let s = score_session("z", &d, &answer(&d, |_, _| true), false).unwrap();
        assert_eq!((s.score, s.max, s.fooled_rate), (0, 0, 0.0));
    }
}
