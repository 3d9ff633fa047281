//! Session management on top of the event log.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deck::{build_deck, DeckConfig, ImagePool, PoolImage, SurveyDeck};
use crate::error::{Result, SurveyError};
use crate::score::{cohort_report, score_session, CohortReport, ItemResponse, SessionScore};
use crate::store::{EventLog, LogEvent};

/// One deck entry as a client sees it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientItem {
    pub item_id: String,
    pub image_url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub items: Vec<ClientItem>,
    pub time_limit_ms: u64,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextItem {
    pub done: bool,
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item: Option<ClientItem>,
    pub time_limit_ms: u64,
    pub answered: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseAck {
    pub item_id: String,
    pub over_limit: bool,
    pub answered: usize,
    pub total: usize,
}

struct Session {
    deck: SurveyDeck,
    responses: HashMap<String, ItemResponse>,
}

impl Session {
    fn complete(&self) -> bool {
        self.responses.len() == self.deck.items.len()
    }
}

struct Inner {
    log: EventLog,
    sessions: BTreeMap<String, Session>,
    created: u64,
}

pub struct SurveyService {
    pool: ImagePool,
    config: DeckConfig,
    salt: String,
    inner: Mutex<Inner>,
}

pub fn image_url(item_id: &str) -> String {
    format!("/images/{item_id}")
}

impl SurveyService {
    /// Opens the service over `log_path`, replaying every stored session
    /// and response.
    pub fn open(pool: ImagePool, config: DeckConfig, salt: impl Into<String>, log_path: &Path) -> Result<Self> {
        let (log, events) = EventLog::open(log_path)?;
        let mut sessions = BTreeMap::new();
        let mut created = 0;
        for ev in events {
            match ev {
                LogEvent::Session { session_id, deck, .. } => {
                    created += 1;
                    sessions.insert(
                        session_id,
                        Session {
                            deck,
                            responses: HashMap::new(),
                        },
                    );
                }
                LogEvent::Response { session_id, response } => {
                    let s = sessions.get_mut(&session_id).ok_or_else(|| SurveyError::CorruptLog {
                        line: 0,
                        message: format!("response for unknown session {session_id}"),
                    })?;
                    s.responses.entry(response.item_id.clone()).or_insert(response);
                }
            }
        }
        Ok(Self {
            pool,
            config,
            salt: salt.into(),
            inner: Mutex::new(Inner { log, sessions, created }),
        })
    }

    pub fn deck_config(&self) -> &DeckConfig {
        &self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn create_session(&self, participant_token: &str, seed: Option<u64>) -> Result<SessionCreated> {
        if participant_token.is_empty() {
            return Err(SurveyError::Invalid("participant token is empty".into()));
        }
        let mut inner = self.lock();
        let mut h = Sha256::new();
        h.update(self.salt.as_bytes());
        h.update([0]);
        h.update(participant_token.as_bytes());
        h.update(inner.created.to_le_bytes());
        let digest = h.finalize();
        let session_id = hex::encode(&digest[..8]);
        let seed = seed.unwrap_or_else(|| u64::from_le_bytes(digest[8..16].try_into().expect("8 bytes")));
        let deck = build_deck(&self.pool, &self.config, &self.salt, seed)?;
        inner.log.append(&LogEvent::Session {
            session_id: session_id.clone(),
            participant_token: participant_token.to_string(),
            deck: deck.clone(),
        })?;
        inner.created += 1;
        let out = SessionCreated {
            session_id: session_id.clone(),
            items: deck
                .items
                .iter()
                .map(|i| ClientItem {
                    item_id: i.item_id.clone(),
                    image_url: image_url(&i.item_id),
                })
                .collect(),
            time_limit_ms: self.config.time_limit_ms,
            total: deck.items.len(),
        };
        inner.sessions.insert(
            session_id,
            Session {
                deck,
                responses: HashMap::new(),
            },
        );
        Ok(out)
    }

    pub fn next_item(&self, session_id: &str) -> Result<NextItem> {
        let inner = self.lock();
        let s = session(&inner, session_id)?;
        let next = s.deck.items.iter().position(|i| !s.responses.contains_key(&i.item_id));
        Ok(NextItem {
            done: next.is_none(),
            index: next.unwrap_or(s.deck.items.len()),
            item: next.map(|k| {
                let id = &s.deck.items[k].item_id;
                ClientItem {
                    item_id: id.clone(),
                    image_url: image_url(id),
                }
            }),
            time_limit_ms: self.config.time_limit_ms,
            answered: s.responses.len(),
            total: s.deck.items.len(),
        })
    }

    /// Responses are final: a second answer for an item is a conflict and
    /// leaves the first untouched.
    pub fn record_response(&self, session_id: &str, item_id: &str, selected: bool, duration_ms: u64) -> Result<ResponseAck> {
        let mut inner = self.lock();
        let s = session(&inner, session_id)?;
        if s.deck.item(item_id).is_none() {
            return Err(SurveyError::NotFound(format!("item {item_id} in session {session_id}")));
        }
        if s.responses.contains_key(item_id) {
            return Err(SurveyError::Conflict(format!("item {item_id} already answered")));
        }
        let response = ItemResponse {
            item_id: item_id.to_string(),
            selected,
            duration_ms,
            over_limit: duration_ms > self.config.time_limit_ms + self.config.tolerance_ms,
        };
        inner.log.append(&LogEvent::Response {
            session_id: session_id.to_string(),
            response: response.clone(),
        })?;
        let s = inner.sessions.get_mut(session_id).expect("checked above");
        s.responses.insert(item_id.to_string(), response.clone());
        Ok(ResponseAck {
            item_id: response.item_id,
            over_limit: response.over_limit,
            answered: s.responses.len(),
            total: s.deck.items.len(),
        })
    }

    pub fn score(&self, session_id: &str, allow_partial: bool) -> Result<SessionScore> {
        let inner = self.lock();
        let s = session(&inner, session_id)?;
        score_session(session_id, &s.deck, &s.responses, allow_partial)
    }

    /// Cohort over the given sessions, or over every completed session.
    pub fn cohort(&self, session_ids: Option<&[String]>) -> Result<CohortReport> {
        let inner = self.lock();
        let chosen: Vec<&Session> = match session_ids {
            Some(ids) => ids.iter().map(|id| session(&inner, id)).collect::<Result<_>>()?,
            None => inner.sessions.values().filter(|s| s.complete()).collect(),
        };
        cohort_report(chosen.into_iter().map(|s| (&s.deck, &s.responses)))
    }

    /// The pool image behind a client item id.
    pub fn image(&self, item_id: &str) -> Option<&PoolImage> {
        self.pool
            .images
            .iter()
            .find(|i| crate::deck::opaque_id(&self.salt, &i.image_id) == item_id)
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.lock().sessions.keys().cloned().collect()
    }
}

fn session<'a>(inner: &'a Inner, id: &str) -> Result<&'a Session> {
    inner
        .sessions
        .get(id)
        .ok_or_else(|| SurveyError::NotFound(format!("session {id}")))
}
