//! Backend for a real-versus-synthetic image survey.

pub mod api;
pub mod deck;
pub mod error;
pub mod score;
pub mod service;
pub mod store;

pub use deck::{build_deck, ClassQuota, DeckConfig, DeckItem, ImagePool, PoolImage, SurveyDeck};
pub use error::{Result, SurveyError};
pub use score::{cohort_report, score_session, CohortReport, ItemResponse, SessionScore};
pub use service::SurveyService;
