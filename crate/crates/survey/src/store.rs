//! Append-only JSON-lines event log. Every event is flushed and synced
//! before the in-memory state changes, and replayed on open.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deck::SurveyDeck;
use crate::error::{Result, SurveyError};
use crate::score::ItemResponse;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Session {
        session_id: String,
        participant_token: String,
        deck: SurveyDeck,
    },
    Response {
        session_id: String,
        #[serde(flatten)]
        response: ItemResponse,
    },
}

pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) and returns the log with its events. A
    /// torn final line from an interrupted write is dropped.
    pub fn open(path: &Path) -> Result<(Self, Vec<LogEvent>)> {
        let mut events = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let f = File::open(path).map_err(|e| SurveyError::io(path, e))?;
            let mut reader = BufReader::new(f);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(|e| SurveyError::io(path, e))?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                let complete = line.ends_with('\n');
                if line.trim().is_empty() {
                    valid_len += n as u64;
                    continue;
                }
                match serde_json::from_str::<LogEvent>(line.trim_end()) {
                    Ok(ev) if complete => {
                        events.push(ev);
                        valid_len += n as u64;
                    }
                    Ok(_) | Err(_) if !complete => {
                        log::warn!("dropping torn final line {lineno} of {}", path.display());
                        break;
                    }
                    Err(e) => {
                        return Err(SurveyError::CorruptLog {
                            line: lineno,
                            message: e.to_string(),
                        })
                    }
                    Ok(_) => unreachable!(),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| SurveyError::io(path, e))?;
        if file.metadata().map_err(|e| SurveyError::io(path, e))?.len() != valid_len {
            file.set_len(valid_len).map_err(|e| SurveyError::io(path, e))?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &LogEvent) -> Result<()> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| SurveyError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
