//! Single-file SQLite persistence for word lists, batteries, experiments
//! and answer records.
//!
//! `(experiment_id, word, prompt_id)` is the records' primary key and the
//! first write wins: later saves of the same key leave the stored row alone
//! and only bump the experiment's duplicate counter.

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, SecondsFormat, Utc};
use lexprobe_core::prompt::builtin_battery;
use lexprobe_core::{AnswerClass, AnswerRecord, Battery, Word, WordList, WordSource};
use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{PendingSet, RecordSink, SaveOutcome, SinkError};
use crate::experiment::{ExperimentSpec, ExperimentState, NewExperiment, ProviderKind, ValidationError};

/// Bumped whenever the table layout changes.
pub const SCHEMA_VERSION: i64 = 1;
pub const BUILTIN_BATTERY_ID: &str = "builtin";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Db(#[from] rusqlite::Error),
    #[error("unknown experiment {0}")]
    UnknownExperiment(String),
    #[error("unknown {kind} {id}")]
    MissingReference { kind: &'static str, id: String },
    #[error("illegal state transition {from} -> {to}")]
    IllegalTransition {
        from: ExperimentState,
        to: ExperimentState,
    },
    #[error("invalid experiment: {0}")]
    Validation(#[from] ValidationError),
    #[error("database schema version {found} is newer than supported {SCHEMA_VERSION}")]
    SchemaVersion { found: i64 },
    #[error("corrupt row: {0}")]
    Corrupt(String),
}

const MIGRATION_1: &str = r"
CREATE TABLE word_lists (
    id          TEXT PRIMARY KEY,
    name        TEXT NOT NULL,
    source      TEXT NOT NULL,
    created_at  TEXT NOT NULL
);
CREATE TABLE word_list_entries (
    list_id   TEXT NOT NULL REFERENCES word_lists(id),
    position  INTEGER NOT NULL,
    word      TEXT NOT NULL,
    PRIMARY KEY (list_id, position)
);
CREATE TABLE batteries (
    id    TEXT PRIMARY KEY,
    body  TEXT NOT NULL
);
CREATE TABLE experiments (
    id                 TEXT PRIMARY KEY,
    name               TEXT NOT NULL,
    description        TEXT NOT NULL,
    wordlist_id        TEXT REFERENCES word_lists(id),
    battery_id         TEXT NOT NULL REFERENCES batteries(id),
    provider_kind      TEXT NOT NULL,
    model              TEXT NOT NULL,
    temperature        REAL NOT NULL,
    max_output_tokens  INTEGER NOT NULL,
    dispatch           TEXT NOT NULL,
    config             TEXT NOT NULL,
    created_at         TEXT NOT NULL,
    state              TEXT NOT NULL,
    duplicate_writes   INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE records (
    experiment_id  TEXT NOT NULL REFERENCES experiments(id),
    word           TEXT NOT NULL,
    prompt_id      TEXT NOT NULL,
    raw_text       TEXT NOT NULL,
    parsed         TEXT NOT NULL,
    attempts       INTEGER NOT NULL,
    completed_at   TEXT NOT NULL,
    latency_ms     INTEGER NOT NULL,
    PRIMARY KEY (experiment_id, word, prompt_id)
);
";

/// Point-in-time view of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub experiment: ExperimentSpec,
    pub records: Vec<AnswerRecord>,
    pub total: usize,
    pub answered: usize,
    pub yes: usize,
    pub no: usize,
    pub unparseable: usize,
    pub duplicate_writes: u64,
}

impl Snapshot {
    pub fn progress(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.answered as f64 / self.total as f64
        }
    }
}

/// Answer counters of one experiment, cheaper than a full [`Snapshot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub state: ExperimentState,
    pub total: usize,
    pub answered: usize,
    pub yes: usize,
    pub no: usize,
    pub unparseable: usize,
}

/// Cheap to clone; clones share one connection.
#[derive(Clone)]
pub struct Store {
    conn: Arc<Mutex<Connection>>,
}

fn ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>, StoreError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::Corrupt(format!("timestamp {s:?}: {e}")))
}

fn corrupt(what: impl Into<String>) -> StoreError {
    StoreError::Corrupt(what.into())
}

struct ExperimentRow {
    id: String,
    name: String,
    description: String,
    wordlist_id: Option<String>,
    battery_id: String,
    provider_kind: String,
    model: String,
    temperature: f64,
    max_output_tokens: u32,
    dispatch: String,
    config: String,
    created_at: String,
    state: String,
}

impl ExperimentRow {
    fn into_spec(self) -> Result<ExperimentSpec, StoreError> {
        Ok(ExperimentSpec {
            provider_kind: ProviderKind::parse(&self.provider_kind)
                .ok_or_else(|| corrupt(format!("provider kind {:?}", self.provider_kind)))?,
            state: ExperimentState::parse(&self.state)
                .ok_or_else(|| corrupt(format!("state {:?}", self.state)))?,
            dispatch: serde_json::from_str(&self.dispatch).map_err(|e| corrupt(e.to_string()))?,
            config: serde_json::from_str(&self.config).map_err(|e| corrupt(e.to_string()))?,
            created_at: parse_ts(&self.created_at)?,
            id: self.id,
            name: self.name,
            description: self.description,
            wordlist_id: self.wordlist_id,
            battery_id: self.battery_id,
            model: self.model,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        })
    }
}

const EXPERIMENT_COLUMNS: &str = "id, name, description, wordlist_id, battery_id, provider_kind, model, \
     temperature, max_output_tokens, dispatch, config, created_at, state";

fn experiment_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<ExperimentRow> {
    Ok(ExperimentRow {
        id: row.get(0)?,
        name: row.get(1)?,
        description: row.get(2)?,
        wordlist_id: row.get(3)?,
        battery_id: row.get(4)?,
        provider_kind: row.get(5)?,
        model: row.get(6)?,
        temperature: row.get(7)?,
        max_output_tokens: row.get(8)?,
        dispatch: row.get(9)?,
        config: row.get(10)?,
        created_at: row.get(11)?,
        state: row.get(12)?,
    })
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::init(Connection::open(path)?)
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(mut conn: Connection) -> Result<Self, StoreError> {
        conn.pragma_update(None, "foreign_keys", true)?;
        conn.pragma_update(None, "busy_timeout", 5000)?;
        // no-op for in-memory databases
        let _ = conn.pragma_update(None, "journal_mode", "WAL");
        let version: i64 = conn.pragma_query_value(None, "user_version", |r| r.get(0))?;
        if version > SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion { found: version });
        }
        if version < 1 {
            let tx = conn.transaction()?;
            tx.execute_batch(MIGRATION_1)?;
            tx.pragma_update(None, "user_version", SCHEMA_VERSION)?;
            tx.commit()?;
        }
        let store = Self {
            conn: Arc::new(Mutex::new(conn)),
        };
        store.put_battery(BUILTIN_BATTERY_ID, &builtin_battery())?;
        Ok(store)
    }

    fn lock(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn schema_version(&self) -> Result<i64, StoreError> {
        Ok(self
            .lock()
            .pragma_query_value(None, "user_version", |r| r.get(0))?)
    }

    /// Stores a word list. Lists are content-addressed, so storing the same
    /// words twice is a no-op.
    pub fn put_word_list(&self, list: &WordList) -> Result<(), StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let inserted = tx.execute(
            "INSERT OR IGNORE INTO word_lists (id, name, source, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![list.id, list.name, list.source.as_str(), ts(&list.created_at)],
        )?;
        if inserted == 1 {
            let mut stmt =
                tx.prepare("INSERT INTO word_list_entries (list_id, position, word) VALUES (?1, ?2, ?3)")?;
            for (i, w) in list.words.iter().enumerate() {
                stmt.execute(params![list.id, i as i64, w.as_str()])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    pub fn word_list(&self, id: &str) -> Result<WordList, StoreError> {
        let conn = self.lock();
        Self::word_list_in(&conn, id)
    }

    fn word_list_in(conn: &Connection, id: &str) -> Result<WordList, StoreError> {
        let head = conn
            .query_row(
                "SELECT name, source, created_at FROM word_lists WHERE id = ?1",
                [id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, String>(2)?,
                    ))
                },
            )
            .optional()?
            .ok_or_else(|| StoreError::MissingReference {
                kind: "word list",
                id: id.to_string(),
            })?;
        let words = Self::words_in(conn, id)?;
        Ok(WordList {
            id: id.to_string(),
            name: head.0,
            source: WordSource::parse(&head.1).ok_or_else(|| corrupt(format!("source {:?}", head.1)))?,
            created_at: parse_ts(&head.2)?,
            words,
        })
    }

    fn words_in(conn: &Connection, list_id: &str) -> Result<Vec<Word>, StoreError> {
        let mut stmt =
            conn.prepare("SELECT word FROM word_list_entries WHERE list_id = ?1 ORDER BY position")?;
        let rows = stmt.query_map([list_id], |r| r.get::<_, String>(0))?;
        rows.map(|w| {
            let w = w?;
            Word::new(&w).map_err(|e| corrupt(e.to_string()))
        })
        .collect()
    }

    pub fn put_battery(&self, id: &str, battery: &Battery) -> Result<(), StoreError> {
        let body = serde_json::to_string(battery).expect("battery serializes");
        self.lock().execute(
            "INSERT INTO batteries (id, body) VALUES (?1, ?2)
             ON CONFLICT(id) DO UPDATE SET body = excluded.body",
            params![id, body],
        )?;
        Ok(())
    }

    pub fn battery(&self, id: &str) -> Result<Battery, StoreError> {
        let conn = self.lock();
        Self::battery_in(&conn, id)
    }

    fn battery_in(conn: &Connection, id: &str) -> Result<Battery, StoreError> {
        let body: String = conn
            .query_row("SELECT body FROM batteries WHERE id = ?1", [id], |r| r.get(0))
            .optional()?
            .ok_or_else(|| StoreError::MissingReference {
                kind: "battery",
                id: id.to_string(),
            })?;
        Battery::from_json(&body).map_err(|e| corrupt(e.to_string()))
    }

    /// Persists a new Draft experiment. References must already exist.
    pub fn create_experiment(&self, new: NewExperiment) -> Result<ExperimentSpec, StoreError> {
        new.dispatch
            .validate()
            .map_err(|reason| ValidationError::new("dispatch", reason))?;
        let spec = ExperimentSpec {
            id: new.id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            model: new.model()?,
            temperature: new.temperature()?,
            max_output_tokens: new.max_output_tokens()?,
            name: new.name,
            description: new.description,
            wordlist_id: new.wordlist_id,
            battery_id: new.battery_id,
            provider_kind: new.provider_kind,
            dispatch: new.dispatch,
            config: new.config,
            created_at: lexprobe_core::record::millis_precision(Utc::now()),
            state: ExperimentState::Draft,
        };
        let conn = self.lock();
        Self::battery_in(&conn, &spec.battery_id)?;
        if let Some(list) = &spec.wordlist_id {
            Self::require_list(&conn, list)?;
        }
        conn.execute(
            &format!("INSERT INTO experiments ({EXPERIMENT_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13)"),
            params![
                spec.id,
                spec.name,
                spec.description,
                spec.wordlist_id,
                spec.battery_id,
                spec.provider_kind.as_str(),
                spec.model,
                spec.temperature,
                spec.max_output_tokens,
                serde_json::to_string(&spec.dispatch).expect("policy serializes"),
                serde_json::to_string(&spec.config).expect("config serializes"),
                ts(&spec.created_at),
                spec.state.as_str(),
            ],
        )
        .map_err(|e| match e {
            rusqlite::Error::SqliteFailure(f, _)
                if f.code == rusqlite::ErrorCode::ConstraintViolation =>
            {
                StoreError::Validation(ValidationError::new("id", "an experiment with this id exists"))
            }
            e => e.into(),
        })?;
        Ok(spec)
    }

    fn require_list(conn: &Connection, id: &str) -> Result<(), StoreError> {
        let found: Option<i64> = conn
            .query_row("SELECT 1 FROM word_lists WHERE id = ?1", [id], |r| r.get(0))
            .optional()?;
        found.map(|_| ()).ok_or_else(|| StoreError::MissingReference {
            kind: "word list",
            id: id.to_string(),
        })
    }

    pub fn experiment(&self, id: &str) -> Result<ExperimentSpec, StoreError> {
        let conn = self.lock();
        Self::experiment_in(&conn, id)
    }

    fn experiment_in(conn: &Connection, id: &str) -> Result<ExperimentSpec, StoreError> {
        conn.query_row(
            &format!("SELECT {EXPERIMENT_COLUMNS} FROM experiments WHERE id = ?1"),
            [id],
            experiment_row,
        )
        .optional()?
        .ok_or_else(|| StoreError::UnknownExperiment(id.to_string()))?
        .into_spec()
    }

    pub fn experiments(&self) -> Result<Vec<ExperimentSpec>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!(
            "SELECT {EXPERIMENT_COLUMNS} FROM experiments ORDER BY created_at, id"
        ))?;
        let rows = stmt.query_map([], experiment_row)?;
        rows.map(|r| r?.into_spec()).collect()
    }

    /// Binds a word list to an experiment that has not started yet.
    pub fn set_word_list(&self, experiment_id: &str, list_id: &str) -> Result<ExperimentSpec, StoreError> {
        let conn = self.lock();
        let spec = Self::experiment_in(&conn, experiment_id)?;
        if spec.state != ExperimentState::Draft {
            return Err(StoreError::IllegalTransition {
                from: spec.state,
                to: ExperimentState::Draft,
            });
        }
        Self::require_list(&conn, list_id)?;
        conn.execute(
            "UPDATE experiments SET wordlist_id = ?1 WHERE id = ?2",
            params![list_id, experiment_id],
        )?;
        Self::experiment_in(&conn, experiment_id)
    }

    /// Moves an experiment along the state machine. Entering Complete also
    /// requires that no pairs are pending.
    pub fn transition(&self, experiment_id: &str, to: ExperimentState) -> Result<ExperimentSpec, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let spec = Self::experiment_in(&tx, experiment_id)?;
        let illegal = StoreError::IllegalTransition { from: spec.state, to };
        if !spec.state.can_transition(to) {
            return Err(illegal);
        }
        if to == ExperimentState::Complete && !Self::pending_in(&tx, &spec)?.pairs.is_empty() {
            return Err(illegal);
        }
        tx.execute(
            "UPDATE experiments SET state = ?1 WHERE id = ?2",
            params![to.as_str(), experiment_id],
        )?;
        tx.commit()?;
        Ok(ExperimentSpec { state: to, ..spec })
    }

    fn insert_record(tx: &Transaction<'_>, record: &AnswerRecord) -> Result<SaveOutcome, StoreError> {
        let inserted = tx.execute(
            "INSERT OR IGNORE INTO records
             (experiment_id, word, prompt_id, raw_text, parsed, attempts, completed_at, latency_ms)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                record.experiment_id,
                record.word.as_str(),
                record.prompt_id,
                record.raw_text,
                record.parsed.as_str(),
                record.attempts,
                ts(&record.completed_at),
                record.latency_ms as i64,
            ],
        )?;
        if inserted == 1 {
            Ok(SaveOutcome::Inserted)
        } else {
            tx.execute(
                "UPDATE experiments SET duplicate_writes = duplicate_writes + 1 WHERE id = ?1",
                [&record.experiment_id],
            )?;
            Ok(SaveOutcome::Duplicate)
        }
    }

    pub fn save_record(&self, record: &AnswerRecord) -> Result<SaveOutcome, StoreError> {
        self.save_records(std::slice::from_ref(record))
            .map(|mut v| v.pop().expect("one outcome"))
    }

    /// Saves a batch in one transaction.
    pub fn save_records(&self, records: &[AnswerRecord]) -> Result<Vec<SaveOutcome>, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let mut known = HashSet::new();
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            if known.insert(r.experiment_id.as_str()) {
                Self::experiment_in(&tx, &r.experiment_id)?;
            }
            out.push(Self::insert_record(&tx, r)?);
        }
        tx.commit()?;
        Ok(out)
    }

    fn stored_keys(conn: &Connection, experiment_id: &str) -> Result<HashSet<(String, String)>, StoreError> {
        let mut stmt = conn.prepare("SELECT word, prompt_id FROM records WHERE experiment_id = ?1")?;
        let rows = stmt.query_map([experiment_id], |r| Ok((r.get(0)?, r.get(1)?)))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    fn pending_in(conn: &Connection, spec: &ExperimentSpec) -> Result<PendingSet, StoreError> {
        let battery = Self::battery_in(conn, &spec.battery_id)?;
        let words = match &spec.wordlist_id {
            Some(id) => Self::words_in(conn, id)?,
            None => Vec::new(),
        };
        let stored = Self::stored_keys(conn, &spec.id)?;
        let mut pairs = Vec::new();
        for w in &words {
            for p in battery.ids() {
                if !stored.contains(&(w.as_str().to_string(), p.to_string())) {
                    pairs.push((w.clone(), p.to_string()));
                }
            }
        }
        Ok(PendingSet {
            total: words.len() * battery.len(),
            pairs,
        })
    }

    /// The word × prompt product minus stored keys.
    pub fn pending_pairs(&self, experiment_id: &str) -> Result<PendingSet, StoreError> {
        let conn = self.lock();
        let spec = Self::experiment_in(&conn, experiment_id)?;
        Self::pending_in(&conn, &spec)
    }

    pub fn records(&self, experiment_id: &str) -> Result<Vec<AnswerRecord>, StoreError> {
        let conn = self.lock();
        Self::experiment_in(&conn, experiment_id)?;
        Self::records_in(&conn, experiment_id)
    }

    fn records_in(conn: &Connection, experiment_id: &str) -> Result<Vec<AnswerRecord>, StoreError> {
        let mut stmt = conn.prepare(
            "SELECT word, prompt_id, raw_text, parsed, attempts, completed_at, latency_ms
             FROM records WHERE experiment_id = ?1 ORDER BY word, prompt_id",
        )?;
        let rows = stmt.query_map([experiment_id], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, u32>(4)?,
                r.get::<_, String>(5)?,
                r.get::<_, i64>(6)?,
            ))
        })?;
        rows.map(|row| {
            let (word, prompt_id, raw_text, parsed, attempts, completed_at, latency_ms) = row?;
            Ok(AnswerRecord {
                experiment_id: experiment_id.to_string(),
                word: Word::new(&word).map_err(|e| corrupt(e.to_string()))?,
                prompt_id,
                raw_text,
                parsed: AnswerClass::parse(&parsed).ok_or_else(|| corrupt(format!("class {parsed:?}")))?,
                attempts,
                completed_at: parse_ts(&completed_at)?,
                latency_ms: latency_ms.max(0) as u64,
            })
        })
        .collect()
    }

    pub fn progress(&self, experiment_id: &str) -> Result<Progress, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let spec = Self::experiment_in(&tx, experiment_id)?;
        let total = Self::total_in(&tx, &spec)?;
        let mut progress = Progress {
            state: spec.state,
            total,
            answered: 0,
            yes: 0,
            no: 0,
            unparseable: 0,
        };
        {
            let mut stmt =
                tx.prepare("SELECT parsed, COUNT(*) FROM records WHERE experiment_id = ?1 GROUP BY parsed")?;
            let rows = stmt.query_map([experiment_id], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?))
            })?;
            for row in rows {
                let (class, n) = row?;
                let n = n.max(0) as usize;
                progress.answered += n;
                match AnswerClass::parse(&class) {
                    Some(AnswerClass::Yes) => progress.yes += n,
                    Some(AnswerClass::No) => progress.no += n,
                    Some(AnswerClass::Unparseable) => progress.unparseable += n,
                    None => return Err(corrupt(format!("class {class:?}"))),
                }
            }
        }
        tx.commit()?;
        Ok(progress)
    }

    fn total_in(conn: &Connection, spec: &ExperimentSpec) -> Result<usize, StoreError> {
        let battery = Self::battery_in(conn, &spec.battery_id)?;
        let words = match &spec.wordlist_id {
            Some(id) => conn.query_row(
                "SELECT COUNT(*) FROM word_list_entries WHERE list_id = ?1",
                [id],
                |r| r.get::<_, i64>(0),
            )? as usize,
            None => 0,
        };
        Ok(words * battery.len())
    }

    /// Consistent view of one experiment taken inside a single read
    /// transaction.
    pub fn snapshot(&self, experiment_id: &str) -> Result<Snapshot, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let experiment = Self::experiment_in(&tx, experiment_id)?;
        let records = Self::records_in(&tx, experiment_id)?;
        let total = Self::total_in(&tx, &experiment)?;
        let duplicate_writes: i64 = tx.query_row(
            "SELECT duplicate_writes FROM experiments WHERE id = ?1",
            [experiment_id],
            |r| r.get(0),
        )?;
        tx.commit()?;
        let count = |c: AnswerClass| records.iter().filter(|r| r.parsed == c).count();
        Ok(Snapshot {
            total,
            answered: records.len(),
            yes: count(AnswerClass::Yes),
            no: count(AnswerClass::No),
            unparseable: count(AnswerClass::Unparseable),
            duplicate_writes: duplicate_writes.max(0) as u64,
            experiment,
            records,
        })
    }
}

impl RecordSink for Store {
    fn pending(&self, experiment_id: &str) -> Result<PendingSet, SinkError> {
        self.pending_pairs(experiment_id)
            .map_err(|e| SinkError(e.to_string()))
    }

    fn save(&self, record: &AnswerRecord) -> Result<SaveOutcome, SinkError> {
        self.save_record(record).map_err(|e| SinkError(e.to_string()))
    }
}
