//! Two-phase reader study: sessions, answers and the append-only event log
//! they are persisted in.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use fracvit::data::FractureLabel;
use fracvit::metrics::{aggregate, bootstrap_ci, Aggregate, Estimate, BOOTSTRAP_RESAMPLES, CI_LEVEL, MIN_BOOTSTRAP_SAMPLES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("study store: {0}")]
    Store(String),
}

impl From<std::io::Error> for StudyError {
    fn from(e: std::io::Error) -> Self {
        StudyError::Store(e.to_string())
    }
}

impl From<serde_json::Error> for StudyError {
    fn from(e: serde_json::Error) -> Self {
        StudyError::Store(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Resident,
    Radiologist,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Phase {
    Unassisted,
    Assisted,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Unassisted => 1,
            Phase::Assisted => 2,
        }
    }

    fn slot(self) -> usize {
        self.number() as usize - 1
    }
}

impl TryFrom<u8> for Phase {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, String> {
        match n {
            1 => Ok(Phase::Unassisted),
            2 => Ok(Phase::Assisted),
            other => Err(format!("phase must be 1 or 2, got {other}")),
        }
    }
}

impl From<Phase> for u8 {
    fn from(p: Phase) -> u8 {
        p.number()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRef {
    pub id: String,
    pub label: FractureLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub case_id: String,
    pub phase: Phase,
    pub label: FractureLabel,
    /// Milliseconds since the Unix epoch.
    pub at_ms: u64,
}

/// One line of a session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { id: String, role: Role, cases: Vec<CaseRef>, at_ms: u64 },
    Answered(Response),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    pub role: Role,
    pub cases: Vec<CaseRef>,
    pub responses: Vec<Response>,
    answered: [HashMap<String, usize>; 2],
}

impl Session {
    fn new(id: String, role: Role, cases: Vec<CaseRef>) -> Self {
        Self { id, role, cases, responses: Vec::new(), answered: Default::default() }
    }

    fn position(&self, case_id: &str) -> Option<usize> {
        self.cases.iter().position(|c| c.id == case_id)
    }

    pub fn response(&self, case_id: &str, phase: Phase) -> Option<&Response> {
        self.answered[phase.slot()].get(case_id).map(|&i| &self.responses[i])
    }

    pub fn remaining(&self, phase: Phase) -> usize {
        self.cases.len() - self.answered[phase.slot()].len()
    }

    fn check(&self, r: &Response, washout_ms: u64) -> Result<(), StudyError> {
        if self.position(&r.case_id).is_none() {
            return Err(StudyError::NotFound(format!("case {} is not part of session {}", r.case_id, self.id)));
        }
        if self.response(&r.case_id, r.phase).is_some() {
            return Err(StudyError::Conflict(format!("case {} already answered in phase {}", r.case_id, r.phase.number())));
        }
        if r.phase == Phase::Assisted {
            match self.response(&r.case_id, Phase::Unassisted) {
                None => {
                    return Err(StudyError::Conflict(format!("case {} has no phase 1 answer yet", r.case_id)));
                }
                Some(first) if r.at_ms < first.at_ms.saturating_add(washout_ms) => {
                    return Err(StudyError::Conflict(format!("washout for case {} has not elapsed", r.case_id)));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn apply(&mut self, r: Response) {
        self.answered[r.phase.slot()].insert(r.case_id.clone(), self.responses.len());
        self.responses.push(r);
    }

    /// Next case to serve in `phase`, as `(position, case)`. `Ok(None)` means
    /// the phase is complete.
    pub fn next(&self, phase: Phase, now_ms: u64, washout_ms: u64) -> Result<Option<(usize, &CaseRef)>, StudyError> {
        let mut waiting = false;
        for (i, c) in self.cases.iter().enumerate() {
            if self.response(&c.id, phase).is_some() {
                continue;
            }
            if phase == Phase::Unassisted {
                return Ok(Some((i, c)));
            }
            match self.response(&c.id, Phase::Unassisted) {
                Some(first) if now_ms >= first.at_ms.saturating_add(washout_ms) => return Ok(Some((i, c))),
                _ => waiting = true,
            }
        }
        if waiting {
            return Err(StudyError::Conflict("no case is ready for phase 2: phase 1 or the washout is incomplete".into()));
        }
        Ok(None)
    }

    fn truth(&self, case_id: &str) -> FractureLabel {
        self.cases[self.position(case_id).expect("answered cases belong to the session")].label
    }

    /// `(truth, answer)` index pairs for one phase, in answer order.
    pub fn pairs(&self, phase: Phase) -> (Vec<usize>, Vec<usize>) {
        self.responses.iter().filter(|r| r.phase == phase).map(|r| (self.truth(&r.case_id).index(), r.label.index())).unzip()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub answered: usize,
    pub correct: usize,
    /// Fraction of answered cases that were correct (0 when none answered).
    pub accuracy: f64,
}

impl PhaseSummary {
    fn from_pairs(truth: &[usize], answers: &[usize]) -> Self {
        let correct = truth.iter().zip(answers).filter(|(a, b)| a == b).count();
        let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
        Self { answered: truth.len(), correct, accuracy }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleAggregate {
    pub sessions: usize,
    pub accuracy_phase1: Estimate,
    pub accuracy_phase2: Estimate,
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub session: String,
    pub role: Role,
    pub cases: usize,
    pub phase1: PhaseSummary,
    pub phase2: PhaseSummary,
    /// `phase2.accuracy - phase1.accuracy`.
    pub improvement: f64,
    /// Pooled answers of every stored session, grouped by role.
    pub roles: BTreeMap<Role, RoleAggregate>,
}

fn estimate(truth: &[usize], answers: &[usize], seed: u64) -> Estimate {
    if truth.is_empty() {
        return Estimate { value: 0.0, ci: None };
    }
    let value = aggregate(Aggregate::Accuracy, truth, answers).expect("non-empty pairs");
    let ci = (truth.len() >= MIN_BOOTSTRAP_SAMPLES)
        .then(|| {
            let metric = |t: &[usize], p: &[usize]| aggregate(Aggregate::Accuracy, t, p);
            bootstrap_ci(truth, answers, &metric, BOOTSTRAP_RESAMPLES, CI_LEVEL, seed).ok()
        })
        .flatten();
    Estimate { value, ci }
}

type Shared = Arc<Mutex<Session>>;

/// Sessions in memory, optionally mirrored to one JSONL log per session.
pub struct StudyStore {
    dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Shared>>,
}

fn io_err(e: impl std::fmt::Display) -> StudyError {
    StudyError::Store(e.to_string())
}

impl StudyStore {
    pub fn in_memory() -> Self {
        Self { dir: None, sessions: RwLock::new(HashMap::new()) }
    }

    /// Opens (creating if needed) a store directory and replays every log.
    pub fn open(dir: &Path) -> Result<Self, StudyError> {
        fs::create_dir_all(dir)?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<PathBuf> =
            fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "jsonl")).collect();
        paths.sort();
        for path in paths {
            let session = Self::replay(&path)?;
            sessions.insert(session.id.clone(), Arc::new(Mutex::new(session)));
        }
        log::info!("study store {} holds {} sessions", dir.display(), sessions.len());
        Ok(Self { dir: Some(dir.to_path_buf()), sessions: RwLock::new(sessions) })
    }

    fn replay(path: &Path) -> Result<Session, StudyError> {
        let mut session: Option<Session> = None;
        for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(&line)
                .map_err(|e| StudyError::Store(format!("{}:{}: {e}", path.display(), n + 1)))?;
            match (event, session.as_mut()) {
                (Event::Created { id, role, cases, .. }, None) => session = Some(Session::new(id, role, cases)),
                (Event::Answered(r), Some(s)) => {
                    s.check(&r, 0).map_err(|e| StudyError::Store(format!("{}:{}: {e}", path.display(), n + 1)))?;
                    s.apply(r);
                }
                _ => return Err(StudyError::Store(format!("{}:{}: unexpected event order", path.display(), n + 1))),
            }
        }
        session.ok_or_else(|| StudyError::Store(format!("{} is empty", path.display())))
    }

    fn append(&self, id: &str, event: &Event) -> Result<(), StudyError> {
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(format!("{id}.jsonl")))?;
            writeln!(f, "{}", serde_json::to_string(event)?)?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn create(&self, id: String, role: Role, cases: Vec<CaseRef>, now_ms: u64) -> Result<Session, StudyError> {
        if cases.is_empty() {
            return Err(StudyError::BadRequest("a session needs at least one case".into()));
        }
        let session = Session::new(id.clone(), role, cases.clone());
        let mut map = self.sessions.write().map_err(io_err)?;
        if map.contains_key(&id) {
            return Err(StudyError::Conflict(format!("session {id} already exists")));
        }
        self.append(&id, &Event::Created { id: id.clone(), role, cases, at_ms: now_ms })?;
        map.insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn get(&self, id: &str) -> Result<Shared, StudyError> {
        self.sessions
            .read()
            .map_err(io_err)?
            .get(id)
            .cloned()
            .ok_or_else(|| StudyError::NotFound(format!("unknown session {id}")))
    }

    /// Runs `f` on a snapshot-free borrow of the session.
    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&Session) -> T) -> Result<T, StudyError> {
        let shared = self.get(id)?;
        let guard = shared.lock().map_err(io_err)?;
        Ok(f(&guard))
    }

    /// Validates, logs and applies one answer. Returns the cases still
    /// unanswered in that phase.
    pub fn answer(&self, id: &str, response: Response, washout_ms: u64) -> Result<usize, StudyError> {
        let shared = self.get(id)?;
        let mut session = shared.lock().map_err(io_err)?;
        session.check(&response, washout_ms)?;
        let phase = response.phase;
        self.append(id, &Event::Answered(response.clone()))?;
        session.apply(response);
        Ok(session.remaining(phase))
    }

    pub fn report(&self, id: &str, seed: u64) -> Result<StudyReport, StudyError> {
        let (role, cases, p1, p2) = self.with_session(id, |s| (s.role, s.cases.len(), s.pairs(Phase::Unassisted), s.pairs(Phase::Assisted)))?;
        let phase1 = PhaseSummary::from_pairs(&p1.0, &p1.1);
        let phase2 = PhaseSummary::from_pairs(&p2.0, &p2.1);
        let improvement = phase2.accuracy - phase1.accuracy;
        Ok(StudyReport { session: id.to_string(), role, cases, phase1, phase2, improvement, roles: self.role_aggregates(seed)? })
    }

    fn role_aggregates(&self, seed: u64) -> Result<BTreeMap<Role, RoleAggregate>, StudyError> {
        let all: Vec<Shared> = self.sessions.read().map_err(io_err)?.values().cloned().collect();
        let mut pooled: BTreeMap<Role, (usize, [(Vec<usize>, Vec<usize>); 2])> = BTreeMap::new();
        for shared in all {
            let s = shared.lock().map_err(io_err)?;
            let entry = pooled.entry(s.role).or_default();
            entry.0 += 1;
            for phase in [Phase::Unassisted, Phase::Assisted] {
                let (t, a) = s.pairs(phase);
                entry.1[phase.slot()].0.extend(t);
                entry.1[phase.slot()].1.extend(a);
            }
        }
        Ok(pooled
            .into_iter()
            .map(|(role, (sessions, [one, two]))| {
                let accuracy_phase1 = estimate(&one.0, &one.1, seed);
                let accuracy_phase2 = estimate(&two.0, &two.1, seed);
                let improvement = accuracy_phase2.value - accuracy_phase1.value;
                (role, RoleAggregate { sessions, accuracy_phase1, accuracy_phase2, improvement })
            })
            .collect())
    }
}
