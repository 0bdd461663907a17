//! Grounding score.
//!
//! A prediction matches a ground-truth tuple when action, object, relation and
//! robot-interaction flag agree and the start times differ by at most `delta`
//! seconds. The actor is never compared. Each ground truth, in ascending time,
//! takes the closest unassigned matching prediction; precision, recall and
//! their harmonic mean (GS) follow from the counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{tuple_order, EventTuple};
use crate::stream_io::{Constellation, GroundTruthFile, Scenario};

pub const DEFAULT_DELTA: f64 = 5.0;
/// Size limit for the exhaustive matcher.
pub const ORACLE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("delta must be finite and positive, got {0}")]
    InvalidDelta(f64),
    #[error(
        "exhaustive matching is limited to {ORACLE_LIMIT} tuples per side (got {gts} and {preds})"
    )]
    TooLarge { gts: usize, preds: usize },
    #[error("no deltas given")]
    NoDeltas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Overall,
    Action,
    Object,
    Relation,
    Flag,
}

impl Role {
    pub const FIELDS: [Role; 4] = [Role::Action, Role::Object, Role::Relation, Role::Flag];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Overall => "overall",
            Role::Action => "action",
            Role::Object => "object",
            Role::Relation => "relation",
            Role::Flag => "flag",
        }
    }

    /// Short column header.
    pub fn symbol(self) -> &'static str {
        match self {
            Role::Overall => "GS",
            Role::Action => "x",
            Role::Object => "o",
            Role::Relation => "r",
            Role::Flag => "i",
        }
    }
}

pub fn field_match(gt: &EventTuple, pred: &EventTuple, role: Role) -> bool {
    match role {
        Role::Overall => Role::FIELDS.iter().all(|&r| field_match(gt, pred, r)),
        Role::Action => gt.action() == pred.action(),
        Role::Object => gt.object() == pred.object(),
        Role::Relation => gt.relation() == pred.relation(),
        Role::Flag => gt.robot_interaction() == pred.robot_interaction(),
    }
}

/// How per-role scores are obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerRoleMode {
    /// A separate greedy pass per role, comparing only that role's field.
    #[default]
    Rematch,
    /// One greedy pass on time alone; each pair then counts for a role when
    /// that role's field agrees.
    TimeAligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    delta: f64,
    pub per_role: PerRoleMode,
}

impl MatchConfig {
    pub fn new(delta: f64) -> Result<Self, MetricsError> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(MetricsError::InvalidDelta(delta));
        }
        Ok(Self {
            delta,
            per_role: PerRoleMode::Rematch,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            per_role: PerRoleMode::Rematch,
        }
    }
}

/// TP/FP/FN with the derived scores.
///
/// Empty-denominator conventions: precision is 1 with no predictions, recall
/// is 1 with no ground truth, GS is 0 when both are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn gs(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn summary(&self) -> Summary {
        Summary {
            counts: *self,
            precision: self.precision(),
            recall: self.recall(),
            gs: self.gs(),
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub gs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt_index: usize,
    pub pred_index: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchPair>,
    #[serde(flatten)]
    pub summary: Summary,
}

impl MatchReport {
    pub fn tp(&self) -> usize {
        self.summary.counts.tp
    }

    pub fn gs(&self) -> f64 {
        self.summary.gs
    }
}

/// Greedy assignment under `accept`; indices refer to the input slices.
fn greedy(
    gts: &[EventTuple],
    preds: &[EventTuple],
    delta: f64,
    accept: impl Fn(&EventTuple, &EventTuple) -> bool,
) -> MatchReport {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| tuple_order(&gts[a], &gts[b]).then(a.cmp(&b)));
    let mut taken = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for gi in order {
        let g = &gts[gi];
        let best = preds
            .iter()
            .enumerate()
            .filter(|(pi, p)| !taken[*pi] && accept(g, p))
            .map(|(pi, p)| (pi, (p.time() - g.time()).abs(), p.time()))
            .filter(|(_, dt, _)| *dt <= delta)
            .min_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then(a.2.total_cmp(&b.2))
                    .then(a.0.cmp(&b.0))
            });
        if let Some((pi, dt, _)) = best {
            taken[pi] = true;
            pairs.push(MatchPair {
                gt_index: gi,
                pred_index: pi,
                dt,
            });
        }
    }
    let tp = pairs.len();
    let counts = Counts {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
    };
    MatchReport {
        pairs,
        summary: counts.summary(),
    }
}

/// Greedy matching on the overall role.
pub fn match_events(gts: &[EventTuple], preds: &[EventTuple], cfg: &MatchConfig) -> MatchReport {
    match_role(gts, preds, cfg.delta, Role::Overall)
}

/// Greedy matching comparing only `role`'s field.
pub fn match_role(gts: &[EventTuple], preds: &[EventTuple], delta: f64, role: Role) -> MatchReport {
    greedy(gts, preds, delta, |g, p| field_match(g, p, role))
}

/// Per-role counts under the configured mode.
pub fn role_counts(
    gts: &[EventTuple],
    preds: &[EventTuple],
    cfg: &MatchConfig,
    role: Role,
) -> Counts {
    match (cfg.per_role, role) {
        (_, Role::Overall) | (PerRoleMode::Rematch, _) => {
            match_role(gts, preds, cfg.delta, role).summary.counts
        }
        (PerRoleMode::TimeAligned, _) => {
            let aligned = greedy(gts, preds, cfg.delta, |_, _| true);
            let tp = aligned
                .pairs
                .iter()
                .filter(|m| field_match(&gts[m.gt_index], &preds[m.pred_index], role))
                .count();
            Counts {
                tp,
                fp: preds.len() - tp,
                fn_: gts.len() - tp,
            }
        }
    }
}

/// Largest achievable TP over all one-to-one assignments, by exhaustive search.
pub fn oracle_match(
    gts: &[EventTuple],
    preds: &[EventTuple],
    delta: f64,
    role: Role,
) -> Result<usize, MetricsError> {
    if gts.len() > ORACLE_LIMIT || preds.len() > ORACLE_LIMIT {
        return Err(MetricsError::TooLarge {
            gts: gts.len(),
            preds: preds.len(),
        });
    }
    let feasible: Vec<Vec<usize>> = gts
        .iter()
        .map(|g| {
            (0..preds.len())
                .filter(|&pi| {
                    field_match(g, &preds[pi], role) && (preds[pi].time() - g.time()).abs() <= delta
                })
                .collect()
        })
        .collect();

    fn search(
        i: usize,
        used: &mut [bool],
        current: usize,
        best: &mut usize,
        feasible: &[Vec<usize>],
    ) {
        if current + (feasible.len() - i) <= *best {
            return;
        }
        if i == feasible.len() {
            *best = current;
            return;
        }
        for &pi in &feasible[i] {
            if !used[pi] {
                used[pi] = true;
                search(i + 1, used, current + 1, best, feasible);
                used[pi] = false;
            }
        }
        search(i + 1, used, current, best, feasible);
    }

    let mut best = 0;
    search(0, &mut vec![false; preds.len()], 0, &mut best, &feasible);
    Ok(best)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One ground-truth file scored against its predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingScore {
    pub scenario: Scenario,
    pub constellation: Constellation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording: Option<String>,
    pub overall: Summary,
    pub roles: BTreeMap<Role, Summary>,
}

pub fn score_recording(
    gt: &GroundTruthFile,
    preds: &[EventTuple],
    cfg: &MatchConfig,
) -> RecordingScore {
    let roles = Role::FIELDS
        .iter()
        .map(|&r| (r, role_counts(&gt.tuples, preds, cfg, r).summary()))
        .collect();
    RecordingScore {
        scenario: gt.meta.scenario,
        constellation: gt.meta.constellation,
        recording: gt.meta.recording.clone(),
        overall: match_events(&gt.tuples, preds, cfg).summary,
        roles,
    }
}

/// Recordings sharing a scenario and constellation, pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub scenario: Scenario,
    pub constellation: Constellation,
    pub recordings: usize,
    pub overall: Summary,
    pub roles: BTreeMap<Role, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub delta: f64,
    pub per_role_mode: PerRoleMode,
    pub recordings: Vec<RecordingScore>,
    pub cells: Vec<Cell>,
    /// TP/FP/FN pooled over every recording.
    pub overall: Summary,
    pub roles: BTreeMap<Role, Summary>,
    /// Mean of the per-recording overall GS.
    pub overall_macro_gs: f64,
}

fn pool<'a>(items: impl Iterator<Item = &'a RecordingScore>) -> (Counts, BTreeMap<Role, Counts>) {
    let mut overall = Counts::default();
    let mut roles: BTreeMap<Role, Counts> = BTreeMap::new();
    for r in items {
        overall += r.overall.counts;
        for (role, s) in &r.roles {
            *roles.entry(*role).or_default() += s.counts;
        }
    }
    (overall, roles)
}

fn summaries(roles: BTreeMap<Role, Counts>) -> BTreeMap<Role, Summary> {
    roles.into_iter().map(|(r, c)| (r, c.summary())).collect()
}

/// Scores several recordings; cells and overall figures pool TP/FP/FN.
pub fn score_suite(
    inputs: &[(GroundTruthFile, Vec<EventTuple>)],
    cfg: &MatchConfig,
) -> ScoreReport {
    let recordings: Vec<RecordingScore> = inputs
        .iter()
        .map(|(gt, p)| score_recording(gt, p, cfg))
        .collect();
    let mut keys: Vec<(Scenario, Constellation)> = recordings
        .iter()
        .map(|r| (r.scenario, r.constellation))
        .collect();
    keys.sort();
    keys.dedup();
    let cells = keys
        .into_iter()
        .map(|(scenario, constellation)| {
            let members = || {
                recordings
                    .iter()
                    .filter(move |r| r.scenario == scenario && r.constellation == constellation)
            };
            let (overall, roles) = pool(members());
            Cell {
                scenario,
                constellation,
                recordings: members().count(),
                overall: overall.summary(),
                roles: summaries(roles),
            }
        })
        .collect();
    let (overall, roles) = pool(recordings.iter());
    let overall_macro_gs = if recordings.is_empty() {
        1.0
    } else {
        recordings.iter().map(|r| r.overall.gs).sum::<f64>() / recordings.len() as f64
    };
    ScoreReport {
        delta: cfg.delta,
        per_role_mode: cfg.per_role,
        recordings,
        cells,
        overall: overall.summary(),
        roles: summaries(roles),
        overall_macro_gs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub gs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub deltas: Vec<f64>,
    pub rows: Vec<AblationRow>,
    /// Pooled over all rows.
    pub overall: Vec<f64>,
}

fn check_deltas(deltas: &[f64]) -> Result<(), MetricsError> {
    if deltas.is_empty() {
        return Err(MetricsError::NoDeltas);
    }
    for &d in deltas {
        MatchConfig::new(d)?;
    }
    Ok(())
}

/// Overall GS at each delta.
pub fn ablate_delta(
    gts: &[EventTuple],
    preds: &[EventTuple],
    deltas: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    check_deltas(deltas)?;
    Ok(deltas
        .iter()
        .map(|&d| match_role(gts, preds, d, Role::Overall).gs())
        .collect())
}

pub fn ablate_suite(
    inputs: &[(GroundTruthFile, Vec<EventTuple>)],
    deltas: &[f64],
) -> Result<AblationTable, MetricsError> {
    check_deltas(deltas)?;
    let mut pooled = vec![Counts::default(); deltas.len()];
    let mut rows = Vec::new();
    for (gt, preds) in inputs {
        let mut gs = Vec::new();
        for (k, &d) in deltas.iter().enumerate() {
            let c = match_role(&gt.tuples, preds, d, Role::Overall)
                .summary
                .counts;
            pooled[k] += c;
            gs.push(c.gs());
        }
        rows.push(AblationRow {
            label: recording_label(gt),
            gs,
        });
    }
    Ok(AblationTable {
        deltas: deltas.to_vec(),
        rows,
        overall: pooled.iter().map(Counts::gs).collect(),
    })
}

fn recording_label(gt: &GroundTruthFile) -> String {
    gt.meta
        .recording
        .clone()
        .unwrap_or_else(|| format!("{} {}", gt.meta.scenario, gt.meta.constellation))
}

// ---------------------------------------------------------------------------
// Text rendering
// ---------------------------------------------------------------------------

fn cell_text(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Scenario rows by constellation columns, plus an overall column.
pub fn render_table(report: &ScoreReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "Scenario");
    for c in Constellation::ALL {
        let _ = write!(out, " {:>7}", c.as_str());
    }
    let _ = writeln!(out, " {:>8}", "Overall");
    for s in Scenario::ALL {
        let cells: Vec<&Cell> = report.cells.iter().filter(|c| c.scenario == s).collect();
        if cells.is_empty() {
            continue;
        }
        let _ = write!(out, "{:<10}", s.as_str());
        let mut pooled = Counts::default();
        for c in Constellation::ALL {
            let cell = cells.iter().find(|x| x.constellation == c);
            if let Some(x) = cell {
                pooled += x.overall.counts;
            }
            let _ = write!(out, " {:>7}", cell_text(cell.map(|x| x.overall.gs)));
        }
        let _ = writeln!(out, " {:>8}", cell_text(Some(pooled.gs())));
    }
    let _ = writeln!(
        out,
        "Overall GS {:.3} (micro, {} recording{}; macro {:.3})",
        report.overall.gs,
        report.recordings.len(),
        if report.recordings.len() == 1 {
            ""
        } else {
            "s"
        },
        report.overall_macro_gs
    );
    out
}

/// One row per scenario and constellation with a column per role.
pub fn render_roles(report: &ScoreReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10} {:<6}", "Scenario", "Const");
    for r in Role::FIELDS {
        let _ = write!(out, " {:>6}", r.symbol());
    }
    let _ = writeln!(out, " {:>6}", "GS");
    let row = |out: &mut String, a: &str, b: &str, roles: &BTreeMap<Role, Summary>, gs: f64| {
        let _ = write!(out, "{a:<10} {b:<6}");
        for r in Role::FIELDS {
            let _ = write!(out, " {:>6}", cell_text(roles.get(&r).map(|s| s.gs)));
        }
        let _ = writeln!(out, " {:>6}", cell_text(Some(gs)));
    };
    for c in &report.cells {
        row(
            &mut out,
            c.scenario.as_str(),
            c.constellation.as_str(),
            &c.roles,
            c.overall.gs,
        );
    }
    row(&mut out, "Overall", "", &report.roles, report.overall.gs);
    out
}

pub fn render_ablation(table: &AblationTable) -> String {
    let width = table
        .rows
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(0)
        .max(9);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Recording");
    for d in &table.deltas {
        let _ = write!(out, " {:>7}", format!("{d}s"));
    }
    out.push('\n');
    for r in &table.rows {
        let _ = write!(out, "{:<width$}", r.label);
        for g in &r.gs {
            let _ = write!(out, " {g:>7.3}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<width$}", "Overall");
    for g in &table.overall {
        let _ = write!(out, " {g:>7.3}");
    }
    out.push('\n');
    out
}
