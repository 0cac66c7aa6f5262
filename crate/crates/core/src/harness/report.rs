//! Plasticity/stability tables, ledger summaries and their CSV, Markdown
//! and JSON renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{defined, plasticity, stability, PredictionRecord};
use crate::strategies::{AccessLedger, StrategyKind};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: StrategyKind,
    /// `Pla^t` for t = 1..=steps; `None` where undefined or not reached.
    pub plasticity: Vec<Option<f64>>,
    /// `Sta^t` for t = 1..=steps; always `None` at t = 1.
    pub stability: Vec<Option<f64>>,
    pub ledger: AccessLedger,
    pub error: Option<String>,
    /// Wall-clock time; kept out of the serialized report.
    #[serde(skip)]
    pub seconds: f64,
}

/// Equality ignores `seconds`.
impl PartialEq for StrategyReport {
    fn eq(&self, other: &Self) -> bool {
        self.strategy == other.strategy
            && self.plasticity == other.plasticity
            && self.stability == other.stability
            && self.ledger == other.ledger
            && self.error == other.error
    }
}

impl StrategyReport {
    pub fn from_records(
        strategy: StrategyKind,
        steps: usize,
        records: &[PredictionRecord],
        ledger: AccessLedger,
        error: Option<String>,
    ) -> Self {
        let done = ledger.updates.len();
        let mut pla = vec![None; steps];
        let mut sta = vec![None; steps];
        for t in 1..=done.min(steps) {
            pla[t - 1] = records
                .iter()
                .find(|r| r.step == t && r.system == t)
                .and_then(|r| defined(plasticity(r)).ok().flatten());
            if t >= 2 {
                sta[t - 1] = defined(stability(records, t)).ok().flatten();
            }
        }
        Self {
            strategy,
            plasticity: pla,
            stability: sta,
            ledger,
            error,
            seconds: 0.0,
        }
    }

    pub fn pla(&self, t: usize) -> Option<f64> {
        self.plasticity.get(t.checked_sub(1)?).copied().flatten()
    }

    pub fn sta(&self, t: usize) -> Option<f64> {
        self.stability.get(t.checked_sub(1)?).copied().flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    /// One seed for a single run; every aggregated seed otherwise.
    pub seeds: Vec<u64>,
    pub systems: Vec<String>,
    pub steps: usize,
    pub strategies: Vec<StrategyReport>,
    /// Set when a strategy failed or the run stopped early.
    pub partial: bool,
}

impl SequenceReport {
    pub fn empty() -> Self {
        Self {
            seeds: Vec::new(),
            systems: Vec::new(),
            steps: 0,
            strategies: Vec::new(),
            partial: false,
        }
    }

    pub fn strategy(&self, kind: StrategyKind) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.strategy == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy");
        for t in 1..=self.steps {
            write!(out, ",pla_{t}").unwrap();
        }
        for t in 2..=self.steps {
            write!(out, ",sta_{t}").unwrap();
        }
        out.push_str(",status\n");
        for s in &self.strategies {
            out.push_str(s.strategy.name());
            for t in 1..=self.steps {
                out.push(',');
                out.push_str(&cell(s.pla(t), 6));
            }
            for t in 2..=self.steps {
                out.push(',');
                out.push_str(&cell(s.sta(t), 6));
            }
            let status = match &s.error {
                Some(e) => format!("\"error: {}\"", e.replace('"', "'").replace('\n', " ")),
                None if s.ledger.updates.len() < self.steps => "partial".into(),
                None => "ok".into(),
            };
            writeln!(out, ",{status}").unwrap();
        }
        out
    }

    /// Plasticity and stability per strategy and step, one row per strategy.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Strategy |");
        for t in 1..=self.steps {
            write!(out, " Pla{t} |").unwrap();
        }
        for t in 2..=self.steps {
            write!(out, " Sta{t} |").unwrap();
        }
        out.push_str("\n|---|");
        for _ in 0..(2 * self.steps).saturating_sub(1) {
            out.push_str("---:|");
        }
        out.push('\n');
        for s in &self.strategies {
            write!(out, "| {} |", s.strategy.name()).unwrap();
            for t in 1..=self.steps {
                write!(out, " {} |", cell(s.pla(t), 3)).unwrap();
            }
            for t in 2..=self.steps {
                write!(out, " {} |", cell(s.sta(t), 3)).unwrap();
            }
            out.push('\n');
        }
        if self.partial {
            out.push_str("\nPartial report: at least one strategy failed or stopped early.\n");
        }
        out
    }

    pub fn ledger_csv(&self) -> String {
        let mut out = String::from(
            "strategy,steps,training_set_reads,example_passes,fisher_passes,evaluators_stored,datasets_stored\n",
        );
        for s in &self.strategies {
            let l = &s.ledger;
            let fisher: usize = l.updates.iter().map(|u| u.fisher_passes).sum();
            let passes: usize = l.updates.iter().map(|u| u.example_passes).sum();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.strategy.name(),
                l.updates.len(),
                l.train_set_reads(),
                passes,
                fisher,
                l.evaluators_stored(),
                l.datasets_stored()
            )
            .unwrap();
        }
        out
    }

    pub fn ledger_markdown(&self) -> String {
        let mut out = String::from(
            "| Strategy | Training-set reads | Example passes | Evaluators stored | Datasets stored |\n|---|---:|---:|---:|---:|\n",
        );
        for s in &self.strategies {
            let l = &s.ledger;
            writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                s.strategy.name(),
                l.train_set_reads(),
                l.example_passes(),
                l.evaluators_stored(),
                l.datasets_stored()
            )
            .unwrap();
        }
        out
    }

    /// Writes `report.csv`, `report.md`, `ledger.csv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let md = format!("{}\n{}", self.to_markdown(), self.ledger_markdown());
        let files = [
            ("report.csv", self.to_csv()),
            ("report.md", md),
            ("ledger.csv", self.ledger_csv()),
            ("report.json", json + "\n"),
        ];
        files
            .into_iter()
            .map(|(name, text)| {
                let path = dir.join(name);
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                Ok(path)
            })
            .collect()
    }

    /// Per-strategy wall-clock seconds, as CSV. Kept apart from the
    /// deterministic report files.
    pub fn timings_csv(reports: &[SequenceReport]) -> String {
        let mut out = String::from("seed,strategy,seconds,example_passes\n");
        for r in reports {
            for s in &r.strategies {
                writeln!(
                    out,
                    "{},{},{:.3},{}",
                    r.seeds.first().copied().unwrap_or_default(),
                    s.strategy.name(),
                    s.seconds,
                    s.ledger.example_passes()
                )
                .unwrap();
            }
        }
        out
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

pub(crate) fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Cell-wise median over per-seed reports of the same strategies and
/// length. Ledgers and timings come from the first report.
pub fn aggregate(reports: &[SequenceReport]) -> Result<SequenceReport> {
    let first = reports.first().ok_or(Error::Empty("report list"))?;
    for r in reports {
        let same = r.steps == first.steps
            && r.strategies.len() == first.strategies.len()
            && r.strategies
                .iter()
                .zip(&first.strategies)
                .all(|(a, b)| a.strategy == b.strategy);
        if !same {
            return Err(Error::Invalid(
                "reports of different shapes cannot be aggregated".into(),
            ));
        }
    }
    let cells = |i: usize, t: usize, pick: fn(&StrategyReport, usize) -> Option<f64>| {
        median(
            reports
                .iter()
                .filter_map(|r| pick(&r.strategies[i], t))
                .collect(),
        )
    };
    let strategies = first
        .strategies
        .iter()
        .enumerate()
        .map(|(i, s)| StrategyReport {
            plasticity: (1..=first.steps)
                .map(|t| cells(i, t, StrategyReport::pla))
                .collect(),
            stability: (1..=first.steps)
                .map(|t| cells(i, t, StrategyReport::sta))
                .collect(),
            error: reports.iter().find_map(|r| r.strategies[i].error.clone()),
            ..s.clone()
        })
        .collect();
    Ok(SequenceReport {
        seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
        systems: first.systems.clone(),
        steps: first.steps,
        strategies,
        partial: reports.iter().any(|r| r.partial),
    })
}
