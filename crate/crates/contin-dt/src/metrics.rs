//! Continual-learning evaluation protocol: the per-task performance matrix
//! and the PER / BWT / FWT / DG metrics over it.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// The metric needs at least two tasks.
    Undefined { metric: &'static str, n_tasks: usize },
    /// Matrix entries are missing or non-finite; metrics refuse to impute.
    Incomplete { detail: String },
    /// DG needs per-task teacher returns.
    MissingTeachers,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Undefined { metric, n_tasks } => {
                write!(f, "{metric} is undefined for {n_tasks} task(s)")
            }
            MetricsError::Incomplete { detail } => write!(f, "incomplete matrix: {detail}"),
            MetricsError::MissingTeachers => write!(f, "teacher returns unavailable"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// a[i][j] is the mean return on task j after finishing training on task i
/// (both zero-indexed); `random_baseline[n]` is the return of the untrained
/// policy on task n; `teacher_returns[n]`, when present, is the final return
/// of the standalone per-task policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceMatrix {
    pub n_tasks: usize,
    pub returns: Vec<Vec<f64>>,
    pub random_baseline: Vec<f64>,
    pub teacher_returns: Option<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn new(n_tasks: usize) -> Self {
        PerformanceMatrix {
            n_tasks,
            returns: vec![vec![f64::NAN; n_tasks]; n_tasks],
            random_baseline: vec![f64::NAN; n_tasks],
            teacher_returns: None,
        }
    }

    pub fn from_rows(returns: Vec<Vec<f64>>, random_baseline: Vec<f64>) -> Self {
        PerformanceMatrix {
            n_tasks: returns.len(),
            returns,
            random_baseline,
            teacher_returns: None,
        }
    }

    fn check_complete(&self) -> Result<(), MetricsError> {
        if self.returns.len() != self.n_tasks {
            return Err(MetricsError::Incomplete {
                detail: format!("{} rows for {} tasks", self.returns.len(), self.n_tasks),
            });
        }
        for (i, row) in self.returns.iter().enumerate() {
            if row.len() != self.n_tasks {
                return Err(MetricsError::Incomplete {
                    detail: format!("row {i} has {} entries", row.len()),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(MetricsError::Incomplete {
                        detail: format!("entry ({i}, {j}) is not finite"),
                    });
                }
            }
        }
        Ok(())
    }

    fn check_baseline(&self) -> Result<(), MetricsError> {
        if self.random_baseline.len() != self.n_tasks
            || self.random_baseline.iter().any(|v| !v.is_finite())
        {
            return Err(MetricsError::Incomplete {
                detail: "random-init baseline missing".into(),
            });
        }
        Ok(())
    }
}

/// Mean of the last row: average final performance over all tasks.
pub fn per(m: &PerformanceMatrix) -> Result<f64, MetricsError> {
    m.check_complete()?;
    let last = &m.returns[m.n_tasks - 1];
    Ok(last.iter().sum::<f64>() / m.n_tasks as f64)
}

/// Mean over n < N of a[n][n] - a[N][n]. Positive values mean forgetting;
/// lower is better.
pub fn bwt(m: &PerformanceMatrix) -> Result<f64, MetricsError> {
    if m.n_tasks < 2 {
        return Err(MetricsError::Undefined {
            metric: "BWT",
            n_tasks: m.n_tasks,
        });
    }
    m.check_complete()?;
    let last = &m.returns[m.n_tasks - 1];
    let total: f64 = (0..m.n_tasks - 1)
        .map(|n| m.returns[n][n] - last[n])
        .sum();
    Ok(total / (m.n_tasks - 1) as f64)
}

/// Mean over n >= 2 of a[n-1][n] - b[n]: zero-shot transfer to the next
/// task relative to random initialization. Higher is better.
pub fn fwt(m: &PerformanceMatrix) -> Result<f64, MetricsError> {
    if m.n_tasks < 2 {
        return Err(MetricsError::Undefined {
            metric: "FWT",
            n_tasks: m.n_tasks,
        });
    }
    m.check_complete()?;
    m.check_baseline()?;
    let total: f64 = (1..m.n_tasks)
        .map(|n| m.returns[n - 1][n] - m.random_baseline[n])
        .sum();
    Ok(total / (m.n_tasks - 1) as f64)
}

/// Mean over tasks of (teacher return - a[n][n]): how far the continual
/// learner lags its standalone per-task teacher. Lower is better; negative
/// means the student beat its teacher.
pub fn dg(m: &PerformanceMatrix) -> Result<f64, MetricsError> {
    let teachers = m
        .teacher_returns
        .as_ref()
        .ok_or(MetricsError::MissingTeachers)?;
    m.check_complete()?;
    if teachers.len() != m.n_tasks || teachers.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::MissingTeachers);
    }
    let total: f64 = (0..m.n_tasks)
        .map(|n| teachers[n] - m.returns[n][n])
        .sum();
    Ok(total / m.n_tasks as f64)
}
