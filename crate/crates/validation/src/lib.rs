//! Bookkeeping for the acceptance suite: timing, verdict lines and the
//! `ACCEPTANCE_ONLY` filter.

use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Duration,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "[{}] C{} {}: {} ({:.1} s of {} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        )
    }
}

/// Runs `check`, which returns whether the numerical condition held and a
/// one-line summary. `shared` is time already spent on runs the check reuses.
pub fn timed<F>(id: u32, title: &'static str, limit_secs: u64, shared: Duration, check: F) -> Verdict
where
    F: FnOnce() -> (bool, String),
{
    let start = Instant::now();
    let (ok, mut detail) = check();
    let elapsed = start.elapsed() + shared;
    let limit = Duration::from_secs(limit_secs);
    if elapsed > limit {
        detail.push_str("; over the runtime limit");
    }
    Verdict { id, title, passed: ok && elapsed <= limit, detail, elapsed, limit }
}

/// Criteria named in `ACCEPTANCE_ONLY` (comma separated ids); all when unset.
pub fn selected(id: u32) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) if !list.trim().is_empty() => {
            list.split(',').any(|s| s.trim().trim_start_matches(['C', 'c']).parse() == Ok(id))
        }
        _ => true,
    }
}
