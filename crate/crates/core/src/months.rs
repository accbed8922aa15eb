//! 30-day month arithmetic relative to a diagnosis date.
//!
//! Month `t` after diagnosis is the half-open day interval
//! `[dx + 30·t, dx + 30·(t+1))`. Negative `t` indexes months before diagnosis.

use chrono::{Duration, NaiveDate};

pub const MONTH_DAYS: i64 = 30;

/// First day of month `t` after `origin`.
pub fn month_start(origin: NaiveDate, t: i64) -> NaiveDate {
    origin + Duration::days(MONTH_DAYS * t)
}

/// Month index containing `date`, counted from `origin` (may be negative).
pub fn month_index(origin: NaiveDate, date: NaiveDate) -> i64 {
    (date - origin).num_days().div_euclid(MONTH_DAYS)
}

/// Whole 30-day months from `origin` to `date`, rounded up. Zero when the dates coincide.
pub fn ceil_months(origin: NaiveDate, date: NaiveDate) -> i64 {
    let days = (date - origin).num_days();
    if days <= 0 {
        return 0;
    }
    (days + MONTH_DAYS - 1) / MONTH_DAYS
}

pub fn days_after(origin: NaiveDate, date: NaiveDate) -> i64 {
    (date - origin).num_days()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn month_boundaries_are_half_open() {
        let dx = d("2010-01-01");
        assert_eq!(month_index(dx, dx), 0);
        assert_eq!(month_index(dx, d("2010-01-30")), 0);
        assert_eq!(month_index(dx, d("2010-01-31")), 1);
        assert_eq!(month_index(dx, d("2009-12-31")), -1);
        assert_eq!(month_start(dx, 2), d("2010-03-02"));
    }

    #[test]
    fn ceil_months_rounds_up() {
        let dx = d("2013-03-01");
        assert_eq!(ceil_months(dx, dx), 0);
        assert_eq!(ceil_months(dx, dx + Duration::days(1)), 1);
        assert_eq!(ceil_months(dx, dx + Duration::days(30)), 1);
        assert_eq!(ceil_months(dx, dx + Duration::days(31)), 2);
    }
}
