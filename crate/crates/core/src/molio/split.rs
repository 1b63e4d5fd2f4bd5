use chrono::{DateTime, NaiveDate, NaiveDateTime};

use super::MoleculeRecord;
use crate::error::{Error, Result};

fn parse_date(raw: &str) -> Option<NaiveDateTime> {
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.naive_utc());
    }
    NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S").ok()
}

/// Number of trailing records taken by `fraction` of `n`: ⌈n·fraction⌉.
pub fn tail_count(n: usize, fraction: f64) -> usize {
    // the epsilon keeps e.g. 100 * 0.2 from rounding up to 21
    ((n as f64 * fraction - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Record indices in chronological order (stable for equal dates). Undated
/// datasets keep their input order.
pub fn chronological_order(records: &[MoleculeRecord]) -> Result<Vec<usize>> {
    let dated = records.iter().filter(|r| r.registration_date.is_some()).count();
    if dated == 0 {
        return Ok((0..records.len()).collect());
    }
    if dated != records.len() {
        return Err(Error::AmbiguousChronology { dated, total: records.len() });
    }
    let mut keyed = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let raw = r.registration_date.as_deref().unwrap_or_default();
        let when = parse_date(raw).ok_or_else(|| Error::InvalidRecord {
            record: r.id.clone(),
            msg: format!("unparseable registration date '{raw}'"),
        })?;
        keyed.push((when, i));
    }
    keyed.sort_by_key(|&(when, _)| when);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Splits records into (train, test): the newest ⌈n·test_fraction⌉ form the test set.
pub fn chronological_split(
    records: Vec<MoleculeRecord>,
    test_fraction: f64,
) -> Result<(Vec<MoleculeRecord>, Vec<MoleculeRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let order = chronological_order(&records)?;
    let n_test = tail_count(records.len(), test_fraction);
    let mut slots: Vec<Option<MoleculeRecord>> = records.into_iter().map(Some).collect();
    let mut sorted: Vec<MoleculeRecord> = order.into_iter().map(|i| slots[i].take().unwrap()).collect();
    let test = sorted.split_off(sorted.len() - n_test);
    Ok((sorted, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::Atom;

    fn rec(id: &str, date: Option<&str>) -> MoleculeRecord {
        let mut r = MoleculeRecord::new(id, vec![Atom::new("C", [0.0; 3])], vec![]);
        r.registration_date = date.map(str::to_string);
        r
    }

    #[test]
    fn hundred_records_split_80_20() {
        // dates shuffled relative to input order
        let records: Vec<_> = (0..100)
            .map(|i| {
                let day = (i * 37) % 100;
                rec(&format!("m{day}"), Some(&format!("2015-{:02}-{:02}", 1 + day / 28, 1 + day % 28)))
            })
            .collect();
        let (train, test) = chronological_split(records, 0.2).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        let newest: Vec<String> = (80..100).map(|d| format!("m{d}")).collect();
        let test_ids: Vec<String> = test.iter().map(|r| r.id.clone()).collect();
        assert_eq!(test_ids, newest);
    }

    #[test]
    fn five_records_one_test() {
        let records: Vec<_> = (0..5).map(|i| rec(&format!("m{i}"), Some(&format!("2020-01-0{}", i + 1)))).collect();
        let (train, test) = chronological_split(records, 0.2).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 1);
        assert_eq!(test[0].id, "m4");
    }

    #[test]
    fn ties_keep_input_order() {
        let records = vec![
            rec("b", Some("2020-01-02")),
            rec("a1", Some("2020-01-01")),
            rec("a2", Some("2020-01-01")),
            rec("a3", Some("2020-01-01")),
        ];
        let (train, test) = chronological_split(records, 0.25).unwrap();
        let ids: Vec<&str> = train.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a1", "a2", "a3"]);
        assert_eq!(test[0].id, "b");
    }

    #[test]
    fn mixed_dates_are_rejected() {
        let records = vec![rec("a", Some("2020-01-01")), rec("b", None)];
        assert!(matches!(
            chronological_split(records, 0.5),
            Err(Error::AmbiguousChronology { dated: 1, total: 2 })
        ));
    }

    #[test]
    fn undated_input_order_is_chronology() {
        let records: Vec<_> = (0..10).map(|i| rec(&format!("m{i}"), None)).collect();
        let (train, test) = chronological_split(records, 0.3).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(test.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["m7", "m8", "m9"]);
    }

    #[test]
    fn tail_count_is_ceiling() {
        assert_eq!(tail_count(100, 0.2), 20);
        assert_eq!(tail_count(5, 0.2), 1);
        assert_eq!(tail_count(7, 0.2), 2);
        assert_eq!(tail_count(10, 0.1), 1);
    }
}
