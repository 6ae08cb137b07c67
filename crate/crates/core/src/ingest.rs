//! Usage-detail-record parsing and cleaning.
//!
//! Cleaning runs in three stages: dirty-record removal, per-user time
//! ordering, and correction of base-station switching artifacts. Two kinds of
//! switching artifact are corrected, both by copying the earlier record's
//! position onto the later one:
//!
//! * rule A: the first record ends exactly when the second begins, yet the
//!   two positions differ;
//! * rule B: the implied travel speed between the two records exceeds
//!   [`CleanConfig::v_max_kmh`].

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use chrono::NaiveDateTime;
use thiserror::Error;

use crate::geo::{great_circle_distance, travel_speed, GeoConfig, GeoPoint};

pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Speed ceiling used when none is configured.
pub const DEFAULT_V_MAX_KMH: f64 = 150.0;

pub const HEADER: [&str; 9] = [
    "phonenum", "stime", "etime", "host", "appid", "url", "lacid", "longitude", "latitude",
];

const REQUIRED: [&str; 6] = ["phonenum", "stime", "etime", "lacid", "longitude", "latitude"];

#[derive(Error, Debug)]
pub enum IngestError {
    #[error("header is missing required column `{0}`")]
    MissingHeader(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Why a data line was not turned into a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    EmptyRequiredField(String),
    FieldCount { expected: usize, found: usize },
    BadTimestamp(String),
    BadCoordinate(String),
    NotUtf8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line: u64,
    pub reason: RejectReason,
}

/// Seconds since the epoch of a naive local timestamp.
pub type Timestamp = i64;

pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    NaiveDateTime::parse_from_str(s.trim(), TIME_FORMAT)
        .ok()
        .map(|t| t.and_utc().timestamp())
}

pub fn format_timestamp(t: Timestamp) -> String {
    chrono::DateTime::from_timestamp(t, 0)
        .map(|d| d.naive_utc().format(TIME_FORMAT).to_string())
        .unwrap_or_default()
}

/// One usage-detail record.
#[derive(Debug, Clone, PartialEq)]
pub struct UdrRecord {
    pub phonenum: String,
    pub stime: Timestamp,
    pub etime: Timestamp,
    pub host: String,
    pub appid: String,
    pub url: String,
    pub lacid: String,
    pub location: GeoPoint,
}

impl UdrRecord {
    fn dedup_key(&self) -> (String, i64, i64, String, String, String, String, u64, u64) {
        (
            self.phonenum.clone(),
            self.stime,
            self.etime,
            self.host.clone(),
            self.appid.clone(),
            self.url.clone(),
            self.lacid.clone(),
            self.location.longitude.to_bits(),
            self.location.latitude.to_bits(),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.stime <= self.etime && !self.phonenum.is_empty() && !self.lacid.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanConfig {
    pub v_max_kmh: f64,
    pub geo: GeoConfig,
}

impl CleanConfig {
    pub fn new(v_max_kmh: f64, geo: GeoConfig) -> Result<Self, IngestError> {
        if v_max_kmh > 0.0 && v_max_kmh.is_finite() {
            Ok(Self { v_max_kmh, geo })
        } else {
            Err(IngestError::InvalidConfig(format!("v_max must be positive, got {v_max_kmh}")))
        }
    }
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { v_max_kmh: DEFAULT_V_MAX_KMH, geo: GeoConfig::default() }
    }
}

/// A position record inside a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub stime: Timestamp,
    pub etime: Timestamp,
    pub lacid: String,
    pub location: GeoPoint,
    pub host: String,
    pub appid: String,
    pub url: String,
}

/// Time-ordered records of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user: String,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_records(&self) -> Vec<UdrRecord> {
        self.points
            .iter()
            .map(|p| UdrRecord {
                phonenum: self.user.clone(),
                stime: p.stime,
                etime: p.etime,
                host: p.host.clone(),
                appid: p.appid.clone(),
                url: p.url.clone(),
                lacid: p.lacid.clone(),
                location: p.location,
            })
            .collect()
    }
}

pub fn flatten(trajectories: &[Trajectory]) -> Vec<UdrRecord> {
    trajectories.iter().flat_map(Trajectory::to_records).collect()
}

/// Parses UDR CSV. Malformed rows come back as [`RejectedLine`]s; only a
/// header without the required columns is an error.
pub fn parse_udr_csv<R: Read>(input: R) -> Result<(Vec<UdrRecord>, Vec<RejectedLine>), IngestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    for name in REQUIRED {
        if column(name).is_none() {
            return Err(IngestError::MissingHeader(name.to_string()));
        }
    }
    let idx = |name: &str| column(name).expect("checked above");
    let (i_phone, i_stime, i_etime, i_lac, i_lon, i_lat) = (
        idx("phonenum"),
        idx("stime"),
        idx("etime"),
        idx("lacid"),
        idx("longitude"),
        idx("latitude"),
    );
    let (i_host, i_app, i_url) = (column("host"), column("appid"), column("url"));

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut raw = csv::ByteRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_byte_record(&mut raw) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => return Err(e.into()),
                _ => {
                    rejects.push(RejectedLine { line, reason: RejectReason::NotUtf8 });
                    continue;
                }
            },
        }
        let line = raw.position().map(|p| p.line()).unwrap_or(line);
        if raw.len() != headers.len() {
            rejects.push(RejectedLine {
                line,
                reason: RejectReason::FieldCount { expected: headers.len(), found: raw.len() },
            });
            continue;
        }
        let Ok(row) = csv::StringRecord::from_byte_record(raw.clone()) else {
            rejects.push(RejectedLine { line, reason: RejectReason::NotUtf8 });
            continue;
        };
        match parse_row(&row, [i_phone, i_stime, i_etime, i_lac, i_lon, i_lat], [i_host, i_app, i_url]) {
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.push(RejectedLine { line, reason }),
        }
    }
    Ok((records, rejects))
}

fn parse_row(row: &csv::StringRecord, req: [usize; 6], opt: [Option<usize>; 3]) -> Result<UdrRecord, RejectReason> {
    let mut vals = [""; 6];
    for (slot, (&i, name)) in vals.iter_mut().zip(req.iter().zip(REQUIRED)) {
        let v = row.get(i).unwrap_or("").trim();
        if v.is_empty() {
            return Err(RejectReason::EmptyRequiredField(name.to_string()));
        }
        *slot = v;
    }
    let [phone, stime, etime, lac, lon, lat] = vals;
    let stime = parse_timestamp(stime).ok_or_else(|| RejectReason::BadTimestamp(stime.to_string()))?;
    let etime = parse_timestamp(etime).ok_or_else(|| RejectReason::BadTimestamp(etime.to_string()))?;
    let lon_v: f64 = lon.parse().map_err(|_| RejectReason::BadCoordinate(lon.to_string()))?;
    let lat_v: f64 = lat.parse().map_err(|_| RejectReason::BadCoordinate(lat.to_string()))?;
    let location = GeoPoint::new(lon_v, lat_v).map_err(|e| RejectReason::BadCoordinate(e.to_string()))?;
    let get = |i: Option<usize>| i.and_then(|i| row.get(i)).unwrap_or("").to_string();
    Ok(UdrRecord {
        phonenum: phone.to_string(),
        stime,
        etime,
        host: get(opt[0]),
        appid: get(opt[1]),
        url: get(opt[2]),
        lacid: lac.to_string(),
        location,
    })
}

/// Writes records in the same nine-column schema the parser reads.
pub fn write_udr_csv<W: Write>(out: W, records: &[UdrRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.phonenum.as_str(),
            &format_timestamp(r.stime),
            &format_timestamp(r.etime),
            &r.host,
            &r.appid,
            &r.url,
            &r.lacid,
            &r.location.longitude.to_string(),
            &r.location.latitude.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Removes exact duplicates and invalid records, keeping first occurrences in
/// input order.
pub fn drop_dirty(records: Vec<UdrRecord>) -> Vec<UdrRecord> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !r.is_valid() {
            continue;
        }
        if seen.insert(r.dedup_key()) {
            out.push(r);
        }
    }
    out
}

/// One trajectory per user in order of first appearance, points sorted by
/// `stime`, then `etime`, then input order.
pub fn group_and_sort(records: Vec<UdrRecord>) -> Vec<Trajectory> {
    let mut slot: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<Trajectory> = Vec::new();
    for r in records {
        let i = *slot.entry(r.phonenum.clone()).or_insert_with(|| {
            out.push(Trajectory { user: r.phonenum.clone(), points: Vec::new() });
            out.len() - 1
        });
        out[i].points.push(TrajectoryPoint {
            stime: r.stime,
            etime: r.etime,
            lacid: r.lacid,
            location: r.location,
            host: r.host,
            appid: r.appid,
            url: r.url,
        });
    }
    for t in &mut out {
        // stable: equal keys keep input order
        t.points.sort_by_key(|p| (p.stime, p.etime));
    }
    out
}

/// What [`fix_switching`] did to one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchFix {
    SharedBoundary,
    Overspeed,
}

/// Single left-to-right pass correcting base-station switching artifacts.
///
/// A corrected point takes part in the check against its successor, so a
/// run of spurious positions collapses onto the last trusted one.
pub fn fix_switching(mut traj: Trajectory, cfg: &CleanConfig) -> Trajectory {
    fix_switching_logged(&mut traj, cfg);
    traj
}

/// Like [`fix_switching`], returning the index of every rewritten point.
pub fn fix_switching_logged(traj: &mut Trajectory, cfg: &CleanConfig) -> Vec<(usize, SwitchFix)> {
    let mut fixes = Vec::new();
    for j in 1..traj.points.len() {
        let (head, tail) = traj.points.split_at_mut(j);
        let prev = &head[j - 1];
        let cur = &mut tail[0];
        let gap = cur.stime - prev.etime;
        let fix = if gap == 0 {
            (prev.location.key() != cur.location.key()).then_some(SwitchFix::SharedBoundary)
        } else {
            // Overlapping records are exempt from rule A and get a one-second gap.
            let dist = great_circle_distance(prev.location, cur.location, cfg.geo);
            let speed = travel_speed(dist, 0, gap.max(1)).expect("duration is at least one second");
            (speed > cfg.v_max_kmh).then_some(SwitchFix::Overspeed)
        };
        if let Some(kind) = fix {
            cur.location = prev.location;
            cur.lacid = prev.lacid.clone();
            fixes.push((j, kind));
        }
    }
    fixes
}

/// `drop_dirty`, then `group_and_sort`, then `fix_switching` per user.
///
/// Rewriting positions can turn two records into exact copies; those copies
/// are collapsed so that a second run is a no-op.
pub fn clean_pipeline(records: Vec<UdrRecord>, cfg: &CleanConfig) -> Vec<Trajectory> {
    group_and_sort(drop_dirty(records))
        .into_iter()
        .map(|t| dedup_points(fix_switching(t, cfg)))
        .collect()
}

fn dedup_points(mut traj: Trajectory) -> Trajectory {
    let mut seen = HashSet::new();
    traj.points.retain(|p| {
        seen.insert((
            p.stime,
            p.etime,
            p.lacid.clone(),
            p.location.longitude.to_bits(),
            p.location.latitude.to_bits(),
            p.host.clone(),
            p.appid.clone(),
            p.url.clone(),
        ))
    });
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TABLE_A: &str = "phonenum,stime,etime,host,appid,url,lacid,longitude,latitude
73913461166,2014-11-26 10:54:31,2014-11-26 10:54:32,,,,1,119.90042,28.88195
73913461166,2014-11-26 10:54:32,2014-11-26 10:54:51,,,,1,119.89141,28.87161
";

    const TABLE_B: &str = "phonenum,stime,etime,host,appid,url,lacid,longitude,latitude
74424106409,2014-11-24 09:49:41,2014-11-24 09:49:49,,,,1,120.07602,29.49888
74424106409,2014-11-24 09:58:08,2014-11-24 09:58:13,,,,2,120.04997,28.88697
";

    fn rec(user: &str, s: i64, e: i64, lac: &str, lon: f64, lat: f64) -> UdrRecord {
        UdrRecord {
            phonenum: user.into(),
            stime: s,
            etime: e,
            host: String::new(),
            appid: String::new(),
            url: String::new(),
            lacid: lac.into(),
            location: GeoPoint::new(lon, lat).unwrap(),
        }
    }

    #[test]
    fn parses_both_tables() {
        let (r, bad) = parse_udr_csv(TABLE_A.as_bytes()).unwrap();
        assert_eq!((r.len(), bad.len()), (2, 0));
        assert_eq!(r[0].etime, r[1].stime);
        let (r, bad) = parse_udr_csv(TABLE_B.as_bytes()).unwrap();
        assert_eq!((r.len(), bad.len()), (2, 0));
        assert_eq!(r[1].stime - r[0].etime, 499);
    }

    #[test]
    fn empty_stime_is_rejected() {
        let csv = "phonenum,stime,etime,host,appid,url,lacid,longitude,latitude
1,,2014-11-26 10:54:32,,,,1,119.9,28.8
";
        let (r, bad) = parse_udr_csv(csv.as_bytes()).unwrap();
        assert!(r.is_empty());
        assert_eq!(bad, vec![RejectedLine { line: 2, reason: RejectReason::EmptyRequiredField("stime".into()) }]);
    }

    #[test]
    fn header_only_and_missing_header() {
        let (r, bad) = parse_udr_csv(&HEADER.join(",").into_bytes()[..]).unwrap();
        assert!(r.is_empty() && bad.is_empty());
        let err = parse_udr_csv("phonenum,stime,etime,lacid,longitude\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::MissingHeader(c) if c == "latitude"));
    }

    #[test]
    fn malformed_rows_carry_reasons() {
        let csv = "phonenum,stime,etime,host,appid,url,lacid,longitude,latitude
1,2014-11-26 10:54:31,2014-11-26 10:54:32,,,,1,abc,28.8
1,2014-13-26 10:54:31,2014-11-26 10:54:32,,,,1,119.9,28.8
1,2014-11-26 10:54:31,2014-11-26 10:54:32,,,,1,119.9
1,2014-11-26 10:54:31,2014-11-26 10:54:32,,,,1,119.9,95.0
";
        let (r, bad) = parse_udr_csv(csv.as_bytes()).unwrap();
        assert!(r.is_empty());
        assert_eq!(bad.iter().map(|b| b.line).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert!(matches!(bad[0].reason, RejectReason::BadCoordinate(_)));
        assert!(matches!(bad[1].reason, RejectReason::BadTimestamp(_)));
        assert!(matches!(bad[2].reason, RejectReason::FieldCount { expected: 9, found: 8 }));
        assert!(matches!(bad[3].reason, RejectReason::BadCoordinate(_)));
    }

    #[test]
    fn csv_round_trip() {
        let (r, _) = parse_udr_csv(TABLE_B.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_udr_csv(&mut buf, &r).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), TABLE_B);
    }

    #[test]
    fn drop_dirty_cases() {
        let a = rec("u", 0, 5, "1", 119.9, 28.8);
        let out = drop_dirty(vec![a.clone(), a.clone()]);
        assert_eq!(out, vec![a.clone()]);
        let bad = rec("u", 10, 5, "1", 119.9, 28.8);
        assert_eq!(drop_dirty(vec![bad, a.clone()]), vec![a.clone()]);
        let clean = vec![a.clone(), rec("u", 6, 9, "1", 119.9, 28.8)];
        assert_eq!(drop_dirty(clean.clone()), clean);
    }

    #[test]
    fn grouping_and_ordering() {
        let t = group_and_sort(vec![
            rec("a", 10, 11, "1", 119.9, 28.8),
            rec("b", 5, 6, "1", 119.9, 28.8),
            rec("a", 1, 2, "1", 119.9, 28.8),
            rec("b", 1, 9, "1", 119.9, 28.8),
            rec("b", 1, 3, "1", 119.9, 28.8),
        ]);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].user, "a");
        assert_eq!(t[0].points.iter().map(|p| p.stime).collect::<Vec<_>>(), vec![1, 10]);
        assert_eq!(t[1].points.iter().map(|p| (p.stime, p.etime)).collect::<Vec<_>>(), vec![(1, 3), (1, 9), (5, 6)]);

        let single = group_and_sort(vec![rec("a", 1, 2, "1", 119.9, 28.8)]);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 1);

        let (r, _) = parse_udr_csv(TABLE_B.as_bytes()).unwrap();
        let t = group_and_sort(r.clone());
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].to_records(), r);
    }

    #[test]
    fn shared_boundary_rule() {
        let (r, _) = parse_udr_csv(TABLE_A.as_bytes()).unwrap();
        let mut t = group_and_sort(r).remove(0);
        let log = fix_switching_logged(&mut t, &CleanConfig::default());
        assert_eq!(log, vec![(1, SwitchFix::SharedBoundary)]);
        assert_eq!(t.points[1].location, GeoPoint::new(119.90042, 28.88195).unwrap());
    }

    #[test]
    fn overspeed_rule() {
        let (r, _) = parse_udr_csv(TABLE_B.as_bytes()).unwrap();
        let mut t = group_and_sort(r).remove(0);
        let log = fix_switching_logged(&mut t, &CleanConfig::default());
        assert_eq!(log, vec![(1, SwitchFix::Overspeed)]);
        assert_eq!(t.points[1].location, GeoPoint::new(120.07602, 29.49888).unwrap());
        assert_eq!(t.points[1].lacid, "1");
    }

    #[test]
    fn slow_trajectory_is_untouched() {
        let t = group_and_sort(vec![
            rec("a", 0, 10, "1", 119.90, 28.80),
            rec("a", 3600, 3700, "1", 119.95, 28.80),
            rec("a", 7200, 7300, "2", 120.00, 28.85),
        ])
        .remove(0);
        assert_eq!(fix_switching(t.clone(), &CleanConfig::default()), t);
    }

    #[test]
    fn correction_propagates() {
        // Two spurious far points in a row both collapse onto the first.
        let t = group_and_sort(vec![
            rec("a", 0, 10, "1", 119.90, 28.80),
            rec("a", 20, 30, "9", 120.90, 29.80),
            rec("a", 40, 50, "9", 120.90, 29.80),
        ])
        .remove(0);
        let fixed = fix_switching(t, &CleanConfig::default());
        assert!(fixed.points.iter().all(|p| p.lacid == "1"));
    }

    fn arb_records() -> impl Strategy<Value = Vec<UdrRecord>> {
        // Stations on a coarse grid so distinct stations are far apart.
        let station = (0u8..6).prop_map(|i| (119.0 + 0.03 * i as f64, 28.5 + 0.02 * i as f64, format!("{}", i / 3)));
        let one = (0u8..3, 0i64..20_000, 0i64..2_000, station)
            .prop_map(|(u, s, d, (lon, lat, lac))| rec(&format!("u{u}"), s, s + d, &lac, lon, lat));
        prop::collection::vec(one, 1..60)
            .prop_flat_map(|v| {
                let n = v.len();
                (Just(v), prop::collection::vec(0..n, 0..5))
            })
            .prop_map(|(mut v, dups)| {
                for i in dups {
                    v.push(v[i].clone());
                }
                v
            })
    }

    proptest! {
        #[test]
        fn pipeline_is_idempotent(records in arb_records()) {
            let cfg = CleanConfig::default();
            let once = clean_pipeline(records, &cfg);
            let twice = clean_pipeline(flatten(&once), &cfg);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn pipeline_postconditions(records in arb_records()) {
            let cfg = CleanConfig::default();
            for t in clean_pipeline(records, &cfg) {
                for w in t.points.windows(2) {
                    if w[1].stime == w[0].etime {
                        prop_assert_eq!(w[0].location.key(), w[1].location.key());
                    } else if w[1].stime > w[0].etime {
                        let d = great_circle_distance(w[0].location, w[1].location, cfg.geo);
                        prop_assert!(travel_speed(d, w[0].etime, w[1].stime).unwrap() <= cfg.v_max_kmh);
                    }
                }
            }
        }

        #[test]
        fn fixing_conserves_points(records in arb_records()) {
            let cfg = CleanConfig::default();
            for t in group_and_sort(drop_dirty(records)) {
                let n = t.len();
                let fixed = fix_switching(t.clone(), &cfg);
                prop_assert_eq!(fixed.len(), n);
                for (a, b) in t.points.iter().zip(&fixed.points) {
                    prop_assert_eq!((a.stime, a.etime), (b.stime, b.etime));
                }
            }
        }

        #[test]
        fn accepted_plus_rejected_is_line_count(rows in prop::collection::vec((any::<bool>(), 0u8..4), 0..40)) {
            let mut text = HEADER.join(",") + "\n";
            for (good, kind) in &rows {
                if *good {
                    text += "7,2014-11-26 10:54:31,2014-11-26 10:54:32,h,a,u,1,119.9,28.8\n";
                } else {
                    text += match kind {
                        0 => "7,,2014-11-26 10:54:32,h,a,u,1,119.9,28.8\n",
                        1 => "7,2014-11-26 10:54:31,2014-11-26 10:54:32,h,a,u,1,x,28.8\n",
                        2 => "7,2014-11-26,2014-11-26 10:54:32,h,a,u,1,119.9,28.8\n",
                        _ => "7,2014-11-26 10:54:31\n",
                    };
                }
            }
            let (ok, bad) = parse_udr_csv(text.as_bytes()).unwrap();
            prop_assert_eq!(ok.len() + bad.len(), rows.len());
            prop_assert_eq!(ok.len(), rows.iter().filter(|r| r.0).count());
        }
    }
}
