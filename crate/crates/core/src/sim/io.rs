//! On-disk simulation logs: `records.csv`, `events.csv`, `detectors.csv`
//! and `meta.json` in one directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DetectorRecord, Event, EventKind, LogMeta, LogSink, SimulationLog, VehicleRecord};
use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const DETECTORS_FILE: &str = "detectors.csv";
pub const META_FILE: &str = "meta.json";

const RECORD_HEADER: [&str; 7] = ["vehicle_id", "t", "position", "v", "a", "lane_id", "gap_to_leader"];
const EVENT_HEADER: [&str; 3] = ["t", "kind", "vehicle_id"];
const DETECTOR_HEADER: [&str; 6] = ["zone_id", "window_start", "window_length", "count", "mean_speed", "density"];

/// Streams a run to disk as it is simulated. Write errors are kept and
/// reported by [`CsvLogSink::finish`].
pub struct CsvLogSink {
    records: csv::Writer<BufWriter<File>>,
    events: csv::Writer<BufWriter<File>>,
    detectors: csv::Writer<BufWriter<File>>,
    error: Option<Error>,
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    Ok(w)
}

impl CsvLogSink {
    /// Creates the directory and writes `meta.json` and the CSV headers.
    pub fn create(dir: impl AsRef<Path>, meta: &LogMeta) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut m = BufWriter::new(File::create(dir.join(META_FILE))?);
        serde_json::to_writer_pretty(&mut m, meta)?;
        m.write_all(b"\n")?;
        m.flush()?;
        Ok(CsvLogSink {
            records: writer(&dir.join(RECORDS_FILE), &RECORD_HEADER)?,
            events: writer(&dir.join(EVENTS_FILE), &EVENT_HEADER)?,
            detectors: writer(&dir.join(DETECTORS_FILE), &DETECTOR_HEADER)?,
            error: None,
        })
    }

    fn keep(&mut self, r: std::result::Result<(), csv::Error>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e.into());
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.records.flush()?;
        self.events.flush()?;
        self.detectors.flush()?;
        Ok(())
    }
}

fn kind_str(k: EventKind) -> &'static str {
    match k {
        EventKind::Collision => "collision",
        EventKind::EmergencyStop => "emergency_stop",
        EventKind::InsertionBlocked => "insertion_blocked",
    }
}

impl LogSink for CsvLogSink {
    fn record(&mut self, r: &VehicleRecord) {
        let res = self.records.write_record([
            r.vehicle_id.to_string(),
            r.t.to_string(),
            r.position.to_string(),
            r.v.to_string(),
            r.a.to_string(),
            r.lane_id.to_string(),
            r.gap_to_leader.map(|g| g.to_string()).unwrap_or_default(),
        ]);
        self.keep(res);
    }

    fn event(&mut self, e: &Event) {
        let res = self
            .events
            .write_record([e.t.to_string(), kind_str(e.kind).to_string(), e.vehicle_id.to_string()]);
        self.keep(res);
    }

    fn detector(&mut self, d: &DetectorRecord) {
        let res = self.detectors.write_record([
            d.zone_id.to_string(),
            d.window_start.to_string(),
            d.window_length.to_string(),
            d.count.to_string(),
            d.mean_speed.to_string(),
            d.density.to_string(),
        ]);
        self.keep(res);
    }
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let mut r = csv::Reader::from_path(path)?;
    let got: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if got != header {
        return Err(Error::Schema(format!("{} has header {:?}, expected {:?}", path.display(), got, header)));
    }
    Ok(r)
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Schema(format!("cannot parse {what} from '{s}'")))
}

/// Reads a log directory written by [`CsvLogSink`]. A missing `meta.json`
/// is allowed; missing CSV files are not.
pub fn read_log_dir(dir: impl AsRef<Path>) -> Result<SimulationLog> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        Some(serde_json::from_reader(File::open(meta_path)?)?)
    } else {
        None
    };
    let mut log = SimulationLog {
        meta,
        ..Default::default()
    };
    for row in reader(&dir.join(RECORDS_FILE), &RECORD_HEADER)?.records() {
        let row = row?;
        log.records.push(VehicleRecord {
            vehicle_id: num(&row[0], "vehicle_id")?,
            t: num(&row[1], "t")?,
            position: num(&row[2], "position")?,
            v: num(&row[3], "v")?,
            a: num(&row[4], "a")?,
            lane_id: num(&row[5], "lane_id")?,
            gap_to_leader: if row[6].is_empty() { None } else { Some(num(&row[6], "gap_to_leader")?) },
        });
    }
    for row in reader(&dir.join(EVENTS_FILE), &EVENT_HEADER)?.records() {
        let row = row?;
        let kind = match &row[1] {
            "collision" => EventKind::Collision,
            "emergency_stop" => EventKind::EmergencyStop,
            "insertion_blocked" => EventKind::InsertionBlocked,
            other => return Err(Error::Schema(format!("unknown event kind '{other}'"))),
        };
        log.events.push(Event {
            t: num(&row[0], "t")?,
            kind,
            vehicle_id: num(&row[2], "vehicle_id")?,
        });
    }
    for row in reader(&dir.join(DETECTORS_FILE), &DETECTOR_HEADER)?.records() {
        let row = row?;
        log.detector_records.push(DetectorRecord {
            zone_id: num(&row[0], "zone_id")?,
            window_start: num(&row[1], "window_start")?,
            window_length: num(&row[2], "window_length")?,
            count: num(&row[3], "count")?,
            mean_speed: num(&row[4], "mean_speed")?,
            density: num(&row[5], "density")?,
        });
    }
    Ok(log)
}
