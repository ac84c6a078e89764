//! Ride-record ingestion: CSV parsing, the station registry, hourly binning
//! into inflow/outflow tensors, chronological splits and context features.
//!
//! Timestamps are wall-clock local time with no timezone or DST handling.
//! Hour bins follow the wall clock.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::config::Fingerprint;
use crate::error::{Error, Result};

pub const HOURS_PER_DAY: usize = 24;

/// Flow channel index inside a [`FlowSeries`] cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Inflow = 0,
    Outflow = 1,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Inflow, Channel::Outflow];
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub lat: f64,
    pub lon: f64,
}

impl Coord {
    pub fn new(lat: f64, lon: f64) -> Self {
        Coord { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RideRecord {
    pub start_station: String,
    pub start_time: NaiveDateTime,
    pub end_station: String,
    pub end_time: NaiveDateTime,
    /// Trip duration in seconds, informational only.
    pub duration: Option<f64>,
    pub start_coord: Option<Coord>,
    pub end_coord: Option<Coord>,
}

/// Column-name aliases for one dataset's CSV layout. Matching is
/// case-insensitive and ignores surrounding whitespace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub start_station: Vec<String>,
    pub start_time: Vec<String>,
    pub end_station: Vec<String>,
    pub end_time: Vec<String>,
    #[serde(default)]
    pub duration: Vec<String>,
    #[serde(default)]
    pub start_lat: Vec<String>,
    #[serde(default)]
    pub start_lon: Vec<String>,
    #[serde(default)]
    pub end_lat: Vec<String>,
    #[serde(default)]
    pub end_lon: Vec<String>,
}

fn aliases(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl Schema {
    /// Covers the layout written by this tool as well as the NYC and
    /// Chicago public layouts across their header revisions.
    pub fn permissive() -> Self {
        Schema {
            start_station: aliases(&[
                "start_station_id",
                "start station id",
                "from_station_id",
                "01 - rental details local start station id",
            ]),
            start_time: aliases(&[
                "start_time",
                "starttime",
                "start time",
                "started_at",
                "01 - rental details local start time",
            ]),
            end_station: aliases(&[
                "end_station_id",
                "end station id",
                "to_station_id",
                "01 - rental details local end station id",
            ]),
            end_time: aliases(&[
                "end_time",
                "stoptime",
                "stop time",
                "ended_at",
                "01 - rental details local end time",
            ]),
            duration: aliases(&[
                "duration",
                "tripduration",
                "trip duration",
                "01 - rental details duration in seconds uncapped",
            ]),
            start_lat: aliases(&["start_lat", "start station latitude", "start_station_latitude"]),
            start_lon: aliases(&[
                "start_lon",
                "start_lng",
                "start station longitude",
                "start_station_longitude",
            ]),
            end_lat: aliases(&["end_lat", "end station latitude", "end_station_latitude"]),
            end_lon: aliases(&[
                "end_lon",
                "end_lng",
                "end station longitude",
                "end_station_longitude",
            ]),
        }
    }
}

impl Default for Schema {
    fn default() -> Self {
        Schema::permissive()
    }
}

fn find_column(headers: &csv::StringRecord, names: &[String]) -> Option<usize> {
    let normalized: Vec<String> = headers
        .iter()
        .map(|h| h.trim().trim_start_matches('\u{feff}').to_ascii_lowercase())
        .collect();
    names.iter().find_map(|name| {
        let name = name.trim().to_ascii_lowercase();
        normalized.iter().position(|h| *h == name)
    })
}

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
];

/// Parses the timestamp layouts found in public trip data.
pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
}

pub fn floor_to_hour(t: NaiveDateTime) -> NaiveDateTime {
    t.date().and_hms_opt(t.hour(), 0, 0).expect("valid hour")
}

#[derive(Debug, Clone, Default)]
pub struct ParsedRecords {
    pub records: Vec<RideRecord>,
    pub skipped: usize,
}

/// Reads ride records from a CSV stream with a header row.
///
/// Rows with unparsable timestamps, empty station keys or `end < start` are
/// counted in `skipped` and dropped.
pub fn parse_ride_records<R: Read>(reader: R, schema: &Schema) -> Result<ParsedRecords> {
    let mut csv = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Schema("empty ride-record file (no header row)".into()));
    }

    let required = |names: &[String], field: &str| {
        find_column(&headers, names).ok_or_else(|| {
            Error::Schema(format!(
                "missing required column `{field}` (accepted names: {})",
                names.join(", ")
            ))
        })
    };
    let start_station = required(&schema.start_station, "start_station_id")?;
    let start_time = required(&schema.start_time, "start_time")?;
    let end_station = required(&schema.end_station, "end_station_id")?;
    let end_time = required(&schema.end_time, "end_time")?;
    let duration = find_column(&headers, &schema.duration);
    let start_lat = find_column(&headers, &schema.start_lat);
    let start_lon = find_column(&headers, &schema.start_lon);
    let end_lat = find_column(&headers, &schema.end_lat);
    let end_lon = find_column(&headers, &schema.end_lon);

    let coord = |row: &csv::StringRecord, lat: Option<usize>, lon: Option<usize>| {
        let lat = row.get(lat?)?.trim().parse::<f64>().ok()?;
        let lon = row.get(lon?)?.trim().parse::<f64>().ok()?;
        let c = Coord::new(lat, lon);
        c.is_valid().then_some(c)
    };

    let mut out = ParsedRecords::default();
    for row in csv.records() {
        let row = match row {
            Ok(row) => row,
            Err(_) => {
                out.skipped += 1;
                continue;
            }
        };
        let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
        let (s_id, e_id) = (field(start_station), field(end_station));
        let times = (
            parse_timestamp(field(start_time)),
            parse_timestamp(field(end_time)),
        );
        let (s_t, e_t) = match times {
            (Some(s), Some(e)) if e >= s && !s_id.is_empty() && !e_id.is_empty() => (s, e),
            _ => {
                out.skipped += 1;
                continue;
            }
        };
        out.records.push(RideRecord {
            start_station: s_id.to_string(),
            start_time: s_t,
            end_station: e_id.to_string(),
            end_time: e_t,
            duration: duration.and_then(|i| field(i).parse().ok()),
            start_coord: coord(&row, start_lat, start_lon),
            end_coord: coord(&row, end_lat, end_lon),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationEntry {
    pub id: String,
    pub coord: Coord,
}

/// Stations in dense-index order. The dense index of a station is its
/// position in `entries`, assigned by lexicographic id order.
#[derive(Debug, Clone, PartialEq)]
pub struct StationRegistry {
    entries: Vec<StationEntry>,
    index: HashMap<String, usize>,
}

impl StationRegistry {
    pub fn from_entries(mut entries: Vec<StationEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() {
                return Err(Error::Data("empty station id".into()));
            }
            if !e.coord.is_valid() {
                return Err(Error::Data(format!("station {} has invalid coordinates", e.id)));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate station id {}", e.id)));
            }
        }
        Ok(StationRegistry { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StationEntry] {
        &self.entries
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.entries[index].id
    }

    pub fn coord(&self, index: usize) -> Coord {
        self.entries[index].coord
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["station_id", "latitude", "longitude", "dense_index"])?;
        for (i, e) in self.entries.iter().enumerate() {
            csv.write_record([
                e.id.clone(),
                format!("{:.7}", e.coord.lat),
                format!("{:.7}", e.coord.lon),
                i.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut csv = csv::Reader::from_reader(r);
        let mut entries = Vec::new();
        for (line, row) in csv.records().enumerate() {
            let row = row?;
            let parse = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Schema(format!("registry row {}: bad number", line + 2)))
            };
            let id = row.get(0).unwrap_or("").trim().to_string();
            let entry = StationEntry {
                id,
                coord: Coord::new(parse(1)?, parse(2)?),
            };
            let dense: usize = row
                .get(3)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Schema(format!("registry row {}: bad index", line + 2)))?;
            if dense != entries.len() {
                return Err(Error::Schema(format!(
                    "registry row {}: dense index {dense} out of order",
                    line + 2
                )));
            }
            entries.push(entry);
        }
        let reg = StationRegistry::from_entries(entries.clone())?;
        if reg.entries != entries {
            return Err(Error::Schema("registry CSV is not in lexicographic id order".into()));
        }
        Ok(reg)
    }
}

/// Reads a station metadata CSV with id, latitude and longitude columns.
pub fn parse_station_metadata<R: Read>(r: R) -> Result<Vec<StationEntry>> {
    let mut csv = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let headers = csv.headers()?.clone();
    let col = |names: &[&str], what: &str| {
        find_column(&headers, &aliases(names))
            .ok_or_else(|| Error::Schema(format!("station metadata lacks a `{what}` column")))
    };
    let id_col = col(&["id", "station_id", "station id"], "id")?;
    let lat_col = col(&["lat", "latitude"], "lat")?;
    let lon_col = col(&["lon", "lng", "longitude"], "lon")?;
    let mut out = Vec::new();
    for row in csv.records() {
        let row = row?;
        let id = row.get(id_col).unwrap_or("").trim();
        let lat = row.get(lat_col).and_then(|v| v.trim().parse::<f64>().ok());
        let lon = row.get(lon_col).and_then(|v| v.trim().parse::<f64>().ok());
        if let (false, Some(lat), Some(lon)) = (id.is_empty(), lat, lon) {
            let coord = Coord::new(lat, lon);
            if coord.is_valid() {
                out.push(StationEntry {
                    id: id.to_string(),
                    coord,
                });
            }
        }
    }
    Ok(out)
}

/// Builds the registry from every station seen as a trip start or end.
///
/// Coordinates come from `metadata` when given and otherwise from the
/// coordinate columns in the records. When sources disagree the first
/// coordinate seen wins.
pub fn build_station_registry(
    records: &[RideRecord],
    metadata: Option<&[StationEntry]>,
) -> Result<StationRegistry> {
    if records.is_empty() {
        return Err(Error::Data("no ride records to build a station registry from".into()));
    }
    let mut coords: BTreeMap<&str, Option<Coord>> = BTreeMap::new();
    let mut conflicts = 0usize;

    let mut meta: HashMap<&str, Coord> = HashMap::new();
    if let Some(meta_rows) = metadata {
        for e in meta_rows {
            match meta.get(e.id.as_str()) {
                Some(prev) if *prev != e.coord => conflicts += 1,
                Some(_) => {}
                None => {
                    meta.insert(e.id.as_str(), e.coord);
                }
            }
        }
    }
    for r in records {
        for (id, c) in [
            (r.start_station.as_str(), r.start_coord),
            (r.end_station.as_str(), r.end_coord),
        ] {
            let slot = coords.entry(id).or_insert(None);
            match (*slot, c) {
                (None, Some(c)) => *slot = Some(c),
                (Some(prev), Some(c)) if prev != c && !meta.contains_key(id) => conflicts += 1,
                _ => {}
            }
        }
    }
    if conflicts > 0 {
        warn!("{conflicts} conflicting station coordinates; kept the first value seen");
    }

    let mut missing = Vec::new();
    let mut entries = Vec::with_capacity(coords.len());
    for (id, c) in coords {
        match meta.get(id).copied().or(c) {
            Some(coord) => entries.push(StationEntry {
                id: id.to_string(),
                coord,
            }),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no coordinates for stations: {}",
            missing.join(", ")
        )));
    }
    StationRegistry::from_entries(entries)
}

/// Hourly inflow/outflow counts, `hours × stations × 2`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowSeries {
    start_hour: NaiveDateTime,
    stations: usize,
    hours: usize,
    values: Vec<u32>,
}

impl FlowSeries {
    pub fn zeros(start_hour: NaiveDateTime, hours: usize, stations: usize) -> Self {
        FlowSeries {
            start_hour: floor_to_hour(start_hour),
            stations,
            hours,
            values: vec![0; hours * stations * Channel::COUNT],
        }
    }

    pub fn from_values(
        start_hour: NaiveDateTime,
        hours: usize,
        stations: usize,
        values: Vec<u32>,
    ) -> Result<Self> {
        if values.len() != hours * stations * Channel::COUNT {
            return Err(Error::Shape(format!(
                "flow payload has {} values, expected {hours}×{stations}×2",
                values.len()
            )));
        }
        if floor_to_hour(start_hour) != start_hour {
            return Err(Error::Data("flow start is not on an hour boundary".into()));
        }
        Ok(FlowSeries {
            start_hour,
            stations,
            hours,
            values,
        })
    }

    pub fn start_hour(&self) -> NaiveDateTime {
        self.start_hour
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn stations(&self) -> usize {
        self.stations
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn hour_at(&self, t: usize) -> NaiveDateTime {
        self.start_hour + Duration::hours(t as i64)
    }

    /// Hour index of a timestamp, if it falls inside the series.
    pub fn index_of(&self, t: NaiveDateTime) -> Option<usize> {
        let delta = (floor_to_hour(t) - self.start_hour).num_hours();
        (delta >= 0 && (delta as usize) < self.hours).then_some(delta as usize)
    }

    #[inline]
    fn offset(&self, t: usize, station: usize, ch: Channel) -> usize {
        (t * self.stations + station) * Channel::COUNT + ch.index()
    }

    #[inline]
    pub fn get(&self, t: usize, station: usize, ch: Channel) -> u32 {
        self.values[self.offset(t, station, ch)]
    }

    pub fn increment(&mut self, t: usize, station: usize, ch: Channel) {
        let o = self.offset(t, station, ch);
        self.values[o] += 1;
    }

    /// Adds another tensor over the same axis; partial tensors from
    /// different shards merge in any order.
    pub fn accumulate(&mut self, other: &FlowSeries) -> Result<()> {
        if other.start_hour != self.start_hour
            || other.hours != self.hours
            || other.stations != self.stations
        {
            return Err(Error::Shape("cannot merge flow tensors over different axes".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
        Ok(())
    }

    /// Inflow + outflow per hour for one station.
    pub fn total_series(&self, station: usize, range: Range<usize>) -> Vec<f64> {
        range
            .map(|t| {
                f64::from(self.get(t, station, Channel::Inflow))
                    + f64::from(self.get(t, station, Channel::Outflow))
            })
            .collect()
    }

    pub fn channel_series(&self, station: usize, ch: Channel, range: Range<usize>) -> Vec<f64> {
        range.map(|t| f64::from(self.get(t, station, ch))).collect()
    }

    pub fn channel_sum(&self, ch: Channel) -> u64 {
        self.values
            .iter()
            .skip(ch.index())
            .step_by(Channel::COUNT)
            .map(|&v| u64::from(v))
            .sum()
    }

    /// Writes the versioned flow blob: magic, version, N, T, start hour as
    /// epoch seconds (wall clock read as UTC), fingerprint, then `u32` counts.
    pub fn write_blob<W: Write>(&self, mut w: W, fingerprint: &Fingerprint) -> Result<()> {
        blob::write_header(&mut w, blob::FLOW_MAGIC)?;
        blob::write_u32(&mut w, self.stations as u32)?;
        blob::write_u64(&mut w, self.hours as u64)?;
        blob::write_i64(&mut w, self.start_hour.and_utc().timestamp())?;
        blob::write_fingerprint(&mut w, fingerprint)?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<(Self, Fingerprint)> {
        blob::read_header(&mut r, blob::FLOW_MAGIC, "flow blob")?;
        let stations = blob::read_u32(&mut r)? as usize;
        let hours = blob::read_u64(&mut r)? as usize;
        let start = blob::read_i64(&mut r)?;
        let fp = blob::read_fingerprint(&mut r)?;
        let start_hour = chrono::DateTime::from_timestamp(start, 0)
            .ok_or_else(|| Error::Format("flow blob: bad start hour".into()))?
            .naive_utc();
        let n = hours
            .checked_mul(stations * Channel::COUNT)
            .ok_or_else(|| Error::Format("flow blob: size overflow".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format("flow blob: truncated payload".into()))?;
        blob::expect_eof(&mut r, "flow blob")?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((FlowSeries::from_values(start_hour, hours, stations, values)?, fp))
    }
}

/// Bins trips into hourly counts: outflow at the start station's start hour,
/// inflow at the end station's end hour.
pub fn bin_flows(records: &[RideRecord], registry: &StationRegistry) -> Result<FlowSeries> {
    let first = records
        .iter()
        .map(|r| r.start_time.min(r.end_time))
        .min()
        .ok_or_else(|| Error::Data("no ride records to bin".into()))?;
    let last = records
        .iter()
        .map(|r| r.start_time.max(r.end_time))
        .max()
        .expect("non-empty");
    let start = floor_to_hour(first);
    let hours = (floor_to_hour(last) - start).num_hours() as usize + 1;
    let mut flows = FlowSeries::zeros(start, hours, registry.len());
    for r in records {
        let lookup = |id: &str| {
            registry
                .index_of(id)
                .ok_or_else(|| Error::Data(format!("station {id} missing from registry")))
        };
        let (s, e) = (lookup(&r.start_station)?, lookup(&r.end_station)?);
        let ts = flows.index_of(r.start_time).expect("in range");
        let te = flows.index_of(r.end_time).expect("in range");
        flows.increment(ts, s, Channel::Outflow);
        flows.increment(te, e, Channel::Inflow);
    }
    Ok(flows)
}

/// Chronological half-open hour-index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

/// Last `test_days` for test, the `validation_days` before them for
/// validation, everything earlier for training.
pub fn split_dataset(total_hours: usize, test_days: usize, validation_days: usize) -> Result<DatasetSplit> {
    let test = test_days * HOURS_PER_DAY;
    let validation = validation_days * HOURS_PER_DAY;
    let needed = test + validation;
    if total_hours <= needed {
        return Err(Error::Data(format!(
            "series has {total_hours} hours; need more than {needed} \
             ({validation_days} validation + {test_days} test days)"
        )));
    }
    let val_start = total_hours - needed;
    let test_start = total_hours - test;
    Ok(DatasetSplit {
        train: 0..val_start,
        validation: val_start..test_start,
        test: test_start..total_hours,
    })
}

/// Hourly context vectors aligned with a flow series time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSeries {
    names: Vec<String>,
    values: Vec<f64>,
}

impl ContextSeries {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.is_empty() || values.len() % names.len() != 0 {
            return Err(Error::Shape("context values do not tile feature width".into()));
        }
        Ok(ContextSeries { names, values })
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn hours(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn at(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.values[t * w..(t + 1) * w]
    }
}

pub fn is_weekend(t: NaiveDateTime) -> bool {
    matches!(t.weekday(), Weekday::Sat | Weekday::Sun)
}

/// One weather reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherObs {
    pub time: NaiveDateTime,
    pub temperature: f64,
    pub wind_speed: f64,
}

pub fn parse_weather<R: Read>(r: R) -> Result<Vec<WeatherObs>> {
    let mut csv = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let headers = csv.headers()?.clone();
    let col = |names: &[&str], what: &str| {
        find_column(&headers, &aliases(names))
            .ok_or_else(|| Error::Schema(format!("weather file lacks a `{what}` column")))
    };
    let t_col = col(&["timestamp", "datetime", "date", "time"], "timestamp")?;
    let temp_col = col(&["temperature", "temp", "tmp"], "temperature")?;
    let wind_col = col(&["wind_speed", "wind", "windspeed", "wnd"], "wind_speed")?;
    let mut out = Vec::new();
    for row in csv.records() {
        let Ok(row) = row else { continue };
        let time = row.get(t_col).and_then(parse_timestamp);
        let temp = row.get(temp_col).and_then(|v| v.trim().parse::<f64>().ok());
        let wind = row.get(wind_col).and_then(|v| v.trim().parse::<f64>().ok());
        if let (Some(time), Some(temperature), Some(wind_speed)) = (time, temp, wind) {
            if temperature.is_finite() && wind_speed.is_finite() {
                out.push(WeatherObs {
                    time,
                    temperature,
                    wind_speed,
                });
            }
        }
    }
    out.sort_by_key(|o| o.time);
    Ok(out)
}

/// Aligns weather readings onto the hourly axis `start_hour .. start_hour + hours`.
///
/// The last reading inside an hour represents that hour, hours without a
/// reading repeat the previous hour, and hours before the first reading take
/// the first in-range value. Without weather only the weekend flag is
/// produced.
pub fn load_context_features(
    weather: Option<&[WeatherObs]>,
    start_hour: NaiveDateTime,
    hours: usize,
) -> Result<ContextSeries> {
    let hour = |t: usize| start_hour + Duration::hours(t as i64);
    let weekend = |t: usize| if is_weekend(hour(t)) { 1.0 } else { 0.0 };

    let Some(obs) = weather else {
        warn!("no weather data; context features are the weekend flag only");
        let values = (0..hours).map(weekend).collect();
        return ContextSeries::new(vec!["is_weekend".into()], values);
    };

    let mut per_hour: Vec<Option<(f64, f64)>> = vec![None; hours];
    for o in obs {
        let delta = (floor_to_hour(o.time) - start_hour).num_hours();
        if delta >= 0 && (delta as usize) < hours {
            per_hour[delta as usize] = Some((o.temperature, o.wind_speed));
        }
    }
    let first = per_hour
        .iter()
        .flatten()
        .copied()
        .next()
        .ok_or_else(|| Error::Data("weather readings do not overlap the flow time range".into()))?;
    let mut last = first;
    let mut values = Vec::with_capacity(hours * 3);
    for (t, reading) in per_hour.into_iter().enumerate() {
        if let Some(r) = reading {
            last = r;
        }
        values.extend_from_slice(&[last.0, last.1, weekend(t)]);
    }
    ContextSeries::new(
        vec!["temperature".into(), "wind_speed".into(), "is_weekend".into()],
        values,
    )
}
