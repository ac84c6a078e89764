//! Synthetic bike-share systems with planted spatial structure.
//!
//! Stations sit in spatial communities that share a daily cycle. Hourly
//! departures at each station are the community cycle plus Gaussian noise
//! of known spread. In coupled mode every trip ends at another station
//! chosen with probability decaying in distance and arrives mostly during
//! the following hour, so a station's inflow is driven by its neighbours'
//! recent outflow. In uncoupled mode every trip returns to its origin.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{Paths, PipelineConfig};
use crate::error::{Error, Result};
use crate::graphs::haversine_distance;
use crate::ingest::{is_weekend, Coord, RideRecord, StationEntry, WeatherObs};

const METRES_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub stations: usize,
    pub communities: usize,
    pub days: usize,
    /// First simulated day, `YYYY-MM-DD`.
    pub start_date: String,
    /// Mean departures per station-hour.
    pub base_rate: f64,
    pub amplitude: f64,
    /// Standard deviation of the departure noise.
    pub noise_sigma: f64,
    /// Departures are scaled by this on weekends.
    pub weekend_factor: f64,
    pub community_spacing_m: f64,
    pub community_radius_m: f64,
    /// Length scale of the destination choice.
    pub decay_m: f64,
    pub min_duration_min: f64,
    pub max_duration_min: f64,
    /// Trips cross to neighbouring stations when set, otherwise return home.
    pub coupled: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            stations: 20,
            communities: 4,
            days: 180,
            start_date: "2017-01-02".into(),
            base_rate: 12.0,
            amplitude: 7.0,
            noise_sigma: 4.0,
            weekend_factor: 0.8,
            community_spacing_m: 2500.0,
            community_radius_m: 450.0,
            decay_m: 200.0,
            min_duration_min: 45.0,
            max_duration_min: 75.0,
            coupled: true,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.stations < 2 || self.communities == 0 || self.communities > self.stations {
            return bad("need at least 2 stations and 1 ≤ communities ≤ stations");
        }
        if self.days == 0 {
            return bad("days must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.decay_m > 0.0) || !(self.base_rate >= 0.0) {
            return bad("noise_sigma, base_rate must be ≥ 0 and decay_m > 0");
        }
        if !(self.min_duration_min > 0.0 && self.max_duration_min > self.min_duration_min) {
            return bad("need 0 < min_duration_min < max_duration_min");
        }
        self.start()?;
        Ok(())
    }

    fn start(&self) -> Result<NaiveDateTime> {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight"))
            .map_err(|e| Error::Config(format!("synth start_date {}: {e}", self.start_date)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub stations: Vec<StationEntry>,
    pub community: Vec<usize>,
    pub records: Vec<RideRecord>,
    pub weather: Vec<WeatherObs>,
}

fn offset(center: Coord, north_m: f64, east_m: f64) -> Coord {
    let lat = center.lat + north_m / METRES_PER_DEGREE;
    let lon = center.lon + east_m / (METRES_PER_DEGREE * center.lat.to_radians().cos());
    Coord::new(lat, lon)
}

fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<StationEntry>, Vec<usize>) {
    let origin = Coord::new(40.75, -73.98);
    let side = (cfg.communities as f64).sqrt().ceil() as usize;
    let mut stations = Vec::with_capacity(cfg.stations);
    let mut community = Vec::with_capacity(cfg.stations);
    for i in 0..cfg.stations {
        let c = i * cfg.communities / cfg.stations;
        let center = offset(
            origin,
            (c / side) as f64 * cfg.community_spacing_m,
            (c % side) as f64 * cfg.community_spacing_m,
        );
        let angle = rng.random_range(0.0..2.0 * PI);
        let radius = cfg.community_radius_m * rng.random_range(0.3..1.0);
        stations.push(StationEntry {
            id: format!("S{i:03}"),
            coord: offset(center, radius * angle.sin(), radius * angle.cos()),
        });
        community.push(c);
    }
    (stations, community)
}

/// Generates a dataset. Identical configs give identical data.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let start = cfg.start()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (stations, community) = layout(cfg, &mut rng);
    let n = stations.len();

    let destinations = (0..n)
        .map(|i| {
            let weights: Vec<f64> = (0..n)
                .map(|j| {
                    if cfg.coupled == (j == i) {
                        0.0
                    } else {
                        let d = haversine_distance(stations[i].coord, stations[j].coord);
                        (-d / cfg.decay_m).exp().max(1e-300)
                    }
                })
                .collect();
            WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("synth destinations: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let phases: Vec<f64> = (0..cfg.communities).map(|c| 24.0 * c as f64 / cfg.communities as f64).collect();
    let base: Vec<f64> = (0..n).map(|_| cfg.base_rate * rng.random_range(0.8..1.2)).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(format!("synth noise: {e}")))?;

    let hours = cfg.days * 24;
    let mut records = Vec::new();
    for t in 0..hours {
        let hour_start = start + Duration::hours(t as i64);
        let h = (t % 24) as f64;
        let factor = if is_weekend(hour_start) { cfg.weekend_factor } else { 1.0 };
        for i in 0..n {
            let cycle = cfg.amplitude * (2.0 * PI * (h + phases[community[i]]) / 24.0).sin();
            let departures = (base[i] * factor + cycle + noise.sample(&mut rng)).round().max(0.0) as usize;
            for _ in 0..departures {
                let j = destinations[i].sample(&mut rng);
                let leave = hour_start + Duration::seconds(rng.random_range(0..3600));
                let minutes = rng.random_range(cfg.min_duration_min..cfg.max_duration_min);
                let arrive = leave + Duration::seconds((minutes * 60.0).round() as i64);
                records.push(RideRecord {
                    start_station: stations[i].id.clone(),
                    start_time: leave,
                    end_station: stations[j].id.clone(),
                    end_time: arrive,
                    duration: Some((arrive - leave).num_seconds() as f64),
                    start_coord: Some(stations[i].coord),
                    end_coord: Some(stations[j].coord),
                });
            }
        }
    }

    let wind = Normal::<f64>::new(3.0, 1.0).expect("valid normal");
    let weather = (0..hours)
        .map(|t| {
            let day = (t / 24) as f64;
            let h = (t % 24) as f64;
            WeatherObs {
                time: start + Duration::hours(t as i64),
                temperature: 5.0 + 10.0 * (2.0 * PI * day / 365.0).sin() + 4.0 * (2.0 * PI * (h - 9.0) / 24.0).sin(),
                wind_speed: wind.sample(&mut rng).abs(),
            }
        })
        .collect();

    Ok(SynthData {
        stations,
        community,
        records,
        weather,
    })
}

const TIMESTAMP: &str = "%Y-%m-%d %H:%M:%S";

impl SynthData {
    pub fn write_records<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "duration",
            "start_time",
            "end_time",
            "start_station_id",
            "start_lat",
            "start_lon",
            "end_station_id",
            "end_lat",
            "end_lon",
        ])?;
        for r in &self.records {
            let (s, e) = (r.start_coord.expect("coords"), r.end_coord.expect("coords"));
            csv.write_record([
                format!("{}", r.duration.unwrap_or_default()),
                r.start_time.format(TIMESTAMP).to_string(),
                r.end_time.format(TIMESTAMP).to_string(),
                r.start_station.clone(),
                format!("{:.7}", s.lat),
                format!("{:.7}", s.lon),
                r.end_station.clone(),
                format!("{:.7}", e.lat),
                format!("{:.7}", e.lon),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_stations<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["id", "latitude", "longitude"])?;
        for s in &self.stations {
            csv.write_record([s.id.clone(), format!("{:.7}", s.coord.lat), format!("{:.7}", s.coord.lon)])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_weather<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["timestamp", "temperature", "wind_speed"])?;
        for o in &self.weather {
            csv.write_record([
                o.time.format(TIMESTAMP).to_string(),
                format!("{:.3}", o.temperature),
                format!("{:.3}", o.wind_speed),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Writes `trips.csv`, `stations.csv`, `weather.csv` and a matching
    /// `config.toml` into `dir` and returns that config.
    pub fn write_dataset(&self, dir: &Path) -> Result<PipelineConfig> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(&p, e))
        };
        self.write_records(create("trips.csv")?)?;
        self.write_stations(create("stations.csv")?)?;
        self.write_weather(create("weather.csv")?)?;
        let mut cfg = PipelineConfig::with_paths(Paths {
            records: vec!["trips.csv".into()],
            stations: Some("stations.csv".into()),
            weather: Some("weather.csv".into()),
            output_dir: "out".into(),
        });
        let days = self.weather.len() / 24;
        cfg.split.test_days = (days * 4 / 9).max(1);
        cfg.split.validation_days = (days * 2 / 9).max(1);
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
        let mut resolved = cfg;
        resolved.paths.records = vec![dir.join("trips.csv")];
        resolved.paths.stations = Some(dir.join("stations.csv"));
        resolved.paths.weather = Some(dir.join("weather.csv"));
        resolved.paths.output_dir = dir.join("out");
        Ok(resolved)
    }
}
