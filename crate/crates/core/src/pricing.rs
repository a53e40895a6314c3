//! Hourly electricity price profiles.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::plant::FORECAST_LEN;

/// One simulated day plus the forecast tail.
pub const MIN_PROFILE_HOURS: usize = 24 + FORECAST_LEN;

pub const CSV_HEADER: [&str; 2] = ["hour", "price_usd_per_mwh"];

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("io error on price profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed price profile at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-consecutive hours: expected {expected}, found {found}")]
    Gap { expected: i64, found: i64 },
    #[error("profile has {0} hours, need at least {MIN_PROFILE_HOURS}")]
    ShortProfile(usize),
    #[error("forecast window starting at hour {hour} exceeds the {len}-hour profile")]
    OutOfRange { hour: i64, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceProfile {
    prices: Vec<f64>,
    start_hour: u32,
}

impl PriceProfile {
    pub fn new(prices: Vec<f64>) -> Result<Self, PricingError> {
        if prices.len() < MIN_PROFILE_HOURS {
            return Err(PricingError::ShortProfile(prices.len()));
        }
        if let Some(i) = prices.iter().position(|p| !p.is_finite()) {
            return Err(PricingError::Parse {
                line: i + 2,
                msg: "price is not finite".into(),
            });
        }
        Ok(Self {
            prices,
            start_hour: 0,
        })
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn start_hour(&self) -> u32 {
        self.start_hour
    }

    pub fn horizon_hours(&self) -> usize {
        self.prices.len()
    }

    /// Price in effect at `t_sim` seconds; constant within each hour.
    pub fn price_at(&self, t_sim: f64) -> Result<f64, PricingError> {
        let hour = (t_sim / 3600.0).floor() as i64;
        if hour < 0 || hour as usize >= self.prices.len() {
            return Err(PricingError::OutOfRange {
                hour,
                len: self.prices.len(),
            });
        }
        Ok(self.prices[hour as usize])
    }

    /// Perfect 12-hour forecast starting at the hour containing `t_sim`.
    pub fn forecast(&self, t_sim: f64) -> Result<[f64; FORECAST_LEN], PricingError> {
        let hour = (t_sim / 3600.0).floor() as i64;
        if hour < 0 || hour as usize + FORECAST_LEN > self.prices.len() {
            return Err(PricingError::OutOfRange {
                hour,
                len: self.prices.len(),
            });
        }
        let mut out = [0.0; FORECAST_LEN];
        out.copy_from_slice(&self.prices[hour as usize..hour as usize + FORECAST_LEN]);
        Ok(out)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, PricingError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| PricingError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(PricingError::Parse {
                line: 1,
                msg: format!("expected header `{}`", CSV_HEADER.join(",")),
            });
        }
        let mut prices = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| PricingError::Parse {
                line,
                msg: e.to_string(),
            })?;
            if rec.len() != 2 {
                return Err(PricingError::Parse {
                    line,
                    msg: format!("expected 2 fields, found {}", rec.len()),
                });
            }
            let hour: i64 = rec[0].trim().parse().map_err(|_| PricingError::Parse {
                line,
                msg: format!("bad hour `{}`", &rec[0]),
            })?;
            let price: f64 = rec[1].trim().parse().map_err(|_| PricingError::Parse {
                line,
                msg: format!("bad price `{}`", &rec[1]),
            })?;
            if hour != i as i64 {
                return Err(PricingError::Gap {
                    expected: i as i64,
                    found: hour,
                });
            }
            prices.push(price);
        }
        Self::new(prices)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), PricingError> {
        writeln!(w, "{}", CSV_HEADER.join(","))?;
        for (h, p) in self.prices.iter().enumerate() {
            // `{}` on f64 prints the shortest string that parses back exactly.
            writeln!(w, "{},{}", h + self.start_hour as usize, p)?;
        }
        Ok(())
    }
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<PriceProfile, PricingError> {
    let f = std::fs::File::open(path)?;
    PriceProfile::read_csv(std::io::BufReader::new(f))
}

pub fn save_profile(profile: &PriceProfile, path: impl AsRef<Path>) -> Result<(), PricingError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    profile.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Relative height of the morning bump, centred at 08:00.
const MORNING_WEIGHT: f64 = 0.6;
const MORNING_HOUR: f64 = 8.0;
const MORNING_WIDTH: f64 = 1.5;
const EVENING_HOUR: f64 = 18.0;
const EVENING_WIDTH: f64 = 2.0;
/// Default noise half-width, as a fraction of `base`.
pub const SYNTH_NOISE_FRAC: f64 = 0.05;

/// Noise-free daily shape: a morning and an evening Gaussian bump on top of
/// `base`. Repeats with a 24 h period.
pub fn bump_shape(hour: f64, base: f64, peak_amp: f64) -> f64 {
    let h = hour.rem_euclid(24.0);
    let g = |c: f64, w: f64| (-(h - c).powi(2) / (2.0 * w * w)).exp();
    base + peak_amp * (MORNING_WEIGHT * g(MORNING_HOUR, MORNING_WIDTH) + g(EVENING_HOUR, EVENING_WIDTH))
}

/// 36-hour synthetic profile with uniform noise of at most 5% of `base`.
/// Seed 0 is reserved for the noise-free shape.
pub fn synth_profile(seed: u64, base: f64, peak_amp: f64) -> PriceProfile {
    let noise = if seed == 0 { 0.0 } else { SYNTH_NOISE_FRAC };
    synth_profile_with_noise(seed, base, peak_amp, noise)
}

pub fn synth_profile_with_noise(seed: u64, base: f64, peak_amp: f64, noise_frac: f64) -> PriceProfile {
    assert!(base > 0.0 && peak_amp >= 0.0 && noise_frac >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prices = (0..MIN_PROFILE_HOURS)
        .map(|h| {
            let eps = if noise_frac > 0.0 {
                rng.gen_range(-1.0..=1.0) * noise_frac * base
            } else {
                0.0
            };
            bump_shape(h as f64, base, peak_amp) + eps
        })
        .collect();
    PriceProfile {
        prices,
        start_hour: 0,
    }
}
