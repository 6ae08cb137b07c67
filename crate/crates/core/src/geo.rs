//! Spherical-earth distance and travel speed.

use thiserror::Error;

/// Mean earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Coordinates are stored as decimal degrees and identified at this many
/// fractional digits.
pub const COORD_DECIMALS: i32 = 5;

const COORD_SCALE: f64 = 100_000.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate ({lon}, {lat})")]
    InvalidPoint { lon: f64, lat: f64 },
    #[error("non-positive duration: end {end} is not after start {start}")]
    NonPositiveDuration { start: i64, end: i64 },
    #[error("earth radius must be positive, got {0}")]
    InvalidRadius(f64),
}

/// A point on the earth in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub longitude: f64,
    pub latitude: f64,
}

impl GeoPoint {
    pub fn new(longitude: f64, latitude: f64) -> Result<Self, GeoError> {
        let ok = longitude.is_finite()
            && latitude.is_finite()
            && (-180.0..=180.0).contains(&longitude)
            && (-90.0..=90.0).contains(&latitude);
        if ok {
            Ok(Self { longitude, latitude })
        } else {
            Err(GeoError::InvalidPoint { lon: longitude, lat: latitude })
        }
    }

    /// Canonical identity at five fractional digits.
    pub fn key(&self) -> StationKey {
        StationKey {
            lon_e5: (self.longitude * COORD_SCALE).round() as i64,
            lat_e5: (self.latitude * COORD_SCALE).round() as i64,
        }
    }

    /// The point snapped to five fractional digits.
    pub fn rounded(&self) -> GeoPoint {
        let k = self.key();
        GeoPoint {
            longitude: k.lon_e5 as f64 / COORD_SCALE,
            latitude: k.lat_e5 as f64 / COORD_SCALE,
        }
    }
}

/// Exact-value station identity: coordinates in units of 1e-5 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StationKey {
    pub lon_e5: i64,
    pub lat_e5: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoConfig {
    pub earth_radius_km: f64,
}

impl GeoConfig {
    pub fn new(earth_radius_km: f64) -> Result<Self, GeoError> {
        if earth_radius_km > 0.0 && earth_radius_km.is_finite() {
            Ok(Self { earth_radius_km })
        } else {
            Err(GeoError::InvalidRadius(earth_radius_km))
        }
    }
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self { earth_radius_km: EARTH_RADIUS_KM }
    }
}

/// Great-circle distance in kilometers by the spherical law of cosines.
///
/// The arccos argument is clamped to [-1, 1]; near-coincident points can
/// otherwise overshoot by an ulp and produce NaN.
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint, cfg: GeoConfig) -> f64 {
    // Fixed operand order makes d(a, b) and d(b, a) bit-identical.
    let (p, q) = if (a.latitude, a.longitude) <= (b.latitude, b.longitude) { (a, b) } else { (b, a) };
    let (lat_i, lat_j) = (p.latitude.to_radians(), q.latitude.to_radians());
    let dlon = (q.longitude - p.longitude).to_radians();
    // cos(lat_i)cos(lat_j)cos(dlon) + sin(lat_i)sin(lat_j), rearranged with
    // cos(a - b) = cos a cos b + sin a sin b so that coincident points give
    // exactly 1 and nearby points keep their precision.
    let arg = (lat_j - lat_i).cos() - lat_i.cos() * lat_j.cos() * (1.0 - dlon.cos());
    cfg.earth_radius_km * arg.clamp(-1.0, 1.0).acos()
}

/// Average speed in km/h over `[t_start, t_end]` (whole seconds).
pub fn travel_speed(distance_km: f64, t_start: i64, t_end: i64) -> Result<f64, GeoError> {
    if t_end <= t_start {
        return Err(GeoError::NonPositiveDuration { start: t_start, end: t_end });
    }
    let hours = (t_end - t_start) as f64 / 3600.0;
    Ok(distance_km / hours)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lon: f64, lat: f64) -> GeoPoint {
        GeoPoint::new(lon, lat).unwrap()
    }

    // Independent route: the haversine form.
    fn haversine(a: GeoPoint, b: GeoPoint, r: f64) -> f64 {
        let (p1, p2) = (a.latitude.to_radians(), b.latitude.to_radians());
        let dp = p2 - p1;
        let dl = (b.longitude - a.longitude).to_radians();
        let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * r * h.sqrt().asin()
    }

    #[test]
    fn identity_is_zero() {
        let a = p(119.90042, 28.88195);
        assert_eq!(great_circle_distance(a, a, GeoConfig::default()), 0.0);
    }

    #[test]
    fn long_jump_pair_is_about_68_km() {
        let d = great_circle_distance(p(120.07602, 29.49888), p(120.04997, 28.88697), GeoConfig::default());
        assert!((d - 68.0).abs() <= 1.0, "{d}");
    }

    #[test]
    fn handover_pair_matches_frozen_haversine_value() {
        // 1.446231 km, computed offline with the haversine formula.
        let d = great_circle_distance(p(119.90042, 28.88195), p(119.89141, 28.87161), GeoConfig::default());
        assert!((d - 1.446231).abs() < 5e-7, "{d}");
    }

    #[test]
    fn speed_examples() {
        assert_eq!(travel_speed(0.0, 0, 10).unwrap(), 0.0);
        let v = travel_speed(68.0, 0, 499).unwrap();
        assert!((v - 68.0 / (499.0 / 3600.0)).abs() < 1e-9);
        assert!((v - 490.581162).abs() < 1e-5);
        assert!(matches!(travel_speed(3.0, 5, 5), Err(GeoError::NonPositiveDuration { .. })));
        assert!(travel_speed(3.0, 6, 5).is_err());
    }

    #[test]
    fn rejects_bad_points_and_radius() {
        assert!(GeoPoint::new(181.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::NAN).is_err());
        assert!(GeoConfig::new(0.0).is_err());
    }

    fn jinhua() -> impl Strategy<Value = GeoPoint> {
        (119.0f64..121.0, 28.0f64..30.0).prop_map(|(lon, lat)| p(lon, lat))
    }

    fn hemisphere() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..90.0, 0.0f64..89.0).prop_map(|(lon, lat)| p(lon, lat))
    }

    proptest! {
        #[test]
        fn symmetric_bit_exact(a in hemisphere(), b in hemisphere()) {
            let cfg = GeoConfig::default();
            prop_assert_eq!(great_circle_distance(a, b, cfg).to_bits(), great_circle_distance(b, a, cfg).to_bits());
        }

        #[test]
        fn self_distance_vanishes(a in hemisphere()) {
            prop_assert!(great_circle_distance(a, a, GeoConfig::default()) < 1e-9);
        }

        #[test]
        fn triangle_inequality(a in hemisphere(), b in hemisphere(), c in hemisphere()) {
            let cfg = GeoConfig::default();
            let d = |x, y| great_circle_distance(x, y, cfg);
            prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-6);
        }
    }

    #[test]
    fn agrees_with_haversine_in_jinhua_box() {
        use proptest::strategy::ValueTree;
        use proptest::test_runner::TestRunner;
        let mut runner = TestRunner::deterministic();
        let strat = (jinhua(), jinhua());
        for _ in 0..1000 {
            let (a, b) = strat.new_tree(&mut runner).unwrap().current();
            let ours = great_circle_distance(a, b, GeoConfig::default());
            let oracle = haversine(a, b, EARTH_RADIUS_KM);
            if oracle > 1e-3 {
                assert!(((ours - oracle) / oracle).abs() < 0.005, "{a:?} {b:?} {ours} {oracle}");
            }
        }
    }
}
