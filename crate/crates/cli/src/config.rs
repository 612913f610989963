//! Run configuration: JSON loading, `--set` overrides, degree keys and the
//! strict schema.
//!
//! Loading happens in a fixed order: parse, apply overrides, convert degree
//! keys, fill servo defaults, deserialize, validate. Keys ending in `_deg` are
//! converted to radians under the stripped name, and `sqrt_<name>_deg` sets
//! `<name>` to the square of the converted value, so Table S1 style entries
//! such as `"sqrt_diffusion_coeff_deg": 0.09` land in rad².

use std::path::Path;

use phasetrack::analysis::SimBudget;
use phasetrack::noisegen::NoiseModel;
use phasetrack::optics::MeasurementConfig;
use phasetrack::servo::{DualBandConfig, Estimator, ServoConfig};
use phasetrack::tracker::FilterConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Presets shipped in the repository's `presets/` directory.
pub const PRESETS: &[(&str, &str)] = &[
    ("sm_fig1", include_str!("../../../presets/sm_fig1.json")),
    ("table_s1_0km", include_str!("../../../presets/table_s1_0km.json")),
    ("table_s1_10km", include_str!("../../../presets/table_s1_10km.json")),
    ("table_s1_50km", include_str!("../../../presets/table_s1_50km.json")),
    ("table_s1_100km", include_str!("../../../presets/table_s1_100km.json")),
    ("fig3b_flux", include_str!("../../../presets/fig3b_flux.json")),
    ("fig3c_duty", include_str!("../../../presets/fig3c_duty.json")),
    ("wiener_2e-4", include_str!("../../../presets/wiener_2e-4.json")),
    ("lab_0km", include_str!("../../../presets/lab_0km.json")),
];

pub const DEFAULT_PRESET: &str = "sm_fig1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Mle,
    Bayes,
    #[default]
    Both,
}

impl EstimatorChoice {
    pub fn estimators(self) -> Vec<Estimator> {
        match self {
            Self::Mle => vec![Estimator::Mle],
            Self::Bayes => vec![Estimator::Bayes],
            Self::Both => vec![Estimator::Mle, Estimator::Bayes],
        }
    }
}

/// Grids and budgets for `sweep` and `calibrate`; empty lists take the
/// command defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub mus: Vec<f64>,
    #[serde(default)]
    pub kappas: Vec<f64>,
    #[serde(default)]
    pub duties: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<SimBudget>,
    /// Sample step of generated calibration series, µs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub noise: NoiseModel,
    pub measurement: MeasurementConfig,
    pub filter: FilterConfig,
    pub servo: ServoConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_band: Option<DualBandConfig>,
    #[serde(default)]
    pub estimator: EstimatorChoice,
    /// µs.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    /// Artifact paths; the extension picks the artifact.
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let at = |key: &'static str| move |e: phasetrack::Error| CliError::Config(format!("{key}: {e}"));
        self.noise.validate().map_err(at("noise"))?;
        self.measurement.validate().map_err(at("measurement"))?;
        self.filter.validate().map_err(at("filter"))?;
        self.servo.validate().map_err(at("servo"))?;
        if let Some(d) = &self.dual_band {
            d.link_channel.noise.validate().map_err(at("dual_band.link_channel.noise"))?;
            d.link_channel.servo.validate().map_err(at("dual_band.link_channel.servo"))?;
            d.residual_channel.noise.validate().map_err(at("dual_band.residual_channel.noise"))?;
            d.residual_channel.servo.validate().map_err(at("dual_band.residual_channel.servo"))?;
            if !(0.0..=1.0).contains(&d.visibility) {
                return Err(CliError::Config(format!("dual_band.visibility: must lie in [0, 1], got {}", d.visibility)));
            }
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(CliError::Config(format!("duration: must be > 0, got {}", self.duration)));
        }
        for o in &self.outputs {
            if !matches!(Path::new(o).extension().and_then(|e| e.to_str()), Some("json" | "csv" | "svg")) {
                return Err(CliError::Config(format!("outputs: {o:?} must end in .json, .csv or .svg")));
            }
        }
        Ok(())
    }
}

pub fn preset(name: &str) -> Result<&'static str, CliError> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })
}

/// Parses `text`, applies `key=value` overrides and resolves it into a
/// validated [`RunConfig`]. `origin` names the source in error messages.
pub fn load(text: &str, origin: &str, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut root: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    if !root.is_object() {
        return Err(CliError::Config(format!("{origin}: top level must be an object")));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(s) = seed {
        root["seed"] = Value::from(s);
    }
    convert_degrees(&mut root, "")?;
    resolve(&mut root)?;
    let cfg: RunConfig = typed(root, "")?;
    cfg.validate()?;
    Ok(cfg)
}

fn typed<T: serde::de::DeserializeOwned>(v: Value, prefix: &str) -> Result<T, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let key = match (prefix.is_empty(), path == ".") {
            (true, _) => path,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{path}"),
        };
        CliError::Config(format!("{key}: {}", e.into_inner()))
    })
}

/// Sets a dotted path such as `servo.kp=0.5`; array elements are addressed by
/// index. The value is read as JSON, falling back to a bare string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Config(format!("--set {spec:?}: expected key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set {spec:?}: empty path segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(m) => {
                if last {
                    m.insert(part.to_string(), value);
                    return Ok(());
                }
                m.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| CliError::Config(format!("--set {key}: {part:?} is not an array index")))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| CliError::Config(format!("--set {key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("--set {key}: {} is not an object", parts[..i].join(".")))),
        };
    }
    Ok(())
}

/// Rewrites `_deg` keys in place, recursing through objects and arrays.
pub fn convert_degrees(v: &mut Value, path: &str) -> Result<(), CliError> {
    match v {
        Value::Object(m) => {
            let keys: Vec<String> = m.keys().filter(|k| k.ends_with("_deg")).cloned().collect();
            for k in keys {
                let at = join(path, &k);
                let x = m[&k].as_f64().ok_or_else(|| CliError::Config(format!("{at}: expected a number of degrees")))?;
                let stem = &k[..k.len() - 4];
                let (target, value) = match stem.strip_prefix("sqrt_") {
                    Some(name) => (name, x.to_radians().powi(2)),
                    None => (stem, x.to_radians()),
                };
                if target.is_empty() {
                    return Err(CliError::Config(format!("{at}: no key name before _deg")));
                }
                if m.contains_key(target) {
                    return Err(CliError::Config(format!("{at}: {} is also given", join(path, target))));
                }
                m.remove(&k);
                m.insert(target.to_string(), Value::from(value));
            }
            for (k, child) in m.iter_mut() {
                convert_degrees(child, &join(path, k))?;
            }
        }
        Value::Array(a) => {
            for (i, child) in a.iter_mut().enumerate() {
                convert_degrees(child, &join(path, &i.to_string()))?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn require<'a>(m: &'a Map<String, Value>, key: &str) -> Result<&'a Value, CliError> {
    m.get(key).ok_or_else(|| CliError::Config(format!("{key}: missing field")))
}

/// Default filter from a noise model: κ = 1 with the model's own power law as
/// prior.
fn filter_for(noise: &NoiseModel) -> FilterConfig {
    FilterConfig { kappa: 1.0, prior_diffusion: noise.diffusion_coeff, prior_exponent: noise.exponent.clamp(0.5, 1.0) }
}

/// Completes a servo object over the continuous-probe template built from
/// its measurement and filter.
fn complete_servo(user: Option<Value>, measurement: &Value, filter: &Value, at: &str) -> Result<Value, CliError> {
    let user = match user {
        None => Map::new(),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(CliError::Config(format!("{at}: expected an object"))),
    };
    let meas: MeasurementConfig = match user.get("measurement") {
        Some(m) => typed(m.clone(), &join(at, "measurement"))?,
        None => typed(measurement.clone(), "measurement")?,
    };
    let filt: FilterConfig = match user.get("filter") {
        Some(f) => typed(f.clone(), &join(at, "filter"))?,
        None => typed(filter.clone(), "filter")?,
    };
    let mut base = serde_json::to_value(ServoConfig::continuous(meas, filt, 1.0, 50)).expect("servo serializes");
    let obj = base.as_object_mut().expect("servo is an object");
    for (k, v) in user {
        obj.insert(k, v);
    }
    Ok(base)
}

/// Fills `filter` and `servo` defaults, including the servos of dual-band
/// channels.
fn resolve(root: &mut Value) -> Result<(), CliError> {
    let m = root.as_object_mut().expect("checked object");
    let noise: NoiseModel = typed(require(m, "noise")?.clone(), "noise")?;
    let measurement = require(m, "measurement")?.clone();
    let filter = match m.get("filter") {
        Some(f) => f.clone(),
        None => serde_json::to_value(filter_for(&noise)).expect("filter serializes"),
    };
    m.insert("filter".into(), filter.clone());
    let servo = complete_servo(m.remove("servo"), &measurement, &filter, "servo")?;
    m.insert("servo".into(), servo);
    if let Some(Value::Object(d)) = m.get_mut("dual_band") {
        for ch in ["link_channel", "residual_channel"] {
            let at = format!("dual_band.{ch}");
            let Some(Value::Object(c)) = d.get_mut(ch) else { continue };
            let ch_noise: NoiseModel = typed(c.get("noise").cloned().unwrap_or(Value::Null), &join(&at, "noise"))?;
            let ch_filter = serde_json::to_value(filter_for(&ch_noise)).expect("filter serializes");
            let s = complete_servo(c.remove("servo"), &measurement, &ch_filter, &join(&at, "servo"))?;
            c.insert("servo".into(), s);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const MINIMAL: &str = r#"{"noise": {"diffusion_coeff": 2e-4}, "measurement": {"flux": 2, "window": 10, "visibility": 1}, "duration": 1e4}"#;

    #[test]
    fn minimal_config_fills_servo_and_filter() {
        let c = load(MINIMAL, "test", &[], None).unwrap();
        assert_eq!(c.filter, FilterConfig::new(1.0, 2e-4));
        assert_eq!(c.servo.fast_interval, 10.0);
        assert_eq!(c.servo.measurement, c.measurement);
        assert_eq!(c.estimator, EstimatorChoice::Both);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let e = load(MINIMAL, "test", &["servo.gain=2".into()], None).unwrap_err();
        assert!(matches!(&e, CliError::Config(m) if m.contains("servo") && m.contains("gain")), "{e}");
        let e = load(MINIMAL, "test", &["noise.exponentt=0.6".into()], None).unwrap_err();
        assert!(matches!(&e, CliError::Config(m) if m.starts_with("noise") && m.contains("exponentt")), "{e}");
    }

    #[test]
    fn degree_keys_convert_once() {
        let mut v = json!({"noise": {"sqrt_diffusion_coeff_deg": 0.09, "tones": [{"frequency": 50, "amplitude_deg": 1.0}]}});
        convert_degrees(&mut v, "").unwrap();
        let d = v["noise"]["diffusion_coeff"].as_f64().unwrap();
        assert!((d - (0.09f64.to_radians()).powi(2)).abs() < 1e-18);
        assert!((v["noise"]["tones"][0]["amplitude"].as_f64().unwrap() - 1f64.to_radians()).abs() < 1e-15);
        let mut both = json!({"a": 1.0, "a_deg": 2.0});
        assert!(convert_degrees(&mut both, "").is_err());
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut v = json!({"servo": {"kp": 1}, "noise": {"tones": [{"frequency": 1}]}});
        apply_override(&mut v, "servo.kp=0.5").unwrap();
        apply_override(&mut v, "noise.tones.0.frequency=20").unwrap();
        apply_override(&mut v, "estimator=bayes").unwrap();
        assert_eq!(v["servo"]["kp"], json!(0.5));
        assert_eq!(v["noise"]["tones"][0]["frequency"], json!(20));
        assert_eq!(v["estimator"], json!("bayes"));
        assert!(apply_override(&mut v, "servo.kp.x=1").is_err());
        assert!(apply_override(&mut v, "noise.tones.3.frequency=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn validation_failures_are_config_errors() {
        let e = load(MINIMAL, "test", &["measurement.visibility=1.5".into()], None).unwrap_err();
        assert!(matches!(&e, CliError::Config(m) if m.starts_with("measurement")), "{e}");
        let e = load(MINIMAL, "test", &["outputs=[\"x.txt\"]".into()], None).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
    }

    #[test]
    fn every_preset_loads() {
        for (name, text) in PRESETS {
            load(text, name, &[], None).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
