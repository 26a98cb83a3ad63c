//! Run configuration: a TOML file mirroring [`PipelineConfig`] with every
//! default recorded. Unknown keys are rejected and any field can be
//! overridden by a dotted-path key/value pair supplied on the command line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Fully commented default configuration. Parsing this text reproduces
/// `PipelineConfig::default()` exactly.
pub fn default_toml() -> String {
    String::from(
        r#"# Multiframe scene flow configuration. Every value below is the
# built-in default; any key can be overridden on the command line with
# --<dotted.name> <value>, e.g. --solver.lambda0 1e-3.

# Temporal window size N (>= 2) and the reference frame within it.
window = 2
reference_index = 0
# Pose-distance threshold for grouping segments into rigid motions.
motion_tol = 0.01

[segmentation]
# Felzenszwalb merge threshold on |z_p - z_q| (meters).
threshold = 0.5
# Segments smaller than this many pixels are discarded.
min_size = 2000
# Nearest centroids marked adjacent per segment.
n_psi = 4

[energy]
# Term weights: brightness constancy, projective ICP, lifted coherence
# regularizer, weight optimizer, pose concatenation.
alpha = 1.0
beta = 1.0
gamma = 1.0
eta = 1.0
lambda_c = 1.0
# Huber thresholds: intensity residuals ([0,1] units) and point-to-plane
# residuals (meters).
huber_eps_data = 0.1
huber_eps_picp = 0.02
# Gaussian pre-smoothing of the intensity images (pixels).
gaussian_sigma = 1.0

[solver]
# Levenberg-Marquardt damping schedule.
lambda0 = 1e-4
lambda_up = 10.0
lambda_down = 0.5
max_outer_iters = 60
# Inner conjugate-gradient solve; 0 iterations selects 10 * dim(x).
cg_max_iters = 0
cg_tol = 1e-6
# Stop when the relative energy change stays below converge_eps for
# converge_window consecutive iterations.
converge_eps = 1e-6
converge_window = 3
# Energy-increasing steps are accepted up to the consecutive budget.
allow_nonmonotonic = true
nonmonotonic_budget = 3

[icp]
# Correspondence gates: maximum 3D distance (meters) and maximum angle
# between rotated source normal and target normal (degrees).
dist_thresh = 0.1
max_angle_deg = 45.0
"#,
    )
}

/// Serializes a configuration; `parse_config` of the result is the
/// identity.
pub fn to_toml(config: &PipelineConfig) -> String {
    toml::to_string_pretty(config).expect("config serialization cannot fail")
}

/// Parses a configuration, rejecting unknown keys. Missing keys take their
/// defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Loads a config file (defaults when absent) and applies dotted-path
/// overrides such as `("solver.lambda0", "1e-3")`.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?,
        None => default_toml(),
    };
    // Validate the file itself first so bad keys are reported against the
    // file rather than an override.
    let config = parse_config(&text)?;
    if overrides.is_empty() {
        return Ok(config);
    }
    let mut value = toml::Value::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }
    let config: PipelineConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Sets one dotted-path key, coercing the string to the type of the
/// existing value.
pub fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let mut parts = path.split('.').peekable();
    loop {
        let part = parts
            .next()
            .ok_or_else(|| Error::Config(format!("empty override path {path:?}")))?;
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path:?}: {part:?} is not a table")))?;
        let entry = table
            .get_mut(part)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        if parts.peek().is_none() {
            *entry = coerce(entry, path, raw)?;
            return Ok(());
        }
        node = entry;
    }
}

fn coerce(existing: &toml::Value, path: &str, raw: &str) -> Result<toml::Value> {
    let bad = |kind: &str| Error::Config(format!("{path:?}: expected {kind}, got {raw:?}"));
    Ok(match existing {
        toml::Value::Integer(_) => {
            toml::Value::Integer(raw.parse().map_err(|_| bad("an integer"))?)
        }
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad("a number"))?),
        toml::Value::Boolean(_) => {
            toml::Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?)
        }
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        other => {
            return Err(Error::Config(format!(
                "{path:?}: cannot override a {} value",
                other.type_str()
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_parses_to_default_config() {
        let config = parse_config(&default_toml()).unwrap();
        assert_eq!(config, PipelineConfig::default());
    }

    #[test]
    fn committed_example_config_matches_defaults() {
        let path =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config.example.toml");
        let text = std::fs::read_to_string(path).expect("config.example.toml present");
        assert_eq!(text, default_toml());
    }

    #[test]
    fn serialization_is_a_fixed_point() {
        let mut config = PipelineConfig {
            window: 4,
            ..PipelineConfig::default()
        };
        config.energy.alpha = 2.5;
        config.solver.lambda0 = 3e-5;
        config.segmentation.min_size = 50;
        let text = to_toml(&config);
        let back = parse_config(&text).unwrap();
        assert_eq!(back, config);
        // Second round trip is byte-identical.
        assert_eq!(to_toml(&back), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("bogus_key = 1\n");
        assert!(err.is_err());
        let err = parse_config("[energy]\nalpha = 1.0\nnot_a_field = 2\n");
        assert!(err.is_err());
    }

    #[test]
    fn overrides_apply_with_type_coercion() {
        let overrides = vec![
            ("window".to_string(), "3".to_string()),
            ("energy.alpha".to_string(), "0.5".to_string()),
            ("solver.allow_nonmonotonic".to_string(), "false".to_string()),
            ("segmentation.min_size".to_string(), "50".to_string()),
        ];
        let config = load_config(None, &overrides).unwrap();
        assert_eq!(config.window, 3);
        assert_eq!(config.energy.alpha, 0.5);
        assert!(!config.solver.allow_nonmonotonic);
        assert_eq!(config.segmentation.min_size, 50);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let bad_key = vec![("solver.nope".to_string(), "1".to_string())];
        assert!(load_config(None, &bad_key).is_err());
        let bad_value = vec![("window".to_string(), "many".to_string())];
        assert!(load_config(None, &bad_value).is_err());
    }
}
