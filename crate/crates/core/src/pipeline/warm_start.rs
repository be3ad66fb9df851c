use log::{info, warn};

use crate::error::{AsrError, Result};
use crate::nn::Parameters;

/// Tensors whose shape depends on the phone inventory or token vocabulary; these may be
/// reinitialized when the source disagrees.
pub const REPLACEABLE_PREFIXES: [&str; 3] = ["acoustic.out.", "lm.out.", "lm.embed"];

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct WarmStartReport {
    pub copied: Vec<String>,
    /// Kept at their fresh initialization: shape differs or absent from the source.
    pub reinitialized: Vec<String>,
    /// Source tensors with no counterpart in the target.
    pub ignored: Vec<String>,
}

fn replaceable(name: &str) -> bool {
    REPLACEABLE_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Copy every tensor of `source` whose name and shape match into `target`, which holds a
/// fresh initialization. A shape mismatch outside the vocabulary-sized layers is an error.
pub fn warm_start(target: &mut Parameters, source: &Parameters, freeze: &[String]) -> Result<WarmStartReport> {
    let mut report = WarmStartReport::default();
    for (name, t) in target.iter_mut() {
        match source.get(name) {
            Ok(s) if s.shape == t.shape => {
                t.values.clone_from(&s.values);
                report.copied.push(name.to_string());
            }
            Ok(s) if !replaceable(name) => {
                return Err(AsrError::Shape(format!(
                    "cannot warm-start {name}: checkpoint shape {:?}, model shape {:?}",
                    s.shape, t.shape
                )));
            }
            _ => report.reinitialized.push(name.to_string()),
        }
    }
    report.ignored = source
        .names()
        .filter(|n| !target.contains(n))
        .map(str::to_string)
        .collect();
    for prefix in freeze {
        if !target.names().any(|n| n.starts_with(prefix.as_str())) {
            warn!("freeze prefix {prefix:?} matches no parameter");
        }
    }
    for name in &report.reinitialized {
        info!("warm start: {name} freshly initialized");
        if freeze.iter().any(|p| name.starts_with(p.as_str())) {
            warn!("{name} is frozen at its random initialization");
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::{acoustic_step, build_acoustic_model, feature_matrix, AcousticConfig};
    use crate::nn::{Optimizer, OptimizerConfig};

    fn small(n_phones: usize) -> AcousticConfig {
        AcousticConfig {
            conv1_filters: 2,
            conv2_filters: 3,
            dense_units: 6,
            n_phones,
            ..AcousticConfig::default()
        }
    }

    #[test]
    fn identical_architectures_copy_everything() {
        let src = build_acoustic_model(&small(54), 1).unwrap();
        let mut dst = build_acoustic_model(&small(54), 2).unwrap();
        let r = warm_start(&mut dst, &src, &[]).unwrap();
        assert_eq!(dst, src);
        assert!(r.reinitialized.is_empty() && r.ignored.is_empty());
    }

    #[test]
    fn smaller_inventory_reinitializes_only_the_output() {
        let src = build_acoustic_model(&small(40), 1).unwrap();
        let fresh = build_acoustic_model(&small(54), 2).unwrap();
        let mut dst = fresh.clone();
        let r = warm_start(&mut dst, &src, &[]).unwrap();
        assert_eq!(r.reinitialized, ["acoustic.out.bias", "acoustic.out.weight"]);
        assert_eq!(
            dst.get("acoustic.conv1.kernels").unwrap(),
            src.get("acoustic.conv1.kernels").unwrap()
        );
        assert_eq!(
            dst.get("acoustic.out.weight").unwrap(),
            fresh.get("acoustic.out.weight").unwrap()
        );
    }

    #[test]
    fn hidden_mismatch_is_an_error() {
        let src = build_acoustic_model(&small(54), 1).unwrap();
        let mut other = small(54);
        other.dense_units = 7;
        let mut dst = build_acoustic_model(&other, 2).unwrap();
        assert!(matches!(warm_start(&mut dst, &src, &[]), Err(AsrError::Shape(_))));
    }

    #[test]
    fn frozen_prefix_survives_training() {
        let cfg = small(54);
        let src = build_acoustic_model(&cfg, 1).unwrap();
        let mut p = build_acoustic_model(&cfg, 2).unwrap();
        let freeze = vec!["acoustic.conv1".to_string()];
        warm_start(&mut p, &src, &freeze).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default()).with_frozen(&freeze);
        let f = feature_matrix(16, (0..16 * 39).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        for _ in 0..5 {
            acoustic_step(&mut p, &cfg, &f, &[3, 9]).unwrap();
            opt.step(&mut p).unwrap();
        }
        for n in ["acoustic.conv1.kernels", "acoustic.conv1.bias"] {
            let (a, b) = (p.get(n).unwrap(), src.get(n).unwrap());
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_ne!(
            p.get("acoustic.conv2.kernels").unwrap().values,
            src.get("acoustic.conv2.kernels").unwrap().values
        );
    }
}
