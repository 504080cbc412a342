use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

/// The six standard model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::M0,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
    ];

    pub fn spec(self) -> ModelSpec {
        let (widths, depths, heads) = match self {
            Variant::M0 => ([64, 128, 192], [1, 2, 3], [4, 4, 4]),
            Variant::M1 => ([128, 144, 192], [1, 2, 3], [2, 3, 3]),
            Variant::M2 => ([128, 192, 224], [1, 2, 3], [4, 3, 2]),
            Variant::M3 => ([128, 240, 320], [1, 2, 3], [4, 3, 4]),
            Variant::M4 => ([128, 256, 384], [1, 2, 3], [4, 4, 4]),
            Variant::M5 => ([192, 288, 384], [1, 3, 4], [3, 3, 4]),
        };
        ModelSpec {
            widths,
            depths,
            heads,
            ..ModelSpec::default()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::M0 => "M0",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let t = t.strip_prefix("EFFICIENTVIT-").unwrap_or(&t);
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == t)
            .ok_or_else(|| ModelError::Spec(format!("unknown variant {s:?} (expected M0..M5)")))
    }
}

/// Architecture hyperparameters of one model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub widths: [usize; 3],
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    #[serde(default = "defaults::qk_dim")]
    pub qk_dim: usize,
    #[serde(default = "defaults::ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "defaults::n_ffn")]
    pub n_ffn: usize,
    #[serde(default = "defaults::input_resolution")]
    pub input_resolution: usize,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::dw_kernel")]
    pub dw_kernel: usize,
}

mod defaults {
    pub fn qk_dim() -> usize {
        16
    }
    pub fn ffn_ratio() -> usize {
        2
    }
    pub fn n_ffn() -> usize {
        1
    }
    pub fn input_resolution() -> usize {
        224
    }
    pub fn num_classes() -> usize {
        1000
    }
    pub fn dw_kernel() -> usize {
        3
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            widths: [64, 128, 192],
            depths: [1, 2, 3],
            heads: [4, 4, 4],
            qk_dim: defaults::qk_dim(),
            ffn_ratio: defaults::ffn_ratio(),
            n_ffn: defaults::n_ffn(),
            input_resolution: defaults::input_resolution(),
            num_classes: defaults::num_classes(),
            dw_kernel: defaults::dw_kernel(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Spec(m));
        for i in 0..3 {
            let (c, l, h) = (self.widths[i], self.depths[i], self.heads[i]);
            if c == 0 || l == 0 || h == 0 {
                return err(format!("stage {}: width, depth and heads must be >= 1", i + 1));
            }
            if c % h != 0 {
                return err(format!("stage {}: width {c} not divisible by {h} heads", i + 1));
            }
        }
        for i in 1..3 {
            let (a, b) = (self.widths[i - 1], self.widths[i]);
            if b < a || b > 2 * a {
                return err(format!(
                    "width {a} -> {b} between stages {i} and {} must grow by a factor in [1, 2]",
                    i + 1
                ));
            }
        }
        if self.widths[0] % 8 != 0 {
            return err(format!(
                "first-stage width {} must be divisible by 8 for the patch-embedding ramp",
                self.widths[0]
            ));
        }
        if self.input_resolution == 0 || self.input_resolution % 16 != 0 {
            return err(format!(
                "input resolution {} must be a positive multiple of 16",
                self.input_resolution
            ));
        }
        if self.dw_kernel % 2 == 0 {
            return err(format!("dw_kernel {} must be odd", self.dw_kernel));
        }
        for (name, v) in [
            ("qk_dim", self.qk_dim),
            ("ffn_ratio", self.ffn_ratio),
            ("n_ffn", self.n_ffn),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return err(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec =
            serde_json::from_str(text).map_err(|e| ModelError::Spec(format!("config JSON: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Per-head channel split `C_i / H_i`.
    pub fn head_dim(&self, stage: usize) -> usize {
        self.widths[stage] / self.heads[stage]
    }

    /// Token grid extent at each stage for a given input resolution.
    pub fn stage_extents(&self, resolution: usize) -> [usize; 3] {
        let s1 = resolution / 16;
        let s2 = (s1 + 2 - 3) / 2 + 1;
        let s3 = (s2 + 2 - 3) / 2 + 1;
        [s1, s2, s3]
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize; 3]| v.map(|x| x.to_string()).join(",");
        write!(
            f,
            "C{{{}}} L{{{}}} H{{{}}} qk_dim={} ffn_ratio={} n_ffn={} resolution={} classes={}",
            join(&self.widths),
            join(&self.depths),
            join(&self.heads),
            self.qk_dim,
            self.ffn_ratio,
            self.n_ffn,
            self.input_resolution,
            self.num_classes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_variants_validate() {
        for v in Variant::ALL {
            v.spec().validate().unwrap();
        }
    }

    #[test]
    fn parse_variant_names() {
        assert_eq!("m3".parse::<Variant>().unwrap(), Variant::M3);
        assert_eq!("EfficientViT-M5".parse::<Variant>().unwrap(), Variant::M5);
        assert!("M6".parse::<Variant>().is_err());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let spec = ModelSpec {
            heads: [3, 4, 4],
            ..ModelSpec::default()
        };
        assert!(matches!(spec.validate(), Err(ModelError::Spec(_))));
    }

    #[test]
    fn width_growth_bounded() {
        let spec = ModelSpec {
            widths: [64, 192, 192],
            ..ModelSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let s = Variant::M2.spec();
        assert_eq!(ModelSpec::from_json(&s.to_json()).unwrap(), s);
        let partial = r#"{"widths":[64,128,192],"depths":[1,2,3],"heads":[4,4,4]}"#;
        assert_eq!(ModelSpec::from_json(partial).unwrap(), ModelSpec::default());
        assert!(ModelSpec::from_json(r#"{"widths":[64,128,192],"depths":[1,2,3],"heads":[4,4,4],"extra":1}"#).is_err());
    }

    #[test]
    fn stage_extents_at_224() {
        assert_eq!(ModelSpec::default().stage_extents(224), [14, 7, 4]);
        assert_eq!(ModelSpec::default().stage_extents(32), [2, 1, 1]);
    }
}
