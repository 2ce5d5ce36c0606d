use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INPUT_SIZE: usize = 256;
pub const DEFAULT_JOINTS: usize = 15;
pub const OUTPUT_STRIDE: usize = 8;
/// Output stride of the truncated base network.
pub const BASE_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "type-a")]
    TypeA,
    #[serde(rename = "type-b")]
    TypeB,
    #[serde(rename = "type-c")]
    TypeC,
    /// Free widths, used for reduced test networks.
    #[serde(rename = "custom")]
    Custom,
}

impl Variant {
    pub const PRESETS: [Variant; 3] = [Variant::TypeA, Variant::TypeB, Variant::TypeC];

    pub fn profile_name(self) -> &'static str {
        match self {
            Variant::TypeA => "type-a",
            Variant::TypeB => "type-b",
            Variant::TypeC => "type-c",
            Variant::Custom => "custom",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::TypeA => "Type A",
            Variant::TypeB => "Type B",
            Variant::TypeC => "Type C",
            Variant::Custom => "Custom",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.profile_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "type-a" | "typea" => Ok(Variant::TypeA),
            "b" | "type-b" | "typeb" => Ok(Variant::TypeB),
            "c" | "type-c" | "typec" => Ok(Variant::TypeC),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected a, b, c or custom)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// Bilinear ×2 followed by a 3×3 convolution.
    BilinearConv,
    /// 4×4 transposed convolution with stride 2.
    TransposedConv,
}

impl Upsampling {
    pub fn label(self) -> &'static str {
        match self {
            Upsampling::BilinearConv => "Bilinear + Conv2D",
            Upsampling::TransposedConv => "TransposedConv2D",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub input_size: usize,
    pub joint_count: usize,
    pub block13a_widths: Vec<usize>,
    pub block13b_widths: Vec<usize>,
    pub upsampling: Upsampling,
    pub output_stride: usize,
}

impl NetworkSpec {
    pub fn preset(variant: Variant) -> Self {
        let (a, b, up) = match variant {
            Variant::TypeA | Variant::Custom => {
                (vec![368, 368, 256], vec![192, 192, 128], Upsampling::BilinearConv)
            }
            Variant::TypeB => (vec![368, 368, 256], vec![192, 192, 128], Upsampling::TransposedConv),
            Variant::TypeC => (vec![512, 512, 512], vec![256, 256, 128], Upsampling::BilinearConv),
        };
        NetworkSpec {
            variant,
            input_size: DEFAULT_INPUT_SIZE,
            joint_count: DEFAULT_JOINTS,
            block13a_widths: a,
            block13b_widths: b,
            upsampling: up,
            output_stride: OUTPUT_STRIDE,
        }
    }

    pub fn type_a() -> Self {
        Self::preset(Variant::TypeA)
    }

    pub fn type_b() -> Self {
        Self::preset(Variant::TypeB)
    }

    pub fn type_c() -> Self {
        Self::preset(Variant::TypeC)
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Spatial extent of every output map.
    pub fn map_size(&self) -> usize {
        self.input_size / self.output_stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant != Variant::Custom {
            let p = Self::preset(self.variant);
            if self.block13a_widths != p.block13a_widths
                || self.block13b_widths != p.block13b_widths
                || self.upsampling != p.upsampling
            {
                return Err(Error::Config(format!(
                    "profile {} requires widths {:?}/{:?} with {:?}",
                    self.variant, p.block13a_widths, p.block13b_widths, p.upsampling
                )));
            }
        }
        if self.block13a_widths.is_empty() || self.block13b_widths.is_empty() {
            return Err(Error::Config("block widths must not be empty".into()));
        }
        if self.block13a_widths.iter().chain(&self.block13b_widths).any(|&w| w == 0) {
            return Err(Error::Config("block widths must be positive".into()));
        }
        if self.joint_count == 0 {
            return Err(Error::Config("joint_count must be positive".into()));
        }
        if self.output_stride != OUTPUT_STRIDE {
            return Err(Error::Config(format!(
                "output_stride must be {OUTPUT_STRIDE}, got {}",
                self.output_stride
            )));
        }
        if self.input_size == 0 || self.input_size % BASE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of {BASE_STRIDE}, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Parses a `key = value` config. A `profile` key selects a preset whose
    /// fields the remaining keys override.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let variant = match table.remove("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => match table.get("variant") {
                Some(toml::Value::String(s)) => s.parse()?,
                _ => Variant::Custom,
            },
        };
        let base = toml::Table::try_from(Self::preset(variant))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = base;
        merged.extend(table);
        let spec: NetworkSpec = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config_string(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }
}
