use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    N,
    S,
    M,
    L,
    X,
}

impl Scale {
    pub const ALL: [Scale; 5] = [Scale::N, Scale::S, Scale::M, Scale::L, Scale::X];

    /// `(depth_mult, width_mult, max_channels)`.
    pub fn multipliers(self) -> (f64, f64, usize) {
        match self {
            Scale::N => (0.50, 0.25, 1024),
            Scale::S => (0.50, 0.50, 1024),
            Scale::M => (0.50, 1.00, 512),
            Scale::L => (1.00, 1.00, 512),
            Scale::X => (1.00, 1.50, 512),
        }
    }

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Scale::ALL.get(code as usize).copied()
    }

    pub fn letter(self) -> char {
        ['n', 's', 'm', 'l', 'x'][self as usize]
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Scale::N),
            "s" => Ok(Scale::S),
            "m" => Ok(Scale::M),
            "l" => Ok(Scale::L),
            "x" => Ok(Scale::X),
            other => Err(Error::Config(format!("unknown scale '{other}' (expected n, s, m, l or x)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scale: Scale,
    pub nc: usize,
    pub input_size: usize,
}

impl ModelConfig {
    pub fn new(scale: Scale) -> Self {
        ModelConfig {
            scale,
            nc: 80,
            input_size: 640,
        }
    }

    pub fn with_nc(mut self, nc: usize) -> Self {
        self.nc = nc;
        self
    }

    pub fn depth_mult(&self) -> f64 {
        self.scale.multipliers().0
    }

    pub fn width_mult(&self) -> f64 {
        self.scale.multipliers().1
    }

    pub fn max_channels(&self) -> usize {
        self.scale.multipliers().2
    }

    /// `min(round(c * width), max_channels)`.
    pub fn channels(&self, c: usize) -> usize {
        ((c as f64 * self.width_mult()).round() as usize).min(self.max_channels())
    }

    /// `max(1, round(r * depth))`.
    pub fn repeats(&self, r: usize) -> usize {
        ((r as f64 * self.depth_mult()).round() as usize).max(1)
    }

    /// Bottleneck stages swap in C3k units from the medium scale up.
    pub fn c3k_everywhere(&self) -> bool {
        matches!(self.scale, Scale::M | Scale::L | Scale::X)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nc == 0 {
            return Err(Error::Config("class count must be >= 1".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        Ok(())
    }
}
