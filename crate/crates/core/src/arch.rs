//! Architecture strings: comma-separated layer specs, `DIM@M` for a hidden
//! layer and `y@M` for the output layer. `y@50` is a single-layer sparse GP,
//! `2@50,y@50` a two-layer network with a 2-D hidden layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiddenSpec {
    pub dim: usize,
    pub num_inducing: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub hidden: Vec<HiddenSpec>,
    /// Inducing points of the output layer.
    pub output_inducing: usize,
}

impl Architecture {
    pub fn shallow(num_inducing: usize) -> Self {
        Architecture {
            hidden: Vec::new(),
            output_inducing: num_inducing,
        }
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(input_dim, output_dim, M)` per layer for a given data dimension.
    pub fn layer_shapes(&self, input_dim: usize) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth());
        let mut din = input_dim;
        for h in &self.hidden {
            shapes.push((din, h.dim, h.num_inducing));
            din = h.dim;
        }
        shapes.push((din, 1, self.output_inducing));
        shapes
    }
}

fn positive(input: &str, part: &str, what: &str) -> Result<usize, Error> {
    match part.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::Architecture {
            input: input.to_string(),
            reason: format!("{what} {part:?} is not a positive integer"),
        }),
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = |reason: &str| Error::Architecture {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let specs: Vec<&str> = s.split(',').map(str::trim).collect();
        let (last, hidden_specs) = specs.split_last().ok_or_else(|| bad("empty"))?;
        let mut hidden = Vec::with_capacity(hidden_specs.len());
        for spec in hidden_specs {
            let (dim, m) = spec
                .split_once('@')
                .ok_or_else(|| bad("each layer must look like DIM@M or y@M"))?;
            if dim.trim() == "y" {
                return Err(bad("only the last layer may be y@M"));
            }
            hidden.push(HiddenSpec {
                dim: positive(s, dim, "hidden dimension")?,
                num_inducing: positive(s, m, "inducing count")?,
            });
        }
        let (y, m) = last
            .split_once('@')
            .ok_or_else(|| bad("each layer must look like DIM@M or y@M"))?;
        if y.trim() != "y" {
            return Err(bad("the last layer must be y@M"));
        }
        Ok(Architecture {
            hidden,
            output_inducing: positive(s, m, "inducing count")?,
        })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for h in &self.hidden {
            write!(f, "{}@{},", h.dim, h.num_inducing)?;
        }
        write!(f, "y@{}", self.output_inducing)
    }
}

impl Serialize for Architecture {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
