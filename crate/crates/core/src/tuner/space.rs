//! Search spaces mapped onto the unit cube.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Linear => "linear",
            Scale::Log => "log",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Scale::Linear),
            "log" => Ok(Scale::Log),
            other => Err(Error::Contract(format!("unknown scale `{other}`, expected linear or log"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl Dimension {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64, scale: Scale) -> Result<Self> {
        let name = name.into();
        if !lower.is_finite() || !upper.is_finite() || lower > upper {
            return Err(Error::Contract(format!(
                "dimension `{name}` needs finite bounds with lower <= upper, got [{lower}, {upper}]"
            )));
        }
        if scale == Scale::Log && lower <= 0.0 {
            return Err(Error::Contract(format!(
                "log-scaled dimension `{name}` needs a positive lower bound, got {lower}"
            )));
        }
        Ok(Dimension {
            name,
            lower,
            upper,
            scale,
        })
    }

    pub fn decode(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log => (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp(),
        }
    }

    pub fn encode(&self, value: f64) -> f64 {
        let u = match self.scale {
            Scale::Linear => (value - self.lower) / (self.upper - self.lower),
            Scale::Log => (value.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln()),
        };
        if u.is_finite() {
            u.clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Ordered dimensions; points are represented internally in `[0, 1]^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperparameterSpace {
    dims: Vec<Dimension>,
}

impl HyperparameterSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Contract("a search space needs at least one dimension".into()));
        }
        if dims.len() > super::design::MAX_DIMS {
            return Err(Error::Contract(format!(
                "at most {} dimensions are supported",
                super::design::MAX_DIMS
            )));
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::Contract(format!("dimension `{}` appears twice", d.name)));
            }
        }
        Ok(HyperparameterSpace { dims })
    }

    /// Default bounds for the model hyperparameters; intra-layer dropout is
    /// added for deep LSTMs only.
    pub fn canonical(deep_lstm: bool) -> Self {
        let mut dims = vec![
            Dimension::new("learning_rate", 1e-4, 1e-1, Scale::Log),
            Dimension::new("input_embedding_ratio", 0.01, 1.0, Scale::Linear),
            Dimension::new("input_drop", 0.0, 0.8, Scale::Linear),
            Dimension::new("state_drop", 0.0, 0.8, Scale::Linear),
            Dimension::new("output_drop", 0.0, 0.8, Scale::Linear),
            Dimension::new("weight_decay", 1e-7, 1e-3, Scale::Log),
        ];
        if deep_lstm {
            dims.push(Dimension::new("intra_layer_drop", 0.0, 0.8, Scale::Linear));
        }
        let dims = dims.into_iter().collect::<Result<Vec<_>>>().expect("canonical bounds are valid");
        HyperparameterSpace { dims }
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn decode(&self, unit: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(unit).map(|(d, &u)| d.decode(u)).collect()
    }

    pub fn encode(&self, values: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(values).map(|(d, &v)| d.encode(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_dimension_round_trips() {
        let d = Dimension::new("lr", 1e-4, 1e-1, Scale::Log).unwrap();
        assert!((d.decode(0.0) - 1e-4).abs() < 1e-18);
        assert!((d.decode(1.0) - 1e-1).abs() < 1e-15);
        assert!((d.decode(0.5) - 10f64.powf(-2.5)).abs() < 1e-15);
        for u in [0.0, 0.1, 0.37, 0.99, 1.0] {
            assert!((d.encode(d.decode(u)) - u).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_dimensions() {
        assert!(Dimension::new("x", 0.0, 1.0, Scale::Log).is_err());
        assert!(Dimension::new("x", 1.0, 0.0, Scale::Linear).is_err());
        assert!(Dimension::new("x", 0.0, f64::INFINITY, Scale::Linear).is_err());
        let d = Dimension::new("x", 0.0, 1.0, Scale::Linear).unwrap();
        assert!(HyperparameterSpace::new(vec![d.clone(), d]).is_err());
        assert!(HyperparameterSpace::new(vec![]).is_err());
    }

    #[test]
    fn canonical_space_shape() {
        assert_eq!(HyperparameterSpace::canonical(false).len(), 6);
        let deep = HyperparameterSpace::canonical(true);
        assert_eq!(deep.index_of("intra_layer_drop"), Some(6));
    }
}
