use crate::error::{Error, Result};

/// Default negative-side slope for leaky ReLU.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

/// Piecewise-linear activation. The derivative at 0 is taken from the left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }

    pub fn negative_slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(a) => a,
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(a) => format!("leaky_relu({a})"),
        }
    }

    /// Parse `relu`, `leaky_relu` or `leaky_relu(0.2)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "relu" {
            return Ok(Activation::Relu);
        }
        if s == "leaky_relu" {
            return Ok(Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE));
        }
        if let Some(inner) = s
            .strip_prefix("leaky_relu(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let a: f64 = inner
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad leaky slope '{inner}'")))?;
            let act = Activation::LeakyRelu(a);
            act.validate()?;
            return Ok(act);
        }
        Err(Error::Config(format!("unknown activation '{s}'")))
    }

    pub fn validate(self) -> Result<()> {
        if let Activation::LeakyRelu(a) = self {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("leaky slope {a} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Rectangular feed-forward network: `depth` layers, hidden width `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnnConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub use_bias: bool,
    /// Multiplier on the He standard deviation of the last layer.
    pub last_layer_scale: f64,
    pub seed: u64,
}

impl FfnnConfig {
    pub fn new(input_dim: usize, width: usize, depth: usize, output_dim: usize, seed: u64) -> Self {
        FfnnConfig {
            input_dim,
            width,
            depth,
            output_dim,
            activation: Activation::Relu,
            use_bias: false,
            last_layer_scale: 1.0,
            seed,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.use_bias = use_bias;
        self
    }

    pub fn with_last_layer_scale(mut self, s: f64) -> Self {
        self.last_layer_scale = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.depth == 0 || self.output_dim == 0 {
            return Err(Error::Config(
                "dimensions and depth must be at least 1".into(),
            ));
        }
        if !(self.last_layer_scale > 0.0 && self.last_layer_scale.is_finite()) {
            return Err(Error::Config(format!(
                "last-layer scale {} must be positive",
                self.last_layer_scale
            )));
        }
        self.activation.validate()
    }

    /// Layer sizes `[d, N, …, N, o]`, length `depth + 1`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        dims.push(self.input_dim);
        for _ in 1..self.depth {
            dims.push(self.width);
        }
        dims.push(self.output_dim);
        dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_layout() {
        assert_eq!(FfnnConfig::new(3, 8, 4, 2, 0).dims(), vec![3, 8, 8, 8, 2]);
        assert_eq!(FfnnConfig::new(3, 8, 1, 2, 0).dims(), vec![3, 2]);
    }

    #[test]
    fn activation_parse_and_slopes() {
        assert_eq!(Activation::parse("relu").unwrap(), Activation::Relu);
        assert_eq!(
            Activation::parse("leaky_relu").unwrap(),
            Activation::LeakyRelu(0.1)
        );
        assert_eq!(
            Activation::parse("leaky_relu(0.25)").unwrap(),
            Activation::LeakyRelu(0.25)
        );
        assert!(Activation::parse("leaky_relu(1.5)").is_err());
        assert!(Activation::parse("tanh").is_err());
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::LeakyRelu(0.1).apply(-2.0), -0.2);
    }

    #[test]
    fn invalid_configs() {
        assert!(FfnnConfig::new(0, 8, 4, 2, 0).validate().is_err());
        assert!(FfnnConfig::new(3, 8, 4, 2, 0)
            .with_last_layer_scale(0.0)
            .validate()
            .is_err());
    }
}
