use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lit, ModelConfig, Scalar};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Glorot-uniform bound.
    pub fn init_bound(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }
}

/// Order and shape of every learnable tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize, is_bias: bool| {
            let len: usize = shape.iter().product();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
                fan_in,
                fan_out,
                is_bias,
            });
            offset += len;
        };
        let k = cfg.kernel;
        let mut c_in = cfg.channels;
        for (i, &c_out) in cfg.filters.iter().enumerate() {
            push(format!("conv{}.weight", i + 1), vec![c_out, c_in, k], c_in * k, c_out * k, false);
            push(format!("conv{}.bias", i + 1), vec![c_out], 0, 0, true);
            c_in = c_out;
        }
        let flat = cfg.flatten_len();
        let du = cfg.dense_units;
        let h = cfg.lstm_hidden;
        push("dense.weight".into(), vec![du, flat], flat, du, false);
        push("dense.bias".into(), vec![du], 0, 0, true);
        push("lstm.input_weight".into(), vec![4 * h, du], du, 4 * h, false);
        push("lstm.recurrent_weight".into(), vec![4 * h, h], h, 4 * h, false);
        push("lstm.bias".into(), vec![4 * h], 0, 0, true);
        let out = cfg.output_len();
        push("head.weight".into(), vec![out, h], h, out, false);
        push("head.bias".into(), vec![out], 0, 0, true);
        ParamLayout {
            tensors,
            total: offset,
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// All learnable weights in one flat buffer, addressable by tensor name.
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        Ok(ModelParams {
            config: config.clone(),
            data: vec![T::zero(); layout.total],
            layout,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn tensor(&self, name: &str) -> &[T] {
        let spec = self.layout.get(name).unwrap_or_else(|| panic!("no tensor {name}"));
        &self.data[spec.range()]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [T] {
        let range = self
            .layout
            .get(name)
            .unwrap_or_else(|| panic!("no tensor {name}"))
            .range();
        &mut self.data[range]
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, other: &ModelParams<T>) -> Result<()> {
        if self.config != other.config || self.data.len() != other.data.len() {
            return Err(invalid!("parameter sets have different model configurations"));
        }
        Ok(())
    }
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for spec in &params.layout.tensors {
        if spec.is_bias {
            continue;
        }
        let bound = spec.init_bound();
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in &mut params.data[spec.range()] {
            *v = lit(dist.sample(&mut rng));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Assembly;

    #[test]
    fn deterministic_and_zero_bias() {
        let cfg = ModelConfig::new(4, Assembly::SAR);
        let a = init_params::<f32>(&cfg, 11).unwrap();
        let b = init_params::<f32>(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f32>(&cfg, 12).unwrap());
        for t in a.layout.tensors.iter().filter(|t| t.is_bias) {
            assert!(a.data[t.range()].iter().all(|&v| v == 0.0), "{}", t.name);
        }
    }

    #[test]
    fn conv1_bound() {
        let cfg = ModelConfig::new(4, Assembly::S);
        let layout = ParamLayout::new(&cfg);
        let spec = layout.get("conv1.weight").unwrap();
        let bound = spec.init_bound();
        assert!((bound - (6.0f64 / 1200.0).sqrt()).abs() < 1e-15);
        assert!((bound - 0.0707).abs() < 1e-4);
        let p = init_params::<f64>(&cfg, 3).unwrap();
        let w = p.tensor("conv1.weight");
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > 0.5 * bound));
    }

    #[test]
    fn layout_covers_buffer() {
        let cfg = ModelConfig::new(6, Assembly::SR);
        let layout = ParamLayout::new(&cfg);
        let mut next = 0;
        for t in &layout.tensors {
            assert_eq!(t.offset, next);
            next += t.len();
        }
        assert_eq!(next, layout.total);
        assert_eq!(layout.get("dense.weight").unwrap().shape, vec![50, 416]);
        assert_eq!(layout.get("head.weight").unwrap().shape, vec![10, 50]);
    }
}
