//! Named parameter collections, initialization, and checkpoint round-trips.

use std::collections::BTreeMap;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::tensor::Tensor;
use super::TensorError;
use crate::rng;
use crate::scalar::Scalar;

/// What a tensor does in the network; weight decay only touches `Weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
}

/// One named tensor plus the metadata initialization needs.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub role: ParamRole,
    pub fan_in: usize,
    pub tensor: Tensor<S>,
}

/// Declarative description of a parameter, used to build and count networks.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            role: ParamRole::Weight,
            fan_in,
        }
    }

    pub fn bias(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            role: ParamRole::Bias,
            fan_in: 0,
        }
    }

    pub fn norm_scale(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            role: ParamRole::NormScale,
            fan_in: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    /// Initialize from specs: weights ~ N(0, 2/fan_in), biases zero, norm
    /// scales one. Each tensor gets its own substream keyed by name, so the
    /// result does not depend on spec order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self, TensorError> {
        let mut set = Self::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let tensor = match spec.role {
                ParamRole::Weight => {
                    let sd = (2.0 / spec.fan_in.max(1) as f64).sqrt();
                    let mut stream = rng::stream(seed, &[rng::fnv1a(spec.name.as_bytes())]);
                    let data = (0..n)
                        .map(|_| S::cast(rng::standard_normal(&mut stream) * sd))
                        .collect();
                    Tensor::new(spec.shape.clone(), data)?
                }
                ParamRole::Bias => Tensor::zeros(&spec.shape),
                ParamRole::NormScale => Tensor::filled(&spec.shape, S::one()),
            };
            set.insert(
                spec.name.clone(),
                Param {
                    role: spec.role,
                    fan_in: spec.fan_in,
                    tensor,
                },
            )?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: String, param: Param<S>) -> Result<(), TensorError> {
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>, TensorError> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<S>, TensorError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<S>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count over all tensors.
    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    role: ParamRole,
    fan_in: usize,
    shape: Vec<usize>,
    /// Little-endian f64 payload.
    data_b64: String,
}

/// Serialized network state: parameters plus optimizer state and step count.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    params: Vec<CheckpointParam>,
    optimizer: Option<OptimizerState<f64>>,
}

const CHECKPOINT_FORMAT: &str = "numerosity-checkpoint-v1";

impl Checkpoint {
    pub fn from_params(params: &ParameterSet<f64>, optimizer: Option<&OptimizerState<f64>>) -> Self {
        let engine = base64::engine::general_purpose::STANDARD;
        let params = params
            .iter()
            .map(|(name, p)| {
                let mut bytes = Vec::with_capacity(p.tensor.len() * 8);
                for v in p.tensor.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                CheckpointParam {
                    name: name.clone(),
                    role: p.role,
                    fan_in: p.fan_in,
                    shape: p.tensor.shape().to_vec(),
                    data_b64: engine.encode(&bytes),
                }
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            params,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TensorError> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| TensorError::BadCheckpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(TensorError::BadCheckpoint(format!(
                "unknown format {:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn into_params(self) -> Result<(ParameterSet<f64>, Option<OptimizerState<f64>>), TensorError> {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut set = ParameterSet::new();
        for p in self.params {
            let bytes = engine
                .decode(p.data_b64.as_bytes())
                .map_err(|e| TensorError::BadCheckpoint(e.to_string()))?;
            if bytes.len() % 8 != 0 {
                return Err(TensorError::BadCheckpoint(format!(
                    "payload for {} not 8-byte aligned",
                    p.name
                )));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(p.shape, data)?;
            set.insert(
                p.name,
                Param {
                    role: p.role,
                    fan_in: p.fan_in,
                    tensor,
                },
            )?;
        }
        Ok((set, self.optimizer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("layer1.w", &[100, 100], 100),
            ParamSpec::bias("layer1.b", &[100]),
            ParamSpec::norm_scale("norm.scale", &[16]),
        ]
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: ParameterSet<f64> = ParameterSet::init(&specs(), 77).unwrap();
        let b: ParameterSet<f64> = ParameterSet::init(&specs(), 77).unwrap();
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        let c: ParameterSet<f64> = ParameterSet::init(&specs(), 78).unwrap();
        assert_ne!(
            a.get("layer1.w").unwrap().tensor.data(),
            c.get("layer1.w").unwrap().tensor.data()
        );
    }

    #[test]
    fn init_order_does_not_matter() {
        let mut rev = specs();
        rev.reverse();
        let a: ParameterSet<f64> = ParameterSet::init(&specs(), 5).unwrap();
        let b: ParameterSet<f64> = ParameterSet::init(&rev, 5).unwrap();
        assert_eq!(
            a.get("layer1.w").unwrap().tensor.data(),
            b.get("layer1.w").unwrap().tensor.data()
        );
    }

    #[test]
    fn weight_variance_tracks_fan_in() {
        // 10_000 elements with fan_in 100: sample variance within 10% of 0.02
        let specs = vec![ParamSpec::weight("w", &[100, 100], 100)];
        let set: ParameterSet<f64> = ParameterSet::init(&specs, 13).unwrap();
        let data = set.get("w").unwrap().tensor.data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        assert!((var - 0.02).abs() < 0.002, "var {var}");
    }

    #[test]
    fn biases_exactly_zero_and_scales_one() {
        let set: ParameterSet<f64> = ParameterSet::init(&specs(), 1).unwrap();
        assert!(set
            .get("layer1.b")
            .unwrap()
            .tensor
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(set
            .get("norm.scale")
            .unwrap()
            .tensor
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn duplicate_name_rejected() {
        let dup = vec![
            ParamSpec::bias("b", &[2]),
            ParamSpec::bias("b", &[2]),
        ];
        assert!(matches!(
            ParameterSet::<f64>::init(&dup, 0),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let set: ParameterSet<f64> = ParameterSet::init(&specs(), 21).unwrap();
        let json = Checkpoint::from_params(&set, None).to_json();
        let (back, opt) = Checkpoint::from_json(&json).unwrap().into_params().unwrap();
        assert!(opt.is_none());
        assert_eq!(set.total_count(), back.total_count());
        for ((na, pa), (nb, pb)) in set.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
            assert_eq!(pa.role, pb.role);
        }
    }

    #[test]
    fn malformed_checkpoint_is_an_error() {
        assert!(Checkpoint::from_json("{}").is_err());
        assert!(Checkpoint::from_json("not json").is_err());
    }
}
