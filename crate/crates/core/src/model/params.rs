use std::collections::HashMap;

use crate::tensor::Scalar;

use super::ModelConfig;

pub const TOK_EMB: &str = "embeddings.token";
pub const POS_EMB: &str = "embeddings.position";
pub const CLS_W: &str = "classifier.weight";
pub const CLS_B: &str = "classifier.bias";

/// Per-block tensors, in storage order.
pub(crate) const BLOCK_TENSORS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2",
    "ln2_g", "ln2_b",
];

pub fn block_name(block: usize, tensor: &str) -> String {
    format!("block{block}.{tensor}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Kind {
    Embedding,
    Weight,
    Gain,
    Bias,
}

pub(crate) fn kind_of(name: &str) -> Kind {
    let last = name.rsplit('.').next().unwrap_or(name);
    if name.starts_with("embeddings.") {
        Kind::Embedding
    } else if last.ends_with("_g") {
        Kind::Gain
    } else if last.starts_with('b') || last.ends_with("_b") || last == "bias" {
        Kind::Bias
    } else {
        Kind::Weight
    }
}

/// Whether AdamW applies decoupled weight decay to this tensor (biases and
/// layer-norm parameters are exempt).
pub(crate) fn decays(name: &str) -> bool {
    matches!(kind_of(name), Kind::Embedding | Kind::Weight)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn shapes_for(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let f = config.d_ffn;
        let mut out = vec![
            (TOK_EMB.to_string(), vec![config.vocab_size, d]),
            (POS_EMB.to_string(), vec![config.max_len, d]),
        ];
        for b in 0..config.n_layers {
            for t in BLOCK_TENSORS {
                let shape = match t {
                    "wq" | "wk" | "wv" | "wo" => vec![d, d],
                    "w1" => vec![d, f],
                    "b1" => vec![f],
                    "w2" => vec![f, d],
                    _ => vec![d],
                };
                out.push((block_name(b, t), shape));
            }
        }
        out.push((CLS_W.to_string(), vec![d, config.n_tags]));
        out.push((CLS_B.to_string(), vec![config.n_tags]));
        out
    }

    pub fn zeros_for(config: &ModelConfig) -> Self {
        Self::from_tensors(
            Self::shapes_for(config)
                .into_iter()
                .map(|(name, shape)| {
                    let n = shape.iter().product();
                    Tensor {
                        name,
                        shape,
                        data: vec![T::zero(); n],
                    }
                })
                .collect(),
        )
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Self { tensors, index }
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_tensors(
            self.tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn block(&self, b: usize, t: &str) -> &[T] {
        &self.get(&block_name(b, t)).data
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet::from_tensors(
            self.tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect(),
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds() {
        assert_eq!(kind_of(TOK_EMB), Kind::Embedding);
        assert_eq!(kind_of("block0.wq"), Kind::Weight);
        assert_eq!(kind_of("block0.w1"), Kind::Weight);
        assert_eq!(kind_of("block0.bq"), Kind::Bias);
        assert_eq!(kind_of("block0.b1"), Kind::Bias);
        assert_eq!(kind_of("block0.ln1_g"), Kind::Gain);
        assert_eq!(kind_of("block0.ln1_b"), Kind::Bias);
        assert_eq!(kind_of(CLS_W), Kind::Weight);
        assert_eq!(kind_of(CLS_B), Kind::Bias);
        assert!(!decays("block3.ln2_g"));
        assert!(decays("block3.w2"));
    }
}
