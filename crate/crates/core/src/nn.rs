//! Parameter containers and forward passes: query/key encoders, classifier,
//! gate net and attention projections, plus the EMA coupling between the
//! two encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearLayer {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn kaiming(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![output, input], data).unwrap(),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Identity map on `n` features.
    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::eye(n),
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Puts the layer on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<LinearVars> {
        let (weight, bias) = if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (
                tape.constant(self.weight.clone()),
                tape.constant(self.bias.clone()),
            )
        };
        let weight_t = tape.transpose(weight)?;
        Ok(LinearVars {
            weight,
            weight_t,
            bias,
        })
    }
}

/// A [`LinearLayer`] bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub weight_t: Var,
    pub bias: Var,
}

impl LinearVars {
    /// `x W^T + b` for `x` of shape `[B, in]` or `[in]`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let in_dim = tape.shape(self.weight_t)[0];
        let out_dim = tape.shape(self.weight_t)[1];
        match tape.shape(x).len() {
            1 => {
                if tape.shape(x)[0] != in_dim {
                    return Err(Error::dim("linear", tape.shape(x), &[in_dim]));
                }
                let row = tape.reshape(x, &[1, in_dim])?;
                let y = tape.matmul(row, self.weight_t)?;
                let y = tape.add_row(y, self.bias)?;
                tape.reshape(y, &[out_dim])
            }
            _ => {
                let y = tape.matmul(x, self.weight_t)?;
                tape.add_row(y, self.bias)
            }
        }
    }
}

/// MLP with relu between layers and a linear last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<LinearLayer>,
    trainable: bool,
}

impl Encoder {
    pub fn new(layers: Vec<LinearLayer>, trainable: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim(
                    "encoder",
                    w[0].weight.shape(),
                    w[1].weight.shape(),
                ));
            }
        }
        Ok(Self { layers, trainable })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    /// Whether this encoder receives gradients. The key encoder never does.
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<EncoderVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.bind(tape, self.trainable))
            .collect::<Result<_>>()?;
        Ok(EncoderVars { layers })
    }

    /// Forward pass without gradient tracking, for evaluation and for the
    /// teacher.
    pub fn encode_detached(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(&mut tape, false))
                .collect::<Result<_>>()?,
        };
        let x = tape.constant(batch.clone());
        let y = vars.encode(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub layers: Vec<LinearVars>,
}

impl EncoderVars {
    /// `batch` is `[B, input_dim]`; returns `[B, embed_dim]`.
    pub fn encode(&self, tape: &mut Tape, batch: Var) -> Result<Var> {
        let want = tape.shape(self.layers[0].weight_t)[0];
        let shape = tape.shape(batch);
        if shape.len() != 2 || shape[1] != want {
            return Err(Error::dim("encode", shape, &[0, want]));
        }
        let mut h = batch;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Projections `phi1: D->D`, `phi2: 2D->D`, `phi3: D->D` of the attention net.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub phi1: LinearLayer,
    pub phi2: LinearLayer,
    pub phi3: LinearLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub classes: usize,
    pub mu: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.classes == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (input_dim={}, embed_dim={}, classes={})",
                self.input_dim, self.embed_dim, self.classes
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "hidden widths must be positive, got {:?}",
                self.hidden
            )));
        }
        check_mu(self.mu)?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("mu must lie in (0, 1), got {mu}")))
    }
}

/// Every learnable piece of the model, plus the loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub query: Encoder,
    pub key: Encoder,
    pub classifier: LinearLayer,
    pub gate: LinearLayer,
    pub attn: AttentionParams,
    pub mu: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl ModelBundle {
    /// Fresh bundle; the key encoder starts as an exact copy of the query
    /// encoder.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(d);
        let layers: Vec<_> = dims
            .windows(2)
            .map(|w| LinearLayer::kaiming(w[0], w[1], &mut rng))
            .collect();
        let query = Encoder::new(layers.clone(), true)?;
        let key = Encoder::new(layers, false)?;
        let classifier = LinearLayer::kaiming(d, config.classes, &mut rng);
        let gate = LinearLayer::kaiming(2 * d, d, &mut rng);
        let attn = AttentionParams {
            phi1: LinearLayer::kaiming(d, d, &mut rng),
            phi2: LinearLayer::kaiming(2 * d, d, &mut rng),
            phi3: LinearLayer::kaiming(d, d, &mut rng),
        };
        Ok(Self {
            query,
            key,
            classifier,
            gate,
            attn,
            mu: config.mu,
            lambda: config.lambda,
            tau: config.tau,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.query.embed_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Parameters in checkpoint order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("query", &self.query), ("key", &self.key)] {
            for (i, l) in enc.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        for (name, l) in self.head_layers() {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("query", &mut self.query), ("key", &mut self.key)] {
            for (i, l) in enc.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
            }
        }
        let ModelBundle {
            classifier,
            gate,
            attn,
            ..
        } = self;
        for (name, l) in [
            ("classifier", classifier),
            ("gate", gate),
            ("attn.phi1", &mut attn.phi1),
            ("attn.phi2", &mut attn.phi2),
            ("attn.phi3", &mut attn.phi3),
        ] {
            out.push((format!("{name}.weight"), &mut l.weight));
            out.push((format!("{name}.bias"), &mut l.bias));
        }
        out
    }

    fn head_layers(&self) -> [(&'static str, &LinearLayer); 5] {
        [
            ("classifier", &self.classifier),
            ("gate", &self.gate),
            ("attn.phi1", &self.attn.phi1),
            ("attn.phi2", &self.attn.phi2),
            ("attn.phi3", &self.attn.phi3),
        ]
    }

    /// `theta_key <- mu * theta_key + (1 - mu) * theta_query`, off-tape.
    pub fn ema_update(&mut self, mu: f64) -> Result<()> {
        check_mu(mu)?;
        for (k, q) in self.key.layers.iter_mut().zip(&self.query.layers) {
            for (kt, qt) in [(&mut k.weight, &q.weight), (&mut k.bias, &q.bias)] {
                for (kv, &qv) in kt.data_mut().iter_mut().zip(qt.data()) {
                    *kv = mu * *kv + (1.0 - mu) * qv;
                }
            }
        }
        Ok(())
    }

    /// Euclidean distance between the flattened key and query encoders.
    pub fn teacher_gap(&self) -> f64 {
        self.key
            .layers
            .iter()
            .zip(&self.query.layers)
            .flat_map(|(k, q)| {
                k.weight
                    .data()
                    .iter()
                    .zip(q.weight.data())
                    .chain(k.bias.data().iter().zip(q.bias.data()))
            })
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Logits for a batch of flattened inputs, without gradient tracking.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let emb = self.query.encode_detached(batch)?;
        let mut tape = Tape::new();
        let clf = self.classifier.bind(&mut tape, false)?;
        let e = tape.constant(emb);
        let logits = classify(&mut tape, &clf, e)?;
        Ok(tape.value(logits).clone())
    }
}

/// Affine map from embeddings `[B, D]` to logits `[B, C]`.
pub fn classify(tape: &mut Tape, classifier: &LinearVars, emb: Var) -> Result<Var> {
    let want = tape.shape(classifier.weight_t)[0];
    let shape = tape.shape(emb);
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::dim("classify", shape, &[0, want]));
    }
    classifier.apply(tape, emb)
}
