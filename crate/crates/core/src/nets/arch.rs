use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{conv_out, Layer};
use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{FanError, Result};
use crate::rng::stream;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_side: usize,
    /// Identity feature dimension.
    pub d_f: usize,
    /// Non-identity feature dimension.
    pub d_z: usize,
    /// Number of training identities (classifier width).
    pub n_identities: usize,
    /// Channel width of each stride-2 block; the decoder mirrors them.
    pub widths: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_side: 32,
            d_f: 64,
            d_z: 16,
            n_identities: 20,
            widths: vec![8, 16, 32, 32],
        }
    }
}

impl NetConfig {
    /// Tiny configuration used by the finite-difference suite.
    pub fn reduced() -> Self {
        NetConfig {
            image_side: 8,
            d_f: 4,
            d_z: 3,
            n_identities: 3,
            widths: vec![2, 3, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d_z == 0 || self.n_identities == 0 {
            return Err(FanError::validation("d_f, d_z and n_identities must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(FanError::validation("widths must be a non-empty list of positive values"));
        }
        let blocks = self.widths.len() as u32;
        if self.image_side == 0 || self.image_side % (1usize << blocks) != 0 {
            return Err(FanError::validation(format!(
                "image_side {} must be divisible by 2^{blocks}",
                self.image_side
            )));
        }
        Ok(())
    }

    /// Spatial side after the stride-2 stack.
    pub fn bottleneck_side(&self) -> usize {
        self.widths
            .iter()
            .fold(self.image_side, |s, _| conv_out(s, 3, 2, 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Model {
    #[serde(rename = "Enc_H")]
    EncH,
    #[serde(rename = "Enc_L")]
    EncL,
    #[serde(rename = "Enc_Z")]
    EncZ,
    Dec,
    Dis,
    #[serde(rename = "FC")]
    Fc,
}

impl Model {
    pub const ALL: [Model; 6] = [
        Model::EncH,
        Model::EncL,
        Model::EncZ,
        Model::Dec,
        Model::Dis,
        Model::Fc,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Model::EncH => "enc_h",
            Model::EncL => "enc_l",
            Model::EncZ => "enc_z",
            Model::Dec => "dec",
            Model::Dis => "dis",
            Model::Fc => "fc",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Model::EncH => "Enc_H",
            Model::EncL => "Enc_L",
            Model::EncZ => "Enc_Z",
            Model::Dec => "Dec",
            Model::Dis => "Dis",
            Model::Fc => "FC",
        };
        f.write_str(s)
    }
}

impl FromStr for Model {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Model::ALL
            .into_iter()
            .find(|m| m.prefix() == norm)
            .ok_or_else(|| FanError::validation(format!("unknown model {s}")))
    }
}

/// Identity encoders share one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    H,
    L,
}

impl Encoder {
    pub fn model(self) -> Model {
        match self {
            Encoder::H => Model::EncH,
            Encoder::L => Model::EncL,
        }
    }
}

/// Activations recorded by a forward pass: `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Tensor>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("tape holds the input")
    }
}

/// A feed-forward stack of layers whose parameters live under one prefix.
#[derive(Debug, Clone)]
pub struct Net {
    prefix: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Net {
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        for (name, shape, _) in self.param_shapes() {
            let p = store.get(&name)?;
            if p.value.shape() != shape.as_slice() {
                return Err(FanError::validation(format!(
                    "parameter {name} has shape {:?}, network expects {shape:?}",
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(FanError::validation(format!(
                "{} expects input {:?}, got {:?}",
                self.prefix,
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// SHA-256 over this network's parameters with names relative to the
    /// prefix, so two networks holding equal weights compare equal.
    pub fn checksum(&self, store: &ParamStore) -> String {
        let mut h = Sha256::new();
        for (name, _, _) in self.param_shapes() {
            h.update(name[self.prefix.len()..].as_bytes());
            for v in store.value(&name).data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// He-uniform weights, zero biases, seeded per parameter name.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        for (name, shape, fan_in) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = stream(seed, &name, &[]);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            store.insert(name, Tensor::from_vec(&shape, data)?)?;
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tape> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let y = layer.forward(store, acts.last().expect("non-empty"));
            acts.push(y);
        }
        Ok(Tape { acts })
    }

    /// Forward pass without keeping intermediate activations.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(store, &cur);
        }
        Ok(cur)
    }

    /// Back-propagates `dy` through the recorded pass. Parameter gradients go
    /// to `sink` when given; the input gradient is always returned.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        dy: &Tensor,
        mut sink: Option<&mut Grads>,
    ) -> Tensor {
        let mut g = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(store, &tape.acts[i], &tape.acts[i + 1], &g, sink.as_deref_mut());
        }
        g
    }
}

/// Architectures of all six networks for one [`NetConfig`].
#[derive(Debug, Clone)]
pub struct Networks {
    pub cfg: NetConfig,
    pub enc_h: Net,
    pub enc_l: Net,
    /// Softmax classifier on Enc_H features used only for pretraining.
    pub enc_h_cls: Net,
    pub enc_z: Net,
    pub dec: Net,
    pub dis: Net,
    pub fc: Net,
}

fn conv_stack(prefix: &str, cfg: &NetConfig, out_dim: usize) -> Net {
    let mut layers = Vec::new();
    let mut in_c = 1;
    for (i, &w) in cfg.widths.iter().enumerate() {
        layers.push(Layer::Conv {
            w: format!("{prefix}.conv{i}.w"),
            b: format!("{prefix}.conv{i}.b"),
            in_c,
            out_c: w,
            k: 3,
            stride: 2,
            pad: 1,
        });
        layers.push(Layer::LeakyRelu(LEAK));
        in_c = w;
    }
    let s = cfg.bottleneck_side();
    let flat = in_c * s * s;
    layers.push(Layer::Reshape(vec![flat]));
    layers.push(Layer::Linear {
        w: format!("{prefix}.out.w"),
        b: format!("{prefix}.out.b"),
        in_f: flat,
        out_f: out_dim,
    });
    Net {
        prefix: prefix.to_string(),
        input_shape: vec![1, cfg.image_side, cfg.image_side],
        layers,
    }
}

fn linear(prefix: &str, layer: &str, in_f: usize, out_f: usize) -> Net {
    Net {
        prefix: prefix.to_string(),
        input_shape: vec![in_f],
        layers: vec![Layer::Linear {
            w: format!("{prefix}.{layer}.w"),
            b: format!("{prefix}.{layer}.b"),
            in_f,
            out_f,
        }],
    }
}

fn decoder(cfg: &NetConfig) -> Net {
    let s = cfg.bottleneck_side();
    let top = *cfg.widths.last().expect("validated non-empty");
    let mut layers = vec![
        Layer::Linear {
            w: "dec.in.w".into(),
            b: "dec.in.b".into(),
            in_f: cfg.d_f + cfg.d_z,
            out_f: top * s * s,
        },
        Layer::LeakyRelu(LEAK),
        Layer::Reshape(vec![top, s, s]),
    ];
    let n = cfg.widths.len();
    let mut in_c = top;
    for i in (0..n).rev() {
        let out_c = if i == 0 { 1 } else { cfg.widths[i - 1] };
        layers.push(Layer::Upsample2x);
        layers.push(Layer::Conv {
            w: format!("dec.conv{}.w", n - 1 - i),
            b: format!("dec.conv{}.b", n - 1 - i),
            in_c,
            out_c,
            k: 3,
            stride: 1,
            pad: 1,
        });
        layers.push(if i == 0 { Layer::Tanh } else { Layer::LeakyRelu(LEAK) });
        in_c = out_c;
    }
    Net {
        prefix: "dec".into(),
        input_shape: vec![cfg.d_f + cfg.d_z],
        layers,
    }
}

impl Networks {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Networks {
            cfg: cfg.clone(),
            enc_h: conv_stack("enc_h", cfg, cfg.d_f),
            enc_l: conv_stack("enc_l", cfg, cfg.d_f),
            enc_h_cls: linear("enc_h", "cls", cfg.d_f, cfg.n_identities),
            enc_z: conv_stack("enc_z", cfg, cfg.d_z),
            dec: decoder(cfg),
            dis: conv_stack("dis", cfg, 1),
            fc: linear("fc", "linear", cfg.d_z, cfg.n_identities),
        })
    }

    pub fn nets_of(&self, model: Model) -> Vec<&Net> {
        match model {
            Model::EncH => vec![&self.enc_h, &self.enc_h_cls],
            Model::EncL => vec![&self.enc_l],
            Model::EncZ => vec![&self.enc_z],
            Model::Dec => vec![&self.dec],
            Model::Dis => vec![&self.dis],
            Model::Fc => vec![&self.fc],
        }
    }

    pub fn encoder(&self, which: Encoder) -> &Net {
        match which {
            Encoder::H => &self.enc_h,
            Encoder::L => &self.enc_l,
        }
    }

    /// Adds freshly initialized parameters for `model`.
    pub fn init_model(&self, store: &mut ParamStore, model: Model, seed: u64) -> Result<()> {
        if store.has_prefix(model.prefix()) {
            return Err(FanError::validation(format!("{model} already initialized")));
        }
        for net in self.nets_of(model) {
            net.init(store, seed)?;
        }
        Ok(())
    }

    pub fn check_model(&self, store: &ParamStore, model: Model) -> Result<()> {
        for net in self.nets_of(model) {
            net.check(store)?;
        }
        Ok(())
    }

    pub fn has_model(&self, store: &ParamStore, model: Model) -> bool {
        self.check_model(store, model).is_ok()
    }

    fn check_batch(&self, x: &[Tensor], net: &Net) -> Result<()> {
        for t in x {
            net.check_input(t)?;
        }
        Ok(())
    }

    pub fn enc_forward(&self, which: Encoder, store: &ParamStore, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let net = self.encoder(which);
        net.check(store)?;
        self.check_batch(x, net)?;
        x.iter().map(|t| net.infer(store, t)).collect()
    }

    pub fn enc_z_forward(&self, store: &ParamStore, x: &[Tensor]) -> Result<Vec<Tensor>> {
        self.enc_z.check(store)?;
        self.check_batch(x, &self.enc_z)?;
        x.iter().map(|t| self.enc_z.infer(store, t)).collect()
    }

    pub fn dec_input(&self, f: &Tensor, z: &Tensor) -> Result<Tensor> {
        if f.len() != self.cfg.d_f || z.len() != self.cfg.d_z {
            return Err(FanError::validation(format!(
                "decoder expects f of {} and z of {} values, got {} and {}",
                self.cfg.d_f,
                self.cfg.d_z,
                f.len(),
                z.len()
            )));
        }
        let mut v = f.data().to_vec();
        v.extend_from_slice(z.data());
        Ok(Tensor::vector(v))
    }

    /// Splits a decoder input gradient into its `(f, z)` parts.
    pub fn split_dec_grad(&self, g: &Tensor) -> (Tensor, Tensor) {
        let (a, b) = g.data().split_at(self.cfg.d_f);
        (Tensor::vector(a.to_vec()), Tensor::vector(b.to_vec()))
    }

    pub fn zero_z(&self) -> Tensor {
        Tensor::zeros(&[self.cfg.d_z])
    }

    pub fn dec_forward(&self, store: &ParamStore, f: &[Tensor], z: &[Tensor]) -> Result<Vec<Tensor>> {
        if f.len() != z.len() {
            return Err(FanError::validation("f and z batches differ in length"));
        }
        self.dec.check(store)?;
        f.iter()
            .zip(z)
            .map(|(f, z)| self.dec.infer(store, &self.dec_input(f, z)?))
            .collect()
    }

    pub fn dis_forward(&self, store: &ParamStore, x: &[Tensor]) -> Result<Vec<f64>> {
        self.dis.check(store)?;
        self.check_batch(x, &self.dis)?;
        x.iter()
            .map(|t| Ok(self.dis.infer(store, t)?.data()[0]))
            .collect()
    }

    /// Softmax identity distribution for each `z`.
    pub fn fc_forward(&self, store: &ParamStore, z: &[Tensor]) -> Result<Vec<Tensor>> {
        self.fc.check(store)?;
        self.check_batch(z, &self.fc)?;
        z.iter()
            .map(|t| Ok(softmax(&self.fc.infer(store, t)?)))
            .collect()
    }
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.data().iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Tensor::vector(e.into_iter().map(|v| v / s).collect())
}

/// Gradient w.r.t. logits given the softmax output `p` and `dp`.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let dot: f64 = p.data().iter().zip(dp.data()).map(|(a, b)| a * b).sum();
    Tensor::vector(
        p.data()
            .iter()
            .zip(dp.data())
            .map(|(pi, gi)| pi * (gi - dot))
            .collect(),
    )
}
