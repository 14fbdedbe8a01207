//! The encoder/decoder regressor: a ten-layer encoder down to a 20-wide
//! bottleneck and a ten-layer decoder up to a 43-wide output head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{effective_groups, layer_param_count, push_dense, ParamSet};

pub const BOTTLENECK: usize = 20;
pub const OUTPUT_WIDTH: usize = 43;

/// Encoder widths at full scale, input first.
pub const PAPER_ENCODER: [usize; 11] = [70, 280, 220, 170, 120, 90, 70, 50, 35, 25, 20];
/// Decoder widths at full scale, bottleneck first.
pub const PAPER_DECODER: [usize; 11] = [20, 25, 35, 50, 70, 90, 120, 170, 220, 280, 43];
/// Published per-layer encoder counts; the first entry disagrees with its own formula.
pub const PUBLISHED_ENCODER_COUNTS: [usize; 10] =
    [12_320, 61_820, 37_570, 20_520, 10_890, 6_370, 3_550, 1_785, 900, 520];
pub const PUBLISHED_ENCODER_TOTAL: usize = 156_245;
pub const PUBLISHED_NETWORK_TOTAL: usize = 312_490;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqrnnConfig {
    pub encoder_dims: Vec<usize>,
    pub decoder_dims: Vec<usize>,
    pub groups: usize,
    pub eps: f64,
    pub dropout: f64,
}

impl EqrnnConfig {
    /// The full-scale 70-input schedule.
    pub fn paper() -> Self {
        EqrnnConfig {
            encoder_dims: PAPER_ENCODER.to_vec(),
            decoder_dims: PAPER_DECODER.to_vec(),
            groups: 8,
            eps: 1e-5,
            dropout: 0.15,
        }
    }

    /// The full-scale schedule with hidden widths scaled by `channels / 70`,
    /// rounded to multiples of 4 and floored at the bottleneck width. The
    /// bottleneck and output widths never change.
    pub fn scaled(channels: usize) -> Self {
        if channels == PAPER_ENCODER[0] {
            return EqrnnConfig::paper();
        }
        let ratio = channels as f64 / PAPER_ENCODER[0] as f64;
        let scale = |d: usize| -> usize {
            let s = ((d as f64 * ratio) / 4.0).round() as usize * 4;
            s.max(BOTTLENECK)
        };
        let hidden: Vec<usize> = PAPER_ENCODER[1..10].iter().map(|&d| scale(d)).collect();
        let mut encoder_dims = vec![channels];
        encoder_dims.extend(&hidden);
        encoder_dims.push(BOTTLENECK);
        let mut decoder_dims = vec![BOTTLENECK];
        decoder_dims.extend(hidden.iter().rev());
        decoder_dims.push(OUTPUT_WIDTH);
        EqrnnConfig { encoder_dims, decoder_dims, ..EqrnnConfig::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_dims.len() != 11 || self.decoder_dims.len() != 11 {
            return Err(Error::config("encoder and decoder must each have 10 layers"));
        }
        if self.encoder_dims.iter().chain(&self.decoder_dims).any(|&d| d == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if *self.encoder_dims.last().unwrap() != BOTTLENECK || self.decoder_dims[0] != BOTTLENECK {
            return Err(Error::config(format!("bottleneck must be {BOTTLENECK} wide")));
        }
        if *self.decoder_dims.last().unwrap() != OUTPUT_WIDTH {
            return Err(Error::config(format!("output must be {OUTPUT_WIDTH} wide")));
        }
        if self.groups == 0 {
            return Err(Error::config("group count must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.encoder_dims[0]
    }

    pub fn encoder_param_counts(&self) -> Vec<usize> {
        self.encoder_dims.windows(2).map(|w| layer_param_count(w[0], w[1])).collect()
    }

    pub fn decoder_param_counts(&self) -> Vec<usize> {
        self.decoder_dims.windows(2).map(|w| layer_param_count(w[0], w[1])).collect()
    }

    pub fn is_paper_schedule(&self) -> bool {
        self.encoder_dims == PAPER_ENCODER && self.decoder_dims == PAPER_DECODER
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    weight: usize,
    bias: usize,
    /// gain, shift, slope for hidden layers
    norm: Option<(usize, usize, usize)>,
    groups: usize,
}

/// The encoder/decoder network. Hidden layers run
/// linear, group norm (with affine), PReLU, dropout; the last layer of the
/// encoder and of the decoder is purely affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqrnnNet {
    pub config: EqrnnConfig,
    pub params: ParamSet,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
}

fn build_stack<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    dims: &[usize],
    groups: usize,
    rng: &mut R,
) -> Vec<Layer> {
    let n = dims.len() - 1;
    (0..n)
        .map(|i| {
            let (w, b) = push_dense(params, &format!("{prefix}.{i}"), dims[i], dims[i + 1], rng);
            let norm = (i + 1 < n).then(|| {
                let width = dims[i + 1];
                let gain = params.push(format!("{prefix}.{i}.gn_gain"), Tensor::filled(1, width, 1.0));
                let shift = params.push(format!("{prefix}.{i}.gn_shift"), Tensor::zeros(1, width));
                let slope = params.push(format!("{prefix}.{i}.prelu"), Tensor::scalar(0.25));
                (gain, shift, slope)
            });
            Layer { weight: w, bias: b, norm, groups: effective_groups(dims[i + 1], groups) }
        })
        .collect()
}

impl EqrnnNet {
    pub fn new(config: EqrnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = build_stack(&mut params, "encoder", &config.encoder_dims, config.groups, &mut rng);
        let decoder = build_stack(&mut params, "decoder", &config.decoder_dims, config.groups, &mut rng);
        Ok(EqrnnNet { config, params, encoder, decoder })
    }

    /// Rebuilds a network from a config and a parameter set of matching layout.
    pub fn from_params(config: EqrnnConfig, params: ParamSet) -> Result<Self> {
        let mut net = EqrnnNet::new(config, 0)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn input_width(&self) -> usize {
        self.config.input_width()
    }

    /// Number of parameter tensors belonging to the encoder; they come first.
    pub fn encoder_param_len(&self) -> usize {
        self.decoder[0].weight
    }

    fn run_stack<'t>(
        &self,
        layers: &[Layer],
        vars: &[Var<'t>],
        mut x: Var<'t>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        for layer in layers {
            x = x.try_matmul(vars[layer.weight])?.add_row(vars[layer.bias]);
            if let Some((gain, shift, slope)) = layer.norm {
                x = x
                    .group_norm(layer.groups, self.config.eps)?
                    .mul_row(vars[gain])
                    .add_row(vars[shift])
                    .prelu(vars[slope]);
                x = dropout(x, self.config.dropout, rng, training)?;
            }
        }
        Ok(x)
    }

    /// Encoder on a batch of rows `[m x input_width]`, giving `[m x 20]`.
    pub fn encode<'t>(&self, vars: &[Var<'t>], x: Var<'t>, training: bool, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        let (_, c) = x.dims();
        if c != self.input_width() {
            return Err(Error::shape(format!("encoder expects {} inputs, got {c}", self.input_width())));
        }
        self.run_stack(&self.encoder, vars, x, training, rng)
    }

    /// Decoder on bottleneck codes `[m x 20]`, giving `[m x 43]`.
    pub fn decode<'t>(&self, vars: &[Var<'t>], code: Var<'t>, training: bool, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        let (_, c) = code.dims();
        if c != BOTTLENECK {
            return Err(Error::shape(format!("decoder expects {BOTTLENECK} inputs, got {c}")));
        }
        self.run_stack(&self.decoder, vars, code, training, rng)
    }

    /// Inference-mode encoder on plain rows.
    pub fn encoder_forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.encode(&vars, tape.constant(x.clone()), false, &mut rng)?.value())
    }

    /// Inference-mode decoder on plain codes.
    pub fn decoder_forward(&self, code: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.decode(&vars, tape.constant(code.clone()), false, &mut rng)?.value())
    }

    /// Full inference pass: rows to 43-wide outputs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let code = self.encode(&vars, tape.constant(x.clone()), false, &mut rng)?;
        Ok(self.decode(&vars, code, false, &mut rng)?.value())
    }

    /// Dense weight-plus-bias count, the figure the layer tables report.
    pub fn dense_param_count(&self) -> usize {
        self.config.encoder_param_counts().iter().sum::<usize>()
            + self.config.decoder_param_counts().iter().sum::<usize>()
    }
}

/// Maps an output slot of the 43-wide head to the channel it regresses.
/// Fewer channels than slots wrap around; more channels are truncated.
pub fn output_channel(slot: usize, channels: usize) -> usize {
    slot % channels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_totals() {
        let c = EqrnnConfig::paper();
        assert_eq!(c.encoder_param_counts().iter().sum::<usize>(), 163_805);
        assert_eq!(c.decoder_param_counts().iter().sum::<usize>(), 156_268);
        assert_eq!(&c.encoder_param_counts()[1..], &PUBLISHED_ENCODER_COUNTS[1..]);
        assert_ne!(c.encoder_param_counts()[0], PUBLISHED_ENCODER_COUNTS[0]);
        assert_eq!(PUBLISHED_ENCODER_COUNTS.iter().sum::<usize>(), PUBLISHED_ENCODER_TOTAL);
    }

    #[test]
    fn scaled_schedule_keeps_contract() {
        for channels in [1, 3, 8, 16, 43, 70, 100] {
            let c = EqrnnConfig::scaled(channels);
            c.validate().unwrap();
            assert_eq!(c.encoder_dims[0], channels);
        }
        assert_eq!(EqrnnConfig::scaled(8).encoder_dims, vec![8, 32, 24, 20, 20, 20, 20, 20, 20, 20, 20]);
    }

    #[test]
    fn shapes_and_zero_network() {
        let mut net = EqrnnNet::new(EqrnnConfig::scaled(8), 1).unwrap();
        let x = Tensor::matrix(3, 8, (0..24).map(|i| i as f64 * 0.1).collect());
        assert_eq!(net.encoder_forward(&x).unwrap().dims(), (3, BOTTLENECK));
        assert_eq!(net.forward(&x).unwrap().dims(), (3, OUTPUT_WIDTH));

        for (name, t) in net.params.names().to_vec().iter().zip(net.params.tensors_mut()) {
            if name.ends_with("weight") || name.ends_with("bias") {
                *t = t.zeros_like();
            }
        }
        assert!(net.encoder_forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let code = Tensor::zeros(2, BOTTLENECK);
        assert!(net.decoder_forward(&code).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let net = EqrnnNet::new(EqrnnConfig::scaled(8), 1).unwrap();
        assert!(matches!(net.encoder_forward(&Tensor::zeros(1, 7)), Err(Error::Shape(_))));
        assert!(matches!(net.decoder_forward(&Tensor::zeros(1, 19)), Err(Error::Shape(_))));
    }

    #[test]
    fn paper_network_builds() {
        let net = EqrnnNet::new(EqrnnConfig::paper(), 3).unwrap();
        assert_eq!(net.dense_param_count(), 163_805 + 156_268);
        let x = Tensor::zeros(1, 70);
        assert_eq!(net.forward(&x).unwrap().dims(), (1, 43));
    }
}
