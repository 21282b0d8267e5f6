use super::{orthogonal, Module};
use crate::error::{invalid, Result};
use crate::lix::{lix, sample_shift_field, ShiftField, ShiftGranularity};
use crate::tensor::{conv2d_output_extent, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

/// Where mixing layers sit inside the convolutional stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LixPlacement {
    AfterEachNonlinearity,
    AfterFinalNonlinearity,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels_in: usize,
    /// `(height, width)` of the observations.
    pub input_size: (usize, usize),
    pub feature_maps: Vec<usize>,
    pub filter_sizes: Vec<(usize, usize)>,
    pub strides: Vec<usize>,
    /// Zero padding applied by every convolution.
    pub padding: usize,
    pub lix_placement: LixPlacement,
    pub trunk_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl EncoderConfig {
    /// Three 3×3 convolutions with 32 maps and strides 2, 1, 1 on 2×32×32 input.
    pub fn desk_default() -> Self {
        Self {
            channels_in: 2,
            input_size: (32, 32),
            feature_maps: vec![32, 32, 32],
            filter_sizes: vec![(3, 3); 3],
            strides: vec![2, 1, 1],
            padding: 0,
            lix_placement: LixPlacement::AfterEachNonlinearity,
            trunk_dim: 50,
        }
    }

    pub fn mixing_layers(&self) -> usize {
        match self.lix_placement {
            LixPlacement::AfterEachNonlinearity => self.feature_maps.len(),
            LixPlacement::AfterFinalNonlinearity => 1,
            LixPlacement::None => 0,
        }
    }

    /// `(channels, height, width)` after every convolution.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let n = self.feature_maps.len();
        if n == 0 || self.filter_sizes.len() != n || self.strides.len() != n {
            return invalid("feature_maps, filter_sizes and strides must be non-empty and equally long");
        }
        if self.channels_in == 0 || self.trunk_dim == 0 || self.feature_maps.contains(&0) {
            return invalid("channel counts and trunk_dim must be positive");
        }
        let (mut h, mut w) = self.input_size;
        let mut shapes = Vec::with_capacity(n);
        for l in 0..n {
            let (kh, kw) = self.filter_sizes[l];
            let s = self.strides[l];
            match (
                conv2d_output_extent(h, kh, s, self.padding),
                conv2d_output_extent(w, kw, s, self.padding),
            ) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                }
                _ => return invalid(format!("layer {l}: kernel {kh}×{kw}/stride {s} does not fit {h}×{w}")),
            }
            shapes.push((self.feature_maps[l], h, w));
        }
        Ok(shapes)
    }

    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(*self.layer_shapes()?.last().expect("non-empty"))
    }
}

/// Convolutional encoder followed by a linear → layer-norm → tanh trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub trunk_weight: Tensor,
    pub trunk_bias: Tensor,
}

/// Source of shifts for the mixing layers during one forward pass.
pub enum Mixing<'a> {
    /// Mixing layers act as the identity and record nothing.
    Off,
    /// Fresh shifts with the given radius, shared across channels.
    Sample {
        radius: f64,
        granularity: ShiftGranularity,
        rng: &'a mut dyn RngCore,
    },
    /// Caller-provided shifts, one field per mixing layer.
    Fixed(&'a [ShiftField]),
}

/// Handles produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final post-nonlinearity convolutional activation, before any mixing.
    pub conv_features: Var,
    /// Representation fed to the trunk (after mixing when placed last).
    pub features: Var,
    /// Output of every mixing layer, in depth order.
    pub lix_outputs: Vec<Var>,
    pub trunk: Var,
    pub shifts: Vec<ShiftField>,
}

impl Encoder {
    pub fn build<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let shapes = config.layer_shapes()?;
        let mut kernels = Vec::with_capacity(shapes.len());
        let mut biases = Vec::with_capacity(shapes.len());
        let mut c_in = config.channels_in;
        for (l, &(c_out, _, _)) in shapes.iter().enumerate() {
            let (kh, kw) = config.filter_sizes[l];
            kernels.push(orthogonal(&[c_out, c_in, kh, kw], 2f64.sqrt(), rng));
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let (c, h, w) = *shapes.last().expect("non-empty");
        let trunk_weight = orthogonal(&[config.trunk_dim, c * h * w], 1.0, rng);
        let trunk_bias = Tensor::zeros(&[config.trunk_dim]);
        Ok(Self {
            config,
            kernels,
            biases,
            trunk_weight,
            trunk_bias,
        })
    }

    pub fn layers(&self) -> usize {
        self.kernels.len()
    }

    /// Forward pass with parameters bound by [`super::bind`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], obs: Var, mixing: &mut Mixing<'_>) -> Result<EncoderOutput> {
        let layers = self.layers();
        if vars.len() != 2 * layers + 2 {
            return invalid("bound variables do not match the encoder");
        }
        let os = tape.shape(obs);
        let (h, w) = self.config.input_size;
        if os.len() != 4 || os[1] != self.config.channels_in || os[2] != h || os[3] != w {
            return invalid(format!(
                "observation shape {os:?} does not match [B, {}, {h}, {w}]",
                self.config.channels_in
            ));
        }
        let batch = os[0];
        let shapes = self.config.layer_shapes()?;
        let mix_at = |l: usize| match self.config.lix_placement {
            LixPlacement::AfterEachNonlinearity => true,
            LixPlacement::AfterFinalNonlinearity => l + 1 == layers,
            LixPlacement::None => false,
        };
        if let Mixing::Fixed(fields) = mixing {
            if fields.len() != self.config.mixing_layers() {
                return invalid("one shift field per mixing layer is required");
            }
        }
        let mut h = obs;
        let mut conv_features = obs;
        let mut lix_outputs = Vec::new();
        let mut shifts = Vec::new();
        for l in 0..layers {
            h = tape.conv2d(h, vars[l], self.config.strides[l], self.config.padding)?;
            h = tape.channel_bias(h, vars[layers + l])?;
            h = tape.relu(h);
            conv_features = h;
            if mix_at(l) {
                let (_, fh, fw) = shapes[l];
                let field = match mixing {
                    Mixing::Off => None,
                    Mixing::Sample {
                        radius,
                        granularity,
                        rng,
                    } => Some(sample_shift_field(batch, fh, fw, *radius, *granularity, &mut **rng)?),
                    Mixing::Fixed(fields) => Some(fields[lix_outputs.len()].clone()),
                };
                if let Some(field) = field {
                    h = lix(tape, h, &field)?;
                    shifts.push(field);
                }
                lix_outputs.push(h);
            }
        }
        let features = h;
        let trunk = self.trunk(tape, vars, features)?;
        Ok(EncoderOutput {
            conv_features,
            features,
            lix_outputs,
            trunk,
            shifts,
        })
    }
}

impl Encoder {
    /// Flatten, linear projection, layer norm and tanh applied to `[B,C,H,W]`
    /// features.
    pub fn trunk(&self, tape: &mut Tape, vars: &[Var], features: Var) -> Result<Var> {
        let layers = self.layers();
        if vars.len() != 2 * layers + 2 {
            return invalid("bound variables do not match the encoder");
        }
        let flat = tape.flatten(features)?;
        let t = tape.linear(flat, vars[2 * layers], Some(vars[2 * layers + 1]))?;
        let t = tape.layer_norm(t, 1e-5)?;
        Ok(tape.tanh(t))
    }
}

impl Module for Encoder {
    fn parameters(&self) -> Vec<&Tensor> {
        self.kernels
            .iter()
            .chain(&self.biases)
            .chain([&self.trunk_weight, &self.trunk_bias])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.kernels
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain([&mut self.trunk_weight, &mut self.trunk_bias])
            .collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        let n = self.layers();
        (0..n)
            .map(|l| format!("conv{l}.weight"))
            .chain((0..n).map(|l| format!("conv{l}.bias")))
            .chain(["trunk.weight".to_string(), "trunk.bias".to_string()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(placement: LixPlacement) -> EncoderConfig {
        EncoderConfig {
            channels_in: 2,
            input_size: (9, 9),
            feature_maps: vec![3, 4],
            filter_sizes: vec![(3, 3), (3, 3)],
            strides: vec![2, 1],
            padding: 0,
            lix_placement: placement,
            trunk_dim: 5,
        }
    }

    #[test]
    fn desk_default_shape_arithmetic() {
        // (32 − 3)/2 + 1 = 15, then 13, then 11.
        let cfg = EncoderConfig::desk_default();
        assert_eq!(cfg.feature_shape().unwrap(), (32, 11, 11));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::build(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &enc, false);
        let obs = tape.constant(&Tensor::zeros(&[1, 2, 32, 32]));
        let out = enc.forward(&mut tape, &vars, obs, &mut Mixing::Off).unwrap();
        assert_eq!(tape.shape(out.features), &[1, 32, 11, 11]);
        assert_eq!(tape.shape(out.trunk), &[1, 50]);
    }

    #[test]
    fn pointwise_conv_keeps_spatial_size() {
        let cfg = EncoderConfig {
            channels_in: 1,
            input_size: (6, 7),
            feature_maps: vec![2],
            filter_sizes: vec![(1, 1)],
            strides: vec![1],
            padding: 0,
            lix_placement: LixPlacement::None,
            trunk_dim: 3,
        };
        assert_eq!(cfg.feature_shape().unwrap(), (2, 6, 7));
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = small_config(LixPlacement::None);
        cfg.strides.pop();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Encoder::build(cfg, &mut rng).is_err());
        let mut cfg = small_config(LixPlacement::None);
        cfg.strides[0] = 0;
        assert!(Encoder::build(cfg, &mut rng).is_err());
        let mut cfg = small_config(LixPlacement::None);
        cfg.trunk_dim = 0;
        assert!(Encoder::build(cfg, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Encoder::build(small_config(LixPlacement::None), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = Encoder::build(small_config(LixPlacement::None), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_radius_mixing_matches_no_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plain = Encoder::build(small_config(LixPlacement::None), &mut rng).unwrap();
        let mut mixed = plain.clone();
        mixed.config.lix_placement = LixPlacement::AfterFinalNonlinearity;
        let obs = Tensor::uniform(&[2, 2, 9, 9], 0.0, 1.0, &mut rng);

        let run = |enc: &Encoder, radius: f64| {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, enc, true);
            let o = tape.constant(&obs);
            let mut r = ChaCha8Rng::seed_from_u64(2);
            let mut mixing = Mixing::Sample {
                radius,
                granularity: ShiftGranularity::PerLocation,
                rng: &mut r,
            };
            let out = enc.forward(&mut tape, &vars, o, &mut mixing).unwrap();
            (tape.value(out.features).to_vec(), tape.value(out.trunk).to_vec())
        };
        assert_eq!(run(&plain, 0.0), run(&mixed, 0.0));
        assert_ne!(run(&plain, 0.0), run(&mixed, 1.0));
    }

    #[test]
    fn fixed_shifts_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::build(small_config(LixPlacement::AfterEachNonlinearity), &mut rng).unwrap();
        let obs = Tensor::uniform(&[2, 2, 9, 9], 0.0, 1.0, &mut rng);
        let shapes = enc.config.layer_shapes().unwrap();
        let fields: Vec<ShiftField> = shapes
            .iter()
            .map(|&(_, h, w)| sample_shift_field(2, h, w, 0.8, ShiftGranularity::PerLocation, &mut rng).unwrap())
            .collect();
        let run = || {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &enc, false);
            let o = tape.constant(&obs);
            let out = enc.forward(&mut tape, &vars, o, &mut Mixing::Fixed(&fields)).unwrap();
            tape.value(out.features).to_vec()
        };
        assert_eq!(run(), run());
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &enc, false);
        let bad = tape.constant(&Tensor::zeros(&[1, 3, 9, 9]));
        assert!(enc.forward(&mut tape, &vars, bad, &mut Mixing::Off).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::build(small_config(LixPlacement::AfterEachNonlinearity), &mut rng).unwrap();
        let obs = Tensor::uniform(&[2, 2, 9, 9], 0.0, 1.0, &mut rng);
        let shapes = enc.config.layer_shapes().unwrap();
        let fields: Vec<ShiftField> = shapes
            .iter()
            .map(|&(_, h, w)| sample_shift_field(2, h, w, 0.7, ShiftGranularity::PerLocation, &mut rng).unwrap())
            .collect();
        let mut inputs = vec![obs];
        inputs.extend(enc.parameters().into_iter().cloned());
        let report = grad_check(
            |tape, v| {
                let out = enc.forward(tape, &v[1..], v[0], &mut Mixing::Fixed(&fields))?;
                let sq = tape.square(out.trunk);
                Ok(tape.mean_all(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }
}
