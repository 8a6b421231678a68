//! Convolution layers and the progressive dense feature-aggregation block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Var};

/// Same-padded `k×k` convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        let weight = store.add_he(
            format!("{name}.weight"),
            (out_channels, in_channels, kernel, kernel),
            in_channels * kernel * kernel,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), (1, out_channels, 1, 1));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &Tape<'_>, x: &Var) -> Var {
        tape.conv2d(x, &tape.param(self.weight), &tape.param(self.bias))
    }

    pub fn forward_relu(&self, tape: &Tape<'_>, x: &Var) -> Var {
        tape.relu(&self.forward(tape, x))
    }
}

/// 2×2 stride-2 transpose convolution doubling the spatial size.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UpConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        // every output pixel receives exactly one tap per input channel
        let weight = store.add_he(
            format!("{name}.weight"),
            (in_channels, out_channels, 2, 2),
            in_channels,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), (1, out_channels, 1, 1));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward_relu(&self, tape: &Tape<'_>, x: &Var) -> Var {
        let y = tape.conv_transpose2x2(x, &tape.param(self.weight), &tape.param(self.bias));
        tape.relu(&y)
    }
}

/// Densely connected block that takes its feature sources one layer at a time.
///
/// Layer `i` sees the sources `0..=i` (all of them once `i` passes the last one)
/// together with the outputs of every earlier layer, and emits `growth` channels
/// through a 3×3 convolution and ReLU. The block returns the concatenation of all
/// sources followed by all layer outputs.
#[derive(Clone, Debug)]
pub struct PdfaBlock {
    pub name: String,
    source_channels: Vec<usize>,
    growth: usize,
    layers: Vec<Conv>,
}

impl PdfaBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        source_channels: &[usize],
        layer_count: usize,
        growth: usize,
    ) -> Result<Self> {
        if source_channels.is_empty() || source_channels.contains(&0) {
            return Err(Error::invalid(format!("{name}: every source needs at least one channel")));
        }
        if layer_count < source_channels.len() {
            return Err(Error::invalid(format!(
                "{name}: {layer_count} layers cannot absorb {} sources",
                source_channels.len()
            )));
        }
        if growth == 0 {
            return Err(Error::invalid(format!("{name}: growth must be positive")));
        }
        let layers = (0..layer_count)
            .map(|i| {
                let seen: usize = source_channels.iter().take(i + 1).sum();
                Conv::new(store, rng, &format!("{name}.layer{i}"), seen + i * growth, growth, 3)
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            source_channels: source_channels.to_vec(),
            growth,
            layers,
        })
    }

    /// Channel counts of the inputs, in the order they are absorbed.
    pub fn source_channels(&self) -> &[usize] {
        &self.source_channels
    }

    pub fn in_channels(&self) -> usize {
        self.source_channels.iter().sum()
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels() + self.layers.len() * self.growth
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn growth(&self) -> usize {
        self.growth
    }

    pub fn layers(&self) -> &[Conv] {
        &self.layers
    }

    pub fn forward(&self, tape: &Tape<'_>, sources: &[&Var]) -> Result<Var> {
        if sources.len() != self.source_channels.len() {
            return Err(Error::invalid(format!(
                "{}: expected {} sources, got {}",
                self.name,
                self.source_channels.len(),
                sources.len()
            )));
        }
        let [n, _, h, w] = sources[0].shape();
        for (s, &c) in sources.iter().zip(&self.source_channels) {
            let [sn, sc, sh, sw] = s.shape();
            if (sn, sh, sw) != (n, h, w) {
                return Err(Error::invalid(format!(
                    "{}: source of size {sn}×{sh}×{sw} does not match {n}×{h}×{w}",
                    self.name
                )));
            }
            if sc != c {
                return Err(Error::invalid(format!(
                    "{}: source has {sc} channels, expected {c}",
                    self.name
                )));
            }
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let inputs: Vec<&Var> = sources.iter().take(i + 1).copied().chain(outputs.iter()).collect();
            let x = if inputs.len() == 1 {
                inputs[0].clone()
            } else {
                tape.concat(&inputs)
            };
            outputs.push(layer.forward_relu(tape, &x));
        }
        let all: Vec<&Var> = sources.iter().copied().chain(outputs.iter()).collect();
        Ok(tape.concat(&all))
    }
}
