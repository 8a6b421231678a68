//! Three-branch encoder-decoder: an RGB branch, a hematoxylin branch and a
//! segmentation branch that fuses both at every resolution level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pdfa::{Conv, PdfaBlock, UpConv};
use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Tensor, Var};

pub const ENCODER_LAYERS: usize = 3;
pub const DECODER_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Rgb,
    Hematoxylin,
    Segmentation,
}

impl BranchKind {
    fn prefix(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Hematoxylin => "h",
            Self::Segmentation => "seg",
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    entry: Option<Conv>,
    pdfa: PdfaBlock,
    transition: Conv,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: UpConv,
    pdfa: PdfaBlock,
    transition: Conv,
}

/// Per-level features of one branch plus its head logits.
#[derive(Clone, Debug)]
pub struct BranchFeatures {
    /// Encoder outputs, finest level first; the last entry is the bottleneck.
    pub encoder: Vec<Var>,
    /// Decoder outputs indexed by level (entry `l` has the resolution of encoder level `l`).
    pub decoder: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Branch {
    kind: BranchKind,
    encoder: Vec<EncoderLevel>,
    /// Indexed by level, `0..depth`.
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

fn widths(config: &NetworkConfig) -> Vec<usize> {
    (0..=config.depth).map(|l| config.base_channels << l).collect()
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        kind: BranchKind,
        input_channels: usize,
        config: &NetworkConfig,
    ) -> Result<Self> {
        let c = widths(config);
        let g = config.growth_rate;
        let p = kind.prefix();
        let fused = kind == BranchKind::Segmentation;
        let mut encoder = Vec::new();
        for l in 0..=config.depth {
            let name = format!("{p}.enc{l}");
            let (entry, sources) = if !fused {
                let cin = if l == 0 { input_channels } else { c[l - 1] };
                let entry = Conv::new(store, rng, &format!("{name}.entry"), cin, c[l], 3);
                (Some(entry), vec![c[l]])
            } else if l == 0 {
                // raw patch (optional), then the RGB and H encoder features
                match config.seg_raw_input {
                    true => {
                        let entry = Conv::new(store, rng, &format!("{name}.entry"), input_channels, c[0], 3);
                        (Some(entry), vec![c[0]; 3])
                    }
                    false => (None, vec![c[0]; 2]),
                }
            } else {
                // pooled own features, then the RGB and H encoder features
                (None, vec![c[l - 1], c[l], c[l]])
            };
            let pdfa = PdfaBlock::new(store, rng, &format!("{name}.pdfa"), &sources, ENCODER_LAYERS, g)?;
            let transition = Conv::new(store, rng, &format!("{name}.transition"), pdfa.out_channels(), c[l], 1);
            encoder.push(EncoderLevel {
                entry,
                pdfa,
                transition,
            });
        }
        let mut decoder = Vec::new();
        for l in 0..config.depth {
            let name = format!("{p}.dec{l}");
            let up = UpConv::new(store, rng, &format!("{name}.up"), c[l + 1], c[l]);
            let sources = if fused { vec![c[l]; 4] } else { vec![c[l]; 2] };
            let pdfa = PdfaBlock::new(store, rng, &format!("{name}.pdfa"), &sources, DECODER_LAYERS, g)?;
            let transition = Conv::new(store, rng, &format!("{name}.transition"), pdfa.out_channels(), c[l], 1);
            decoder.push(DecoderLevel { up, pdfa, transition });
        }
        let head = Conv::new(store, rng, &format!("{p}.head"), c[0], 1, 1);
        Ok(Self {
            kind,
            encoder,
            decoder,
            head,
        })
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }

    pub fn pdfa_blocks(&self) -> impl Iterator<Item = &PdfaBlock> {
        self.encoder
            .iter()
            .map(|e| &e.pdfa)
            .chain(self.decoder.iter().map(|d| &d.pdfa))
    }

    /// Forward pass of the RGB or H branch on its own input.
    fn forward_plain(&self, tape: &Tape<'_>, input: &Var) -> Result<BranchFeatures> {
        let mut encoder: Vec<Var> = Vec::with_capacity(self.encoder.len());
        for (l, level) in self.encoder.iter().enumerate() {
            let x = if l == 0 {
                input.clone()
            } else {
                tape.max_pool2x2(&encoder[l - 1])
            };
            let entry = level.entry.as_ref().expect("plain branches have entry convolutions");
            let a = entry.forward_relu(tape, &x);
            let fused = level.pdfa.forward(tape, &[&a])?;
            encoder.push(level.transition.forward_relu(tape, &fused));
        }
        self.decode(tape, encoder, |_| Vec::new())
    }

    /// Forward pass of the segmentation branch from the partner branches' features.
    fn forward_fused(
        &self,
        tape: &Tape<'_>,
        input: &Var,
        rgb: &BranchFeatures,
        h: &BranchFeatures,
    ) -> Result<BranchFeatures> {
        let mut encoder: Vec<Var> = Vec::with_capacity(self.encoder.len());
        for (l, level) in self.encoder.iter().enumerate() {
            let own = match (l, &level.entry) {
                (0, Some(entry)) => Some(entry.forward_relu(tape, input)),
                (0, None) => None,
                _ => Some(tape.max_pool2x2(&encoder[l - 1])),
            };
            let mut sources: Vec<&Var> = own.iter().collect();
            sources.push(&rgb.encoder[l]);
            sources.push(&h.encoder[l]);
            let fused = level.pdfa.forward(tape, &sources)?;
            encoder.push(level.transition.forward_relu(tape, &fused));
        }
        self.decode(tape, encoder, |l| vec![rgb.decoder[l].clone(), h.decoder[l].clone()])
    }

    fn decode(
        &self,
        tape: &Tape<'_>,
        encoder: Vec<Var>,
        partners: impl Fn(usize) -> Vec<Var>,
    ) -> Result<BranchFeatures> {
        let depth = self.decoder.len();
        let mut decoder: Vec<Option<Var>> = vec![None; depth];
        let mut below = encoder[depth].clone();
        for l in (0..depth).rev() {
            let level = &self.decoder[l];
            let up = level.up.forward_relu(tape, &below);
            let extra = partners(l);
            let mut sources: Vec<&Var> = vec![&up, &encoder[l]];
            sources.extend(extra.iter());
            let fused = level.pdfa.forward(tape, &sources)?;
            let d = level.transition.forward_relu(tape, &fused);
            decoder[l] = Some(d.clone());
            below = d;
        }
        let logits = self.head.forward(tape, &below);
        Ok(BranchFeatures {
            encoder,
            decoder: decoder.into_iter().map(|d| d.expect("every level decoded")).collect(),
            logits,
        })
    }
}

/// Probability maps of the three heads as tape variables (`N×1×H×W`).
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub rgb: Var,
    pub contour: Var,
    pub seg: Var,
    pub rgb_logits: Var,
    pub contour_logits: Var,
    pub seg_logits: Var,
}

#[derive(Clone, Debug)]
pub struct TripleUNet {
    config: NetworkConfig,
    params: ParamStore,
    rgb: Branch,
    h: Branch,
    seg: Branch,
}

impl TripleUNet {
    /// He-normal weights and zero biases drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let rgb = Branch::new(&mut params, &mut rng, BranchKind::Rgb, 3, &config)?;
        let h = Branch::new(&mut params, &mut rng, BranchKind::Hematoxylin, 1, &config)?;
        let seg = Branch::new(&mut params, &mut rng, BranchKind::Segmentation, 3, &config)?;
        Ok(Self {
            config,
            params,
            rgb,
            h,
            seg,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameters, checking that names and shapes match.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for id in self.params.ids() {
            if params.name(id) != self.params.name(id) || params.get(id).shape() != self.params.get(id).shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} does not match {} {:?}",
                    params.name(id),
                    self.params.name(id),
                    self.params.get(id).shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn branches(&self) -> [&Branch; 3] {
        [&self.rgb, &self.h, &self.seg]
    }

    pub fn pdfa_blocks(&self) -> impl Iterator<Item = &PdfaBlock> {
        self.branches().into_iter().flat_map(|b| b.pdfa_blocks())
    }

    fn check_inputs(&self, rgb: &Var, h: &Var) -> Result<()> {
        let s = self.config.input_size;
        let [n, c, y, x] = rgb.shape();
        let [hn, hc, hy, hx] = h.shape();
        if c != 3 || (y, x) != (s, s) {
            return Err(Error::invalid(format!("RGB input must be N×3×{s}×{s}, got {n}×{c}×{y}×{x}")));
        }
        if hc != 1 || (hn, hy, hx) != (n, y, x) {
            return Err(Error::invalid(format!(
                "hematoxylin input must be {n}×1×{s}×{s}, got {hn}×{hc}×{hy}×{hx}"
            )));
        }
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    /// Per-branch features and logits.
    pub fn forward_features(
        &self,
        tape: &Tape<'_>,
        rgb: &Var,
        h: &Var,
    ) -> Result<[BranchFeatures; 3]> {
        self.check_inputs(rgb, h)?;
        let rgb_f = self.rgb.forward_plain(tape, rgb)?;
        let h_f = self.h.forward_plain(tape, h)?;
        let seg_f = self.seg.forward_fused(tape, rgb, &rgb_f, &h_f)?;
        Ok([rgb_f, h_f, seg_f])
    }

    /// `rgb`: `N×3×S×S` in `[0, 1]`; `h`: `N×1×S×S`.
    pub fn forward(&self, tape: &Tape<'_>, rgb: &Var, h: &Var) -> Result<HeadOutputs> {
        let [rgb_f, h_f, seg_f] = self.forward_features(tape, rgb, h)?;
        Ok(HeadOutputs {
            rgb: tape.sigmoid(&rgb_f.logits),
            contour: tape.sigmoid(&h_f.logits),
            seg: tape.sigmoid(&seg_f.logits),
            rgb_logits: rgb_f.logits,
            contour_logits: h_f.logits,
            seg_logits: seg_f.logits,
        })
    }

    /// Inference without recording gradients.
    pub fn infer(&self, rgb: Tensor, h: Tensor) -> Result<[Tensor; 3]> {
        let tape = Tape::inference(&self.params);
        let rgb = tape.constant(rgb);
        let h = tape.constant(h);
        let out = self.forward(&tape, &rgb, &h)?;
        Ok([out.rgb.value().clone(), out.contour.value().clone(), out.seg.value().clone()])
    }
}
