//! The EEG U-Net noise predictor: a 1-D encoder-decoder with residual
//! blocks, stride-2 down/upsampling, skip concatenation, global
//! normalization, Swish activations and step/label conditioning injected at
//! every resolution level.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{
    add_conv1d, add_conv_transpose1d, add_linear, add_norm, bind, norm_layer, uniform_init,
    ForwardMode, NetConfig, ParameterStore,
};

/// Classic sinusoidal position encoding of integer diffusion steps.
pub fn sinusoidal_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let w = (-(10_000f64).ln() * exponent).exp();
            let arg = t as f64 * w;
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Tensor::new(vec![steps.len(), dim], data).expect("embedding shape")
}

/// The noise-predictor network. Holds only the configuration; parameters
/// live in a [`ParameterStore`] created by [`EegUnet::init_params`].
#[derive(Debug, Clone)]
pub struct EegUnet {
    pub config: NetConfig,
}

impl EegUnet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn width(&self, level: usize) -> usize {
        self.config.base_width << level
    }

    /// Number of conditioning injection sites (one per residual block).
    fn sites(&self) -> usize {
        2 * self.config.depth + 1
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
        let c = &self.config;
        let mut store = ParameterStore::new();

        // conditioning: label table + shared trunk + one projection per site
        store.add(
            "emb.label",
            vec![c.num_classes, c.embed_dim],
            uniform_init(rng, c.num_classes * c.embed_dim, c.embed_dim),
        )?;
        add_linear(&mut store, rng, "emb.trunk", c.embed_dim, c.embed_dim)?;
        let mut site_widths = Vec::new();
        for l in 0..c.depth {
            site_widths.push(self.width(l)); // encoder blocks
        }
        site_widths.push(self.width(c.depth)); // bottleneck
        for l in (0..c.depth).rev() {
            site_widths.push(self.width(l)); // decoder blocks
        }
        for (i, w) in site_widths.iter().enumerate() {
            add_linear(&mut store, rng, &format!("emb.site{i}"), c.embed_dim, *w)?;
        }

        add_conv1d(&mut store, rng, "stem", self.width(0), c.channels, 3)?;
        for l in 0..c.depth {
            let w = self.width(l);
            add_conv1d(&mut store, rng, &format!("enc{l}.conv"), w, w, 3)?;
            add_norm(&mut store, &format!("enc{l}.norm"), w)?;
            add_conv1d(&mut store, rng, &format!("down{l}"), self.width(l + 1), w, 3)?;
            add_norm(&mut store, &format!("down{l}.norm"), self.width(l + 1))?;
        }
        let wb = self.width(c.depth);
        add_conv1d(&mut store, rng, "bottleneck.conv", wb, wb, 3)?;
        add_norm(&mut store, "bottleneck.norm", wb)?;
        for l in (0..c.depth).rev() {
            let w = self.width(l);
            add_conv_transpose1d(&mut store, rng, &format!("up{l}"), self.width(l + 1), w, 4)?;
            add_norm(&mut store, &format!("up{l}.norm"), w)?;
            // fuse block consumes the concatenated skip (2w -> w)
            add_conv1d(&mut store, rng, &format!("dec{l}.conv"), w, 2 * w, 3)?;
            add_norm(&mut store, &format!("dec{l}.norm"), w)?;
            add_conv1d(&mut store, rng, &format!("dec{l}.short"), w, 2 * w, 1)?;
        }
        // zero-initialized output head: the untrained net predicts zero noise
        store.add(
            "head.w",
            vec![c.channels, self.width(0), 1],
            vec![0.0; c.channels * self.width(0)],
        )?;
        store.add("head.b", vec![c.channels], vec![0.0; c.channels])?;
        Ok(store)
    }

    /// Residual block: conv3 + norm + conditioning, shortcut (1x1 aligned
    /// when widths differ), Swish on the sum.
    #[allow(clippy::too_many_arguments)]
    fn res_block(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        name: &str,
        x: Var,
        c_in: usize,
        c_out: usize,
        cond: Var,
        site: usize,
        mode: ForwardMode,
    ) -> Result<Var> {
        let w = bind(tape, store, &format!("{name}.conv.w"), mode)?;
        let b = bind(tape, store, &format!("{name}.conv.b"), mode)?;
        let mut h = tape.conv1d(x, w, b, 1, 1)?;
        h = norm_layer(tape, store, &format!("{name}.norm"), h, mode)?;

        let pw = bind(tape, store, &format!("emb.site{site}.w"), mode)?;
        let pb = bind(tape, store, &format!("emb.site{site}.b"), mode)?;
        let proj = tape.linear(cond, pw, pb)?;
        h = tape.add_channel_vec(h, proj)?;

        let shortcut = if c_in == c_out {
            x
        } else {
            let sw = bind(tape, store, &format!("{name}.short.w"), mode)?;
            let sb = bind(tape, store, &format!("{name}.short.b"), mode)?;
            tape.conv1d(x, sw, sb, 1, 0)?
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.swish(sum))
    }

    /// Predicts the noise component of `x_t` (`[B, channels, samples]`),
    /// conditioned on per-item steps and class labels.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x_t: Var,
        steps: &[usize],
        labels: &[usize],
        mode: ForwardMode,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = tape.value(x_t).shape().to_vec();
        if shape.len() != 3 || shape[1] != c.channels || shape[2] != c.samples {
            return Err(Error::net(format!(
                "unet: input shape {shape:?} does not match config {}x{}",
                c.channels, c.samples
            )));
        }
        let batch = shape[0];
        if steps.len() != batch || labels.len() != batch {
            return Err(Error::net("unet: steps/labels length must equal batch"));
        }
        for &l in labels {
            if l >= c.num_classes {
                return Err(Error::net(format!(
                    "unet: label {l} >= num_classes {}",
                    c.num_classes
                )));
            }
        }

        // conditioning vector shared by all injection sites
        let sin = tape.leaf(sinusoidal_embedding(steps, c.embed_dim));
        let table = bind(tape, store, "emb.label", mode)?;
        let lab = tape.gather(table, labels)?;
        let cond0 = tape.add(sin, lab)?;
        let tw = bind(tape, store, "emb.trunk.w", mode)?;
        let tb = bind(tape, store, "emb.trunk.b", mode)?;
        let trunk = tape.linear(cond0, tw, tb)?;
        let cond = tape.swish(trunk);

        let sw = bind(tape, store, "stem.w", mode)?;
        let sb = bind(tape, store, "stem.b", mode)?;
        let mut h = tape.conv1d(x_t, sw, sb, 1, 1)?;

        let mut skips = Vec::with_capacity(c.depth);
        let mut site = 0usize;
        for l in 0..c.depth {
            let w = self.width(l);
            h = self.res_block(tape, store, &format!("enc{l}"), h, w, w, cond, site, mode)?;
            site += 1;
            skips.push(h);
            let dw = bind(tape, store, &format!("down{l}.w"), mode)?;
            let db = bind(tape, store, &format!("down{l}.b"), mode)?;
            h = tape.conv1d(h, dw, db, 2, 1)?;
            h = norm_layer(tape, store, &format!("down{l}.norm"), h, mode)?;
            h = tape.swish(h);
        }

        let wb = self.width(c.depth);
        h = self.res_block(tape, store, "bottleneck", h, wb, wb, cond, site, mode)?;
        site += 1;

        for l in (0..c.depth).rev() {
            let w = self.width(l);
            let uw = bind(tape, store, &format!("up{l}.w"), mode)?;
            let ub = bind(tape, store, &format!("up{l}.b"), mode)?;
            h = tape.conv_transpose1d(h, uw, ub, 2, 1)?;
            h = norm_layer(tape, store, &format!("up{l}.norm"), h, mode)?;
            h = tape.swish(h);
            h = tape.concat_channels(h, skips[l])?;
            h = self.res_block(tape, store, &format!("dec{l}"), h, 2 * w, w, cond, site, mode)?;
            site += 1;
        }
        debug_assert_eq!(site, self.sites());

        let hw = bind(tape, store, "head.w", mode)?;
        let hb = bind(tape, store, "head.b", mode)?;
        tape.conv1d(h, hw, hb, 1, 0)
    }

    /// Plain-slice convenience used by the sampler: flat `[B*C*L]` in,
    /// flat noise estimate out. All items share one step index.
    pub fn predict_flat(
        &self,
        store: &ParameterStore,
        y: &[f64],
        t: usize,
        labels: &[usize],
    ) -> Result<Vec<f64>> {
        let c = &self.config;
        let batch = labels.len();
        if y.len() != batch * c.channels * c.samples {
            return Err(Error::net(format!(
                "predict_flat: {} values for batch {batch} of {}x{}",
                y.len(),
                c.channels,
                c.samples
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(
            vec![batch, c.channels, c.samples],
            y.to_vec(),
        )?);
        let steps = vec![t; batch];
        let out = self.forward(&mut tape, store, x, &steps, labels, ForwardMode::Train)?;
        Ok(tape.value(out).data().to_vec())
    }
}
