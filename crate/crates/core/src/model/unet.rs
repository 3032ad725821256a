use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    max_pool, max_pool_backward, upsample, upsample_backward, Block, BlockCache, Conv, ConvCache, Tensor,
};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::field::{ImageGrid, LogitField};
use crate::scalar::Scalar;

/// Parameter-name prefixes of the three sub-networks.
pub const ENCODER: &str = "encoder.";
pub const TOP_DECODER: &str = "decoder_top.";
pub const BOTTOM_DECODER: &str = "decoder_bottom.";

const MAX_DEPTH: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Single,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub branch_mode: BranchMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            base_channels: 8,
            depth: 3,
            branch_mode: BranchMode::Dual,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::InvalidConfig(format!(
                "depth {} outside 2..={MAX_DEPTH}",
                self.depth
            )));
        }
        if self.base_channels < 4 {
            return Err(Error::InvalidConfig(format!(
                "base_channels {} < 4",
                self.base_channels
            )));
        }
        if !(2..255).contains(&self.num_classes) {
            return Err(Error::InvalidConfig(format!(
                "num_classes {} outside 2..255",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Logits of both branches; `bottom` is absent for single-branch models.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult<T> {
    pub top: LogitField<T>,
    pub bottom: Option<LogitField<T>>,
}

#[derive(Clone, Debug)]
struct Decoder {
    reduce: Vec<Conv>,
    blocks: Vec<Block>,
    head: Conv,
}

struct DecoderCache<T> {
    ups: Vec<(usize, usize)>,
    reduce: Vec<ConvCache<T>>,
    blocks: Vec<BlockCache<T>>,
    head: ConvCache<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<T> {
    height: usize,
    width: usize,
    padded_height: usize,
    padded_width: usize,
    encoder: Vec<BlockCache<T>>,
    pools: Vec<Vec<u32>>,
    bottleneck: BlockCache<T>,
    top: DecoderCache<T>,
    bottom: Option<DecoderCache<T>>,
}

/// Encoder-decoder with skip connections and one or two decoding branches
/// over a shared encoder.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Vec<Block>,
    bottleneck: Block,
    top: Decoder,
    bottom: Option<Decoder>,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

impl Decoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reduce = Vec::new();
        let mut blocks = Vec::new();
        for level in (0..config.depth).rev() {
            let ch = config.channels(level);
            reduce.push(Conv::new(store, &format!("{prefix}up{level}"), 2 * ch, ch, 1, &mut rng));
            blocks.push(Block::new(
                store,
                &format!("{prefix}block{level}"),
                2 * ch,
                ch,
                &mut rng,
            ));
        }
        let head = Conv::new(
            store,
            &format!("{prefix}head"),
            config.base_channels,
            config.num_classes,
            1,
            &mut rng,
        );
        Self { reduce, blocks, head }
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        mut x: Tensor<T>,
        skips: &[&Tensor<T>],
    ) -> (Tensor<T>, DecoderCache<T>) {
        let mut cache = DecoderCache {
            ups: Vec::new(),
            reduce: Vec::new(),
            blocks: Vec::new(),
            head: ConvCache::empty(),
        };
        for (i, (reduce, block)) in self.reduce.iter().zip(&self.blocks).enumerate() {
            let skip = skips[skips.len() - 1 - i];
            cache.ups.push((x.height, x.width));
            let up = upsample(&x);
            let (r, rc) = reduce.forward(store, &up);
            cache.reduce.push(rc);
            let bc = block.forward(store, &Tensor::concat(skip, &r));
            x = bc.output().clone();
            cache.blocks.push(bc);
        }
        let (logits, hc) = self.head.forward(store, &x);
        cache.head = hc;
        (logits, cache)
    }

    /// Returns the gradient for the bottleneck output and for each skip
    /// (ordered shallow to deep).
    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &DecoderCache<T>,
        d_logits: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> (Tensor<T>, Vec<Tensor<T>>) {
        let mut d = self.head.backward(store, &cache.head, &d_logits, grads);
        let mut d_skips = Vec::new();
        for i in (0..self.blocks.len()).rev() {
            let d_cat = self.blocks[i].backward(store, &cache.blocks[i], d, grads);
            let skip_channels = d_cat.channels / 2;
            let (d_skip, d_r) = d_cat.split(skip_channels);
            d_skips.push(d_skip);
            let d_up = self.reduce[i].backward(store, &cache.reduce[i], &d_r, grads);
            d = upsample_backward(&d_up);
            debug_assert_eq!((d.height, d.width), cache.ups[i]);
        }
        (d, d_skips)
    }
}

impl<T: Scalar> UNet<T> {
    /// Builds a freshly initialized network. The encoder and each decoder
    /// draw their initial weights from independent streams derived from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut in_ch = 1;
        for level in 0..config.depth {
            let ch = config.channels(level);
            encoder.push(Block::new(
                &mut store,
                &format!("{ENCODER}block{level}"),
                in_ch,
                ch,
                &mut rng,
            ));
            in_ch = ch;
        }
        let bottleneck = Block::new(
            &mut store,
            &format!("{ENCODER}bottleneck"),
            in_ch,
            config.channels(config.depth),
            &mut rng,
        );
        let top = Decoder::new(
            &mut store,
            TOP_DECODER,
            config,
            seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        );
        let bottom = match config.branch_mode {
            BranchMode::Dual => Some(Decoder::new(
                &mut store,
                BOTTOM_DECODER,
                config,
                seed.wrapping_add(0x3C6E_F372_FE94_F82A),
            )),
            BranchMode::Single => None,
        };
        Ok(Self {
            config: *config,
            params: store,
            encoder,
            bottleneck,
            top,
            bottom,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn is_dual(&self) -> bool {
        self.bottom.is_some()
    }

    /// Side length multiple the network needs internally.
    pub fn stride(&self) -> usize {
        1 << self.config.depth
    }

    fn pad_input(&self, image: &ImageGrid<T>) -> Tensor<T> {
        let s = self.stride();
        let (h, w) = (image.height(), image.width());
        let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
        if (ph, pw) == (h, w) {
            return Tensor::from_vec(1, h, w, image.values().to_vec());
        }
        let mut data = Vec::with_capacity(ph * pw);
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                data.push(image.get(sy, reflect(x as isize, w)));
            }
        }
        Tensor::from_vec(1, ph, pw, data)
    }

    fn crop(&self, t: &Tensor<T>, h: usize, w: usize) -> Result<LogitField<T>> {
        let mut scores = Vec::with_capacity(t.channels * h * w);
        for c in 0..t.channels {
            let ch = t.channel(c);
            for y in 0..h {
                scores.extend_from_slice(&ch[y * t.width..y * t.width + w]);
            }
        }
        LogitField::new(h, w, t.channels, scores)
    }

    fn uncrop(&self, grad: &[T], tape: &Tape<T>) -> Tensor<T> {
        let (h, w) = (tape.height, tape.width);
        let (ph, pw) = (tape.padded_height, tape.padded_width);
        let c = self.config.num_classes;
        assert_eq!(grad.len(), c * h * w, "logit gradient has the wrong size");
        let mut t = Tensor::zeros(c, ph, pw);
        for ch in 0..c {
            for y in 0..h {
                let src = &grad[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                t.data[ch * ph * pw + y * pw..ch * ph * pw + y * pw + w].copy_from_slice(src);
            }
        }
        t
    }

    pub fn forward(&self, image: &ImageGrid<T>) -> Result<ForwardResult<T>> {
        self.forward_train(image).map(|(r, _)| r)
    }

    /// Forward pass that also records what [`UNet::backward`] needs.
    pub fn forward_train(&self, image: &ImageGrid<T>) -> Result<(ForwardResult<T>, Tape<T>)> {
        let ps = &self.params;
        let mut x = self.pad_input(image);
        let (padded_height, padded_width) = (x.height, x.width);
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut pools = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let cache = block.forward(ps, &x);
            let (pooled, idx) = max_pool(cache.output());
            encoder.push(cache);
            pools.push(idx);
            x = pooled;
        }
        let bottleneck = self.bottleneck.forward(ps, &x);
        let skips: Vec<&Tensor<T>> = encoder.iter().map(|c| c.output()).collect();
        let (top_logits, top) = self.top.forward(ps, bottleneck.output().clone(), &skips);
        let (bottom_logits, bottom) = match &self.bottom {
            Some(dec) => {
                let (l, c) = dec.forward(ps, bottleneck.output().clone(), &skips);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        let (h, w) = (image.height(), image.width());
        let result = ForwardResult {
            top: self.crop(&top_logits, h, w)?,
            bottom: bottom_logits.map(|l| self.crop(&l, h, w)).transpose()?,
        };
        Ok((
            result,
            Tape {
                height: h,
                width: w,
                padded_height,
                padded_width,
                encoder,
                pools,
                bottleneck,
                top,
                bottom,
            },
        ))
    }

    /// Accumulates parameter gradients for the given logit gradients.
    pub fn backward(&self, tape: &Tape<T>, d_top: &[T], d_bottom: Option<&[T]>, grads: &mut Grads<T>) {
        let ps = &self.params;
        let (mut d_bott, mut d_skips) = self.top.backward(ps, &tape.top, self.uncrop(d_top, tape), grads);
        if let (Some(dec), Some(cache), Some(d)) = (&self.bottom, &tape.bottom, d_bottom) {
            let (db, ds) = dec.backward(ps, cache, self.uncrop(d, tape), grads);
            for (a, b) in d_bott.data.iter_mut().zip(db.data) {
                *a += b;
            }
            for (a, b) in d_skips.iter_mut().zip(ds) {
                for (x, y) in a.data.iter_mut().zip(b.data) {
                    *x += y;
                }
            }
        }
        let mut d = self.bottleneck.backward(ps, &tape.bottleneck, d_bott, grads);
        for (level, block) in self.encoder.iter().enumerate().rev() {
            let act = tape.encoder[level].output();
            let mut d_act = max_pool_backward(&d, &tape.pools[level], act.height, act.width);
            let skip = &d_skips[level];
            for (a, b) in d_act.data.iter_mut().zip(&skip.data) {
                *a += *b;
            }
            d = block.backward(ps, &tape.encoder[level], d_act, grads);
        }
    }

    /// Copy with a different scalar type.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        let mut params = ParamStore::<U>::new();
        for p in self.params.iter() {
            params.push(
                p.name.clone(),
                p.shape.clone(),
                p.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            );
        }
        UNet {
            config: self.config,
            params,
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            top: self.top.clone(),
            bottom: self.bottom.clone(),
        }
    }

    /// Replaces all parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(params.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            ModelConfig {
                depth: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                base_channels: 2,
                ..ModelConfig::default()
            },
        ] {
            assert!(UNet::<f32>::build(&c, 0).is_err());
        }
    }
}
