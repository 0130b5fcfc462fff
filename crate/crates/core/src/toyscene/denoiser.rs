use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::scene::{Caption, Scene, TokenKind};
use super::vocabulary::ClassVocabulary;
use crate::elbo::{Denoiser, NoiseStream};
use crate::resize;
use crate::schedule::Schedule;
use crate::{Error, Latent, Result};

/// Knobs of the constructed denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyParams {
    /// Norm of a common class token's key.
    pub key_gain: f64,
    /// Norm of a filler token's key; filler keys point at the background embedding.
    pub filler_gain: f64,
    /// Inverse temperature of the pixel-similarity softmax.
    pub self_sharpness: f64,
    /// Per-coordinate texture standard deviation the denoiser assumes.
    pub texture_std: f64,
    /// Round latents and attention maps through single precision.
    pub float32: bool,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            key_gain: 12.0,
            filler_gain: 0.0,
            self_sharpness: 10.0,
            texture_std: super::scene::DEFAULT_TEXTURE_STD,
            float32: false,
        }
    }
}

/// Attention maps of one forward pass. Cross maps are `(h·w) × L` at each
/// layer's native resolution; the self map is at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionStack {
    pub t: f64,
    pub cross: Vec<Array2<f64>>,
    pub self_attn: Vec<Array2<f64>>,
    pub layer_resolutions: Vec<(usize, usize)>,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser<'a> {
    pub vocab: &'a ClassVocabulary,
    pub schedule: Schedule,
    pub params: ToyParams,
}

impl<'a> ToyDenoiser<'a> {
    pub fn new(vocab: &'a ClassVocabulary, schedule: Schedule, params: ToyParams) -> Self {
        Self { vocab, schedule, params }
    }

    /// Keys and value means of every caption token.
    fn keys_values(&self, caption: &Caption) -> Result<(Array2<f64>, Array2<f64>)> {
        let d = self.vocab.dim;
        let mut keys = Array2::zeros((caption.len(), d));
        let mut values = Array2::zeros((caption.len(), d));
        for (l, tok) in caption.tokens.iter().enumerate() {
            let (emb, gain) = match tok.kind {
                TokenKind::Filler => {
                    if !self.vocab.is_filler(&tok.text) {
                        return Err(Error::Vocabulary(format!("unknown filler token `{}`", tok.text)));
                    }
                    (&self.vocab.background, self.params.filler_gain)
                }
                TokenKind::Class(c) => {
                    let e = self.vocab.entry(c)?;
                    if !e.tokens().any(|t| t == tok.text) {
                        return Err(Error::Vocabulary(format!("token `{}` is not part of `{}`", tok.text, e.name)));
                    }
                    (&e.embedding, self.params.key_gain * e.rarity)
                }
            };
            for k in 0..d {
                keys[(l, k)] = gain * emb[k];
                values[(l, k)] = emb[k];
            }
        }
        Ok((keys, values))
    }

    /// Queries: the linear estimate `α·z_t / (α² + σ²)` of the clean pixel features.
    fn queries(&self, zt: &Latent, t: f64) -> Result<Array2<f64>> {
        let (h, w, d) = zt.dim();
        if d != self.vocab.dim {
            return Err(Error::shape(&[h, w, self.vocab.dim], &[h, w, d]));
        }
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        let scale = alpha / (alpha * alpha + sigma * sigma);
        let q = zt.to_shape((h * w, d)).expect("standard layout").mapv(|v| v * scale);
        Ok(q)
    }

    fn cross(&self, q: &Array2<f64>, keys: &Array2<f64>) -> Array2<f64> {
        let mut logits = q.dot(&keys.t()) / (self.vocab.dim as f64).sqrt();
        softmax_rows(&mut logits);
        logits
    }

    /// Full forward pass: epsilon prediction plus the attention stack.
    pub fn forward(&self, zt: &Latent, t: f64, caption: &Caption) -> Result<(Latent, CrossAttentionStack)> {
        let (h, w, d) = zt.dim();
        let (keys, values) = self.keys_values(caption)?;
        let zt_q;
        let zt = if self.params.float32 {
            zt_q = zt.mapv(quantize);
            &zt_q
        } else {
            zt
        };
        let q = self.queries(zt, t)?;

        let fine = self.cross(&q, &keys);
        let mut cross = vec![fine];
        let mut layer_resolutions = vec![(h, w)];
        if h >= 2 && w >= 2 {
            let (ph, pw) = (h / 2, w / 2);
            let mut pooled = Array2::zeros((ph * pw, d));
            for i in 0..ph {
                for j in 0..pw {
                    let mut row = pooled.row_mut(i * pw + j);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        row += &q.row((2 * i + di) * w + 2 * j + dj);
                    }
                    row *= 0.25;
                }
            }
            cross.push(self.cross(&pooled, &keys));
            layer_resolutions.push((ph, pw));
        }

        let mut self_map = q.dot(&q.t()) * self.params.self_sharpness;
        softmax_rows(&mut self_map);

        // ε̂ blends per-token Gaussian optimal denoisers by finest-layer attention;
        // the blend collapses to one Gaussian denoiser around the attended mean.
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        let v = self.params.texture_std * self.params.texture_std;
        let denom = alpha * alpha * v + sigma * sigma;
        let mean = cross[0].dot(&values);
        let mut eps = Latent::zeros((h, w, d));
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                for k in 0..d {
                    eps[(i, j, k)] = sigma * (zt[(i, j, k)] - alpha * mean[(p, k)]) / denom;
                }
            }
        }
        if self.params.float32 {
            eps.mapv_inplace(quantize);
            cross.iter_mut().for_each(|m| m.mapv_inplace(quantize));
            self_map.mapv_inplace(quantize);
        }
        Ok((
            eps,
            CrossAttentionStack {
                t,
                cross,
                self_attn: vec![self_map],
                layer_resolutions,
            },
        ))
    }
}

impl Denoiser<Caption> for ToyDenoiser<'_> {
    fn predict(&self, zt: &Latent, t: f64, caption: &Caption) -> Result<Latent> {
        Ok(self.forward(zt, t, caption)?.0)
    }
}

/// Cross and self attention averaged over layers and timesteps at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    pub grid: (usize, usize),
    pub cross: Array2<f64>,
    pub self_attn: Array2<f64>,
}

impl CrossAttentionStack {
    /// Every cross layer resized to `grid` and averaged; self maps averaged.
    pub fn aggregate(&self, grid: (usize, usize)) -> AggregatedAttention {
        let tokens = self.cross[0].ncols();
        let mut cross = Array2::zeros((grid.0 * grid.1, tokens));
        for (m, &res) in self.cross.iter().zip(&self.layer_resolutions) {
            if res == grid {
                cross += m;
            } else {
                cross += &resize::resize_rows(m.view(), res, grid);
            }
        }
        cross /= self.cross.len() as f64;
        let mut self_attn = self.self_attn[0].clone();
        for m in &self.self_attn[1..] {
            self_attn += m;
        }
        self_attn /= self.self_attn.len() as f64;
        AggregatedAttention { grid, cross, self_attn }
    }
}

/// Runs the denoiser on `scene` at each timestep (noise from `seed`) and
/// averages the resized attention maps over layers and timesteps.
pub fn collect_attention(
    denoiser: &ToyDenoiser,
    scene: &Scene,
    timesteps: &[f64],
    seed: u64,
) -> Result<AggregatedAttention> {
    if timesteps.is_empty() {
        return Err(Error::Config("attention collection needs at least one timestep".into()));
    }
    let grid = scene.grid();
    let noise = NoiseStream::new(seed);
    let mut total: Option<AggregatedAttention> = None;
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = noise.sample(i, scene.latent.dim());
        let zt = denoiser.schedule.add_noise(&scene.latent, t, &eps)?.zt;
        let (_, stack) = denoiser.forward(&zt, t, &scene.caption)?;
        let agg = stack.aggregate(grid);
        match total.as_mut() {
            None => total = Some(agg),
            Some(acc) => {
                acc.cross += &agg.cross;
                acc.self_attn += &agg.self_attn;
            }
        }
    }
    let mut agg = total.expect("at least one timestep");
    let n = timesteps.len() as f64;
    agg.cross /= n;
    agg.self_attn /= n;
    // restore exact stochasticity lost to summation order
    resize::normalize_rows(&mut agg.cross);
    resize::normalize_rows(&mut agg.self_attn);
    Ok(agg)
}

/// Mean attention mass of a class's token columns over a pixel mask.
pub fn mean_mass_over_mask(cross: &Array2<f64>, span: &[usize], mask: &Array2<bool>) -> f64 {
    let cols = cross.select(Axis(1), span).mean_axis(Axis(1)).expect("non-empty span");
    let (mut sum, mut n) = (0.0, 0usize);
    for (v, &on) in cols.iter().zip(mask.iter()) {
        if on {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
