//! The full binocular model: shared per-eye encoder, bidirectional
//! cross-attention fusion, `[CLS]` concatenation, task heads, and the
//! dropout voting system on the glaucoma head.

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::kv_fields;
use crate::nn::{join, AttentionBlock, ImageShape, LayerNorm, MlpHead, Module, PatchEmbed};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture, voting and loss-weight settings.
///
/// The three `use_*` flags are the ablation axes: binocular fusion, the
/// voting system, and the metadata (age/sex) heads.
#[derive(Clone, Debug, PartialEq)]
pub struct VVitConfig {
    /// Number of cross-attention fusion blocks (`L`).
    pub num_cross_blocks: usize,
    /// Number of votes (`n`) drawn from the glaucoma head.
    pub num_votes: usize,
    pub head_dropout: f64,
    pub head_hidden: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Self-attention blocks in the per-eye encoder.
    pub encoder_blocks: usize,
    /// Dropout inside encoder and fusion blocks; training only.
    pub backbone_dropout: f64,
    pub patch_size: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub lambda_age: f64,
    pub lambda_sex: f64,
    pub lambda_reg: f64,
    pub lambda_wd: f64,
    pub use_binocular: bool,
    pub use_voting: bool,
    pub use_metadata: bool,
}

impl Default for VVitConfig {
    fn default() -> Self {
        Self {
            num_cross_blocks: 3,
            num_votes: 16,
            head_dropout: 0.3,
            head_hidden: 64,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            encoder_blocks: 2,
            backbone_dropout: 0.1,
            patch_size: 8,
            image_channels: 1,
            image_height: 32,
            image_width: 32,
            lambda_age: 0.1,
            lambda_sex: 0.1,
            lambda_reg: 1.0,
            lambda_wd: 1e-4,
            use_binocular: true,
            use_voting: true,
            use_metadata: true,
        }
    }
}

impl KvConfig for VVitConfig {
    kv_fields!(VVitConfig {
        num_cross_blocks,
        num_votes,
        head_dropout,
        head_hidden,
        model_dim,
        num_heads,
        ffn_dim,
        encoder_blocks,
        backbone_dropout,
        patch_size,
        image_channels,
        image_height,
        image_width,
        lambda_age,
        lambda_sex,
        lambda_reg,
        lambda_wd,
        use_binocular,
        use_voting,
        use_metadata,
    });

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_cross_blocks == 0 {
            return bad("num_cross_blocks must be >= 1".into());
        }
        if self.num_votes == 0 {
            return bad("num_votes must be >= 1".into());
        }
        for (name, p) in [("head_dropout", self.head_dropout), ("backbone_dropout", self.backbone_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        for (name, v) in [
            ("lambda_age", self.lambda_age),
            ("lambda_sex", self.lambda_sex),
            ("lambda_reg", self.lambda_reg),
            ("lambda_wd", self.lambda_wd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a nonnegative number"));
            }
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible into {} heads",
                self.model_dim, self.num_heads
            ));
        }
        let dims = [
            self.model_dim,
            self.ffn_dim,
            self.head_hidden,
            self.patch_size,
            self.image_channels,
            self.image_height,
            self.image_width,
        ];
        if dims.contains(&0) {
            return bad("dimensions must be positive".into());
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        Ok(())
    }
}

impl VVitConfig {
    pub fn image_shape(&self) -> ImageShape {
        ImageShape {
            channels: self.image_channels,
            height: self.image_height,
            width: self.image_width,
        }
    }

    /// Length of the fused representation `z`.
    pub fn z_dim(&self) -> usize {
        if self.use_binocular {
            2 * self.model_dim
        } else {
            self.model_dim
        }
    }

    /// Votes per forward pass: `num_votes` with voting, otherwise one.
    pub fn effective_votes(&self) -> usize {
        if self.use_voting {
            self.num_votes
        } else {
            1
        }
    }

    /// Same config with the three ablation flags replaced.
    pub fn with_ablation(&self, binocular: bool, voting: bool, metadata: bool) -> Self {
        Self {
            use_binocular: binocular,
            use_voting: voting,
            use_metadata: metadata,
            ..self.clone()
        }
    }
}

/// Affine map between age in years and the standardized training target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgeScaler {
    pub mean: f64,
    pub std: f64,
}

impl Default for AgeScaler {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl AgeScaler {
    /// Fit on a set of ages (population std; falls back to 1 when constant).
    pub fn fit(ages: &[f64]) -> Self {
        if ages.is_empty() {
            return Self::default();
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn standardize(&self, years: f64) -> f64 {
        (years - self.mean) / self.std
    }

    pub fn to_years(&self, standardized: f64) -> f64 {
        standardized * self.std + self.mean
    }
}

/// Summary of the `n` stochastic glaucoma-head predictions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteBundle {
    pub votes: Vec<f64>,
    pub mean: f64,
    /// Population variance of the votes.
    pub variance: f64,
}

impl VoteBundle {
    pub fn from_votes(votes: Vec<f64>) -> Result<Self> {
        if votes.is_empty() {
            return Err(Error::Input("vote bundle needs at least one vote".into()));
        }
        // shifted by the first vote so identical votes give an exact mean
        // and exactly zero variance
        let n = votes.len() as f64;
        let v0 = votes[0];
        let shift = votes.iter().map(|v| v - v0).sum::<f64>() / n;
        let mean = v0 + shift;
        let variance = votes.iter().map(|v| (v - v0 - shift).powi(2)).sum::<f64>() / n;
        Ok(Self { votes, mean, variance })
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }
}

/// Aggregated probability reported for a sample: the mean vote.
pub fn predict_probability(bundle: &VoteBundle) -> f64 {
    bundle.mean
}

/// Attention weights of one fusion block, `[B, heads, T, T]` each.
#[derive(Clone, Debug)]
pub struct FusionAttention<T: Scalar> {
    /// Fellow-stream queries over target-eye tokens.
    pub over_target: Tensor<T>,
    /// Target-stream queries over fellow-eye tokens.
    pub over_fellow: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FusedRepresentation<T: Scalar> {
    /// `[B, z_dim]`: target `[CLS]` then fellow `[CLS]`.
    pub z: Tensor<T>,
    /// One entry per fusion block; empty without binocular fusion.
    pub attention: Vec<FusionAttention<T>>,
}

/// Batched model output. Fields absent under the active ablation are `None`.
#[derive(Clone, Debug)]
pub struct ModelOutput<T: Scalar> {
    /// `[B, n]` vote probabilities in `(0, 1)`.
    pub votes: Tensor<T>,
    /// `[B]` standardized age predictions.
    pub age: Option<Tensor<T>>,
    /// `[B, 2]` sex logits.
    pub sex_logits: Option<Tensor<T>>,
    pub representation: FusedRepresentation<T>,
    pub grid: (usize, usize),
}

impl<T: Scalar> ModelOutput<T> {
    pub fn batch_size(&self) -> usize {
        self.votes.shape()[0]
    }

    pub fn bundle(&self, sample: usize) -> VoteBundle {
        let n = self.votes.shape()[1];
        let votes = self.votes.data()[sample * n..][..n]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        VoteBundle::from_votes(votes).expect("n >= 1")
    }

    pub fn bundles(&self) -> Vec<VoteBundle> {
        (0..self.batch_size()).map(|i| self.bundle(i)).collect()
    }
}

/// Which eye's image an attention map is laid over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eye {
    Target,
    Fellow,
}

impl std::str::FromStr for Eye {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Eye::Target),
            "fellow" => Ok(Eye::Fellow),
            other => Err(Error::Config(format!("unknown eye `{other}`"))),
        }
    }
}

/// `[CLS]`-row attention over the patch tokens of `eye` in fusion block
/// `block_index`, averaged over heads and laid out on the patch grid
/// (`grid_h × grid_w`, row-major). The weight on the `[CLS]` key itself is
/// excluded, so the cells sum to at most one.
///
/// The keys in the selected block come from `eye`; the querying `[CLS]` is
/// the other eye's stream.
pub fn attention_map<T: Scalar>(
    output: &ModelOutput<T>,
    sample: usize,
    block_index: usize,
    eye: Eye,
) -> Result<Vec<f64>> {
    let blocks = &output.representation.attention;
    if blocks.is_empty() {
        return Err(Error::Input("attention maps need binocular fusion".into()));
    }
    let block = blocks.get(block_index).ok_or_else(|| {
        Error::Index(format!("block {block_index} of {} fusion blocks", blocks.len()))
    })?;
    let w = match eye {
        Eye::Target => &block.over_target,
        Eye::Fellow => &block.over_fellow,
    };
    let s = w.shape();
    let (b, heads, tq, tk) = (s[0], s[1], s[2], s[3]);
    if sample >= b {
        return Err(Error::Index(format!("sample {sample} of batch {b}")));
    }
    let cells = tk - 1;
    let mut grid = vec![0.0; cells];
    for h in 0..heads {
        let row = &w.data()[((sample * heads + h) * tq) * tk..][..tk];
        for (g, v) in grid.iter_mut().zip(&row[1..]) {
            *g += v.to_f64().unwrap() / heads as f64;
        }
    }
    Ok(grid)
}

/// Two cross-attention blocks applied in parallel to the same inputs.
#[derive(Clone, Debug)]
pub struct FusionBlock<T: Scalar> {
    /// Target queries, fellow keys/values.
    pub target_from_fellow: AttentionBlock<T>,
    /// Fellow queries, target keys/values.
    pub fellow_from_target: AttentionBlock<T>,
}

impl<T: Scalar> Module<T> for FusionBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.target_from_fellow.collect_params(&join(prefix, "target_from_fellow"), out);
        self.fellow_from_target.collect_params(&join(prefix, "fellow_from_target"), out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>)>,
    ) {
        self.target_from_fellow
            .collect_params_mut(&join(prefix, "target_from_fellow"), out);
        self.fellow_from_target
            .collect_params_mut(&join(prefix, "fellow_from_target"), out);
    }
}

/// The parameterized network.
#[derive(Clone, Debug)]
pub struct VVit<T: Scalar> {
    pub config: VVitConfig,
    pub age_scaler: AgeScaler,
    pub embed: PatchEmbed<T>,
    pub encoder: Vec<AttentionBlock<T>>,
    /// Empty when `use_binocular` is off.
    pub fusion: Vec<FusionBlock<T>>,
    pub final_norm: LayerNorm<T>,
    pub glaucoma_head: MlpHead<T>,
    pub age_head: Option<MlpHead<T>>,
    pub sex_head: Option<MlpHead<T>>,
}

impl<T: Scalar> VVit<T> {
    pub fn new(config: &VVitConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let block = |rng: &mut Rng| {
            AttentionBlock::new(c.model_dim, c.num_heads, c.ffn_dim, c.backbone_dropout, rng)
        };
        let embed = PatchEmbed::new(c.image_shape(), c.patch_size, c.model_dim, rng)?;
        let encoder = (0..c.encoder_blocks)
            .map(|_| block(rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = if c.use_binocular {
            (0..c.num_cross_blocks)
                .map(|_| {
                    Ok(FusionBlock {
                        target_from_fellow: block(rng)?,
                        fellow_from_target: block(rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let zd = c.z_dim();
        let glaucoma_head = MlpHead::new(&[zd, c.head_hidden, 1], c.head_dropout, rng)?;
        let (age_head, sex_head) = if c.use_metadata {
            (
                Some(MlpHead::new(&[zd, c.head_hidden, 1], c.head_dropout, rng)?),
                Some(MlpHead::new(&[zd, c.head_hidden, 2], c.head_dropout, rng)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config: config.clone(),
            age_scaler: AgeScaler::default(),
            embed,
            encoder,
            fusion,
            final_norm: LayerNorm::new(c.model_dim),
            glaucoma_head,
            age_head,
            sex_head,
        })
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let s = self.config.image_shape();
        let want = [s.channels, s.height, s.width];
        match images.shape() {
            [b, rest @ ..] if rest == want => Ok(*b),
            other => Err(Error::shape("model input", other, &want)),
        }
    }

    /// Encoder + fusion up to `z`. Backbone dropout is used only when
    /// `train`.
    pub fn represent(
        &self,
        target: &Tensor<T>,
        fellow: Option<&Tensor<T>>,
        rng: &mut Rng,
        train: bool,
    ) -> Result<FusedRepresentation<T>> {
        let batch = self.check_images(target)?;
        let d = self.config.model_dim;
        let cls = |tokens: &Tensor<T>| -> Result<Tensor<T>> {
            self.final_norm
                .forward(&tokens.slice(1, 0, 1)?)?
                .reshape(&[batch, d])
        };

        if !self.config.use_binocular {
            let mut x = self.embed.forward(target)?;
            for b in &self.encoder {
                x = b.self_attention(&x, rng, train)?.output;
            }
            return Ok(FusedRepresentation {
                z: cls(&x)?,
                attention: Vec::new(),
            });
        }

        let fellow = fellow
            .ok_or_else(|| Error::Input("fellow image required with binocular fusion".into()))?;
        if self.check_images(fellow)? != batch {
            return Err(Error::shape("fellow batch", target.shape(), fellow.shape()));
        }
        // one shared encoder pass over both eyes
        let both = Tensor::concat(&[target, fellow], 0)?;
        let mut x = self.embed.forward(&both)?;
        for b in &self.encoder {
            x = b.self_attention(&x, rng, train)?.output;
        }
        let mut t = x.slice(0, 0, batch)?;
        let mut f = x.slice(0, batch, 2 * batch)?;
        let mut attention = Vec::with_capacity(self.fusion.len());
        for block in &self.fusion {
            let tf = block.target_from_fellow.cross_attention(&t, &f, rng, train)?;
            let ft = block.fellow_from_target.cross_attention(&f, &t, rng, train)?;
            attention.push(FusionAttention {
                over_target: ft.weights,
                over_fellow: tf.weights,
            });
            t = tf.output;
            f = ft.output;
        }
        let z = Tensor::concat(&[&cls(&t)?, &cls(&f)?], 1)?;
        Ok(FusedRepresentation { z, attention })
    }

    /// Full forward pass on a batch `[B, C, H, W]` (or a single `[C, H, W]`
    /// image). The glaucoma head is sampled `effective_votes()` times; with
    /// voting on, its dropout stays active even when `train` is false.
    pub fn forward(
        &self,
        target: &Tensor<T>,
        fellow: Option<&Tensor<T>>,
        rng: &mut Rng,
        train: bool,
    ) -> Result<ModelOutput<T>> {
        let lift = |x: &Tensor<T>| -> Result<Tensor<T>> {
            if x.rank() == 3 {
                let mut s = vec![1];
                s.extend_from_slice(x.shape());
                x.reshape(&s)
            } else {
                Ok(x.clone())
            }
        };
        let target = lift(target)?;
        let fellow = fellow.map(lift).transpose()?;
        let rep = self.represent(&target, fellow.as_ref(), rng, train)?;
        let batch = rep.z.shape()[0];

        let (n, head_dropout_on) = if self.config.use_voting {
            (self.config.num_votes, true)
        } else {
            (1, train)
        };
        let votes = vote_tensor(&rep.z, &self.glaucoma_head, n, rng, head_dropout_on)?;

        let age = match &self.age_head {
            Some(h) => Some(h.forward(&rep.z, rng, train)?.reshape(&[batch])?),
            None => None,
        };
        let sex_logits = match &self.sex_head {
            Some(h) => Some(h.forward(&rep.z, rng, train)?),
            None => None,
        };
        Ok(ModelOutput {
            votes,
            age,
            sex_logits,
            representation: rep,
            grid: self.embed.grid(),
        })
    }

    /// Squared L2 norm of all trainable parameters, as a differentiable
    /// scalar.
    pub fn weight_norm_sq(&self) -> Tensor<T> {
        let mut acc: Option<Tensor<T>> = None;
        for (_, p) in self.params() {
            let s = p.square().sum_all();
            acc = Some(match acc {
                Some(a) => a.add(&s).expect("scalars"),
                None => s,
            });
        }
        acc.unwrap_or_else(|| Tensor::scalar(T::zero()))
    }
}

/// `n` passes through `head` with independent dropout masks, each ending in
/// a sigmoid: `[B, d] -> [B, n]`.
pub fn vote_tensor<T: Scalar>(
    z: &Tensor<T>,
    head: &MlpHead<T>,
    n: usize,
    rng: &mut Rng,
    dropout_active: bool,
) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Config("number of votes must be >= 1".into()));
    }
    let passes = (0..n)
        .map(|_| head.forward(z, rng, dropout_active).map(|y| y.sigmoid()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = passes.iter().collect();
    Tensor::concat(&refs, z.rank() - 1)
}

/// Voting system for one representation `z` (`[d]`): `n` dropout-perturbed
/// passes through the glaucoma head, dropout on regardless of mode.
pub fn vote<T: Scalar>(z: &Tensor<T>, head: &MlpHead<T>, n: usize, rng: &mut Rng) -> Result<VoteBundle> {
    let v = vote_tensor(z, head, n, rng, true)?;
    VoteBundle::from_votes(v.data().iter().map(|x| x.to_f64().unwrap()).collect())
}

impl<T: Scalar> Module<T> for VVit<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.embed.collect_params(&join(prefix, "embed"), out);
        for (i, b) in self.encoder.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("encoder.{i}")), out);
        }
        for (i, b) in self.fusion.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("fusion.{i}")), out);
        }
        self.final_norm.collect_params(&join(prefix, "final_norm"), out);
        self.glaucoma_head.collect_params(&join(prefix, "glaucoma_head"), out);
        if let Some(h) = &self.age_head {
            h.collect_params(&join(prefix, "age_head"), out);
        }
        if let Some(h) = &self.sex_head {
            h.collect_params(&join(prefix, "sex_head"), out);
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>)>,
    ) {
        self.embed.collect_params_mut(&join(prefix, "embed"), out);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("encoder.{i}")), out);
        }
        for (i, b) in self.fusion.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("fusion.{i}")), out);
        }
        self.final_norm.collect_params_mut(&join(prefix, "final_norm"), out);
        self.glaucoma_head
            .collect_params_mut(&join(prefix, "glaucoma_head"), out);
        if let Some(h) = &mut self.age_head {
            h.collect_params_mut(&join(prefix, "age_head"), out);
        }
        if let Some(h) = &mut self.sex_head {
            h.collect_params_mut(&join(prefix, "sex_head"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VVitConfig {
        VVitConfig {
            num_cross_blocks: 2,
            num_votes: 4,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            head_hidden: 8,
            encoder_blocks: 1,
            image_height: 16,
            image_width: 16,
            ..VVitConfig::default()
        }
    }

    fn images(b: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        let t = Tensor::randn(&[b, 1, 16, 16], 0.3, &mut rng).add_scalar(0.5);
        let f = Tensor::randn(&[b, 1, 16, 16], 0.3, &mut rng).add_scalar(0.5);
        (t, f)
    }

    #[test]
    fn config_validation() {
        assert!(VVitConfig::default().validate().is_ok());
        for bad in [
            VVitConfig { num_cross_blocks: 0, ..small() },
            VVitConfig { num_votes: 0, ..small() },
            VVitConfig { head_dropout: 1.0, ..small() },
            VVitConfig { num_heads: 3, ..small() },
            VVitConfig { lambda_reg: -1.0, ..small() },
            VVitConfig { patch_size: 5, ..small() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let text = small().to_kv_string();
        assert_eq!(VVitConfig::from_kv_str(&text).unwrap(), small());
        assert!(text.contains("use_binocular = true"));
    }

    #[test]
    fn output_shapes_follow_ablation() {
        let (t, f) = images(3, 1);
        let full = VVit::<f64>::new(&small(), &mut Rng::new(0)).unwrap();
        let out = full.forward(&t, Some(&f), &mut Rng::new(1), false).unwrap();
        assert_eq!(out.votes.shape(), &[3, 4]);
        assert_eq!(out.representation.z.shape(), &[3, 16]);
        assert_eq!(out.representation.attention.len(), 2);
        assert_eq!(out.age.as_ref().unwrap().shape(), &[3]);
        assert_eq!(out.sex_logits.as_ref().unwrap().shape(), &[3, 2]);
        assert!(out.votes.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let mono_cfg = small().with_ablation(false, false, false);
        let mono = VVit::<f64>::new(&mono_cfg, &mut Rng::new(0)).unwrap();
        assert!(mono.fusion.is_empty() && mono.age_head.is_none());
        let out = mono.forward(&t, None, &mut Rng::new(1), false).unwrap();
        assert_eq!(out.representation.z.shape(), &[3, 8]);
        assert!(out.representation.attention.is_empty());
        assert_eq!(out.votes.shape(), &[3, 1]);
        assert!(out.age.is_none() && out.sex_logits.is_none());
    }

    #[test]
    fn missing_fellow_is_an_input_error() {
        let (t, _) = images(1, 2);
        let m = VVit::<f64>::new(&small(), &mut Rng::new(0)).unwrap();
        assert!(matches!(m.forward(&t, None, &mut Rng::new(0), false), Err(Error::Input(_))));
    }

    #[test]
    fn unbatched_input_is_accepted() {
        let (t, f) = images(1, 3);
        let m = VVit::<f64>::new(&small(), &mut Rng::new(0)).unwrap();
        let t1 = t.reshape(&[1, 16, 16]).unwrap();
        let f1 = f.reshape(&[1, 16, 16]).unwrap();
        let a = m.forward(&t1, Some(&f1), &mut Rng::new(5), false).unwrap();
        let b = m.forward(&t, Some(&f), &mut Rng::new(5), false).unwrap();
        assert_eq!(a.votes.data(), b.votes.data());
    }

    #[test]
    fn no_dropout_single_vote_has_zero_variance() {
        let cfg = VVitConfig { num_votes: 1, head_dropout: 0.0, ..small() };
        let (t, f) = images(2, 4);
        let m = VVit::<f64>::new(&cfg, &mut Rng::new(0)).unwrap();
        let out = m.forward(&t, Some(&f), &mut Rng::new(0), false).unwrap();
        assert!(out.bundles().iter().all(|b| b.variance == 0.0 && b.len() == 1));

        let cfg = VVitConfig { head_dropout: 0.0, ..small() };
        let m = VVit::<f64>::new(&cfg, &mut Rng::new(0)).unwrap();
        let out = m.forward(&t, Some(&f), &mut Rng::new(0), false).unwrap();
        for b in out.bundles() {
            assert_eq!(b.variance, 0.0);
            assert!(b.votes.iter().all(|&v| v == b.votes[0]));
        }
    }

    #[test]
    fn voting_seed_changes_votes_not_representation() {
        let (t, f) = images(2, 6);
        let m = VVit::<f64>::new(&small(), &mut Rng::new(0)).unwrap();
        let a = m.forward(&t, Some(&f), &mut Rng::new(10), false).unwrap();
        let b = m.forward(&t, Some(&f), &mut Rng::new(11), false).unwrap();
        assert_eq!(a.representation.z.data(), b.representation.z.data());
        assert_ne!(a.votes.data(), b.votes.data());
    }

    #[test]
    fn forward_is_reproducible() {
        let run = || {
            let m = VVit::<f64>::new(&VVitConfig::default(), &mut Rng::new(3)).unwrap();
            let mut rng = Rng::new(4);
            let t = Tensor::randn(&[2, 1, 32, 32], 0.3, &mut rng);
            let f = Tensor::randn(&[2, 1, 32, 32], 0.3, &mut rng);
            m.forward(&t, Some(&f), &mut Rng::new(9), true).unwrap().votes.to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn vote_bundle_statistics() {
        let b = VoteBundle::from_votes(vec![0.2, 0.4]).unwrap();
        assert!((predict_probability(&b) - 0.3).abs() < 1e-15);
        assert!((b.variance - 0.01).abs() < 1e-15);
        let b = VoteBundle::from_votes(vec![0.7; 5]).unwrap();
        assert_eq!(predict_probability(&b), 0.7);
        assert_eq!(b.variance, 0.0);
        assert_eq!(predict_probability(&VoteBundle::from_votes(vec![0.42]).unwrap()), 0.42);
        assert!(VoteBundle::from_votes(vec![]).is_err());
    }

    #[test]
    fn vote_respects_dropout_rate() {
        let head = MlpHead::<f64>::new(&[8, 8, 1], 0.0, &mut Rng::new(1)).unwrap();
        let z = Tensor::randn(&[8], 1.0, &mut Rng::new(2));
        let b = vote(&z, &head, 16, &mut Rng::new(3)).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b.variance, 0.0);
        let head = MlpHead::<f64>::new(&[8, 8, 1], 0.3, &mut Rng::new(1)).unwrap();
        let b = vote(&z, &head, 16, &mut Rng::new(3)).unwrap();
        assert!(b.variance > 0.0);
        assert!((b.mean - b.votes.iter().sum::<f64>() / 16.0).abs() < 1e-15);
    }

    #[test]
    fn attention_map_properties() {
        let (t, f) = images(2, 8);
        let m = VVit::<f64>::new(&small(), &mut Rng::new(0)).unwrap();
        let out = m.forward(&t, Some(&f), &mut Rng::new(0), false).unwrap();
        for eye in [Eye::Target, Eye::Fellow] {
            for blk in 0..2 {
                let g = attention_map(&out, 1, blk, eye).unwrap();
                assert_eq!(g.len(), 4);
                assert!(g.iter().all(|&v| v >= 0.0));
                let s: f64 = g.iter().sum();
                assert!(s <= 1.0 + 1e-12);
                // add back the CLS self-weight
                let w = match eye {
                    Eye::Target => &out.representation.attention[blk].over_target,
                    Eye::Fellow => &out.representation.attention[blk].over_fellow,
                };
                let heads = w.shape()[1];
                let tk = w.shape()[3];
                let tq = w.shape()[2];
                let cls: f64 = (0..heads)
                    .map(|h| w.data()[((heads + h) * tq) * tk] / heads as f64)
                    .sum();
                assert!((s + cls - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(attention_map(&out, 0, 2, Eye::Target), Err(Error::Index(_))));
    }

    #[test]
    fn uniform_attention_map_is_flat() {
        // zero query/key projections make every score equal
        let (t, f) = images(1, 9);
        let mut m = VVit::<f64>::new(&small(), &mut Rng::new(0)).unwrap();
        for b in &mut m.fusion {
            let blk = &mut b.fellow_from_target;
            blk.query.weight = Tensor::zeros(&[8, 8]).into_param();
            blk.query.bias = Tensor::zeros(&[8]).into_param();
        }
        let out = m.forward(&t, Some(&f), &mut Rng::new(0), false).unwrap();
        let g = attention_map(&out, 0, 1, Eye::Target).unwrap();
        for v in &g {
            assert!((v - g[0]).abs() < 1e-12);
        }
        assert!((g.iter().sum::<f64>() - 4.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_precision_model_runs() {
        let m = VVit::<f32>::new(&small(), &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(1);
        let t = Tensor::<f32>::randn(&[2, 1, 16, 16], 0.3, &mut rng);
        let f = Tensor::<f32>::randn(&[2, 1, 16, 16], 0.3, &mut rng);
        let out = m.forward(&t, Some(&f), &mut rng, true).unwrap();
        let loss = out.votes.mean_all().add(&m.weight_norm_sq()).unwrap();
        loss.backward().unwrap();
        assert!(m.params().iter().all(|(_, p)| p.grad().is_some()));
    }
}
