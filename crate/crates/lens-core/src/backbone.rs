//! Micro vision transformer with pluggable per-member projection adapters.
//!
//! The backbone is a pre-norm transformer encoder over image patches with a
//! learned class token and positional embeddings. Every attention projection
//! (query, key, value, output) is a slot that an ensembling method may hook;
//! the backbone itself can be frozen or trainable per configuration.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, ParamSet,
};
use crate::ensemble;
use crate::rng::{derive, SplitMix64};
use crate::tensor::{Element, Tape, Tensor, TensorError, ValueId};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// Ensembling method selecting how members share and adapt the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Single,
    Lora,
    Explicit,
    Batch,
    BatchPp,
    McDropout,
    Snapshot,
    LastLayer,
    Epinet,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Single,
        Method::Lora,
        Method::Explicit,
        Method::Batch,
        Method::BatchPp,
        Method::McDropout,
        Method::Snapshot,
        Method::LastLayer,
        Method::Epinet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Lora => "lora",
            Method::Explicit => "explicit",
            Method::Batch => "batch",
            Method::BatchPp => "batch_pp",
            Method::McDropout => "mc_dropout",
            Method::Snapshot => "snapshot",
            Method::LastLayer => "last_layer",
            Method::Epinet => "epinet",
        }
    }

    /// Whether the backbone weights train by default under this method.
    pub fn default_backbone_trainable(self) -> bool {
        matches!(self, Method::Explicit | Method::McDropout | Method::Snapshot | Method::Epinet)
    }
}

/// Initialization family for the low-rank `A` factors.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum AdapterInit {
    Gaussian { std: f64 },
    XavierUniform { gain: f64 },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub members: usize,
    pub rank: usize,
    pub adapter_init: AdapterInit,
    pub dropout_rate: f64,
    pub mc_samples: usize,
    pub epistemic_dim: usize,
    pub prior_scale: f64,
    pub backbone_trainable: Option<bool>,
}

impl ModelConfig {
    /// Desk-scale profile: 16x16 grayscale images, 4x4 patches, width 64,
    /// two layers, four heads, five classes.
    pub fn micro(method: Method) -> Self {
        ModelConfig {
            method,
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 5,
            members: if matches!(method, Method::Single | Method::McDropout) { 1 } else { 8 },
            rank: 4,
            adapter_init: AdapterInit::XavierUniform { gain: 10.0 },
            dropout_rate: 0.2,
            mc_samples: 16,
            epistemic_dim: 10,
            prior_scale: 1.0,
            backbone_trainable: None,
        }
    }

    /// Reference profile matching the published parameter table: 224x224
    /// RGB images, 32x32 patches, width 768, twelve layers, 100 classes.
    pub fn vit_base_32(method: Method, members: usize, rank: usize) -> Self {
        ModelConfig {
            method,
            image_size: 224,
            patch_size: 32,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            num_classes: 100,
            members,
            rank,
            adapter_init: AdapterInit::XavierUniform { gain: 10.0 },
            dropout_rate: 0.2,
            mc_samples: 16,
            epistemic_dim: 10,
            prior_scale: 1.0,
            backbone_trainable: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return err("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return err("depth and mlp_ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.members == 0 {
            return err("ensemble size must be at least 1".into());
        }
        if matches!(self.method, Method::Single | Method::McDropout) && self.members != 1 {
            return err(format!(
                "method {} uses a single network, got ensemble size {}",
                self.method.name(),
                self.members
            ));
        }
        if self.method == Method::Lora {
            if self.rank == 0 {
                return err("adapter rank must be at least 1".into());
            }
            if self.rank > self.embed_dim / 2 {
                return err(format!(
                    "adapter rank {} exceeds embed_dim/2 = {}",
                    self.rank,
                    self.embed_dim / 2
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout rate must be in [0,1), got {}", self.dropout_rate));
        }
        if self.method == Method::McDropout && self.mc_samples == 0 {
            return err("mc_samples must be at least 1".into());
        }
        if self.method == Method::Epinet {
            if self.epistemic_dim == 0 {
                return err("epistemic_dim must be at least 1".into());
            }
            if self.prior_scale < 0.0 {
                return err(format!("prior_scale must be >= 0, got {}", self.prior_scale));
            }
        }
        match self.adapter_init {
            AdapterInit::Gaussian { std } if std < 0.0 => {
                return err(format!("gaussian init std must be >= 0, got {std}"))
            }
            AdapterInit::XavierUniform { gain } if gain <= 0.0 => {
                return err(format!("xavier gain must be positive, got {gain}"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Sequence length: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn backbone_is_trainable(&self) -> bool {
        self.backbone_trainable.unwrap_or_else(|| self.method.default_backbone_trainable())
    }
}

/// Splits one `h x w x ch` image (row-major, channel innermost) into
/// non-overlapping square patches, flattened row-major per patch.
/// Patches are emitted left to right, top to bottom.
pub fn patchify(
    image: &[f32],
    h: usize,
    w: usize,
    ch: usize,
    patch: usize,
) -> Result<Tensor<f32>, ModelError> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Config(format!(
            "patch size {patch} does not tile a {h}x{w} image"
        )));
    }
    if image.len() != h * w * ch {
        return Err(ModelError::Config(format!(
            "image buffer has {} values, expected {}",
            image.len(),
            h * w * ch
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let patch_dim = patch * patch * ch;
    let mut data = Vec::with_capacity(gh * gw * patch_dim);
    for py in 0..gh {
        for px in 0..gw {
            for row in 0..patch {
                let y = py * patch + row;
                let x0 = px * patch;
                let start = (y * w + x0) * ch;
                data.extend_from_slice(&image[start..start + patch * ch]);
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, patch_dim], data).expect("patch grid sizes are consistent"))
}

/// Tape handles for every parameter of a model, keyed by name.
pub struct LoadedParams<E: Element> {
    ids: HashMap<String, ValueId>,
    marker: std::marker::PhantomData<E>,
}

impl<E: Element> LoadedParams<E> {
    /// Copies every parameter onto the tape, converting precision as needed.
    pub fn load(tape: &mut Tape<E>, params: &ParamSet) -> Self {
        let mut ids = HashMap::with_capacity(params.len());
        for p in params.iter() {
            let converted: Tensor<E> = p.tensor.map(|x| E::from_f64(x.to_f64()));
            let id = tape.leaf(&converted.with_requires_grad(p.trainable));
            ids.insert(p.name.clone(), id);
        }
        LoadedParams { ids, marker: std::marker::PhantomData }
    }

    pub fn id(&self, name: &str) -> ValueId {
        *self.ids.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }
}

/// How stochastic components behave during a forward pass.
pub enum ForwardMode<'r> {
    /// No dropout; epistemic index is zero. Identical inputs give identical
    /// outputs for every method.
    Deterministic,
    /// Dropout masks and epistemic indices are drawn from `rng`.
    Stochastic { rng: &'r mut SplitMix64 },
}

/// Result of one member's forward pass.
pub struct ForwardOut {
    /// Class-token representation after the final norm, `[batch, embed_dim]`.
    pub features: ValueId,
    /// Classification logits, `[batch, num_classes]`.
    pub logits: ValueId,
}

/// Name prefix of the backbone parameters used by `member`. Methods with
/// fully materialized per-member networks store them under the member.
pub fn backbone_prefix(config: &ModelConfig, params_have_member_copies: bool, member: usize) -> String {
    match config.method {
        Method::Explicit => format!("member{member}/backbone"),
        Method::Snapshot if params_have_member_copies => format!("member{member}/backbone"),
        _ => "backbone".to_string(),
    }
}

/// Builds the forward graph for one ensemble member over a batch of
/// pre-patchified images (`[batch * num_patches, patch_dim]`).
pub fn vit_forward_graph<E: Element>(
    tape: &mut Tape<E>,
    loaded: &LoadedParams<E>,
    config: &ModelConfig,
    patches: ValueId,
    batch: usize,
    member: usize,
    mode: &mut ForwardMode<'_>,
) -> Result<ForwardOut, ModelError> {
    let d = config.embed_dim;
    let t = config.tokens();
    let p = config.num_patches();
    let heads = config.num_heads;
    let dh = config.head_dim();
    let eps = E::from_f64(LAYER_NORM_EPS);
    if member >= config.members {
        return Err(ModelError::Config(format!(
            "member {member} out of range for ensemble of {}",
            config.members
        )));
    }
    let has_copies = loaded.has(&format!("member{member}/backbone/cls_token"));
    let prefix = backbone_prefix(config, has_copies, member);

    let embed_w = loaded.id(&format!("{prefix}/patch_embed/weight"));
    let embed_b = loaded.id(&format!("{prefix}/patch_embed/bias"));
    let embedded = tape.linear(patches, embed_w, Some(embed_b))?;

    let cls = loaded.id(&format!("{prefix}/cls_token"));
    let mut per_image: Vec<ValueId> = Vec::with_capacity(2 * batch);
    for i in 0..batch {
        per_image.push(cls);
        per_image.push(tape.slice_rows(embedded, i * p, p)?);
    }
    let tokens = tape.concat_rows(&per_image)?;
    let pos = loaded.id(&format!("{prefix}/pos_embed"));
    let mut x = tape.add_tiled(tokens, pos)?;

    let attn_scale = E::from_f64(1.0 / (dh as f64).sqrt());
    for layer in 0..config.depth {
        let g1 = loaded.id(&format!("{prefix}/layer{layer}/norm1/gamma"));
        let b1 = loaded.id(&format!("{prefix}/layer{layer}/norm1/beta"));
        let normed = tape.layer_norm(x, g1, b1, eps)?;

        let q = ensemble::slot_forward(tape, loaded, config, &prefix, member, layer, "q", normed)?;
        let k = ensemble::slot_forward(tape, loaded, config, &prefix, member, layer, "k", normed)?;
        let v = ensemble::slot_forward(tape, loaded, config, &prefix, member, layer, "v", normed)?;

        let mut image_outs = Vec::with_capacity(batch);
        for i in 0..batch {
            let mut head_outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = tape.slice_block(q, i * t, t, hh * dh, dh)?;
                let kh = tape.slice_block(k, i * t, t, hh * dh, dh)?;
                let vh = tape.slice_block(v, i * t, t, hh * dh, dh)?;
                let scores = tape.scaled_cross(qh, kh, attn_scale)?;
                let mut probs = tape.softmax_rows(scores)?;
                if config.method == Method::McDropout {
                    if let ForwardMode::Stochastic { rng } = mode {
                        probs = tape.dropout(probs, config.dropout_rate, rng)?;
                    }
                }
                head_outs.push(tape.matmul(probs, vh)?);
            }
            image_outs.push(tape.concat_cols(&head_outs)?);
        }
        let attended = tape.concat_rows(&image_outs)?;
        let o = ensemble::slot_forward(tape, loaded, config, &prefix, member, layer, "o", attended)?;
        x = tape.add(x, o)?;

        let g2 = loaded.id(&format!("{prefix}/layer{layer}/norm2/gamma"));
        let b2 = loaded.id(&format!("{prefix}/layer{layer}/norm2/beta"));
        let normed2 = tape.layer_norm(x, g2, b2, eps)?;
        let w1 = loaded.id(&format!("{prefix}/layer{layer}/mlp1/weight"));
        let bias1 = loaded.id(&format!("{prefix}/layer{layer}/mlp1/bias"));
        let h1 = tape.linear(normed2, w1, Some(bias1))?;
        let mut act = tape.gelu(h1);
        if config.method == Method::McDropout {
            if let ForwardMode::Stochastic { rng } = mode {
                act = tape.dropout(act, config.dropout_rate, rng)?;
            }
        }
        let w2 = loaded.id(&format!("{prefix}/layer{layer}/mlp2/weight"));
        let bias2 = loaded.id(&format!("{prefix}/layer{layer}/mlp2/bias"));
        let h2 = tape.linear(act, w2, Some(bias2))?;
        x = tape.add(x, h2)?;
    }

    let gf = loaded.id(&format!("{prefix}/final_norm/gamma"));
    let bf = loaded.id(&format!("{prefix}/final_norm/beta"));
    let final_norm = tape.layer_norm(x, gf, bf, eps)?;
    let cls_rows: Vec<usize> = (0..batch).map(|i| i * t).collect();
    let features = tape.gather_rows(final_norm, &cls_rows)?;

    let logits = ensemble::head_forward(tape, loaded, config, member, features, mode)?;
    let _ = d;
    Ok(ForwardOut { features, logits })
}

/// Complete model: configuration plus named parameters.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Initializes all parameters from the run seed. The backbone draws from
    /// one derived stream; each member draws from its own stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let trainable = config.backbone_is_trainable();
        let mut backbone_rng = SplitMix64::new(derive(seed, 0xBB));
        init_backbone(&mut params, &config, "backbone", trainable, &mut backbone_rng);

        if config.method == Method::Explicit {
            let reference: Vec<(String, Tensor<f32>, bool)> = params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone(), p.trainable))
                .collect();
            let mut fresh = ParamSet::new();
            for m in 0..config.members {
                for (name, tensor, flag) in &reference {
                    let member_name = format!("member{m}/{name}");
                    fresh.insert(member_name, tensor.clone(), *flag);
                }
            }
            params = fresh;
        }

        ensemble::init_members(&mut params, &config, seed)?;
        Ok(Model { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(save_checkpoint(path, &self.params)?)
    }

    /// Rebuilds the parameter layout from `config` and fills every tensor
    /// from the checkpoint. Snapshot checkpoints carry per-member copies,
    /// so their layout is reconstructed from the file contents.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Model, ModelError> {
        config.validate()?;
        let stored = load_checkpoint(path)?;
        if config.method == Method::Snapshot
            && stored.iter().any(|(name, _)| name.starts_with("member0/backbone/"))
        {
            let mut params = ParamSet::new();
            for (name, tensor) in &stored {
                params.insert(name.clone(), tensor.clone(), false);
            }
            return Ok(Model { config, params });
        }
        let mut model = Model::init(config, 0)?;
        model.params.load_values(&stored)?;
        Ok(model)
    }

    /// Logits and features for one member over raw images
    /// (`[batch, h, w, ch]` flattened row-major).
    pub fn forward(
        &self,
        images: &[f32],
        batch: usize,
        member: usize,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Tensor<f32>, Tensor<f32>), ModelError> {
        let c = &self.config;
        let per_image = c.image_size * c.image_size * c.channels;
        if images.len() != batch * per_image {
            return Err(ModelError::Config(format!(
                "image buffer has {} values, expected {} for batch {}",
                images.len(),
                batch * per_image,
                batch
            )));
        }
        let mut tape: Tape<f32> = Tape::new();
        let loaded = LoadedParams::load(&mut tape, &self.params);
        let patches = patchify_batch(&mut tape, images, batch, c)?;
        let out = vit_forward_graph(&mut tape, &loaded, c, patches, batch, member, mode)?;
        let logits =
            Tensor::new(tape.shape(out.logits).to_vec(), tape.value(out.logits).to_vec())?;
        let features =
            Tensor::new(tape.shape(out.features).to_vec(), tape.value(out.features).to_vec())?;
        Ok((logits, features))
    }
}

/// Patchifies a whole batch onto the tape as one constant
/// `[batch * num_patches, patch_dim]` node.
pub fn patchify_batch<E: Element>(
    tape: &mut Tape<E>,
    images: &[f32],
    batch: usize,
    config: &ModelConfig,
) -> Result<ValueId, ModelError> {
    let per_image = config.image_size * config.image_size * config.channels;
    let mut data = Vec::with_capacity(batch * config.num_patches() * config.patch_dim());
    for i in 0..batch {
        let img = &images[i * per_image..(i + 1) * per_image];
        let patches = patchify(
            img,
            config.image_size,
            config.image_size,
            config.channels,
            config.patch_size,
        )?;
        data.extend(patches.data().iter().map(|&v| E::from_f64(v as f64)));
    }
    Ok(tape.constant(vec![batch * config.num_patches(), config.patch_dim()], data))
}

fn xavier_uniform(rng: &mut SplitMix64, rows: usize, cols: usize, gain: f64) -> Tensor<f32> {
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| rng.uniform(-bound, bound) as f32)
}

fn init_backbone(
    params: &mut ParamSet,
    config: &ModelConfig,
    prefix: &str,
    trainable: bool,
    rng: &mut SplitMix64,
) {
    let d = config.embed_dim;
    let t = config.tokens();
    let hidden = config.hidden_dim();
    params.insert(
        format!("{prefix}/patch_embed/weight"),
        xavier_uniform(rng, d, config.patch_dim(), 1.0),
        trainable,
    );
    params.insert(format!("{prefix}/patch_embed/bias"), Tensor::zeros(vec![d]), trainable);
    params.insert(
        format!("{prefix}/cls_token"),
        Tensor::from_fn(vec![1, d], |_| (rng.normal() * 0.02) as f32),
        trainable,
    );
    params.insert(
        format!("{prefix}/pos_embed"),
        Tensor::from_fn(vec![t, d], |_| (rng.normal() * 0.02) as f32),
        trainable,
    );
    for layer in 0..config.depth {
        for norm in ["norm1", "norm2"] {
            params.insert(
                format!("{prefix}/layer{layer}/{norm}/gamma"),
                Tensor::filled(vec![d], 1.0),
                trainable,
            );
            params.insert(
                format!("{prefix}/layer{layer}/{norm}/beta"),
                Tensor::zeros(vec![d]),
                trainable,
            );
        }
        for role in ["q", "k", "v", "o"] {
            params.insert(
                format!("{prefix}/layer{layer}/{role}/weight"),
                xavier_uniform(rng, d, d, 1.0),
                trainable,
            );
            params.insert(
                format!("{prefix}/layer{layer}/{role}/bias"),
                Tensor::zeros(vec![d]),
                trainable,
            );
        }
        params.insert(
            format!("{prefix}/layer{layer}/mlp1/weight"),
            xavier_uniform(rng, hidden, d, 1.0),
            trainable,
        );
        params.insert(
            format!("{prefix}/layer{layer}/mlp1/bias"),
            Tensor::zeros(vec![hidden]),
            trainable,
        );
        params.insert(
            format!("{prefix}/layer{layer}/mlp2/weight"),
            xavier_uniform(rng, d, hidden, 1.0),
            trainable,
        );
        params.insert(
            format!("{prefix}/layer{layer}/mlp2/bias"),
            Tensor::zeros(vec![d]),
            trainable,
        );
    }
    params.insert(format!("{prefix}/final_norm/gamma"), Tensor::filled(vec![d], 1.0), trainable);
    params.insert(format!("{prefix}/final_norm/beta"), Tensor::zeros(vec![d]), trainable);
}

/// Initializes one classification head from `rng`.
pub fn init_head(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    classes: usize,
    rng: &mut SplitMix64,
) {
    params.insert(
        format!("{prefix}/weight"),
        Tensor::from_fn(vec![classes, d], |_| (rng.normal() * 0.01) as f32),
        true,
    );
    params.insert(format!("{prefix}/bias"), Tensor::zeros(vec![classes]), true);
}

/// Parameter accounting for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub per_member_overhead: usize,
}

/// Closed-form parameter counts; backbone weights count as trainable only
/// when the method (or an explicit override) trains them.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamCounts, ModelError> {
    config.validate()?;
    let d = config.embed_dim;
    let n = config.members;
    let backbone = backbone_param_count(config);
    let head = d * config.num_classes + config.num_classes;
    let backbone_trainable = if config.backbone_is_trainable() { backbone } else { 0 };
    let counts = match config.method {
        Method::Single | Method::McDropout => ParamCounts {
            total: backbone + head,
            trainable: backbone_trainable + head,
            per_member_overhead: 0,
        },
        Method::Lora => {
            let adapters = config.depth * 4 * (config.rank * d + d * config.rank);
            ParamCounts {
                total: backbone + n * (adapters + head),
                trainable: backbone_trainable + n * (adapters + head),
                per_member_overhead: adapters + head,
            }
        }
        Method::Explicit => ParamCounts {
            total: n * (backbone + head),
            trainable: n * (backbone + head),
            per_member_overhead: backbone + head,
        },
        Method::Batch | Method::BatchPp => {
            let shared = config.depth * 4 * d * d;
            let vectors = config.depth * 4 * 2 * d;
            ParamCounts {
                total: backbone + n * (vectors + head),
                trainable: backbone_trainable + shared + n * (vectors + head),
                per_member_overhead: vectors + head,
            }
        }
        Method::Snapshot => ParamCounts {
            total: n * (backbone + head),
            trainable: backbone_trainable + head,
            per_member_overhead: backbone + head,
        },
        Method::LastLayer => ParamCounts {
            total: backbone + n * head,
            trainable: backbone_trainable + n * head,
            per_member_overhead: head,
        },
        Method::Epinet => {
            let mlp = ensemble::epinet_mlp_param_count(config);
            ParamCounts {
                total: backbone + head + n * 2 * mlp,
                trainable: backbone_trainable + head + n * mlp,
                per_member_overhead: 2 * mlp,
            }
        }
    };
    Ok(counts)
}

/// Parameters of the shared feature extractor alone: patch embedding,
/// positional embeddings, class token, transformer blocks, and final norm.
/// Excludes heads, adapters, and any per-member additions.
pub fn backbone_param_count(config: &ModelConfig) -> usize {
    let d = config.embed_dim;
    let hidden = config.hidden_dim();
    let per_layer = 4 * d            // two norms, gamma and beta
        + 4 * (d * d + d)            // q, k, v, o projections with biases
        + (hidden * d + hidden)      // mlp expansion
        + (d * hidden + d); // mlp contraction
    (d * config.patch_dim() + d)     // patch embedding
        + d                          // class token
        + config.tokens() * d        // positional embeddings
        + config.depth * per_layer
        + 2 * d // final norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_micro_profile_shape() {
        let image: Vec<f32> = (0..256).map(|i| i as f32).collect();
        let patches = patchify(&image, 16, 16, 1, 4).unwrap();
        assert_eq!(patches.shape(), &[16, 16]);
        assert_eq!(patches.data()[0], 0.0);
        assert_eq!(patches.data()[1], 1.0);
        assert_eq!(patches.data()[4], 16.0);
    }

    #[test]
    fn patchify_whole_image_single_patch() {
        let image: Vec<f32> = (0..192).map(|i| i as f32 * 0.5).collect();
        let patches = patchify(&image, 8, 8, 3, 8).unwrap();
        assert_eq!(patches.shape(), &[1, 192]);
        assert_eq!(patches.data(), &image[..]);
    }

    #[test]
    fn patchify_constant_image_gives_identical_patches() {
        let image = vec![0.7f32; 16 * 16];
        let patches = patchify(&image, 16, 16, 1, 4).unwrap();
        let first = &patches.data()[..16];
        for row in patches.data().chunks_exact(16) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn patchify_rejects_non_dividing_patch() {
        let image = vec![0.0f32; 15 * 15];
        assert!(patchify(&image, 15, 15, 1, 4).is_err());
    }

    #[test]
    fn patch_order_is_row_major_over_grid() {
        let mut image = vec![0.0f32; 16 * 16];
        // Mark the top-left pixel of each 4x4 patch with its grid index.
        for py in 0..4 {
            for px in 0..4 {
                image[(py * 4) * 16 + px * 4] = (py * 4 + px) as f32 + 1.0;
            }
        }
        let patches = patchify(&image, 16, 16, 1, 4).unwrap();
        for (i, row) in patches.data().chunks_exact(16).enumerate() {
            assert_eq!(row[0], i as f32 + 1.0);
        }
    }

    #[test]
    fn micro_config_is_valid() {
        for method in Method::ALL {
            ModelConfig::micro(method).validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut c = ModelConfig::micro(Method::Lora);
        c.patch_size = 5;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::micro(Method::Lora);
        c.num_heads = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::micro(Method::Lora);
        c.rank = 40;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::micro(Method::Single);
        c.members = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn reference_profile_counts_match_published_table() {
        let c = ModelConfig::vit_base_32(Method::Lora, 1, 8);
        assert_eq!(count_parameters(&c).unwrap().trainable, 666_724);

        let c = ModelConfig::vit_base_32(Method::Lora, 1, 128);
        assert_eq!(count_parameters(&c).unwrap().trainable, 9_514_084);

        let c = ModelConfig::vit_base_32(Method::Lora, 16, 8);
        let counts = count_parameters(&c).unwrap();
        assert_eq!(counts.trainable, 10_667_584);

        let backbone = backbone_param_count(&c);
        let ratio = counts.total as f64 / backbone as f64;
        assert!((ratio - 1.12).abs() < 0.005, "ratio {ratio}");
    }

    #[test]
    fn member_count_scaling_is_linear() {
        let base = ModelConfig::vit_base_32(Method::Lora, 1, 8);
        let one = count_parameters(&base).unwrap();
        for n in [2usize, 4, 16] {
            let c = ModelConfig::vit_base_32(Method::Lora, n, 8);
            let counts = count_parameters(&c).unwrap();
            assert_eq!(
                counts.trainable - one.trainable,
                (n - 1) * one.per_member_overhead
            );
        }
    }

    #[test]
    fn counts_match_materialized_parameters() {
        for method in Method::ALL {
            let config = ModelConfig::micro(method);
            let model = Model::init(config.clone(), 7).unwrap();
            let counts = count_parameters(&config).unwrap();
            if method == Method::Snapshot {
                // The live snapshot network materializes one copy.
                assert_eq!(model.params.numel(false), counts.total / config.members);
                assert_eq!(model.params.numel(true), counts.trainable);
            } else {
                assert_eq!(model.params.numel(false), counts.total, "{}", method.name());
                assert_eq!(model.params.numel(true), counts.trainable, "{}", method.name());
            }
        }
    }

    #[test]
    fn forward_shapes_are_batch_by_classes() {
        let config = ModelConfig::micro(Method::Lora);
        let model = Model::init(config.clone(), 3).unwrap();
        let images = vec![0.25f32; 2 * 16 * 16];
        let (logits, features) =
            model.forward(&images, 2, 0, &mut ForwardMode::Deterministic).unwrap();
        assert_eq!(logits.shape(), &[2, config.num_classes]);
        assert_eq!(features.shape(), &[2, config.embed_dim]);
        logits.validate_finite("logits").unwrap();
    }

    #[test]
    fn forward_is_deterministic() {
        let config = ModelConfig::micro(Method::Lora);
        let model = Model::init(config, 11).unwrap();
        let mut rng = SplitMix64::new(5);
        let images: Vec<f32> = (0..16 * 16).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let (a, _) = model.forward(&images, 1, 2, &mut ForwardMode::Deterministic).unwrap();
        let (b, _) = model.forward(&images, 1, 2, &mut ForwardMode::Deterministic).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let config = ModelConfig::micro(Method::Lora);
        let model = Model::init(config, 23).unwrap();
        let mut rng = SplitMix64::new(1);
        let a: Vec<f32> = (0..256).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let b: Vec<f32> = (0..256).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let mut ab = a.clone();
        ab.extend_from_slice(&b);
        let mut ba = b.clone();
        ba.extend_from_slice(&a);
        let (l_ab, _) = model.forward(&ab, 2, 0, &mut ForwardMode::Deterministic).unwrap();
        let (l_ba, _) = model.forward(&ba, 2, 0, &mut ForwardMode::Deterministic).unwrap();
        assert_eq!(&l_ab.data()[..5], &l_ba.data()[5..]);
        assert_eq!(&l_ab.data()[5..], &l_ba.data()[..5]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lens");
        let config = ModelConfig::micro(Method::Lora);
        let model = Model::init(config.clone(), 9).unwrap();
        model.save(&path).unwrap();
        let restored = Model::load(config, &path).unwrap();
        let images = vec![0.5f32; 256];
        let (a, _) = model.forward(&images, 1, 1, &mut ForwardMode::Deterministic).unwrap();
        let (b, _) = restored.forward(&images, 1, 1, &mut ForwardMode::Deterministic).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
