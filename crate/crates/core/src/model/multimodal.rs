//! A vision encoder, connector and language model composed into one model.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::connector::Connector;
use super::llm::LanguageModel;
use super::params::{Component, Ctx, ParamBuilder, ParamStore, TensorKey};
use super::registry::{ComponentKind, ComponentRegistry};
use super::vision::VisionEncoder;
use crate::data::tokenizer::{Tokenizer, EOS, IMAGE};
use crate::data::{
    preprocess_image, tokenize_prompt, AspectMode, ChatTemplate, Conversation, Normalization, TokenizedSample,
};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeedStream, Tensor, Var, IGNORE_INDEX};

/// A registry name plus its JSON config (`null` = defaults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub name: String,
    #[serde(default)]
    pub config: Value,
}

impl ComponentSpec {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            config: Value::Null,
        }
    }

    pub fn with_config(name: &str, config: Value) -> Self {
        Self {
            name: name.to_string(),
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSettings {
    pub aspect: AspectMode,
    pub normalization: Normalization,
}

/// Everything needed to construct a [`MultimodalModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vision: ComponentSpec,
    /// Second tower; when present the two towers' tokens are interleaved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mof: Option<ComponentSpec>,
    pub connector: ComponentSpec,
    pub llm: ComponentSpec,
    /// Chat template; defaults to the language-model family's template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default)]
    pub image: ImageSettings,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vision: ComponentSpec::new("clip"),
            mof: None,
            connector: ComponentSpec::new("mlp"),
            llm: ComponentSpec::new("tinyllama"),
            template: None,
            image: ImageSettings::default(),
        }
    }
}

impl ModelSpec {
    /// A very small configuration (width 16, one block per component,
    /// 8×8 images in 4×4 patches) for tests and smoke runs.
    pub fn tiny(connector: &str, mof: bool) -> Self {
        let vision = serde_json::json!({"image_size": 8, "patch_size": 4, "width": 16, "depth": 1, "heads": 2});
        Self {
            vision: ComponentSpec::with_config("clip", vision.clone()),
            mof: mof.then(|| ComponentSpec::with_config("dinov2", vision)),
            connector: ComponentSpec::with_config(
                connector,
                serde_json::json!({"num_queries": 3, "depth": 1, "heads": 2}),
            ),
            llm: ComponentSpec::with_config(
                "tinyllama",
                serde_json::json!({"width": 16, "depth": 1, "heads": 2, "max_positions": 160}),
            ),
            template: None,
            image: ImageSettings::default(),
        }
    }

    /// Every unknown registry name, reported together.
    pub fn name_errors<S: Scalar>(&self, registry: &ComponentRegistry<S>) -> Vec<Error> {
        let mut checks = vec![
            (ComponentKind::Vision, "model.vision", self.vision.name.as_str()),
            (ComponentKind::Connector, "model.connector", self.connector.name.as_str()),
            (ComponentKind::Llm, "model.llm", self.llm.name.as_str()),
        ];
        if let Some(m) = &self.mof {
            checks.push((ComponentKind::Vision, "model.mof", m.name.as_str()));
        }
        if let Some(t) = &self.template {
            checks.push((ComponentKind::Template, "model.template", t.as_str()));
        }
        checks
            .into_iter()
            .filter(|(kind, _, name)| !registry.contains(*kind, name))
            .map(|(kind, field, name)| Error::Lookup {
                kind: format!("{kind} ({field})"),
                name: name.to_string(),
                available: registry.names(kind),
            })
            .collect()
    }
}

fn inject(config: &Value, key: &str, value: usize) -> Value {
    let mut config = if config.is_null() {
        Value::Object(Default::default())
    } else {
        config.clone()
    };
    if let Value::Object(map) = &mut config {
        map.entry(key.to_string()).or_insert(Value::from(value));
    }
    config
}

/// Inputs to the language model after image tokens are spliced in.
pub struct Composed {
    /// `[T′, d_m]`.
    pub embeds: Var,
    /// Labels aligned with `embeds`; image positions are ignored.
    pub labels: Vec<i64>,
    /// Positions occupied by image embeddings.
    pub image_positions: std::ops::Range<usize>,
}

/// Embeds `ids` and replaces the single IMAGE position with the rows of
/// `image_embeds`. `T′ = T − 1 + M`.
pub fn compose_multimodal<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    llm: &dyn LanguageModel<S>,
    ids: &[u32],
    labels: &[i64],
    image_embeds: Option<Var>,
    image_token_index: Option<usize>,
) -> Result<Composed> {
    if ids.len() != labels.len() {
        return Err(Error::Dimension(format!("{} ids but {} labels", ids.len(), labels.len())));
    }
    if ids.is_empty() {
        return Err(Error::Validation("empty token sequence".into()));
    }
    match (image_token_index, image_embeds) {
        (None, None) => {
            if ids.contains(&IMAGE) {
                return Err(Error::Validation("image token present but no image index given".into()));
            }
            let embeds = llm.embed(ctx, ids)?;
            Ok(Composed {
                embeds,
                labels: labels.to_vec(),
                image_positions: 0..0,
            })
        }
        (Some(i), Some(img)) => {
            if ids.get(i) != Some(&IMAGE) {
                return Err(Error::Validation(format!("no image token at position {i}")));
            }
            let m = match ctx.graph.shape(img) {
                [m, d] if *d == llm.width() => *m,
                s => {
                    return Err(Error::Dimension(format!(
                        "image embeddings {s:?} do not match llm width {}",
                        llm.width()
                    )))
                }
            };
            let mut parts = Vec::with_capacity(3);
            if i > 0 {
                parts.push(llm.embed(ctx, &ids[..i])?);
            }
            parts.push(img);
            if i + 1 < ids.len() {
                parts.push(llm.embed(ctx, &ids[i + 1..])?);
            }
            let embeds = if parts.len() == 1 { img } else { ctx.graph.concat_rows(&parts)? };
            let mut out = Vec::with_capacity(labels.len() - 1 + m);
            out.extend_from_slice(&labels[..i]);
            out.extend(std::iter::repeat_n(IGNORE_INDEX, m));
            out.extend_from_slice(&labels[i + 1..]);
            Ok(Composed {
                embeds,
                labels: out,
                image_positions: i..i + m,
            })
        }
        (Some(_), None) => Err(Error::Validation("sample has an image placeholder but no image".into())),
        (None, Some(_)) => Err(Error::Validation("image given for a sample without a placeholder".into())),
    }
}

/// Next-token loss: cross-entropy of `logits[:-1]` against `labels[1:]`.
/// Zero (with no gradient) for sequences shorter than two.
pub fn next_token_loss<S: Scalar>(ctx: &mut Ctx<'_, S>, logits: Var, labels: &[i64]) -> Result<Var> {
    let t = labels.len();
    if t < 2 {
        return ctx.graph.constant(&[1], vec![S::zero()]);
    }
    let head = ctx.graph.slice_rows(logits, 0, t - 1)?;
    ctx.graph.masked_cross_entropy(head, &labels[1..], IGNORE_INDEX)
}

/// Index of the first maximum.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding loop: appends `argmax(next(tokens))` until EOS,
/// `max_new_tokens`, `limit` total tokens, or `stop(generated)` holds.
/// Returns the generated ids without EOS.
pub fn greedy_decode<S: Scalar>(
    prompt: &[u32],
    max_new_tokens: usize,
    limit: usize,
    mut next: impl FnMut(&[u32]) -> Result<Vec<S>>,
    stop: impl Fn(&[u32]) -> bool,
) -> Result<Vec<u32>> {
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    while generated.len() < max_new_tokens && tokens.len() < limit {
        let logits = next(&tokens)?;
        let id = argmax(&logits) as u32;
        if id == EOS {
            break;
        }
        tokens.push(id);
        generated.push(id);
        if stop(&generated) {
            break;
        }
    }
    Ok(generated)
}

pub struct MultimodalModel<S: Scalar> {
    /// This `ModelSpec` with every config materialized.
    pub spec: ModelSpec,
    pub store: ParamStore<S>,
    pub vision: VisionEncoder<S>,
    pub connector: Box<dyn Connector<S>>,
    pub llm: Box<dyn LanguageModel<S>>,
    pub template: ChatTemplate,
    pub tokenizer: Tokenizer,
}

impl<S: Scalar> MultimodalModel<S> {
    /// Constructs all components with weights drawn from `seed`; each
    /// component has its own stream, so changing one leaves the others' init
    /// unchanged.
    pub fn build(registry: &ComponentRegistry<S>, spec: &ModelSpec, seed: u64) -> Result<Self> {
        if let Some(e) = spec.name_errors(registry).into_iter().next() {
            return Err(e);
        }
        let root = SeedStream::new(seed).split("init");
        let mut store = ParamStore::new();

        let mut rng = root.split("vision").rng();
        let vision = {
            let mut b = ParamBuilder::new(&mut store, Component::Vision, &mut rng);
            match &spec.mof {
                None => VisionEncoder::Single(registry.create_vision(&spec.vision.name, &spec.vision.config, &mut b)?),
                Some(second) => {
                    let a = b.scoped("mof.0", |b| registry.create_vision(&spec.vision.name, &spec.vision.config, b))?;
                    let c = b.scoped("mof.1", |b| registry.create_vision(&second.name, &second.config, b))?;
                    VisionEncoder::mof(a, c)?
                }
            }
        };

        let mut rng = root.split("llm").rng();
        let llm = {
            let mut b = ParamBuilder::new(&mut store, Component::Llm, &mut rng);
            registry.create_llm(&spec.llm.name, &spec.llm.config, &mut b)?
        };

        let conn_config = inject(&inject(&spec.connector.config, "d_v", vision.width()), "d_m", llm.width());
        let mut rng = root.split("connector").rng();
        let connector = {
            let mut b = ParamBuilder::new(&mut store, Component::Connector, &mut rng);
            registry.create_connector(&spec.connector.name, &conn_config, &mut b)?
        };
        if connector.d_v() != vision.width() {
            return Err(Error::Validation(format!(
                "connector input width {} does not match vision width {}",
                connector.d_v(),
                vision.width()
            )));
        }
        if connector.d_m() != llm.width() {
            return Err(Error::Validation(format!(
                "connector output width {} does not match llm width {}",
                connector.d_m(),
                llm.width()
            )));
        }

        let template_name = match &spec.template {
            Some(t) => t.clone(),
            None => registry
                .default_template(&spec.llm.name)
                .unwrap_or("llava_v1")
                .to_string(),
        };
        let template = registry.create_template(&template_name, &Value::Null)?;

        let resolved = ModelSpec {
            vision: ComponentSpec::with_config(&spec.vision.name, vision.primary().config()),
            mof: match (&spec.mof, &vision) {
                (Some(m), VisionEncoder::Mof(_, b)) => Some(ComponentSpec::with_config(&m.name, b.config())),
                _ => None,
            },
            connector: ComponentSpec::with_config(&spec.connector.name, connector.config()),
            llm: ComponentSpec::with_config(&spec.llm.name, llm.config()),
            template: Some(template_name),
            image: spec.image,
        };

        Ok(Self {
            spec: resolved,
            store,
            vision,
            connector,
            llm,
            template,
            tokenizer: Tokenizer,
        })
    }

    /// Number of LLM positions an image occupies.
    pub fn image_tokens(&self) -> usize {
        self.connector.num_tokens(self.vision.num_tokens())
    }

    /// Resizes and normalizes a raw `[3, H, W]` image for the vision encoder.
    pub fn prepare_image(&self, raw: &Tensor<S>) -> Result<Tensor<S>> {
        preprocess_image(
            raw,
            self.vision.image_size(),
            self.spec.image.aspect,
            &self.spec.image.normalization,
        )
    }

    /// Connector output `[M, d_m]` for a prepared image.
    pub fn encode_image(&self, ctx: &mut Ctx<'_, S>, image: &Tensor<S>) -> Result<Var> {
        let feats = self.vision.forward(ctx, image)?;
        self.connector.forward(ctx, feats)
    }

    /// Logits `[T′, vocab]` and the aligned labels for one sample.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, S>,
        sample: &TokenizedSample,
        image: Option<&Tensor<S>>,
    ) -> Result<(Var, Composed)> {
        let image_embeds = match image {
            Some(img) => Some(self.encode_image(ctx, img)?),
            None => None,
        };
        let composed = compose_multimodal(
            ctx,
            self.llm.as_ref(),
            &sample.input_ids,
            &sample.labels,
            image_embeds,
            sample.image_token_index,
        )?;
        let logits = self.llm.forward(ctx, composed.embeds)?;
        Ok((logits, composed))
    }

    /// Mean next-token cross-entropy over the sample's supervised positions.
    pub fn loss(&self, ctx: &mut Ctx<'_, S>, sample: &TokenizedSample, image: Option<&Tensor<S>>) -> Result<Var> {
        let (logits, composed) = self.forward(ctx, sample, image)?;
        next_token_loss(ctx, logits, &composed.labels)
    }

    /// Greedy answer to the conversation's last human turn. `image` is a
    /// raw image; it is prepared here. Stops at EOS, at the template's
    /// assistant suffix, or after `max_new_tokens`.
    pub fn generate(&self, conv: &Conversation, image: Option<&Tensor<S>>, max_new_tokens: usize) -> Result<String> {
        let prompt = tokenize_prompt(conv, &self.template, &self.tokenizer)?;
        self.generate_ids(&prompt, image, max_new_tokens)
    }

    /// Greedy continuation of an already tokenized prompt.
    pub fn generate_ids(
        &self,
        prompt: &TokenizedSample,
        image: Option<&Tensor<S>>,
        max_new_tokens: usize,
    ) -> Result<String> {
        if prompt.image_token_index.is_some() != image.is_some() {
            return Err(Error::Validation(if image.is_some() {
                "an image was given but the prompt has no <image> placeholder".into()
            } else {
                "the prompt has an <image> placeholder but no image was given".into()
            }));
        }
        let image_rows = if prompt.image_token_index.is_some() { self.image_tokens() } else { 1 };
        let prompt_len = prompt.len() - 1 + image_rows;
        let limit = self.llm.max_positions();
        if prompt_len > limit {
            return Err(Error::Length {
                len: prompt_len,
                max: limit,
            });
        }
        if max_new_tokens == 0 {
            return Ok(String::new());
        }
        let image_embeds = match image {
            Some(raw) => {
                let prepared = self.prepare_image(raw)?;
                let mut ctx = Ctx::new(&self.store);
                let v = self.encode_image(&mut ctx, &prepared)?;
                Some(ctx.graph.tensor(v))
            }
            None => None,
        };
        let suffix = self.template.assistant_suffix.as_bytes();
        let stop = |generated: &[u32]| {
            !suffix.is_empty()
                && generated.len() >= suffix.len()
                && generated[generated.len() - suffix.len()..]
                    .iter()
                    .zip(suffix)
                    .all(|(&id, &b)| id == b as u32)
        };
        let next = |tokens: &[u32]| -> Result<Vec<S>> {
            let mut ctx = Ctx::new(&self.store);
            let img = match &image_embeds {
                Some(t) => Some(ctx.graph.constant(t.shape(), t.data().to_vec())?),
                None => None,
            };
            let labels = vec![IGNORE_INDEX; tokens.len()];
            let composed = compose_multimodal(
                &mut ctx,
                self.llm.as_ref(),
                tokens,
                &labels,
                img,
                prompt.image_token_index,
            )?;
            let logits = self.llm.forward(&mut ctx, composed.embeds)?;
            let v = self.llm.vocab_size();
            let all = ctx.graph.value(logits);
            Ok(all[all.len() - v..].to_vec())
        };
        // Positions available for text tokens once the image is spliced in.
        let text_limit = limit + 1 - image_rows;
        let mut ids = greedy_decode(&prompt.input_ids, max_new_tokens, text_limit, next, stop)?;
        if stop(&ids) {
            ids.truncate(ids.len() - suffix.len());
        }
        Ok(self.tokenizer.decode(&ids))
    }
}

/// Largest relative disagreement between analytic parameter gradients of
/// `loss` and central finite differences, over the probed coordinates.
/// Probed tensors must be trainable. Errors are measured as in
/// [`crate::numerics::grad_check`].
pub fn grad_check_params<S, F>(model: &mut MultimodalModel<S>, loss: F, probes: &[(TensorKey, Vec<usize>)], h: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&MultimodalModel<S>, &mut Ctx<'_, S>) -> Result<Var>,
{
    let analytic: Vec<Vec<S>> = {
        let mut ctx = Ctx::new(&model.store);
        let out = loss(model, &mut ctx)?;
        ctx.graph.backward(out)?;
        probes
            .iter()
            .map(|(key, _)| {
                let v = ctx.key(*key);
                ctx.graph
                    .grad(v)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); ctx.graph.value(v).len()])
            })
            .collect()
    };
    let eval = |m: &MultimodalModel<S>| -> Result<f64> {
        let mut ctx = Ctx::new(&m.store);
        let out = loss(m, &mut ctx)?;
        Ok(ctx.graph.item_f64(out))
    };
    let mut worst = 0.0f64;
    for ((key, coords), grad) in probes.iter().zip(&analytic) {
        for &i in coords {
            let orig = model.store.tensor(*key).data()[i];
            let x = orig.to_f64c();
            let plus = S::from_f64c(x + h);
            let minus = S::from_f64c(x - h);
            model.store.tensor_mut(*key).data_mut()[i] = plus;
            let fp = eval(model)?;
            model.store.tensor_mut(*key).data_mut()[i] = minus;
            let fm = eval(model)?;
            model.store.tensor_mut(*key).data_mut()[i] = orig;
            let fd = (fp - fm) / (plus.to_f64c() - minus.to_f64c());
            let a = grad[i].to_f64c();
            worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
        }
    }
    Ok(worst)
}
