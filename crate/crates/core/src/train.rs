//! The training loop.
//!
//! Each mini-batch runs, in order: image encoding; one SGD step on the prompt
//! context vectors (text arms only); text grid rebuild; one Adam step on the
//! classifier, plus the image encoder once warm-up is over; EMA update.
//! Validation on the pooled source splits picks the returned checkpoint.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::classifier::{Classifier, LinearClassifier, NormalizedClassifier, DEFAULT_LOGIT_SCALE};
use crate::data::{MultiDomainDataset, SampleStore, SplitPlan};
use crate::embedding::{Embedding, Matrix};
use crate::encoders::{ImageEncoder, ImageEncoderGrads, TextEncoder};
use crate::error::{Result, TdgError};
use crate::optim::{AdamState, EmaState, ParamBlock, SgdState};
use crate::prompt::{
    build_text_grid, prompt_loss_and_grads_weighted, LossWeights, PromptTemplate, TextFeatureGrid,
};
use crate::rng::RngStream;
use crate::words::DomainWordPool;

/// Which components take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Linear classifier on image features only.
    Erm,
    /// Linear classifier trained on image and generated text features.
    Text,
    /// Normalized classifier trained on image and generated text features.
    Tdg,
    /// Normalized classifier on image features only.
    Norm,
}

impl Arm {
    pub fn uses_text(self) -> bool {
        matches!(self, Arm::Text | Arm::Tdg)
    }

    pub fn normalized(self) -> bool {
        matches!(self, Arm::Tdg | Arm::Norm)
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Erm => "ERM",
            Arm::Text => "TEXT",
            Arm::Tdg => "TDG",
            Arm::Norm => "NORM",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = TdgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Arm::Erm),
            "text" => Ok(Arm::Text),
            "tdg" => Ok(Arm::Tdg),
            "norm" => Ok(Arm::Norm),
            other => Err(TdgError::Config(format!("unknown arm {other:?}"))),
        }
    }
}

/// Which prompt-learning terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptObjective {
    /// `L_a + λ·L_s`
    Full,
    /// `L_a`
    AlignmentOnly,
    /// `λ·L_s`
    SimilarityOnly,
}

impl PromptObjective {
    pub fn weights(self, lambda: f64) -> LossWeights {
        match self {
            PromptObjective::Full => LossWeights::full(lambda),
            PromptObjective::AlignmentOnly => LossWeights::full(0.0),
            PromptObjective::SimilarityOnly => LossWeights {
                alignment: 0.0,
                similarity: lambda,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub lr_classifier: f64,
    pub lr_encoder: f64,
    pub lr_prompt: f64,
    pub ema_decay: f64,
    pub logit_scale: f64,
    pub seed: u64,
    pub arm: Arm,
    pub objective: PromptObjective,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Select checkpoints with EMA weights rather than live weights.
    pub select_with_ema: bool,
    /// Cap the EMA decay at `(1 + t)/(10 + t)` during the first updates.
    pub ema_warmup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            total_steps: 600,
            warmup_steps: 60,
            batch_size: 32,
            lr_classifier: 1e-3,
            lr_encoder: 1e-4,
            lr_prompt: 1e-3,
            ema_decay: 0.999,
            logit_scale: DEFAULT_LOGIT_SCALE,
            seed: 0,
            arm: Arm::Tdg,
            objective: PromptObjective::Full,
            eval_every: 20,
            select_with_ema: true,
            ema_warmup: true,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule with the encoder learning rate used for
    /// large pretrained backbones.
    pub fn paper_protocol() -> Self {
        Self {
            total_steps: 3000,
            warmup_steps: 300,
            lr_encoder: 5e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TdgError::Config(m));
        if self.warmup_steps > self.total_steps {
            return err(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1".into());
        }
        for (name, v) in [
            ("lr_classifier", self.lr_classifier),
            ("lr_encoder", self.lr_encoder),
            ("lr_prompt", self.lr_prompt),
            ("logit_scale", self.logit_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return err(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        Ok(())
    }
}

/// Losses recorded at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub image: f64,
    pub text: Option<f64>,
    pub alignment: Option<f64>,
    pub similarity: Option<f64>,
}

pub const PARAM_ENCODER_WEIGHT: &str = "image_encoder.weight";
pub const PARAM_ENCODER_BIAS: &str = "image_encoder.bias";
pub const PARAM_HEADS: &str = "classifier.heads";
pub const PARAM_BIASES: &str = "classifier.biases";
pub const PARAM_V1: &str = "prompt.v1";
pub const PARAM_V2: &str = "prompt.v2";

/// A trained model and everything needed to evaluate or resume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub config: TrainConfig,
    /// Domains the model was trained on.
    pub sources: Vec<usize>,
    pub image_encoder: ImageEncoder,
    pub classifier: Classifier,
    pub prompt: Option<PromptTemplate>,
    pub ema: EmaState,
    /// Step after which the selected checkpoint was taken.
    pub selected_step: usize,
    pub selected_val_accuracy: f64,
    pub loss_trace: Vec<StepLosses>,
}

const CHECKPOINT_FORMAT: &str = "tdg-checkpoint/1";

impl TrainedModel {
    /// Image encoder and classifier rebuilt from the EMA shadows.
    pub fn ema_parts(&self) -> Result<(ImageEncoder, Classifier)> {
        ema_parts(&self.ema, &self.image_encoder, &self.classifier)
    }

    pub fn predict_label(&self, x: &[f64], use_ema: bool) -> Result<usize> {
        if use_ema {
            let (enc, cls) = self.ema_parts()?;
            Ok(cls.predict(&enc.encode_image(x)?)?.argmax())
        } else {
            Ok(self
                .classifier
                .predict(&self.image_encoder.encode_image(x)?)?
                .argmax())
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| TdgError::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TrainedModel =
            serde_json::from_str(text).map_err(|e| TdgError::Parse(e.to_string()))?;
        if model.format != CHECKPOINT_FORMAT {
            return Err(TdgError::Parse(format!(
                "unsupported checkpoint format {:?}",
                model.format
            )));
        }
        Ok(model)
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }
}

fn ema_parts(
    ema: &EmaState,
    encoder: &ImageEncoder,
    classifier: &Classifier,
) -> Result<(ImageEncoder, Classifier)> {
    let get = |name: &str| {
        ema.shadow(name)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| TdgError::Parse(format!("EMA has no shadow for {name}")))
    };
    let enc = ImageEncoder::new(
        Matrix::from_rows(encoder.embed_dim(), encoder.raw_dim(), get(PARAM_ENCODER_WEIGHT)?)?,
        Embedding::new(get(PARAM_ENCODER_BIAS)?)?,
    )?;
    let heads = Matrix::from_rows(
        classifier.heads().rows(),
        classifier.heads().cols(),
        get(PARAM_HEADS)?,
    )?;
    let cls = match classifier {
        Classifier::Normalized(c) => {
            Classifier::Normalized(NormalizedClassifier::new(heads, c.logit_scale)?)
        }
        Classifier::Linear(_) => Classifier::Linear(LinearClassifier::new(heads, get(PARAM_BIASES)?)?),
    };
    Ok((enc, cls))
}

/// Points in a training step at which an observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Before the first step.
    Start,
    /// After the prompt update (also reported for arms without text).
    Prompt,
    /// After the classifier/encoder update.
    Classifier,
    /// After the EMA update.
    Ema,
}

/// Read-only view of the training state handed to observers.
pub struct TrainState<'a> {
    pub text_encoder: &'a TextEncoder,
    pub image_encoder: &'a ImageEncoder,
    pub classifier: &'a Classifier,
    pub prompt: Option<&'a PromptTemplate>,
    pub ema: &'a EmaState,
}

pub trait TrainObserver {
    fn after_phase(&mut self, step: usize, phase: Phase, state: &TrainState<'_>);
}

impl TrainObserver for () {
    fn after_phase(&mut self, _: usize, _: Phase, _: &TrainState<'_>) {}
}

/// Stateful trainer; [`train`] drives it over a full schedule.
pub struct Trainer<'a, S: SampleStore> {
    config: TrainConfig,
    store: &'a S,
    split: &'a SplitPlan,
    train_indices: Vec<usize>,
    val_indices: Vec<usize>,
    text_encoder: TextEncoder,
    image_encoder: ImageEncoder,
    classifier: Classifier,
    prompt: Option<PromptTemplate>,
    pool: Option<DomainWordPool>,
    classifier_opt: AdamState,
    encoder_opt: AdamState,
    prompt_opt: SgdState,
    ema: EmaState,
    batch_rng: RngStream,
    step: usize,
    trace: Vec<StepLosses>,
}

impl<'a, S: SampleStore> Trainer<'a, S> {
    pub fn new(
        config: &TrainConfig,
        store: &'a S,
        split: &'a SplitPlan,
        pool: Option<&DomainWordPool>,
    ) -> Result<Self> {
        let backbone = Backbone::pretrained(store.meta())?;
        Self::with_backbone(config, store, split, pool, backbone)
    }

    pub fn with_backbone(
        config: &TrainConfig,
        store: &'a S,
        split: &'a SplitPlan,
        pool: Option<&DomainWordPool>,
        backbone: Backbone,
    ) -> Result<Self> {
        config.validate()?;
        let spec = &store.meta().spec;
        let train_indices = split.train_indices();
        if train_indices.is_empty() {
            return Err(TdgError::Config("training split is empty".into()));
        }
        let val_indices = split.val_indices();

        let root = RngStream::new(config.seed, "train");
        let mut cls_rng = root.derive("classifier");
        let classifier = if config.arm.normalized() {
            Classifier::Normalized(NormalizedClassifier::random(
                spec.num_classes,
                spec.embed_dim,
                config.logit_scale,
                &mut cls_rng,
            )?)
        } else {
            Classifier::Linear(LinearClassifier::random(
                spec.num_classes,
                spec.embed_dim,
                &mut cls_rng,
            )?)
        };

        let (prompt, pool) = if config.arm.uses_text() {
            let pool = pool.ok_or_else(|| {
                TdgError::Config(format!("arm {} needs a domain word pool", config.arm.label()))
            })?;
            let pool = match pool.token_embeddings() {
                Some(_) => pool.clone(),
                None => store.meta().vocabulary.embed_pool(pool)?,
            };
            let template = PromptTemplate::random(spec.token_dim, &mut root.derive("prompt"));
            (Some(template), Some(pool))
        } else {
            (None, None)
        };

        let mut ema = EmaState::new(config.ema_decay)?;
        ema.register(PARAM_ENCODER_WEIGHT, backbone.image.weight.data());
        ema.register(PARAM_ENCODER_BIAS, &backbone.image.bias);
        ema.register(PARAM_HEADS, classifier.heads().data());
        if let Some(b) = classifier.biases() {
            ema.register(PARAM_BIASES, b);
        }

        Ok(Self {
            config: config.clone(),
            store,
            split,
            train_indices,
            val_indices,
            text_encoder: backbone.text,
            image_encoder: backbone.image,
            classifier,
            prompt,
            pool,
            classifier_opt: AdamState::new(),
            encoder_opt: AdamState::new(),
            prompt_opt: SgdState::new(),
            ema,
            batch_rng: root.derive("batches"),
            step: 0,
            trace: Vec::new(),
        })
    }

    pub fn state(&self) -> TrainState<'_> {
        TrainState {
            text_encoder: &self.text_encoder,
            image_encoder: &self.image_encoder,
            classifier: &self.classifier,
            prompt: self.prompt.as_ref(),
            ema: &self.ema,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn trace(&self) -> &[StepLosses] {
        &self.trace
    }

    fn read(&self, index: usize) -> &'a crate::data::Sample {
        let s = self.store.sample(index);
        debug_assert!(self.split.sources.contains(&s.domain));
        s
    }

    /// Uniform with replacement over the pooled source training samples.
    pub fn sample_batch(&mut self) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| self.train_indices[self.batch_rng.index(self.train_indices.len())])
            .collect()
    }

    fn text_grid(&self) -> Result<Option<TextFeatureGrid>> {
        match (&self.prompt, &self.pool) {
            (Some(t), Some(pool)) => Ok(Some(build_text_grid(
                t,
                &self.text_encoder,
                &self.store.meta().vocabulary.category_tokens,
                pool,
            )?)),
            _ => Ok(None),
        }
    }

    /// Runs one full training step on the given sample indices.
    pub fn step_on_batch(
        &mut self,
        batch: &[usize],
        observer: &mut dyn TrainObserver,
    ) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(TdgError::DegenerateInput("empty batch".into()));
        }
        let step = self.step;
        let samples: Vec<&crate::data::Sample> = batch.iter().map(|&i| self.read(i)).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let feats = samples
            .iter()
            .map(|s| self.image_encoder.encode_image(&s.x))
            .collect::<Result<Vec<_>>>()?;

        // Prompt update. Image features are constants here.
        let mut alignment = None;
        let mut similarity = None;
        if let (Some(template), Some(pool)) = (self.prompt.as_mut(), self.pool.as_ref()) {
            let out = prompt_loss_and_grads_weighted(
                template,
                &self.text_encoder,
                &feats,
                &labels,
                &self.store.meta().vocabulary.category_tokens,
                pool.token_embeddings().expect("pool embedded at construction"),
                self.config.objective.weights(self.config.lambda),
            )?;
            check_finite(step, "loss.prompt", out.total)?;
            alignment = Some(out.alignment);
            similarity = Some(out.similarity);
            let PromptTemplate { v1, v2 } = template;
            self.prompt_opt.step(
                &mut [
                    ParamBlock::new(PARAM_V1, v1.as_mut_slice(), &out.grad_v1),
                    ParamBlock::new(PARAM_V2, v2.as_mut_slice(), &out.grad_v2),
                ],
                self.config.lr_prompt,
            )?;
        }
        observer.after_phase(step, Phase::Prompt, &self.state());

        // Cross-entropy on images and on the refreshed text grid.
        let grid = self.text_grid()?;
        let heads = self.classifier.heads();
        let mut head_grads = Matrix::zeros(heads.rows(), heads.cols());
        let mut bias_grads = vec![0.0; self.classifier.num_classes()];
        let mut enc_grads =
            ImageEncoderGrads::zeros(self.image_encoder.embed_dim(), self.image_encoder.raw_dim());
        let inv_b = 1.0 / batch.len() as f64;
        let mut image_loss = 0.0;
        for ((z, s), &y) in feats.iter().zip(&samples).zip(&labels) {
            let g = self.classifier.backward(z, y)?;
            image_loss += inv_b * g.loss;
            head_grads.add_scaled(inv_b, &g.heads);
            if let Some(b) = &g.biases {
                for (acc, v) in bias_grads.iter_mut().zip(b) {
                    *acc += inv_b * v;
                }
            }
            let scaled: Vec<f64> = g.feature.iter().map(|v| v * inv_b).collect();
            enc_grads.accumulate(&self.image_encoder.encode_image_grads(&s.x, &scaled)?);
        }
        check_finite(step, "loss.image", image_loss)?;

        let mut text_loss = None;
        if let Some(grid) = &grid {
            let inv_cells = 1.0 / (grid.n_categories() * grid.n_words()) as f64;
            let mut total = 0.0;
            for (label, z) in grid.cells() {
                let g = self.classifier.backward(z, label)?;
                total += inv_cells * g.loss;
                head_grads.add_scaled(inv_cells, &g.heads);
                if let Some(b) = &g.biases {
                    for (acc, v) in bias_grads.iter_mut().zip(b) {
                        *acc += inv_cells * v;
                    }
                }
            }
            check_finite(step, "loss.text", total)?;
            text_loss = Some(total);
        }

        let lr_c = self.config.lr_classifier;
        match &mut self.classifier {
            Classifier::Normalized(c) => self.classifier_opt.step(
                &mut [ParamBlock::new(PARAM_HEADS, c.heads.data_mut(), head_grads.data())],
                lr_c,
            )?,
            Classifier::Linear(c) => self.classifier_opt.step(
                &mut [
                    ParamBlock::new(PARAM_HEADS, c.heads.data_mut(), head_grads.data()),
                    ParamBlock::new(PARAM_BIASES, &mut c.biases, &bias_grads),
                ],
                lr_c,
            )?,
        }
        if step >= self.config.warmup_steps {
            let ImageEncoder { weight, bias } = &mut self.image_encoder;
            self.encoder_opt.step(
                &mut [
                    ParamBlock::new(PARAM_ENCODER_WEIGHT, weight.data_mut(), enc_grads.weight.data()),
                    ParamBlock::new(PARAM_ENCODER_BIAS, bias.as_mut_slice(), &enc_grads.bias),
                ],
                self.config.lr_encoder,
            )?;
        }
        observer.after_phase(step, Phase::Classifier, &self.state());

        let decay = if self.config.ema_warmup {
            self.ema.warmup_decay(step as u64)
        } else {
            self.ema.decay
        };
        let ema = &mut self.ema;
        ema.update_with_decay(PARAM_ENCODER_WEIGHT, self.image_encoder.weight.data(), decay)?;
        ema.update_with_decay(PARAM_ENCODER_BIAS, &self.image_encoder.bias, decay)?;
        ema.update_with_decay(PARAM_HEADS, self.classifier.heads().data(), decay)?;
        if let Some(b) = self.classifier.biases() {
            ema.update_with_decay(PARAM_BIASES, b, decay)?;
        }
        observer.after_phase(step, Phase::Ema, &self.state());

        let losses = StepLosses {
            step,
            image: image_loss,
            text: text_loss,
            alignment,
            similarity,
        };
        self.trace.push(losses.clone());
        self.step += 1;
        Ok(losses)
    }

    /// Accuracy on the pooled source validation splits.
    pub fn validation_accuracy(&self, use_ema: bool) -> Result<f64> {
        if self.val_indices.is_empty() {
            return Ok(0.0);
        }
        let (enc, cls) = if use_ema {
            ema_parts(&self.ema, &self.image_encoder, &self.classifier)?
        } else {
            (self.image_encoder.clone(), self.classifier.clone())
        };
        let mut correct = 0usize;
        for &i in &self.val_indices {
            let s = self.read(i);
            if cls.predict(&enc.encode_image(&s.x)?)?.argmax() == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.val_indices.len() as f64)
    }

    fn snapshot(&self, selected_step: usize, val: f64) -> TrainedModel {
        TrainedModel {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            sources: self.split.sources.clone(),
            image_encoder: self.image_encoder.clone(),
            classifier: self.classifier.clone(),
            prompt: self.prompt.clone(),
            ema: self.ema.clone(),
            selected_step,
            selected_val_accuracy: val,
            loss_trace: Vec::new(),
        }
    }

    /// Runs the configured schedule and returns the best checkpoint by
    /// validation accuracy (earliest wins ties).
    pub fn run(mut self, observer: &mut dyn TrainObserver) -> Result<TrainedModel> {
        observer.after_phase(0, Phase::Start, &self.state());
        let total = self.config.total_steps;
        let mut best: Option<TrainedModel> = None;
        for _ in 0..total {
            let batch = self.sample_batch();
            self.step_on_batch(&batch, observer)?;
            let done = self.step;
            if done.is_multiple_of(self.config.eval_every) || done == total {
                let val = self.validation_accuracy(self.config.select_with_ema)?;
                if best.as_ref().is_none_or(|b| val > b.selected_val_accuracy) {
                    best = Some(self.snapshot(done, val));
                }
            }
        }
        let mut model = match best {
            Some(m) => m,
            None => {
                let val = self.validation_accuracy(self.config.select_with_ema)?;
                self.snapshot(0, val)
            }
        };
        model.loss_trace = self.trace;
        Ok(model)
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TdgError::NonFinite {
            step: step as u64,
            param: what.to_string(),
            magnitude: v.abs(),
        })
    }
}

/// Trains one model on the source splits of `split`.
pub fn train<S: SampleStore>(
    config: &TrainConfig,
    store: &S,
    split: &SplitPlan,
    pool: Option<&DomainWordPool>,
) -> Result<TrainedModel> {
    Trainer::new(config, store, split, pool)?.run(&mut ())
}

/// Fraction of samples in `domain` whose argmax prediction is correct.
pub fn evaluate(
    model: &TrainedModel,
    ds: &MultiDomainDataset,
    domain: usize,
    use_ema: bool,
) -> Result<f64> {
    if domain >= ds.num_domains() {
        return Err(TdgError::Index {
            index: domain,
            len: ds.num_domains(),
        });
    }
    let (enc, cls) = if use_ema {
        model.ema_parts()?
    } else {
        (model.image_encoder.clone(), model.classifier.clone())
    };
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in ds.samples.iter().filter(|s| s.domain == domain) {
        total += 1;
        if cls.predict(&enc.encode_image(&s.x)?)?.argmax() == s.label {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(TdgError::DegenerateInput(format!("domain {domain} has no samples")));
    }
    Ok(correct as f64 / total as f64)
}
