//! Encoder and decoder wired together over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Reduction, Var};
use crate::config::{GenerationConfig, ModelConfig};
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generation::{beam_search, greedy_decode, log_softmax, DecodeTokens, Hypothesis, StepScorer};
use crate::metrics::FindingLabel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    encoder: Encoder,
    decoder: Decoder,
    image_size: usize,
}

impl Model {
    /// `image_size` is the side of the square input images.
    pub fn new(cfg: &ModelConfig, vocab_size: usize, image_size: usize) -> Result<Self> {
        let mut dec_cfg = cfg.decoder.clone();
        dec_cfg.vocab_size = vocab_size;
        let encoder = Encoder::new(cfg.encoder_kind, cfg.encoder.clone(), dec_cfg.d_model)?;
        let min = encoder.min_image_size();
        if image_size < min {
            return Err(Error::Config(format!(
                "images of {image_size}x{image_size} are too small for this encoder; minimum size is {min}x{min}"
            )));
        }
        Ok(Model {
            encoder,
            decoder: Decoder::new(dec_cfg)?,
            image_size,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Fresh Xavier-initialised parameters.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut store, self.image_size, &mut rng);
        self.decoder.init_params(&mut store, &mut rng);
        store
    }

    pub fn memory(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let img = g.constant(image.clone());
        Ok(self.encoder.encode(g, img)?.memory)
    }

    /// Teacher-forced loss of one example: the token-summed cross-entropy
    /// of predicting `ids[1..]` from `ids[..len-1]`, plus `probe_weight`
    /// times the finding-probe loss when the probe is enabled. Returns the
    /// loss node and the number of predicted tokens.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        image: &Tensor,
        ids: &[usize],
        labels: &[FindingLabel],
        probe_weight: f64,
    ) -> Result<(Var, usize)> {
        if ids.len() < 2 {
            return Err(Error::Data("a training sequence needs at least two tokens".into()));
        }
        let memory = self.memory(g, image)?;
        let (inputs, targets) = (&ids[..ids.len() - 1], &ids[1..]);
        let logits = self.decoder.logits(g, inputs, memory)?;
        let mask = vec![true; targets.len()];
        let mut loss = g.cross_entropy(logits, targets, &mask, Reduction::Sum)?;
        if probe_weight > 0.0 && self.decoder.config().finding_probe {
            let probe = self.probe_loss(g, memory, labels)?;
            let probe = g.scale(probe, probe_weight);
            loss = g.add(loss, probe)?;
        }
        Ok((loss, targets.len()))
    }

    /// Mean binary cross-entropy of the finding probe, written as a
    /// two-way softmax per label.
    fn probe_loss(&self, g: &mut Graph, memory: Var, labels: &[FindingLabel]) -> Result<Var> {
        let z = self.decoder.probe_logits(g, memory)?;
        let z = g.transpose(z)?;
        let n = FindingLabel::ALL.len();
        let zeros = g.constant(Tensor::zeros(&[n, 1]));
        let pair = g.concat(&[zeros, z], 1)?;
        let targets: Vec<usize> = FindingLabel::ALL.iter().map(|l| usize::from(labels.contains(l))).collect();
        g.cross_entropy(pair, &targets, &vec![true; n], Reduction::Mean)
    }

    /// Encoder memory of one image, evaluated without dropout.
    pub fn encode_image(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(params, crate::autodiff::Mode::Eval);
        let m = self.memory(&mut g, image)?;
        Ok(g.value(m).clone())
    }

    pub fn scorer<'a>(&'a self, params: &'a ParamStore, memory: Tensor) -> ModelScorer<'a> {
        ModelScorer {
            model: self,
            params,
            memory,
        }
    }

    /// Decodes a report for `image`: greedy when `beam == 1`, beam search
    /// otherwise.
    pub fn generate(&self, params: &ParamStore, image: &Tensor, cfg: &GenerationConfig) -> Result<Hypothesis> {
        if cfg.max_len > self.decoder.config().max_len + 1 {
            return Err(Error::Config(format!(
                "generation max_len {} exceeds decoder capacity {}",
                cfg.max_len,
                self.decoder.config().max_len + 1
            )));
        }
        let memory = self.encode_image(params, image)?;
        let mut scorer = self.scorer(params, memory);
        let tokens = DecodeTokens::default();
        if cfg.beam == 1 {
            greedy_decode(&mut scorer, &tokens, cfg.max_len)
        } else {
            beam_search(&mut scorer, &tokens, cfg.beam, cfg.max_len, cfg.alpha)
        }
    }
}

/// Next-token distribution of the model for a fixed image memory.
pub struct ModelScorer<'a> {
    model: &'a Model,
    params: &'a ParamStore,
    memory: Tensor,
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(self.params, crate::autodiff::Mode::Eval);
        let m = g.constant(self.memory.clone());
        let logits = self.model.decoder.logits(&mut g, prefix, m)?;
        let y = g.value(logits);
        Ok(log_softmax(y.row(prefix.len() - 1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::config::{DecoderConfig, EncoderConfig, Pool};

    fn micro() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                scales: vec![1.0, 0.5],
                channels: 2,
                extract_blocks: 1,
                bifpn_depth: 1,
                pool: Pool::Grid(2),
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                max_len: 12,
                dropout: 0.0,
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut cfg = micro();
        cfg.decoder.finding_probe = true;
        let model = Model::new(&cfg, 9, 12).unwrap();
        let params = model.init_params(3);
        let image = Tensor::new(vec![1, 12, 12], (0..144).map(|i| ((i * 29 % 17) as f64) / 17.0).collect()).unwrap();
        let mut g = Graph::with_params(&params, Mode::Eval);
        let (loss, n) = model
            .example_loss(&mut g, &image, &[1, 5, 6, 7, 2], &[FindingLabel::Subdural], 0.5)
            .unwrap();
        assert_eq!(n, 4);
        let grads = g.backward(loss).unwrap();
        for i in 0..params.len() {
            let gmax = grads.param(i).map_or(0.0, |gr| gr.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            assert!(gmax > 0.0, "no gradient reaches {}", params.name(i));
        }
    }

    #[test]
    fn rejects_small_images_and_long_generation() {
        assert!(Model::new(&micro(), 9, 3).is_err());
        let model = Model::new(&micro(), 9, 12).unwrap();
        let p = model.init_params(1);
        let cfg = GenerationConfig {
            beam: 1,
            alpha: 0.0,
            max_len: 40,
        };
        assert!(model.generate(&p, &Tensor::zeros(&[1, 12, 12]), &cfg).is_err());
    }

    #[test]
    fn beam_one_matches_greedy_on_model() {
        let model = Model::new(&micro(), 9, 12).unwrap();
        for seed in 0..5 {
            let p = model.init_params(seed);
            let img = Tensor::full(&[1, 12, 12], seed as f64 / 5.0);
            let g1 = GenerationConfig { beam: 1, alpha: 0.6, max_len: 10 };
            let h = model.generate(&p, &img, &g1).unwrap();
            let memory = model.encode_image(&p, &img).unwrap();
            let b = beam_search(&mut model.scorer(&p, memory), &DecodeTokens::default(), 1, 10, 0.6).unwrap();
            assert_eq!(h, b);
        }
    }
}
