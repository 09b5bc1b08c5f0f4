//! Parameter layout and the per-sample forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, ModelConfig};
use crate::dataset::{Dataset, Dims, FeatureSequence, Sample};
use crate::encoder::{cross_augment, fuse_and_predict, self_attend, AttentionProj, CaeBlock, EnhancedStreams, FusionHead};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::modality::{Modality, PerModality};
use crate::nn::Linear;
use crate::parallel::Parallelism;
use crate::prompts::{generate_modality_context, generate_sample_context, ContextGenerator, ContextLevel, PromptBank, ReferenceContext};
use crate::retrieval::{build_memory_bank, pool_sample, retrieve_all, MemoryBank, PooledSample, RetrievalMode, RetrievalSet};

/// Handles to every parameter group. Ablated groups are `None`.
#[derive(Clone, Debug)]
pub struct Layout {
    /// Pool-and-project maps into the shared retrieval space.
    pub shared_projection: PerModality<Linear>,
    /// Tokenwise maps of the raw target streams into `d_model`.
    pub input_projection: PerModality<Linear>,
    pub prompts: PromptBank,
    /// Indexed by [`ContextLevel::index`].
    pub generators: [Option<ContextGenerator>; 2],
    pub self_attention: [PerModality<AttentionProj>; 2],
    pub cae: [Option<PerModality<CaeBlock>>; 2],
    pub fusion: FusionHead,
}

/// Positive references per target modality, indexed `[target][retrieved]`.
pub type PositiveFeatures<'a> = PerModality<PerModality<&'a FeatureSequence>>;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    dims: Dims,
    store: ParamStore,
    layout: Layout,
}

// Each parameter group draws from its own ChaCha stream so that removing one
// group leaves every other group's initialization unchanged.
fn group_rng(seed: u64, group: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group);
    rng
}

impl Model {
    pub fn new(config: &ModelConfig, dims: &Dims) -> Result<Self> {
        config.validate()?;
        for (m, s) in dims.iter() {
            if s.len == 0 || s.dim == 0 {
                return Err(Error::Config(format!("{m} dims must be positive")));
            }
        }
        let d = config.d_model;
        let seed = config.seed;
        let mut store = ParamStore::new();

        let mut rng = group_rng(seed, 1);
        let shared_projection = PerModality::from_fn(|m| {
            Linear::new(&mut store, &format!("shared_proj.{}", m.short()), dims[m].dim, config.d_shared, &mut rng)
        });
        let mut rng = group_rng(seed, 2);
        let input_projection = PerModality::from_fn(|m| {
            Linear::new(&mut store, &format!("input_proj.{}", m.short()), dims[m].dim, d, &mut rng)
        });

        let generation_enabled = |level: ContextLevel| match level {
            ContextLevel::Modality => !config.has(Ablation::NoMmg),
            ContextLevel::Sample => !config.has(Ablation::NoSmg),
        };
        let cae_enabled = |level: ContextLevel| match level {
            ContextLevel::Modality => !config.has(Ablation::NoMcae),
            ContextLevel::Sample => !config.has(Ablation::NoScae),
        };

        let levels: Vec<ContextLevel> = ContextLevel::ALL.into_iter().filter(|&l| generation_enabled(l)).collect();
        let mut rng = group_rng(seed, 3);
        let prompts = PromptBank::init(&mut store, config.prompt_len, d, &levels, &mut rng)?;

        let source_dims = dims.map(|_, s| s.dim);
        let generators = ContextLevel::ALL.map(|level| {
            generation_enabled(level).then(|| {
                let mut rng = group_rng(seed, 10 + level.index() as u64);
                ContextGenerator::new(&mut store, level, &source_dims, d, &mut rng)
            })
        });
        let self_attention = ContextLevel::ALL.map(|level| {
            let mut rng = group_rng(seed, 20 + level.index() as u64);
            PerModality::from_fn(|m| AttentionProj::new(&mut store, &format!("self_attn.{level}.{}", m.short()), d, &mut rng))
        });
        let cae = ContextLevel::ALL.map(|level| {
            cae_enabled(level).then(|| {
                let mut rng = group_rng(seed, 30 + level.index() as u64);
                PerModality::from_fn(|m| CaeBlock::new(&mut store, level, m, d, config.ffn_hidden(), &mut rng))
            })
        });
        let mut rng = group_rng(seed, 40);
        let fusion = FusionHead::new(&mut store, d, &mut rng);

        Ok(Model {
            config: config.clone(),
            dims: dims.clone(),
            store,
            layout: Layout {
                shared_projection,
                input_projection,
                prompts,
                generators,
                self_attention,
                cae,
                fusion,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Whether sample-level generation needs retrieved positives.
    pub fn uses_retrieved_positives(&self) -> bool {
        self.layout.generators[ContextLevel::Sample.index()].is_some()
            && self.layout.cae[ContextLevel::Sample.index()].is_some()
    }

    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        if dims != &self.dims {
            return Err(Error::Config(format!(
                "dataset dims {dims:?} differ from the model's {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn pool(&self, sample: &Sample) -> Result<PooledSample> {
        pool_sample(sample, &self.store, &self.layout.shared_projection)
    }

    pub fn build_bank(&self, dataset: &Dataset) -> Result<MemoryBank> {
        self.check_dims(&dataset.dims)?;
        build_memory_bank(dataset, &self.store, &self.layout.shared_projection)
    }

    /// Records one sample's forward pass on `g` and returns the `1 x 1`
    /// prediction. `positives` is required unless the sample-level branch
    /// is ablated.
    pub fn forward_sample(&self, g: &mut Graph<'_>, sample: &Sample, positives: Option<&PositiveFeatures<'_>>) -> Result<Var> {
        let layout = &self.layout;
        let raw = PerModality::from_fn(|m| g.constant(sample.features[m].data.clone()));
        let streams = PerModality::from_fn(|m| layout.input_projection[m].forward(g, raw[m]));

        let mut enhanced = [streams.clone(), streams.clone()];
        for level in ContextLevel::ALL {
            let li = level.index();
            for target in Modality::ALL {
                let attended = self_attend(g, streams[target], &layout.self_attention[li][target]);
                let Some(blocks) = &layout.cae[li] else {
                    enhanced[li][target] = attended;
                    continue;
                };
                let context = match &layout.generators[li] {
                    None => ReferenceContext {
                        level,
                        target,
                        context: attended,
                    },
                    Some(generator) => match level {
                        ContextLevel::Modality => {
                            generate_modality_context(g, target, &raw, &layout.prompts, generator)?
                        }
                        ContextLevel::Sample => {
                            let refs = positives.ok_or_else(|| {
                                Error::Input(format!("sample {} needs retrieved positives", sample.id))
                            })?;
                            let inputs = PerModality::from_fn(|beta| g.constant(refs[target][beta].data.clone()));
                            generate_sample_context(g, target, &inputs, &layout.prompts, generator)?
                        }
                    },
                };
                enhanced[li][target] = cross_augment(g, attended, &context, &blocks[target])?;
            }
        }
        let [modality_level, sample_level] = enhanced;
        let streams = EnhancedStreams {
            modality_level,
            sample_level,
        };
        Ok(fuse_and_predict(g, &streams, &layout.fusion))
    }

    /// Inference-mode predictions for `samples`, retrieving from `bank`.
    pub fn predict(&self, samples: &[Sample], bank: &MemoryBank, parallel: &Parallelism) -> Result<Vec<f64>> {
        let out = self.forward(samples, bank, parallel)?;
        Ok(out.predictions)
    }

    /// Inference-mode forward pass returning predictions plus the retrieval
    /// intermediates.
    pub fn forward(&self, samples: &[Sample], bank: &MemoryBank, parallel: &Parallelism) -> Result<ForwardOutput> {
        let results = parallel.map(samples, |sample| -> Result<(f64, PooledSample, PerModality<RetrievalSet>)> {
            let pooled = self.pool(sample)?;
            let sets = retrieve_all(&pooled, bank.entries(), RetrievalMode::Inference)?;
            let positives = PerModality::from_fn(|alpha| {
                PerModality::from_fn(|beta| &bank.samples()[sets[alpha].positives[beta].pool_index].features[beta])
            });
            let mut g = Graph::new(&self.store);
            let pred = self.forward_sample(&mut g, sample, Some(&positives))?;
            Ok((g.scalar(pred), pooled, sets))
        });
        let mut out = ForwardOutput::default();
        for r in results {
            let (p, pooled, sets) = r?;
            out.predictions.push(p);
            out.pooled.push(pooled);
            out.retrievals.push(sets);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOutput {
    pub predictions: Vec<f64>,
    pub pooled: Vec<PooledSample>,
    pub retrievals: Vec<PerModality<RetrievalSet>>,
}
