//! The full network: backbone, hierarchical fusion, attention module and
//! classification head over one shared parameter store.

use std::path::Path;

use ndarray::{s, Array1, Array3, ArrayD, ArrayView1, ArrayView3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use crate::attention::{Aga, AgaCache, AgaDims, AttentionTrace, StageToggles};
use crate::backbone::{Backbone, BackboneCache, BackboneProfile, ClassificationHead, FeatureMap, Fusion, FusionCache, HeadCache, Stage};
use crate::error::{AgmanError, Result};
use crate::params::{Grads, Init, ParamId, ParamStore};

/// Everything needed to construct the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub profile: BackboneProfile,
    pub input_size: usize,
    pub channels: [usize; 4],
    pub normalization: ([f64; 3], [f64; 3]),
    pub attributes: usize,
    pub embedding_size: usize,
    pub asa_channels: usize,
    pub aca_hidden: usize,
    pub ca_reduction: usize,
    pub toggles: StageToggles,
    pub fusion: bool,
    pub seed: u64,
}

impl ModelSpec {
    /// Profile defaults for `attributes` attributes.
    pub fn for_profile(profile: BackboneProfile, attributes: usize) -> Self {
        let embedding_size = profile.default_embedding_size();
        Self {
            profile,
            input_size: profile.default_input_size(),
            channels: profile.default_channels(),
            normalization: profile.default_normalization(),
            attributes,
            embedding_size,
            asa_channels: profile.default_asa_channels(),
            aca_hidden: embedding_size / 2,
            ca_reduction: profile.default_ca_reduction(),
            toggles: StageToggles::default(),
            fusion: true,
            seed: 0,
        }
    }
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub embedding: Array1<f64>,
    pub logits: Option<Array1<f64>>,
    pub trace: AttentionTrace,
}

pub struct ForwardCache {
    backbone: BackboneCache,
    fusion: Option<FusionCache>,
    head: Option<HeadCache>,
    aga: AgaCache,
}

#[derive(Clone, Debug)]
pub struct AgmanModel {
    spec: ModelSpec,
    store: ParamStore,
    backbone: Backbone,
    fusion: Option<Fusion>,
    head: ClassificationHead,
    aga: Aga,
    w0: ParamId,
    w1: ParamId,
}

impl AgmanModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.attributes == 0 {
            return Err(AgmanError::Config("a model needs at least one attribute".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let (backbone, block4) = Backbone::build(
            spec.profile,
            spec.input_size,
            spec.channels,
            spec.normalization,
            &mut store,
            &mut rng,
        )?;
        let [_, (c2, _, _), (c3, h3, w3), (c4, _, _)] = backbone.stage_dims();
        let fusion = spec.fusion.then(|| Fusion::build(c2, c3, &mut store, &mut rng));
        let head = ClassificationHead::build(block4, c3, c4, spec.attributes, &mut store, &mut rng);
        let dims = AgaDims {
            in_channels: if spec.fusion { 2 * c3 } else { c3 },
            channels: spec.embedding_size,
            asa_channels: spec.asa_channels,
            attributes: spec.attributes,
            height: h3,
            width: w3,
            aca_hidden: spec.aca_hidden,
            ca_reduction: spec.ca_reduction,
        };
        let aga = Aga::build(dims, spec.toggles, &mut store, &mut rng)?;
        let w0 = store.add("loss.w0", &[1], Init::Zeros, true, &mut rng);
        let w1 = store.add("loss.w1", &[1], Init::Zeros, true, &mut rng);
        Ok(Self {
            spec,
            store,
            backbone,
            fusion,
            head,
            aga,
            w0,
            w1,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        self.fusion.as_ref()
    }

    pub fn head(&self) -> &ClassificationHead {
        &self.head
    }

    pub fn aga(&self) -> &Aga {
        &self.aga
    }

    /// Handles of the learned loss weights `(w0, w1)`.
    pub fn loss_weight_ids(&self) -> (ParamId, ParamId) {
        (self.w0, self.w1)
    }

    pub fn loss_weights(&self) -> (f64, f64) {
        (self.store.get(self.w0)[[0]], self.store.get(self.w1)[[0]])
    }

    fn one_hot(&self, attribute: usize) -> Result<Vec<f64>> {
        if attribute >= self.spec.attributes {
            return Err(AgmanError::Argument(format!(
                "attribute index {attribute} out of range for n = {}",
                self.spec.attributes
            )));
        }
        let mut a = vec![0.0; self.spec.attributes];
        a[attribute] = 1.0;
        Ok(a)
    }

    /// Attribute-specific embedding of one image together with its attention maps.
    pub fn embed(&self, image: ArrayView3<f64>, attribute: usize) -> Result<(Array1<f64>, AttentionTrace)> {
        let (out, _) = self.forward(image, attribute, false)?;
        Ok((out.embedding, out.trace))
    }

    /// Backbone, fusion and attention input without the attention stages.
    pub fn attention_input(&self, image: ArrayView3<f64>) -> Result<FeatureMap> {
        let (f2, f3, _) = self.backbone.forward(&self.store, image)?;
        match &self.fusion {
            Some(fusion) => Ok(fusion.fuse_hierarchical(&self.store, &f2, &f3)?.1),
            None => Ok(FeatureMap::new(f3.data, Stage::AttentionInput)),
        }
    }

    pub fn forward(&self, image: ArrayView3<f64>, attribute: usize, with_logits: bool) -> Result<(Forward, ForwardCache)> {
        let a = self.one_hot(attribute)?;
        let (f2, f3, backbone) = self.backbone.forward(&self.store, image)?;
        let (classifier_input, attention_input, fusion) = match &self.fusion {
            Some(fusion) => {
                let (fused, input, cache) = fusion.fuse_hierarchical(&self.store, &f2, &f3)?;
                (fused, input.data, Some(cache))
            }
            None => (f3.clone(), f3.data, None),
        };
        let (embedding, trace, aga) = self.aga.forward(&self.store, attention_input.view(), &a)?;
        let (logits, head) = if with_logits {
            let (l, c) = self.head.forward(&self.store, &classifier_input)?;
            (Some(l), Some(c))
        } else {
            (None, None)
        };
        Ok((
            Forward {
                embedding,
                logits,
                trace,
            },
            ForwardCache {
                backbone,
                fusion,
                head,
                aga,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradients on the
    /// embedding and, when the forward pass produced them, the logits.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_embedding: ArrayView1<f64>,
        d_logits: Option<&Array1<f64>>,
        grads: &mut Grads,
    ) {
        let d_input = self.aga.backward(&self.store, &cache.aga, d_embedding, grads);
        let d_classifier = match (&cache.head, d_logits) {
            (Some(head), Some(dl)) => Some(self.head.backward(&self.store, head, dl, grads)),
            _ => None,
        };
        let [_, (c2, h2, w2), _, _] = self.backbone.stage_dims();
        let (d_f2, d_f3) = match (&self.fusion, &cache.fusion) {
            (Some(fusion), Some(fc)) => {
                let c3 = d_input.dim().0 / 2;
                let mut d_fused = d_input.slice(s![..c3, .., ..]).to_owned();
                if let Some(dc) = d_classifier {
                    d_fused += &dc;
                }
                let (d_f2, d_f3_add) = fusion.backward(&self.store, fc, &d_fused, grads);
                (d_f2, d_f3_add + d_input.slice(s![c3.., .., ..]))
            }
            _ => {
                let mut d_f3 = d_input;
                if let Some(dc) = d_classifier {
                    d_f3 += &dc;
                }
                (Array3::zeros((c2, h2, w2)), d_f3)
            }
        };
        self.backbone.backward(&self.store, &cache.backbone, d_f2, d_f3, grads);
    }

    /// Copies matching tensors from a safetensors file into the store.
    ///
    /// Names are matched as-is and with a `backbone.` prefix, so a torchvision
    /// ResNet-50 `state_dict` exported to safetensors loads directly. With
    /// `strict`, every parameter must be present. Returns the number of
    /// tensors copied.
    pub fn load_safetensors(&mut self, path: &Path, strict: bool) -> Result<usize> {
        let bytes = std::fs::read(path).map_err(|e| AgmanError::io(path, e))?;
        let tensors = SafeTensors::deserialize(&bytes)
            .map_err(|e| AgmanError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut loaded = 0;
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let view = tensors
                .tensor(&name)
                .or_else(|_| tensors.tensor(name.strip_prefix("backbone.").unwrap_or(&name)));
            let view = match view {
                Ok(v) => v,
                Err(_) if !strict => continue,
                Err(_) => {
                    return Err(AgmanError::Checkpoint(format!(
                        "{} is missing tensor `{name}`",
                        path.display()
                    )))
                }
            };
            let data: Vec<f64> = match view.dtype() {
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => {
                    return Err(AgmanError::Checkpoint(format!(
                        "tensor `{name}` has unsupported dtype {other:?}"
                    )))
                }
            };
            let value = ArrayD::from_shape_vec(IxDyn(view.shape()), data)
                .map_err(|e| AgmanError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            self.store
                .set(id, value)
                .map_err(|e| AgmanError::Checkpoint(format!("{}: {e}", path.display())))?;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Writes every parameter as a little-endian f64 tensor.
    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .store
            .ids()
            .map(|id| {
                let t = self.store.get(id);
                let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (self.store.name(id).to_string(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                safetensors::tensor::TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| AgmanError::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = safetensors::serialize(views, &None).map_err(|e| AgmanError::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| AgmanError::io(path, e))
    }
}
