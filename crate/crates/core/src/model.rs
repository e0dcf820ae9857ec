//! Encoder, projection head, optional regulariser and proxies in one store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{Encoder, EncoderOutput, ModelConfig, ProjectionHead};
use crate::error::{Error, Result};
use crate::mars::MarsModule;
use crate::params::{normal, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Inference batches are cut to this many images.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder<T>,
    pub head: ProjectionHead,
    pub mars: Option<MarsModule<T>>,
    pub proxies: Option<ParamId>,
}

pub struct Forward {
    pub z: Var,
    pub encoder: EncoderOutput,
}

impl<T: Scalar> Model<T> {
    /// Deterministic in `(config, seed, num_proxies)`; both precisions start
    /// from the same values.
    pub fn new(config: &ModelConfig, seed: u64, num_proxies: Option<usize>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, config)?;
        let head = ProjectionHead::new(&mut params, &mut rng, config);
        let mars = if config.mars_enabled { Some(MarsModule::new(&mut params, &mut rng, config)?) } else { None };
        let proxies = match num_proxies {
            Some(0) => return Err(Error::Config("proxy losses need at least one class".into())),
            Some(n) => Some(params.add("loss.proxies", normal(&mut rng, &[n, config.embedding_dim], 1.0))),
            None => None,
        };
        Ok(Self { config: config.clone(), params, encoder, head, mars, proxies })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Forward> {
        self.forward_with(g, &self.params, x)
    }

    /// Forward pass with an externally supplied store of identical layout.
    pub fn forward_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Forward> {
        let encoder = self.encoder.forward(g, store, x)?;
        let z = self.head.forward(g, store, encoder.h);
        Ok(Forward { z, encoder })
    }

    /// Inference-mode embeddings of `(N, C, R, R)` images, one row each.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let z = self.inference(images, |g, f| vec![g.value(f.z).clone()])?.remove(0);
        Ok(z.data.chunks(self.config.embedding_dim).map(|r| r.to_vec()).collect())
    }

    /// Inference-mode attention maps `(N, C_i, H_i, W_i)` of every block.
    pub fn attention(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.inference(images, |g, f| f.encoder.attention.iter().map(|&a| g.value(a).clone()).collect())
    }

    /// Runs `read` on chunks of the batch and concatenates its outputs along
    /// the first axis.
    fn inference(
        &self,
        images: &Tensor<T>,
        read: impl Fn(&Graph<T>, &Forward) -> Vec<Tensor<T>>,
    ) -> Result<Vec<Tensor<T>>> {
        if images.ndim() != 4 || images.dim(0) == 0 {
            return Err(Error::Input(format!("expected (N, C, R, R) images, got {:?}", images.shape)));
        }
        let n = images.dim(0);
        let per = images.len() / n;
        let mut outs: Vec<Tensor<T>> = Vec::new();
        for start in (0..n).step_by(EMBED_CHUNK) {
            let m = EMBED_CHUNK.min(n - start);
            let mut shape = images.shape.clone();
            shape[0] = m;
            let chunk = Tensor::from_vec(&shape, images.data[start * per..(start + m) * per].to_vec());
            let mut g = Graph::inference();
            let x = g.constant(chunk);
            let f = self.forward(&mut g, x)?;
            let parts = read(&g, &f);
            if outs.is_empty() {
                outs = parts;
            } else {
                for (o, p) in outs.iter_mut().zip(parts) {
                    o.shape[0] += p.shape[0];
                    o.data.extend_from_slice(&p.data);
                }
            }
        }
        Ok(outs)
    }
}
