//! The full network: image encoder → IAM → point encoder → ADM → decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adm::{Adm, Decoder};
use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::data::{AffordancePair, PointCloudSample, RgbImage};
use crate::encoders::{ImageEncoder, Level, PointEncoder, StageConfig};
use crate::error::{Error, Result};
use crate::iam::Iam;
use crate::nn::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct MifagModel {
    pub image_encoder: ImageEncoder,
    pub point_encoder: PointEncoder,
    pub iam: Iam,
    pub adm: Adm,
    pub decoder: Decoder,
    pub config: TrainConfig,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N × 1` per-point probabilities.
    pub pred: Var,
    /// `1 × 17` affordance logits.
    pub logits: Var,
    /// `snapshots[l][i]`, image features after each layer.
    pub snapshots: Vec<Vec<Var>>,
    pub dictionary: Vec<Var>,
    /// `queries[l][i]`, query tokens after each layer.
    pub queries: Vec<Vec<Var>>,
    /// Every IAM attention matrix.
    pub attention: Vec<Var>,
    /// Per-image `K × M` dictionary attention.
    pub dictionary_attention: Vec<Var>,
    pub swa_weights: Var,
    pub fused: Var,
    pub levels: Vec<Level>,
}

impl MifagModel {
    /// Builds the layout and draws initial parameters from `config.seed_params`.
    pub fn new(config: &TrainConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed_params);
        let mut store = ParamStore::new();
        let image_encoder = ImageEncoder::new(&mut store, &mut rng, &config.image_widths, config.image_dim());
        let iam = Iam::new(
            &mut store,
            &mut rng,
            config.image_dim(),
            config.channels,
            config.tokens,
            config.iam_layers,
            config.heads,
        );
        let stages = config
            .stage_points
            .iter()
            .zip(&config.stage_neighbors)
            .zip(&config.stage_mlp)
            .map(|((&points, &neighbors), mlp)| StageConfig {
                points,
                neighbors,
                mlp: mlp.clone(),
            })
            .collect();
        let point_encoder = PointEncoder::new(&mut store, &mut rng, stages);
        let point_dim = point_encoder.out_dim();
        let adm = Adm::new(
            &mut store,
            &mut rng,
            point_dim,
            config.channels,
            config.attention_dim(),
            config.cosine_scale,
        );
        let mut level_dims = vec![3];
        level_dims.extend(point_encoder.stages.iter().map(|s| s.out_dim()));
        let decoder = Decoder::new(&mut store, &mut rng, &level_dims, point_dim, &config.fp_mlp);
        Ok((
            Self {
                image_encoder,
                point_encoder,
                iam,
                adm,
                decoder,
                config: config.clone(),
            },
            store,
        ))
    }

    /// FPS start index for a cloud: fixed, or drawn from `fps_seed` and the sample id.
    pub fn fps_start(&self, sample_id: &str, n: usize) -> usize {
        match self.config.fps_seed {
            None => self.config.fps_start.min(n.saturating_sub(1)),
            Some(seed) => {
                let h = sample_id
                    .bytes()
                    .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
                ChaCha8Rng::seed_from_u64(seed ^ h).random_range(0..n)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, cloud: &PointCloudSample, images: &[RgbImage]) -> Result<ForwardOutput> {
        if cloud.coords.len() != self.config.num_points {
            return Err(Error::Shape(format!(
                "cloud {} has {} points, model expects {}",
                cloud.sample_id,
                cloud.coords.len(),
                self.config.num_points
            )));
        }
        if images.is_empty() {
            return Err(Error::Shape("no reference images".into()));
        }
        let mut tokens = Vec::with_capacity(images.len());
        for img in images {
            tokens.push(self.image_encoder.forward(g, p, img)?.0);
        }
        let iam = self.iam.run(g, p, &tokens)?;
        let logits = self.iam.classify(g, p, &iam.features);
        let start = self.fps_start(&cloud.sample_id, cloud.coords.len());
        let levels = self.point_encoder.forward(g, p, &cloud.coords, start)?;
        let p_in = levels.last().expect("nonempty pyramid").features;
        let iq = self.adm.iqdca(g, p, p_in, &iam.dictionary)?;
        let (mixed, swa_weights) = self.adm.self_weighted_attention(g, p, &iq.weighted);
        let fused = self.adm.fuse(g, p, &mixed, p_in);
        let (pred, _) = self.decoder.decode(g, p, fused, &levels)?;
        Ok(ForwardOutput {
            pred,
            logits,
            snapshots: iam.snapshots,
            dictionary: iam.dictionary,
            queries: iam.queries,
            attention: iam.scores,
            dictionary_attention: iq.attention,
            swa_weights,
            fused,
            levels,
        })
    }

    pub fn forward_pair(&self, g: &mut Graph, p: &Bound, pair: &AffordancePair) -> Result<ForwardOutput> {
        self.forward(g, p, &pair.cloud, &pair.refs.images)
    }

    /// Per-point probabilities for one pair, without keeping the graph.
    pub fn predict(&self, store: &ParamStore, pair: &AffordancePair) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, store);
        let out = self.forward_pair(&mut g, &p, pair)?;
        Ok(g.value(out.pred).data().to_vec())
    }

    /// Checks that `store` has this model's exact layout.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let (_, fresh) = Self::new(&self.config)?;
        if fresh.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model expects {}",
                store.len(),
                fresh.len()
            )));
        }
        for ((name, a), (other, b)) in fresh.iter().zip(store.iter()) {
            if name != other || a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {other} {:?} does not match expected {name} {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}
