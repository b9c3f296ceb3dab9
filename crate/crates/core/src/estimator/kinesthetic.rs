use ndarray::{s, Axis};
use rand::Rng;

use super::{EstimatorConfig, EXPLICIT_DIM, KIN_LATENT_DIM};
use crate::netcore::{
    join, reparameterize, Activation, DenseStackSpec, DiagGaussian, Linear, Mat, Mlp, MlpCache, Module, NetError,
    Param, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::obs::{HISTORY_DIM, PROPRIO_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct KinestheticOutput {
    /// `[v̂ (3) | f̂ (8)]`.
    pub explicit: Mat,
    pub dist: DiagGaussian,
    pub z: Mat,
    /// Normalized next proprio observation.
    pub next_obs: Mat,
}

/// Loss gradients w.r.t. the kinesthetic outputs.
#[derive(Debug, Clone)]
pub struct KinestheticGrads {
    pub explicit: Mat,
    pub mu: Mat,
    pub log_std: Mat,
    pub next_obs: Mat,
}

#[derive(Debug, Clone)]
pub struct KinestheticCache {
    enc: Mat,
    enc_cache: MlpCache,
    log_std_raw: Mat,
    std: Mat,
    eps: Option<Mat>,
    dec_cache: MlpCache,
}

/// History encoder with explicit, latent-distribution and next-observation
/// heads; the decoder sees `[z | encoding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinestheticModule {
    pub encoder: Mlp,
    pub explicit_head: Linear,
    pub mu_head: Linear,
    pub log_std_head: Linear,
    pub decoder: Mlp,
}

impl KinestheticModule {
    pub fn new<R: Rng + ?Sized>(cfg: &EstimatorConfig, rng: &mut R) -> Result<Self, NetError> {
        let encoder = Mlp::new(DenseStackSpec::new(HISTORY_DIM, &cfg.kin_encoder, Activation::Elu), 2f64.sqrt(), rng)?;
        let h = encoder.output_dim();
        let mut widths = cfg.kin_decoder.clone();
        widths.push(PROPRIO_DIM);
        let decoder = Mlp::new(DenseStackSpec::new(KIN_LATENT_DIM + h, &widths, Activation::Identity), 1.0, rng)?;
        Ok(Self {
            encoder,
            explicit_head: Linear::new(h, EXPLICIT_DIM, 0.1, rng),
            mu_head: Linear::new(h, KIN_LATENT_DIM, 0.1, rng),
            log_std_head: Linear::new(h, KIN_LATENT_DIM, 0.1, rng),
            decoder,
        })
    }

    /// `history`: normalized `(B, 450)`. `eps = None` evaluates with `z = μ`.
    pub fn forward(&self, history: &Mat, eps: Option<&Mat>) -> Result<KinestheticOutput, NetError> {
        Ok(self.forward_cached(history, eps)?.0)
    }

    pub fn forward_cached(
        &self,
        history: &Mat,
        eps: Option<&Mat>,
    ) -> Result<(KinestheticOutput, KinestheticCache), NetError> {
        let (enc, enc_cache) = self.encoder.forward_cached(history)?;
        let explicit = self.explicit_head.forward(&enc)?;
        let mu = self.mu_head.forward(&enc)?;
        let log_std_raw = self.log_std_head.forward(&enc)?;
        let dist = DiagGaussian::new(mu, log_std_raw.clone());
        let z = match eps {
            Some(e) => {
                if e.dim() != dist.mean.dim() {
                    return Err(NetError::Shape { what: "latent noise", expected: KIN_LATENT_DIM, got: e.ncols() });
                }
                reparameterize(&dist, e)
            }
            None => dist.mean.clone(),
        };
        let dec_in = ndarray::concatenate![Axis(1), z, enc];
        let (next_obs, dec_cache) = self.decoder.forward_cached(&dec_in)?;
        let std = dist.std();
        let cache = KinestheticCache { enc, enc_cache, log_std_raw, std, eps: eps.cloned(), dec_cache };
        Ok((KinestheticOutput { explicit, dist, z, next_obs }, cache))
    }

    pub fn backward(&mut self, cache: &KinestheticCache, g: &KinestheticGrads) {
        let d_dec_in = self.decoder.backward(&cache.dec_cache, &g.next_obs);
        let d_z = d_dec_in.slice(s![.., ..KIN_LATENT_DIM]).to_owned();
        let mut d_enc = d_dec_in.slice(s![.., KIN_LATENT_DIM..]).to_owned();
        let d_mu = &g.mu + &d_z;
        let mut d_ls = g.log_std.clone();
        if let Some(eps) = &cache.eps {
            d_ls += &(&(&d_z * eps) * &cache.std);
        }
        ndarray::Zip::from(&mut d_ls).and(&cache.log_std_raw).for_each(|d, &raw| {
            if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                *d = 0.0;
            }
        });
        d_enc += &self.explicit_head.backward(&cache.enc, &g.explicit);
        d_enc += &self.mu_head.backward(&cache.enc, &d_mu);
        d_enc += &self.log_std_head.backward(&cache.enc, &d_ls);
        self.encoder.backward(&cache.enc_cache, &d_enc);
    }
}

impl Module for KinestheticModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.explicit_head.visit(&join(prefix, "explicit"), f);
        self.mu_head.visit(&join(prefix, "mu"), f);
        self.log_std_head.visit(&join(prefix, "log_std"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.explicit_head.visit_mut(&join(prefix, "explicit"), f);
        self.mu_head.visit_mut(&join(prefix, "mu"), f);
        self.log_std_head.visit_mut(&join(prefix, "log_std"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}
