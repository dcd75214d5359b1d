use std::sync::Arc;

use super::layers::{
    cross_point_attention, decoder_block, fuse_classic, idw_table, linear, lookup,
    transformer_layer, CpaVars, IdwTable, VarMap,
};
use super::{Backbone, Fusion, Modalities, ModelConfig, SkipSource};
use crate::attention::{glorot, AttentionKind, Neighbors};
use crate::error::{Error, Result};
use crate::fuse_io::ParamSet;
use crate::geom::{fps_from, seeded_rng};
use crate::numcore::{Graph, Tensor, Var};

const STAGES: usize = ModelConfig::STAGES;

/// One normalised, fixed-size block ready for [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInput {
    pub coords: Vec<[f64; 3]>,
    /// Row-major `[n, bands]`.
    pub bands: Vec<f64>,
    /// First farthest-point-sampling centre of stage 1.
    pub fps_start: usize,
}

/// Point sets, neighbourhoods and interpolation tables of every stage.
///
/// Depends only on the coordinates, so both branches share it.
#[derive(Debug, Clone)]
pub struct Pyramid {
    /// `coords[s]` for `s` in `0..=STAGES`; the last entry is the bottleneck.
    pub coords: Vec<Vec<[f64; 3]>>,
    pub neighbors: Vec<Neighbors>,
    /// Rows of `coords[s]` kept for stage `s + 1`, in selection order.
    pub selections: Vec<Arc<[usize]>>,
    /// `up[s]` interpolates from `coords[s + 1]` onto `coords[s]`.
    pub up: Vec<IdwTable>,
}

impl Pyramid {
    pub fn build(coords: &[[f64; 3]], k: usize, fps_start: usize) -> Result<Self> {
        let mut levels = vec![coords.to_vec()];
        let mut neighbors = Vec::with_capacity(STAGES);
        let mut selections = Vec::with_capacity(STAGES);
        let mut up = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let cur = &levels[s];
            let n = cur.len();
            if n < 2 || n % 2 != 0 {
                return Err(Error::invalid(format!(
                    "stage {} has {n} points; need an even count",
                    s + 1
                )));
            }
            neighbors.push(Neighbors::knn(cur, k)?);
            let start = if s == 0 { fps_start } else { 0 };
            let sel: Arc<[usize]> = fps_from(cur, n / 2, start)?.into();
            let next: Vec<[f64; 3]> = sel.iter().map(|&i| cur[i]).collect();
            up.push(idw_table(&next, cur)?);
            selections.push(sel);
            levels.push(next);
        }
        Ok(Pyramid {
            coords: levels,
            neighbors,
            selections,
            up,
        })
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Penultimate per-point features (input to the head).
    pub features: Var,
    /// Per-network logits of a late-fusion model (geometry, spectral).
    pub branch_logits: Option<(Var, Var)>,
}

/// Plain-tensor result of [`Model::predict_block`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub features: Tensor,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    Gamma,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

struct Specs<'a> {
    cfg: &'a ModelConfig,
    out: Vec<(String, Vec<usize>, Init)>,
}

impl Specs<'_> {
    fn linear(&mut self, name: &str, i: usize, o: usize) {
        self.out
            .push((format!("{name}.w"), vec![i, o], Init::Glorot));
        self.out.push((format!("{name}.b"), vec![o], Init::Zeros));
    }

    fn layer(&mut self, p: &str, d: usize) {
        match self.cfg.backbone {
            Backbone::VsaTransformer => {
                for m in ["wq", "wk", "wv"] {
                    self.out
                        .push((format!("{p}.attn.{m}"), vec![d, d], Init::Glorot));
                }
                if self.cfg.pos_encoding && self.cfg.attention == AttentionKind::Vsa {
                    self.out
                        .push((format!("{p}.attn.wp"), vec![3, d], Init::Glorot));
                }
            }
            Backbone::PointwiseMlp => self.linear(&format!("{p}.mlp"), d, d),
            Backbone::EdgeGraph => self.linear(&format!("{p}.edge"), 2 * d, d),
        }
        self.linear(&format!("{p}.out"), d, d);
    }

    fn cpa(&mut self, p: &str, d: usize) {
        let e = self.cfg.cpa_embed.unwrap_or(d);
        for m in ["wq", "wk", "wv"] {
            self.out
                .push((format!("{p}.{m}"), vec![d, e], Init::Glorot));
        }
        self.out.push((format!("{p}.wo"), vec![e, d], Init::Glorot));
        self.out.push((format!("{p}.gamma"), vec![1], Init::Gamma));
    }

    /// Encoder of one branch whose stage outputs are fused to `fused[s]` channels.
    fn encoder(&mut self, p: &str, in_w: usize, fused: &[usize]) {
        let w = self.cfg.widths.clone();
        self.linear(&format!("{p}.embed"), in_w, w[0]);
        for s in 0..STAGES {
            self.layer(&format!("{p}.s{s}.layer"), w[s]);
            self.linear(&format!("{p}.s{s}.down"), fused[s], self.cfg.next_width(s));
        }
    }

    fn decoder(&mut self, p: &str, skips: &[usize]) {
        let w = self.cfg.widths.clone();
        for s in (0..STAGES).rev() {
            let coarse = self.cfg.next_width(s);
            self.linear(&format!("{p}dec.s{s}"), coarse + skips[s], w[s]);
        }
        self.linear(&format!("{p}head"), w[0], self.cfg.num_classes);
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut sp = Specs {
        cfg,
        out: Vec::new(),
    };
    let w = &cfg.widths;
    let b = cfg.bands;
    match cfg.fusion {
        Fusion::Early => {
            let in_w = match cfg.inputs {
                Modalities::Both => 3 + b,
                Modalities::GeometryOnly => 3,
                Modalities::SpectralOnly => b,
            };
            sp.encoder("early", in_w, w);
            sp.decoder("early.", w);
        }
        Fusion::Late => {
            for (p, in_w) in [("geo", 3), ("spec", b)] {
                sp.encoder(p, in_w, w);
                sp.decoder(&format!("{p}."), w);
            }
        }
        mid => {
            let fused: Vec<usize> = if mid == Fusion::MidConcat {
                w.iter().map(|d| 2 * d).collect()
            } else {
                w.clone()
            };
            let skips: Vec<usize> = match cfg.skip {
                SkipSource::Fused => fused.clone(),
                SkipSource::Branches => w.iter().map(|d| 2 * d).collect(),
            };
            sp.encoder("geo", 3, &fused);
            sp.encoder("spec", b, &fused);
            if mid == Fusion::MidCpa {
                for (s, &d) in w.iter().enumerate() {
                    sp.cpa(&format!("cpa.s{s}.l_hs"), d);
                    sp.cpa(&format!("cpa.s{s}.hs_l"), d);
                }
            }
            sp.decoder("", &skips);
        }
    }
    sp.out
}

impl Model {
    /// Fresh parameters. Each tensor draws from its own generator keyed by
    /// `seed` and its name, so variants share the values of shared names.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Glorot => glorot(shape[0], shape[1], &mut seeded_rng(seed ^ fnv1a(&name))),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Gamma => Tensor::scalar(config.gamma_init).reshaped(&[1])?,
            };
            params.insert(name, t);
        }
        Ok(Model { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        for (name, shape, _) in &specs {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        if let Some(extra) = params
            .keys()
            .find(|k| !specs.iter().any(|(n, _, _)| n == *k))
        {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Model { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> VarMap {
        self.params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect()
    }

    fn check_input(&self, input: &BlockInput) -> Result<()> {
        let c = &self.config;
        if input.coords.len() != c.n_input {
            return Err(Error::invalid(format!(
                "model expects {} points, block has {}",
                c.n_input,
                input.coords.len()
            )));
        }
        if input.bands.len() != c.n_input * c.bands {
            return Err(Error::invalid(format!(
                "model expects {} bands per point, block has {} values for {} points",
                c.bands,
                input.bands.len(),
                c.n_input
            )));
        }
        if input.fps_start >= c.n_input {
            return Err(Error::invalid(format!(
                "fps start {} out of range",
                input.fps_start
            )));
        }
        Ok(())
    }

    pub fn pyramid(&self, input: &BlockInput) -> Result<Pyramid> {
        self.check_input(input)?;
        Pyramid::build(&input.coords, self.config.k, input.fps_start)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &VarMap,
        input: &BlockInput,
    ) -> Result<ForwardOutput> {
        let pyr = self.pyramid(input)?;
        self.forward_with(g, vars, input, &pyr)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        vars: &VarMap,
        input: &BlockInput,
        pyr: &Pyramid,
    ) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let c = &self.config;
        let n = c.n_input;
        let xyz = Tensor::new(&[n, 3], input.coords.iter().flatten().copied().collect())?;
        let bands = Tensor::new(&[n, c.bands], input.bands.clone())?;
        let offsets: Vec<Option<Var>> = (0..STAGES)
            .map(|s| {
                (c.pos_encoding
                    && c.attention == AttentionKind::Vsa
                    && c.backbone == Backbone::VsaTransformer)
                    .then(|| g.constant(pyr.neighbors[s].offsets(&pyr.coords[s])))
            })
            .collect();
        let ctx = Ctx {
            cfg: c,
            vars,
            pyr,
            offsets: &offsets,
        };
        match c.fusion {
            Fusion::Early => {
                let x = match c.inputs {
                    Modalities::Both => {
                        let a = g.constant(xyz);
                        let b = g.constant(bands);
                        g.concat_channels(a, b)?
                    }
                    Modalities::GeometryOnly => g.constant(xyz),
                    Modalities::SpectralOnly => g.constant(bands),
                };
                let (bottleneck, skips) = ctx.single_encoder(g, "early", x)?;
                let (logits, features) = ctx.decode(g, "early.", bottleneck, &skips)?;
                Ok(ForwardOutput {
                    logits,
                    features,
                    branch_logits: None,
                })
            }
            Fusion::Late => {
                let xg = g.constant(xyz);
                let xs = g.constant(bands);
                let (bg, sg) = ctx.single_encoder(g, "geo", xg)?;
                let (zg, fg) = ctx.decode(g, "geo.", bg, &sg)?;
                let (bs, ss) = ctx.single_encoder(g, "spec", xs)?;
                let (zs, fs) = ctx.decode(g, "spec.", bs, &ss)?;
                let a = g.scale(zg, c.alpha);
                let b = g.scale(zs, 1.0 - c.alpha);
                let logits = g.add(a, b)?;
                let features = g.concat_channels(fg, fs)?;
                Ok(ForwardOutput {
                    logits,
                    features,
                    branch_logits: Some((zg, zs)),
                })
            }
            _ => {
                let xg = g.constant(xyz);
                let xs = g.constant(bands);
                let (bottleneck, skips) = ctx.mid_encoder(g, xg, xs)?;
                let (logits, features) = ctx.decode(g, "", bottleneck, &skips)?;
                Ok(ForwardOutput {
                    logits,
                    features,
                    branch_logits: None,
                })
            }
        }
    }

    /// Inference without gradient bookkeeping.
    pub fn predict_block(&self, input: &BlockInput) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, input)?;
        Ok(Prediction {
            logits: g.value(out.logits).clone(),
            features: g.value(out.features).clone(),
        })
    }
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    vars: &'a VarMap,
    pyr: &'a Pyramid,
    offsets: &'a [Option<Var>],
}

impl Ctx<'_> {
    fn layer(&self, g: &mut Graph, prefix: &str, s: usize, x: Var) -> Result<Var> {
        transformer_layer(
            g,
            self.vars,
            prefix,
            x,
            &self.pyr.neighbors[s],
            self.offsets[s],
            self.cfg.backbone,
            self.cfg.attention,
            self.cfg.beta,
        )
    }

    fn down(&self, g: &mut Graph, prefix: &str, s: usize, fused: Var) -> Result<Var> {
        let picked = g.gather_rows(fused, self.pyr.selections[s].clone())?;
        let y = linear(g, self.vars, prefix, picked)?;
        Ok(g.relu(y))
    }

    fn single_encoder(&self, g: &mut Graph, p: &str, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut f = linear(g, self.vars, &format!("{p}.embed"), x)?;
        let mut skips = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let h = self.layer(g, &format!("{p}.s{s}.layer"), s, f)?;
            skips.push(h);
            f = self.down(g, &format!("{p}.s{s}.down"), s, h)?;
        }
        Ok((f, skips))
    }

    fn mid_encoder(&self, g: &mut Graph, xg: Var, xs: Var) -> Result<(Var, Vec<Var>)> {
        let mut fl = linear(g, self.vars, "geo.embed", xg)?;
        let mut fh = linear(g, self.vars, "spec.embed", xs)?;
        let mut skips = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            fl = self.layer(g, &format!("geo.s{s}.layer"), s, fl)?;
            fh = self.layer(g, &format!("spec.s{s}.layer"), s, fh)?;
            let fused = match self.cfg.fusion.classic() {
                Some(kind) => fuse_classic(g, kind, fl, fh)?,
                None => {
                    let dense;
                    let nb = if self.cfg.cpa_dense {
                        dense = Neighbors::dense(self.pyr.coords[s].len());
                        &dense
                    } else {
                        &self.pyr.neighbors[s]
                    };
                    let l_hs = CpaVars::lookup(self.vars, &format!("cpa.s{s}.l_hs"))?;
                    let hs_l = CpaVars::lookup(self.vars, &format!("cpa.s{s}.hs_l"))?;
                    let a = cross_point_attention(g, fl, fh, nb, &l_hs)?;
                    let b = cross_point_attention(g, fh, fl, nb, &hs_l)?;
                    g.add(a, b)?
                }
            };
            skips.push(match self.cfg.skip {
                SkipSource::Fused => fused,
                SkipSource::Branches => g.concat_channels(fl, fh)?,
            });
            fl = self.down(g, &format!("geo.s{s}.down"), s, fused)?;
            fh = self.down(g, &format!("spec.s{s}.down"), s, fused)?;
        }
        Ok((g.add(fl, fh)?, skips))
    }

    fn decode(&self, g: &mut Graph, p: &str, bottleneck: Var, skips: &[Var]) -> Result<(Var, Var)> {
        let mut x = bottleneck;
        for s in (0..STAGES).rev() {
            x = decoder_block(
                g,
                self.vars,
                &format!("{p}dec.s{s}"),
                x,
                &self.pyr.up[s],
                skips[s],
            )?;
        }
        let head_w = lookup(self.vars, &format!("{p}head.w"))?;
        debug_assert_eq!(g.shape(head_w)[0], g.shape(x)[1]);
        let logits = linear(g, self.vars, &format!("{p}head"), x)?;
        Ok((logits, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(fusion: Fusion) -> ModelConfig {
        ModelConfig {
            widths: vec![4, 4, 8, 8],
            k: 4,
            n_input: 32,
            num_classes: 3,
            bands: 2,
            fusion,
            ..Default::default()
        }
    }

    fn block(n: usize, b: usize, seed: u64) -> BlockInput {
        let mut rng = seeded_rng(seed);
        BlockInput {
            coords: (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
            bands: (0..n * b).map(|_| rng.random()).collect(),
            fps_start: 0,
        }
    }

    #[test]
    fn every_variant_emits_n_by_c() {
        for fusion in [
            Fusion::Early,
            Fusion::Late,
            Fusion::MidSum,
            Fusion::MidConcat,
            Fusion::MidAverage,
            Fusion::MidMax,
            Fusion::MidCpa,
        ] {
            let m = Model::new(tiny(fusion), 1).unwrap();
            let p = m.predict_block(&block(32, 2, 2)).unwrap();
            assert_eq!(p.logits.shape(), &[32, 3], "{fusion:?}");
        }
    }

    #[test]
    fn pyramid_halves_points() {
        let inp = block(64, 1, 3);
        let pyr = Pyramid::build(&inp.coords, 4, 0).unwrap();
        let sizes: Vec<usize> = pyr.coords.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4]);
    }

    #[test]
    fn wrong_band_count_is_rejected() {
        let m = Model::new(tiny(Fusion::MidCpa), 1).unwrap();
        assert!(m.predict_block(&block(32, 3, 2)).is_err());
        assert!(m.predict_block(&block(16, 2, 2)).is_err());
    }

    #[test]
    fn checkpoint_shapes_are_checked() {
        let m = Model::new(tiny(Fusion::MidCpa), 1).unwrap();
        assert!(Model::from_params(m.config.clone(), m.params.clone()).is_ok());
        assert!(Model::from_params(tiny(Fusion::MidSum), m.params.clone()).is_err());
    }
}
