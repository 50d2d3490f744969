//! Toy multi-branch detector: three-stage conv backbone, FPN neck with an
//! optional PAFPN bottom-up path, a renormalized connection, and a head
//! shared by all four branches.
//!
//! Levels are P3..P6 with strides 4, 8, 16, 32. P6 is a stride-2 conv on
//! P5 so the complete form has its four levels.

use renorm_core::connections::{self, Addons, AttachPoint, ConnectionForm, ConnectionSpec, VariantPair};
use renorm_core::kdn::{self, FactorSet, ObjectAnnotation};
use renorm_core::{Factors, FeatureCascade, Graph, Strengths, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::params::{identity_1x1, Bound, Init, ParamStore};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const LEVELS: usize = 4;

/// Parameter that every branch loss reaches; the subject of the gradient decomposition.
pub const SHARED_PARAM: &str = "backbone.stem.w";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Stem, C3, C4, C5 widths.
    pub backbone_channels: [usize; 4],
    pub pyramid_channels: usize,
    pub head_channels: usize,
    pub pafpn: bool,
    /// Longer-side thresholds in pixels separating P3|P4|P5|P6.
    pub scale_thresholds: [f64; 3],
    /// Initial foreground probability of the classifier.
    pub prior_prob: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [8, 8, 16, 16],
            pyramid_channels: 8,
            head_channels: 8,
            pafpn: false,
            scale_thresholds: [16.0, 32.0, 64.0],
            prior_prob: 0.01,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(HarnessError::Detector(m.to_string()));
        if self.backbone_channels.contains(&0) || self.pyramid_channels == 0 || self.head_channels == 0 {
            return fail("channel counts must be positive");
        }
        let t = self.scale_thresholds;
        if !(t[0] > 0.0 && t[0] < t[1] && t[1] < t[2] && t[2].is_finite()) {
            return fail("scale_thresholds must be positive and strictly increasing");
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return fail("prior_prob must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Runtime form of a [`ConnectionSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Connection {
    None,
    /// KDN fusion of C3..C5 feeding the finest branch.
    SingleBranch,
    Economical(Strengths),
    Complete([[f64; 4]; 4]),
    Variant(VariantPair, Strengths),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionSetup {
    pub kind: Connection,
    pub addons: Addons,
    pub attach: AttachPoint,
}

impl ConnectionSetup {
    pub fn baseline() -> Self {
        Self {
            kind: Connection::None,
            addons: Addons::default(),
            attach: AttachPoint::TopdownOut,
        }
    }

    pub fn with_kind(kind: Connection) -> Self {
        Self {
            kind,
            ..Self::baseline()
        }
    }

    pub fn from_spec(spec: &ConnectionSpec) -> Result<Self> {
        spec.validate()?;
        let kind = match spec.form {
            ConnectionForm::None => Connection::None,
            ConnectionForm::SingleBranch => Connection::SingleBranch,
            ConnectionForm::Economical => Connection::Economical(Strengths::n21(spec.n)),
            ConnectionForm::Complete => Connection::Complete(spec.matrix4().expect("validated")),
            ConnectionForm::VariantSm => Connection::Variant(VariantPair::SmallMedium, spec.variant_pair_strengths()),
            ConnectionForm::VariantSl => Connection::Variant(VariantPair::SmallLarge, spec.variant_pair_strengths()),
        };
        Ok(Self {
            kind,
            addons: spec.addons,
            attach: spec.attach_point,
        })
    }

    /// Whether the connection has inputs beyond the branch's own level.
    pub fn has_basis_paths(&self) -> bool {
        matches!(self.kind, Connection::Economical(_) | Connection::Variant(..))
    }
}

/// Which gradient paths into the pyramid are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradRoute {
    Full,
    /// Connection inputs are detached: only the original network paths remain.
    DetachConnection,
    /// Every other consumer of the pyramid is detached: only the connection paths remain.
    DetachOriginal,
}

/// How the single-branch connection picks its factors.
#[derive(Debug, Clone, PartialEq)]
pub enum KdnFactors<'a> {
    /// Per-image factors from these annotations; uniform when there are none.
    Train(&'a [ObjectAnnotation]),
    Infer(&'a FactorSet),
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// C3, C4, C5.
    pub backbone: [Var; 3],
    /// Pyramid levels before the connection.
    pub pyramid: Vec<Var>,
    /// What each head branch consumes.
    pub branch_inputs: Vec<Var>,
    /// `1×H×W` logits per level.
    pub cls: Vec<Var>,
    /// `4×H×W` box regressions per level.
    pub boxes: Vec<Var>,
    /// Factors used by a single-branch connection on this pass.
    pub factors: Option<Factors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub config: DetectorConfig,
    pub connection: ConnectionSetup,
    pub image_size: usize,
}

impl ToyDetector {
    pub fn new(config: DetectorConfig, connection: ConnectionSetup, image_size: usize) -> Result<Self> {
        config.validate()?;
        if image_size == 0 || !image_size.is_multiple_of(STRIDES[LEVELS - 1]) {
            return Err(HarnessError::Detector(format!(
                "image size {image_size} must be a positive multiple of {}",
                STRIDES[LEVELS - 1]
            )));
        }
        if connection.attach == AttachPoint::BottomupOut && !config.pafpn {
            return Err(HarnessError::Detector("attach point bottomup_out needs pafpn".into()));
        }
        Ok(Self {
            config,
            connection,
            image_size,
        })
    }

    /// `(H, W)` of each level.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        STRIDES
            .iter()
            .map(|s| (self.image_size / s, self.image_size / s))
            .collect()
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.config;
        let [c0, c3, c4, c5] = cfg.backbone_channels;
        let (p, h) = (cfg.pyramid_channels, cfg.head_channels);
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let mut conv = |store: &mut ParamStore, name: &str, o: usize, i: usize, k: usize| {
            store.insert(format!("{name}.w"), init.conv(o, i, k));
            store.insert(format!("{name}.b"), Tensor::zeros(&[o]));
        };
        conv(&mut store, "backbone.stem", c0, 1, 3);
        conv(&mut store, "backbone.c3", c3, c0, 3);
        conv(&mut store, "backbone.c4", c4, c3, 3);
        conv(&mut store, "backbone.c5", c5, c4, 3);
        conv(&mut store, "neck.lat3", p, c3, 1);
        conv(&mut store, "neck.lat4", p, c4, 1);
        conv(&mut store, "neck.lat5", p, c5, 1);
        conv(&mut store, "neck.p6", p, p, 3);
        if cfg.pafpn {
            conv(&mut store, "neck.down3", p, p, 3);
            conv(&mut store, "neck.down4", p, p, 3);
            conv(&mut store, "neck.down5", p, p, 3);
        }
        conv(&mut store, "head.conv", h, p, 3);
        store.insert("head.cls.w", init.normal(&[1, h, 1, 1], 0.01));
        let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        store.insert("head.cls.b", Tensor::full(&[1], prior));
        store.insert("head.box.w", init.normal(&[4, h, 1, 1], 0.01));
        store.insert("head.box.b", Tensor::zeros(&[4]));
        if self.connection.kind == Connection::SingleBranch {
            for (name, c) in [("kdn.proj3.w", c3), ("kdn.proj4.w", c4), ("kdn.proj5.w", c5)] {
                store.insert(name, init.orthogonal_1x1(p, c));
            }
        }
        if self.connection.addons.projection_1x1 {
            store.insert("rc.proj.w", identity_1x1(p));
        }
        store
    }

    fn conv(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = b.var(&format!("{name}.w"))?;
        let bias = b.var(&format!("{name}.b"))?;
        Ok(g.conv2d(x, w, Some(bias), stride, pad)?)
    }

    fn conv_relu(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let y = Self::conv(g, b, name, x, 2, 1)?;
        Ok(g.relu(y)?)
    }

    /// `N3 = X3`, `N(l+1) = X(l+1) + down_l(N_l)`.
    fn bottom_up(g: &mut Graph, b: &Bound, levels: &[Var]) -> Result<Vec<Var>> {
        let mut out = vec![levels[0]];
        for (i, name) in ["neck.down3", "neck.down4", "neck.down5"].iter().enumerate() {
            let d = Self::conv(g, b, name, out[i], 2, 1)?;
            out.push(g.add(levels[i + 1], d)?);
        }
        Ok(out)
    }

    /// Builds the full graph for one `1×S×S` image.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Bound,
        image: &Tensor,
        kdn_factors: Option<KdnFactors<'_>>,
        route: GradRoute,
    ) -> Result<ForwardPass> {
        let s = self.image_size;
        if image.shape() != [1, s, s] {
            return Err(HarnessError::Detector(format!(
                "expected a 1×{s}×{s} image, got {:?}",
                image.shape()
            )));
        }
        let x = g.constant(image.clone());
        let stem = Self::conv_relu(g, params, "backbone.stem", x)?;
        let c3 = Self::conv_relu(g, params, "backbone.c3", stem)?;
        let c4 = Self::conv_relu(g, params, "backbone.c4", c3)?;
        let c5 = Self::conv_relu(g, params, "backbone.c5", c4)?;

        let l3 = Self::conv(g, params, "neck.lat3", c3, 1, 0)?;
        let l4 = Self::conv(g, params, "neck.lat4", c4, 1, 0)?;
        let t5 = Self::conv(g, params, "neck.lat5", c5, 1, 0)?;
        let (h4, w4) = g.value(l4).spatial()?;
        let up = g.bilinear_resize(t5, h4, w4)?;
        let t4 = g.add(l4, up)?;
        let (h3, w3) = g.value(l3).spatial()?;
        let up = g.bilinear_resize(t4, h3, w3)?;
        let t3 = g.add(l3, up)?;
        let p6 = Self::conv(g, params, "neck.p6", t5, 2, 1)?;
        let mut pyramid = vec![t3, t4, t5, p6];

        let pafpn = self.config.pafpn;
        let attach_bottom = self.connection.attach == AttachPoint::BottomupOut;
        if pafpn && attach_bottom {
            pyramid = Self::bottom_up(g, params, &pyramid)?;
        }

        let detach_all = |g: &mut Graph, v: &[Var]| v.iter().map(|&l| g.detach(l)).collect::<Vec<_>>();
        let rc_in = match route {
            GradRoute::DetachConnection => detach_all(g, &pyramid),
            _ => pyramid.clone(),
        };
        let own = match route {
            GradRoute::DetachOriginal => detach_all(g, &pyramid),
            _ => pyramid.clone(),
        };
        if route != GradRoute::Full && !self.connection.has_basis_paths() {
            return Err(HarnessError::Decomposition(format!("{:?}", self.connection.kind)));
        }

        let addons = self.connection.addons;
        let projection = if addons.projection_1x1 {
            Some(params.var("rc.proj.w")?)
        } else {
            None
        };
        let mut factors = None;
        let mut branch_inputs = match &self.connection.kind {
            Connection::None => own.clone(),
            Connection::Economical(c) => {
                let p3 = connections::economical(g, &rc_in[..3], c)?;
                let p3 = connections::apply_addons(g, p3, &addons, projection)?;
                vec![p3, own[1], own[2], own[3]]
            }
            Connection::Variant(pair, c) => {
                let p3 = connections::variant(g, &rc_in[..3], *pair, c)?;
                let p3 = connections::apply_addons(g, p3, &addons, projection)?;
                vec![p3, own[1], own[2], own[3]]
            }
            Connection::Complete(m) => connections::complete(g, &own, m)?
                .into_iter()
                .map(|b| connections::apply_addons(g, b, &addons, projection))
                .collect::<Result<_, _>>()?,
            Connection::SingleBranch => {
                let proj = [
                    params.var("kdn.proj3.w")?,
                    params.var("kdn.proj4.w")?,
                    params.var("kdn.proj5.w")?,
                ];
                let feats = [c3, c4, c5];
                let fused = match kdn_factors {
                    Some(KdnFactors::Infer(fs)) => kdn::fuse_infer(g, &feats, Some(&proj), fs)?,
                    Some(KdnFactors::Train(objects)) => {
                        let cascade = FeatureCascade::new(
                            feats.iter().map(|&v| g.value(v).clone()).collect(),
                            STRIDES[..3].to_vec(),
                        )?;
                        let lambda = kdn::image_factors(&cascade, objects)?;
                        let used = lambda.clone().unwrap_or_else(|| Factors::uniform(3));
                        factors = lambda;
                        kdn::fuse_train(g, &feats, Some(&proj), &used)?
                    }
                    None => {
                        return Err(HarnessError::Detector(
                            "single-branch connection needs training annotations or a factor set".into(),
                        ))
                    }
                };
                let fused = connections::apply_addons(g, fused, &addons, projection)?;
                vec![fused, own[1], own[2], own[3]]
            }
        };
        if pafpn && !attach_bottom {
            branch_inputs = Self::bottom_up(g, params, &branch_inputs)?;
        }

        let mut cls = Vec::with_capacity(LEVELS);
        let mut boxes = Vec::with_capacity(LEVELS);
        for &b in &branch_inputs {
            let h = Self::conv(g, params, "head.conv", b, 1, 1)?;
            let h = g.relu(h)?;
            cls.push(Self::conv(g, params, "head.cls", h, 1, 0)?);
            boxes.push(Self::conv(g, params, "head.box", h, 1, 0)?);
        }
        Ok(ForwardPass {
            backbone: [c3, c4, c5],
            pyramid,
            branch_inputs,
            cls,
            boxes,
            factors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(s: usize) -> Tensor {
        Tensor::from_fn(&[1, s, s], |i| ((i * 37) % 11) as f64 / 11.0).unwrap()
    }

    #[test]
    fn shapes_per_level() {
        let det = ToyDetector::new(DetectorConfig::default(), ConnectionSetup::baseline(), 96).unwrap();
        let params = det.init_params(0);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let out = det.forward(&mut g, &b, &image(96), None, GradRoute::Full).unwrap();
        for (l, (h, w)) in det.grids().into_iter().enumerate() {
            assert_eq!(g.value(out.cls[l]).shape(), &[1, h, w]);
            assert_eq!(g.value(out.boxes[l]).shape(), &[4, h, w]);
            assert_eq!(g.value(out.branch_inputs[l]).shape(), &[8, h, w]);
        }
    }

    #[test]
    fn economical_passes_coarse_levels_through() {
        let conn = ConnectionSetup::with_kind(Connection::Economical(Strengths::n21(4.0)));
        let det = ToyDetector::new(DetectorConfig::default(), conn, 64).unwrap();
        let params = det.init_params(1);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let out = det.forward(&mut g, &b, &image(64), None, GradRoute::Full).unwrap();
        for l in 1..4 {
            assert_eq!(out.branch_inputs[l], out.pyramid[l]);
        }
        assert_ne!(out.branch_inputs[0], out.pyramid[0]);
    }

    #[test]
    fn config_errors() {
        let cfg = DetectorConfig {
            scale_thresholds: [32.0, 16.0, 64.0],
            ..DetectorConfig::default()
        };
        assert!(ToyDetector::new(cfg, ConnectionSetup::baseline(), 96).is_err());
        assert!(ToyDetector::new(DetectorConfig::default(), ConnectionSetup::baseline(), 100).is_err());
        let conn = ConnectionSetup {
            attach: AttachPoint::BottomupOut,
            ..ConnectionSetup::baseline()
        };
        assert!(ToyDetector::new(DetectorConfig::default(), conn, 96).is_err());
    }

    #[test]
    fn decomposition_needs_basis_paths() {
        let det = ToyDetector::new(DetectorConfig::default(), ConnectionSetup::baseline(), 64).unwrap();
        let params = det.init_params(0);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let err = det.forward(&mut g, &b, &image(64), None, GradRoute::DetachOriginal);
        assert!(matches!(err, Err(HarnessError::Decomposition(_))));
    }

    #[test]
    fn single_branch_requires_factors() {
        let det = ToyDetector::new(
            DetectorConfig::default(),
            ConnectionSetup::with_kind(Connection::SingleBranch),
            64,
        )
        .unwrap();
        let params = det.init_params(0);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        assert!(det.forward(&mut g, &b, &image(64), None, GradRoute::Full).is_err());
        let out = det
            .forward(&mut g, &b, &image(64), Some(KdnFactors::Train(&[])), GradRoute::Full)
            .unwrap();
        assert!(out.factors.is_none());
    }
}
