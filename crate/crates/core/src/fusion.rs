//! Aligns geometric volumes to the semantic patch grid and fuses both into
//! visual tokens of the backbone width.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use svla_numerics::{Graph, ParamId, ParamStore, Real, Var};

use crate::nn::{p, Init, Mlp};
use crate::SvlaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoFeature {
    /// Correlation volume flattened per site over the matched column.
    Vcorr,
    /// Raw concatenation cost volume.
    Vc,
    /// Filtered cost volume.
    VcPrime,
}

impl GeoFeature {
    pub const ALL: [GeoFeature; 3] = [GeoFeature::Vcorr, GeoFeature::Vc, GeoFeature::VcPrime];

    pub fn name(self) -> &'static str {
        match self {
            GeoFeature::Vcorr => "vcorr",
            GeoFeature::Vc => "vc",
            GeoFeature::VcPrime => "vcprime",
        }
    }
}

impl FromStr for GeoFeature {
    type Err = SvlaError;
    fn from_str(s: &str) -> Result<Self, SvlaError> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SvlaError::Config(format!("unknown geometric feature '{s}' (vcorr, vc, vcprime)")))
    }
}

impl fmt::Display for GeoFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Channel,
    Sequence,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Channel => "channel",
            FusionMode::Sequence => "sequence",
        }
    }
}

impl FromStr for FusionMode {
    type Err = SvlaError;
    fn from_str(s: &str) -> Result<Self, SvlaError> {
        match s {
            "channel" => Ok(FusionMode::Channel),
            "sequence" => Ok(FusionMode::Sequence),
            _ => Err(SvlaError::Config(format!("unknown fusion mode '{s}' (channel, sequence)"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Model wiring selected by the ablation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub geo_feature: GeoFeature,
    pub semantics: bool,
    pub fusion: FusionMode,
    /// Feeds the left image as both views, removing stereo evidence.
    pub single_view: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { geo_feature: GeoFeature::VcPrime, semantics: true, fusion: FusionMode::Channel, single_view: false }
    }
}

impl AblationConfig {
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}{}",
            self.geo_feature,
            if self.semantics { "sem" } else { "nosem" },
            self.fusion,
            if self.single_view { "-mono" } else { "" }
        )
    }
}

fn pool_factor(h4: usize, w4: usize, stride: usize) -> Result<usize, SvlaError> {
    if stride == 0 || !stride.is_multiple_of(4) {
        return Err(SvlaError::Shape(format!("patch stride {stride} is not a multiple of 4")));
    }
    let k = stride / 4;
    if !h4.is_multiple_of(k) || !w4.is_multiple_of(k) {
        return Err(SvlaError::Shape(format!("{h4}x{w4} stride-4 grid does not tile into stride {stride}")));
    }
    Ok(k)
}

fn pool_channels_first<T: Real>(g: &mut Graph<T>, x: Var, c: usize, h4: usize, w4: usize, k: usize) -> Var {
    let x = g.reshape(x, &[1, c, h4, w4]);
    let pooled = if k == 1 { x } else { g.mean_pool2d(x, k) };
    let n = (h4 / k) * (w4 / k);
    let flat = g.reshape(pooled, &[c, n]);
    g.transpose(flat)
}

/// `[C, D/4, H/4, W/4]` → `[N, C·D/4]` with the disparity axis folded into
/// channels and sites averaged from stride 4 to `stride`.
pub fn pool_geometric<T: Real>(g: &mut Graph<T>, v: Var, stride: usize) -> Result<Var, SvlaError> {
    let sh = g.shape(v).to_vec();
    if sh.len() != 4 {
        return Err(SvlaError::Shape(format!("volume must be rank 4, got {sh:?}")));
    }
    let k = pool_factor(sh[2], sh[3], stride)?;
    Ok(pool_channels_first(g, v, sh[0] * sh[1], sh[2], sh[3], k))
}

/// `[W/4, H/4, W/4]` correlation (site `x`, row, matched column) → `[N, W/4]`.
pub fn pool_correlation<T: Real>(g: &mut Graph<T>, v: Var, stride: usize) -> Result<Var, SvlaError> {
    let sh = g.shape(v).to_vec();
    if sh.len() != 3 {
        return Err(SvlaError::Shape(format!("correlation volume must be rank 3, got {sh:?}")));
    }
    let k = pool_factor(sh[1], sh[0], stride)?;
    let cf = g.permute(v, &[2, 1, 0]);
    Ok(pool_channels_first(g, cf, sh[2], sh[1], sh[0], k))
}

/// Per-site projection of geometric (and optionally semantic) grids to
/// `d_model` tokens.
#[derive(Debug, Clone)]
pub struct Fuser {
    pub mode: FusionMode,
    pub geo_width: usize,
    pub sem_width: Option<usize>,
    pub d_model: usize,
    channel: Option<Mlp>,
    geo_proj: Option<Mlp>,
    sem_proj: Option<Mlp>,
    modality: Option<(ParamId, ParamId)>,
}

impl Fuser {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        mode: FusionMode,
        geo_width: usize,
        sem_width: Option<usize>,
        d_model: usize,
    ) -> Self {
        let n = |x: &str| format!("{name}.{x}");
        let mut f = Self { mode, geo_width, sem_width, d_model, channel: None, geo_proj: None, sem_proj: None, modality: None };
        match (mode, sem_width) {
            (FusionMode::Sequence, Some(sw)) => {
                f.geo_proj = Some(Mlp::new(init, &n("geo_proj"), geo_width, d_model, d_model));
                f.sem_proj = Some(Mlp::new(init, &n("sem_proj"), sw, d_model, d_model));
                f.modality = Some((init.zeros(&n("geo_modality"), &[d_model]), init.zeros(&n("sem_modality"), &[d_model])));
            }
            _ => {
                let w = geo_width + sem_width.unwrap_or(0);
                f.channel = Some(Mlp::new(init, &n("projector"), w, d_model, d_model));
            }
        }
        f
    }

    /// Tokens per image for a grid of `sites` patches.
    pub fn token_count(&self, sites: usize) -> usize {
        if self.modality.is_some() {
            2 * sites
        } else {
            sites
        }
    }

    /// Sequence mode interleaves tokens as `geo(0), sem(0), geo(1), ...`.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, geo: Var, sem: Option<Var>) -> Result<Var, SvlaError> {
        let gs = g.shape(geo).to_vec();
        if gs.len() != 2 || gs[1] != self.geo_width {
            return Err(SvlaError::Shape(format!("geometric grid {gs:?}, expected [N, {}]", self.geo_width)));
        }
        let sem = match (sem, self.sem_width) {
            (Some(v), Some(w)) => {
                let ss = g.shape(v).to_vec();
                if ss != [gs[0], w] {
                    return Err(SvlaError::Shape(format!("semantic grid {ss:?} does not match geometric grid {gs:?}")));
                }
                Some(v)
            }
            (None, None) => None,
            _ => return Err(SvlaError::Shape("semantic grid presence does not match the fusion wiring".into())),
        };
        if let Some(mlp) = &self.channel {
            let x = match sem {
                Some(v) => g.concat(&[geo, v], 1),
                None => geo,
            };
            return Ok(mlp.forward(g, s, x));
        }
        let (ge, se) = self.modality.expect("sequence wiring");
        let gt = self.geo_proj.as_ref().unwrap().forward(g, s, geo);
        let gemb = p(g, s, ge);
        let gt = g.add(gt, gemb);
        let st = self.sem_proj.as_ref().unwrap().forward(g, s, sem.expect("checked above"));
        let semb = p(g, s, se);
        let st = g.add(st, semb);
        let n = gs[0];
        let gt = g.reshape(gt, &[n, 1, self.d_model]);
        let st = g.reshape(st, &[n, 1, self.d_model]);
        let both = g.concat(&[gt, st], 1);
        Ok(g.reshape(both, &[2 * n, self.d_model]))
    }

    /// Grid `(row, col)` of every emitted token for a `side × side` grid.
    pub fn token_provenance(&self, side: usize) -> Vec<(usize, usize)> {
        let per = self.token_count(1);
        (0..side * side).flat_map(|i| std::iter::repeat_n((i / side, i % side), per)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use svla_numerics::Tensor;

    #[test]
    fn pooled_grid_shape_and_constants() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::full(&[32, 4, 16, 16], 0.7));
        let out = pool_geometric(&mut g, v, 8).unwrap();
        assert_eq!(g.shape(out), &[64, 128]);
        assert!(g.value(out).data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
        assert!(pool_geometric(&mut g, v, 6).is_err());
        assert!(pool_geometric(&mut g, v, 12).is_err());
    }

    #[test]
    fn pooled_grid_matches_block_means() {
        // C=1, D/4=2, 4x4 sites, stride 8 -> 2x2 grid of 2-vectors.
        let vals = Tensor::from_fn(&[1, 2, 4, 4], |i| (i * i % 13) as f64);
        let mut g = Graph::<f64>::new();
        let v = g.constant(vals.clone());
        let out = pool_geometric(&mut g, v, 8).unwrap();
        let o = g.value(out).data().to_vec();
        for (site, (r, c)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for d in 0..2 {
                let mut m = 0.0;
                for y in 2 * r..2 * r + 2 {
                    for x in 2 * c..2 * c + 2 {
                        m += vals.data()[d * 16 + y * 4 + x] / 4.0;
                    }
                }
                assert!((o[site * 2 + d] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_pooling_uses_matched_column_as_channel() {
        let vals = Tensor::from_fn(&[4, 4, 4], |i| i as f64);
        let mut g = Graph::<f64>::new();
        let v = g.constant(vals.clone());
        let out = pool_correlation(&mut g, v, 4).unwrap();
        assert_eq!(g.shape(out), &[16, 4]);
        // Token (row 1, col 2), channel x' = 3 is entry (x=2, y=1, x'=3).
        assert_eq!(g.value(out).data()[(4 + 2) * 4 + 3], vals.data()[2 * 16 + 4 + 3]);
    }

    fn fuser(mode: FusionMode, sem: bool) -> (ParamStore<f64>, Fuser) {
        let mut s = ParamStore::new();
        let mut init = Init::new(&mut s, 9);
        let f = Fuser::new(&mut init, "fuse", mode, 128, sem.then_some(128), 32);
        (s, f)
    }

    #[test]
    fn token_counts_per_mode() {
        for (mode, expect) in [(FusionMode::Channel, 64), (FusionMode::Sequence, 128)] {
            let (s, f) = fuser(mode, true);
            let mut g = Graph::new();
            let geo = g.constant(Tensor::full(&[64, 128], 0.1));
            let sem = g.constant(Tensor::full(&[64, 128], 0.2));
            let t = f.fuse(&mut g, &s, geo, Some(sem)).unwrap();
            assert_eq!(g.shape(t), &[expect, 32]);
            assert_eq!(f.token_provenance(8).len(), expect);
        }
    }

    #[test]
    fn zero_inputs_give_zero_tokens() {
        for mode in [FusionMode::Channel, FusionMode::Sequence] {
            let (s, f) = fuser(mode, true);
            let mut g = Graph::new();
            let z = g.constant(Tensor::zeros(&[64, 128]));
            let t = f.fuse(&mut g, &s, z, Some(z)).unwrap();
            assert!(g.value(t).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn channel_tokens_respond_to_each_modality() {
        let (s, f) = fuser(FusionMode::Channel, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand = |g: &mut Graph<f64>| g.constant(Tensor::from_fn(&[64, 128], |_| rng.random_range(-1.0..1.0)));
        let mut g = Graph::new();
        let (g1, g2, s1, s2) = (rand(&mut g), rand(&mut g), rand(&mut g), rand(&mut g));
        let base = f.fuse(&mut g, &s, g1, Some(s1)).unwrap();
        let geo_changed = f.fuse(&mut g, &s, g2, Some(s1)).unwrap();
        let sem_changed = f.fuse(&mut g, &s, g1, Some(s2)).unwrap();
        assert!(g.value(base).max_abs_diff(g.value(geo_changed)) > 1e-6);
        assert!(g.value(base).max_abs_diff(g.value(sem_changed)) > 1e-6);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let (s, f) = fuser(FusionMode::Channel, true);
        let mut g = Graph::new();
        let geo = g.constant(Tensor::zeros(&[64, 128]));
        let sem = g.constant(Tensor::zeros(&[16, 128]));
        assert!(f.fuse(&mut g, &s, geo, Some(sem)).is_err());
        assert!(f.fuse(&mut g, &s, geo, None).is_err());
    }

    #[test]
    fn flags_parse() {
        assert_eq!("vcprime".parse::<GeoFeature>().unwrap(), GeoFeature::VcPrime);
        assert_eq!("sequence".parse::<FusionMode>().unwrap(), FusionMode::Sequence);
        assert!("vcc".parse::<GeoFeature>().is_err());
    }
}
