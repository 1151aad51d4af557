//! Backbone, bidirectional neck and the assembled detector.

use std::collections::BTreeMap;

use super::blocks::{BA2C2f, C3k2, NA2C2f};
use super::conv::Conv;
use super::head::{decode_level, Head, LevelOutput};
use super::params::{init_parameters, join, Module, Param, WeightFile};
use super::tensor::concat;
use super::{DecodedDetection, FeatureMap, Level, NetConfig, NetError};
use crate::bev::BevImage;

/// Input spatial dims are padded to a multiple of the coarsest stride.
pub const INPUT_MULTIPLE: usize = 32;

/// Backbone outputs `P1..P5` at strides `2..32`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<FeatureMap>,
}

impl Pyramid {
    /// `P_i` for `i` in `1..=5`.
    pub fn p(&self, i: usize) -> &FeatureMap {
        &self.levels[i - 1]
    }
}

#[derive(Debug, Clone)]
pub enum StageBlock {
    C3k2(C3k2),
    Attn(BA2C2f),
}

impl StageBlock {
    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NetError> {
        match self {
            StageBlock::C3k2(b) => b.forward(x),
            StageBlock::Attn(b) => b.forward(x),
        }
    }
}

/// Five stages, each a stride-2 3x3 conv followed by one block: C3k2 on
/// `P1..P3`, B-A2C2f on `P4, P5`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub widths: [usize; 5],
    pub downs: Vec<Conv>,
    pub blocks: Vec<StageBlock>,
}

impl Backbone {
    pub fn new(cfg: &NetConfig) -> Result<Self, NetError> {
        let widths = [1, 2, 3, 4, 5].map(|i| cfg.stage_width(i));
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let mut c_prev = 3;
        for (i, &w) in widths.iter().enumerate() {
            downs.push(Conv::new(c_prev, w, 3, 2, cfg.activation));
            blocks.push(if i < 3 {
                StageBlock::C3k2(C3k2::new(w, w, cfg))
            } else {
                StageBlock::Attn(BA2C2f::new(w, w, cfg)?)
            });
            c_prev = w;
        }
        Ok(Backbone { widths, downs, blocks })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<Pyramid, NetError> {
        if x.h % INPUT_MULTIPLE != 0 || x.w % INPUT_MULTIPLE != 0 {
            return Err(NetError::ShapeMismatch(format!(
                "backbone input {}x{} is not a multiple of {INPUT_MULTIPLE}",
                x.h, x.w
            )));
        }
        let mut levels = Vec::with_capacity(5);
        let mut cur = x.clone();
        for (down, block) in self.downs.iter().zip(&self.blocks) {
            cur = block.forward(&down.forward(&cur)?)?;
            levels.push(cur.clone());
        }
        Ok(Pyramid { levels })
    }
}

impl Module for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (down, block)) in self.downs.iter_mut().zip(&mut self.blocks).enumerate() {
            let stage = join(prefix, &format!("stage{}", i + 1));
            down.visit(&join(&stage, "down"), f);
            match block {
                StageBlock::C3k2(b) => b.visit(&join(&stage, "block"), f),
                StageBlock::Attn(b) => b.visit(&join(&stage, "block"), f),
            }
        }
    }
}

fn log2(s: usize) -> usize {
    s.trailing_zeros() as usize
}

/// Top-down `B_s = N(Up(B_2s) ⊕ P_s)` from `B_32 = P5` down to the finest
/// head stride, then bottom-up `D_2s = N(down(D_s) ⊕ B_2s)` starting from
/// the finest `B` up to the coarsest requested `D`.
#[derive(Debug, Clone)]
pub struct Neck {
    pub finest: usize,
    pub coarsest_d: Option<usize>,
    /// Keyed by stride.
    pub top_down: BTreeMap<usize, NA2C2f>,
    pub bottom_up: BTreeMap<usize, (Conv, NA2C2f)>,
}

/// One neck output.
#[derive(Debug, Clone)]
pub struct FusedLevel {
    pub level: Level,
    pub map: FeatureMap,
}

impl Neck {
    pub fn new(cfg: &NetConfig, widths: &[usize; 5]) -> Result<Self, NetError> {
        let levels = cfg.levels()?;
        let finest = levels.iter().map(|l| l.stride()).min().ok_or_else(|| {
            NetError::InvalidConfig("head_levels is empty".into())
        })?;
        let coarsest_d = levels.iter().filter_map(|l| if let Level::D(s) = l { Some(*s) } else { None }).max();
        let width = |s: usize| widths[log2(s) - 1];

        let mut top_down = BTreeMap::new();
        let mut s = 16;
        while s >= finest {
            let c_in = width(2 * s) + width(s);
            top_down.insert(s, NA2C2f::new(c_in, width(s), cfg));
            s /= 2;
        }
        let mut bottom_up = BTreeMap::new();
        if let Some(top) = coarsest_d {
            let mut s = 2 * finest;
            while s <= top {
                let c_prev = width(s / 2);
                let down = Conv::new(c_prev, c_prev, 3, 2, cfg.activation);
                bottom_up.insert(s, (down, NA2C2f::new(c_prev + width(s), width(s), cfg)));
                s *= 2;
            }
        }
        Ok(Neck { finest, coarsest_d, top_down, bottom_up })
    }

    /// Every computed `B` and `D` map, keyed by level.
    pub fn forward_all(&self, p: &Pyramid) -> Result<BTreeMap<Level, FeatureMap>, NetError> {
        let mut out = BTreeMap::new();
        out.insert(Level::B(32), p.p(5).clone());
        for (&s, block) in self.top_down.iter().rev() {
            let up = out[&Level::B(2 * s)].upsample2();
            let fused = block.forward(&concat(&[&up, p.p(log2(s))])?)?;
            out.insert(Level::B(s), fused);
        }
        for (&s, (down, block)) in &self.bottom_up {
            let prev = if s / 2 == self.finest { &out[&Level::B(s / 2)] } else { &out[&Level::D(s / 2)] };
            let d = down.forward(prev)?;
            let fused = block.forward(&concat(&[&d, &out[&Level::B(s)]])?)?;
            out.insert(Level::D(s), fused);
        }
        Ok(out)
    }

    pub fn forward(&self, p: &Pyramid, levels: &[Level]) -> Result<Vec<FusedLevel>, NetError> {
        let mut all = self.forward_all(p)?;
        levels
            .iter()
            .map(|l| {
                all.remove(l)
                    .map(|map| FusedLevel { level: *l, map })
                    .ok_or_else(|| NetError::InvalidConfig(format!("level {l} is not produced by the neck")))
            })
            .collect()
    }
}

impl Module for Neck {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (s, b) in self.top_down.iter_mut().rev() {
            b.visit(&join(prefix, &format!("B{s}")), f);
        }
        for (s, (down, b)) in self.bottom_up.iter_mut() {
            down.visit(&join(prefix, &format!("D{s}.down")), f);
            b.visit(&join(prefix, &format!("D{s}.fuse")), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: NetConfig,
    pub levels: Vec<Level>,
    pub backbone: Backbone,
    pub neck: Neck,
    pub heads: Vec<Head>,
}

impl Detector {
    /// Builds the model with all parameters zero.
    pub fn new(cfg: &NetConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let levels = cfg.levels()?;
        let backbone = Backbone::new(cfg)?;
        let neck = Neck::new(cfg, &backbone.widths)?;
        let heads = levels.iter().map(|l| Head::new(backbone.widths[log2(l.stride()) - 1], cfg)).collect();
        Ok(Detector { cfg: cfg.clone(), levels, backbone, neck, heads })
    }

    /// Seeded He-normal parameters. `gain` scales every weight tensor.
    pub fn seeded(cfg: &NetConfig, seed: u64, gain: f32) -> Result<Self, NetError> {
        let mut det = Detector::new(cfg)?;
        init_parameters(&mut det, seed, gain);
        Ok(det)
    }

    pub fn load(cfg: &NetConfig, weights: &WeightFile) -> Result<Self, NetError> {
        let mut det = Detector::new(cfg)?;
        weights.load_into(&mut det)?;
        Ok(det)
    }

    /// BEV image to a padded `3 x H' x W'` tensor in `[0, 1]`.
    pub fn input_tensor(img: &BevImage) -> FeatureMap {
        FeatureMap::from_vec(3, img.height(), img.width(), 1, img.to_chw())
            .expect("image buffer matches its grid")
            .pad_to_multiple(INPUT_MULTIPLE)
    }

    pub fn fused(&self, x: &FeatureMap) -> Result<Vec<FusedLevel>, NetError> {
        let p = self.backbone.forward(x)?;
        self.neck.forward(&p, &self.levels)
    }

    /// Raw per-level predictions.
    pub fn forward(&self, x: &FeatureMap) -> Result<Vec<LevelOutput>, NetError> {
        self.fused(x)?
            .iter()
            .zip(&self.heads)
            .map(|(f, head)| head.forward(f))
            .collect()
    }

    /// Forward pass and decoding of one BEV image. Candidates whose centre
    /// falls in the zero padding are dropped.
    pub fn detect(&self, img: &BevImage) -> Result<Vec<DecodedDetection>, NetError> {
        let outputs = self.forward(&Self::input_tensor(img))?;
        let mut dets = Vec::new();
        for out in &outputs {
            dets.extend(decode_level(out, &self.cfg, img.width(), img.height())?);
        }
        Ok(dets)
    }
}

impl Module for Detector {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.neck.visit(&join(prefix, "neck"), f);
        for (l, h) in self.levels.iter().zip(&mut self.heads) {
            h.visit(&join(prefix, &format!("head.{l}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::parameter_count;

    fn small() -> FeatureMap {
        let mut x = FeatureMap::zeros(3, 64, 96, 1);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 101.0;
        }
        x
    }

    #[test]
    fn backbone_widths_and_strides() {
        let cfg = NetConfig { c_base: 16, ..Default::default() };
        let det = Detector::seeded(&cfg, 1, 0.5).unwrap();
        let p = det.backbone.forward(&small()).unwrap();
        let got: Vec<_> = p.levels.iter().map(|m| (m.c, m.stride, m.h, m.w)).collect();
        assert_eq!(got, vec![(16, 2, 32, 48), (32, 4, 16, 24), (64, 8, 8, 12), (128, 16, 4, 6), (256, 32, 2, 3)]);
        let cfg32 = NetConfig::default();
        assert_eq!(Backbone::new(&cfg32).unwrap().widths, [32, 64, 128, 256, 512]);
        assert_eq!(Backbone::new(&NetConfig { c_base: 64, ..cfg32 }).unwrap().widths, [64, 128, 256, 512, 512]);
    }

    #[test]
    fn fused_strides_full_and_baseline() {
        for (cfg, strides) in [
            (NetConfig { c_base: 16, ..Default::default() }, vec![2, 4, 8, 16]),
            (NetConfig { c_base: 16, ..NetConfig::baseline() }, vec![32, 16, 8]),
        ] {
            let det = Detector::seeded(&cfg, 2, 0.5).unwrap();
            let fused = det.fused(&small()).unwrap();
            assert_eq!(fused.iter().map(|f| f.map.stride).collect::<Vec<_>>(), strides);
            for f in &fused {
                assert_eq!(f.map.c, det.backbone.widths[log2(f.level.stride()) - 1]);
            }
        }
    }

    #[test]
    fn neck_fusion_inputs_are_channel_sums() {
        let cfg = NetConfig { c_base: 16, ..Default::default() };
        let det = Detector::new(&cfg).unwrap();
        let w = det.backbone.widths;
        assert_eq!(det.neck.top_down[&16].cv1.c_in, w[4] + w[3]);
        assert_eq!(det.neck.top_down[&2].cv1.c_in, w[1] + w[0]);
        assert_eq!(det.neck.bottom_up[&4].1.cv1.c_in, w[0] + w[1]);
        assert_eq!(det.neck.bottom_up[&16].1.cv1.c_in, w[2] + w[3]);
        assert!(!det.neck.bottom_up.contains_key(&32));
        let base = Detector::new(&NetConfig { c_base: 16, ..NetConfig::baseline() }).unwrap();
        assert_eq!(base.neck.top_down.keys().copied().collect::<Vec<_>>(), vec![8, 16]);
        assert_eq!(base.neck.bottom_up.keys().copied().collect::<Vec<_>>(), vec![16, 32]);
    }

    #[test]
    fn forward_is_deterministic_and_weights_round_trip() {
        let cfg = NetConfig { c_base: 16, ..Default::default() };
        let mut det = Detector::seeded(&cfg, 3, 0.5).unwrap();
        let x = small();
        let a = det.forward(&x).unwrap();
        let b = det.forward(&x).unwrap();
        assert_eq!(a, b);
        let wf = WeightFile::from_bytes(&WeightFile::from_module(&mut det).to_bytes()).unwrap();
        let loaded = Detector::load(&cfg, &wf).unwrap();
        assert_eq!(loaded.forward(&x).unwrap(), a);
        assert!(Detector::load(&NetConfig { c_base: 32, ..cfg }, &wf).is_err());
    }

    #[test]
    fn rejects_unpadded_input() {
        let det = Detector::new(&NetConfig { c_base: 16, ..Default::default() }).unwrap();
        assert!(det.forward(&FeatureMap::zeros(3, 40, 64, 1)).is_err());
    }

    #[test]
    fn parameter_count_grows_with_width() {
        let mut a = Detector::new(&NetConfig { c_base: 16, ..Default::default() }).unwrap();
        let mut b = Detector::new(&NetConfig::default()).unwrap();
        assert!(parameter_count(&mut a) < parameter_count(&mut b));
    }
}
