//! Convolutional and attention building blocks.
//!
//! Each fusing block exposes a `forward_parts` variant returning the tensor
//! fed to its final 1x1 fusion conv, so channel arithmetic and residual
//! identities can be checked on the pre-fusion stream.

use super::conv::Conv;
use super::params::{join, Module, Param};
use super::tensor::{concat, sgemm, softmax_in_place};
use super::{Activation, FeatureMap, NetConfig, NetError};

/// Receives `(area, head, m, probs)` where `probs` is the row-major `m x m`
/// softmax matrix of one head over one area.
pub type AttentionProbe<'a> = &'a mut dyn FnMut(usize, usize, usize, &[f32]);

/// `U(z) = z + conv3(conv3(z))`.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: Conv,
    pub cv2: Conv,
}

impl Bottleneck {
    pub fn new(c: usize, act: Activation) -> Self {
        Bottleneck { cv1: Conv::new(c, c, 3, 1, act), cv2: Conv::new(c, c, 3, 1, act) }
    }

    pub fn forward(&self, z: &FeatureMap) -> Result<FeatureMap, NetError> {
        z.add(&self.cv2.forward(&self.cv1.forward(z)?)?)
    }
}

impl Module for Bottleneck {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }
}

/// Expand to `2 C_h`, split into `Z1, Z2`, fuse `Z1 ⊕ Z2 ⊕ U(Z2)`.
#[derive(Debug, Clone)]
pub struct C3k2 {
    pub hidden: usize,
    pub cv1: Conv,
    pub m: Bottleneck,
    pub cv2: Conv,
}

impl C3k2 {
    pub fn new(c_in: usize, c_out: usize, cfg: &NetConfig) -> Self {
        let ch = cfg.hidden(c_out);
        let act = cfg.activation;
        let block = C3k2 {
            hidden: ch,
            cv1: Conv::new(c_in, 2 * ch, 1, 1, act),
            m: Bottleneck::new(ch, act),
            cv2: Conv::new(3 * ch, c_out, 1, 1, act),
        };
        assert_eq!(block.cv2.c_in, 3 * block.hidden);
        block
    }

    pub fn forward_parts(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap), NetError> {
        let z = self.cv1.forward(x)?.split(2)?;
        let u = self.m.forward(&z[1])?;
        let cat = concat(&[&z[0], &z[1], &u])?;
        Ok((self.cv2.forward(&cat)?, cat))
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NetError> {
        Ok(self.forward_parts(x)?.0)
    }
}

impl Module for C3k2 {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.m.visit(&join(prefix, "m"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }
}

/// `T + A(T) + FFN(T + A(T))` with multi-head attention restricted to
/// horizontal strips of rows.
#[derive(Debug, Clone)]
pub struct ABlock {
    pub c: usize,
    pub n_heads: usize,
    pub n_areas: usize,
    pub qkv: Conv,
    pub proj: Conv,
    pub mlp1: Conv,
    pub mlp2: Conv,
}

impl ABlock {
    pub fn new(c: usize, cfg: &NetConfig) -> Result<Self, NetError> {
        if c == 0 || c % cfg.n_heads != 0 {
            return Err(NetError::InvalidConfig(format!("{c} channels over {} heads", cfg.n_heads)));
        }
        Ok(ABlock {
            c,
            n_heads: cfg.n_heads,
            n_areas: cfg.n_areas,
            qkv: Conv::new(c, 3 * c, 1, 1, Activation::Identity),
            proj: Conv::new(c, c, 1, 1, Activation::Identity),
            mlp1: Conv::new(c, cfg.ffn_ratio * c, 1, 1, cfg.activation),
            mlp2: Conv::new(cfg.ffn_ratio * c, c, 1, 1, Activation::Identity),
        })
    }

    /// Row range `[r0, r1)` of area `a`. Areas differ by at most one row
    /// when the height is not a multiple of the area count.
    pub fn area_rows(&self, h: usize, a: usize) -> (usize, usize) {
        (a * h / self.n_areas, (a + 1) * h / self.n_areas)
    }

    /// Area attention followed by the output projection.
    pub fn attention(&self, t: &FeatureMap, mut probe: Option<AttentionProbe>) -> Result<FeatureMap, NetError> {
        let qkv = self.qkv.forward(t)?;
        let plane = t.plane();
        let d = self.c / self.n_heads;
        let scale = 1.0 / (d as f32).sqrt();
        let (q, rest) = qkv.data.split_at(self.c * plane);
        let (k, v) = rest.split_at(self.c * plane);
        let mut out = FeatureMap::zeros(self.c, t.h, t.w, t.stride);
        let mut scores = Vec::new();
        for a in 0..self.n_areas {
            let (r0, r1) = self.area_rows(t.h, a);
            let m = (r1 - r0) * t.w;
            if m == 0 {
                continue;
            }
            let o = r0 * t.w;
            scores.clear();
            scores.resize(m * m, 0.0);
            for head in 0..self.n_heads {
                let base = head * d * plane + o;
                // scores = Q^T K over this area
                sgemm((m, d, m), &q[base..], (1, plane), &k[base..], (plane, 1), 0.0, &mut scores, (m, 1));
                for row in scores.chunks_exact_mut(m) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                if let Some(p) = probe.as_mut() {
                    p(a, head, m, &scores);
                }
                // out = V P^T
                sgemm((d, m, m), &v[base..], (plane, 1), &scores, (1, m), 0.0, &mut out.data[base..], (plane, 1));
            }
        }
        self.proj.forward(&out)
    }

    pub fn forward_probed(&self, t: &FeatureMap, probe: Option<AttentionProbe>) -> Result<FeatureMap, NetError> {
        if t.c != self.c {
            return Err(NetError::ShapeMismatch(format!("ABlock expects {} channels, got {}", self.c, t.c)));
        }
        let ta = t.add(&self.attention(t, probe)?)?;
        let ffn = self.mlp2.forward(&self.mlp1.forward(&ta)?)?;
        ta.add(&ffn)
    }

    pub fn forward(&self, t: &FeatureMap) -> Result<FeatureMap, NetError> {
        self.forward_probed(t, None)
    }
}

impl Module for ABlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.mlp1.visit(&join(prefix, "mlp1"), f);
        self.mlp2.visit(&join(prefix, "mlp2"), f);
    }
}

/// Attention variant: `cv1` to `C_h`, three stages of two stacked ABlocks,
/// fuse `A0 ⊕ A1 ⊕ A2 ⊕ A3`.
#[derive(Debug, Clone)]
pub struct BA2C2f {
    pub hidden: usize,
    pub cv1: Conv,
    pub stages: Vec<[ABlock; 2]>,
    pub cv2: Conv,
}

impl BA2C2f {
    pub const STAGES: usize = 3;

    pub fn new(c_in: usize, c_out: usize, cfg: &NetConfig) -> Result<Self, NetError> {
        let ch = cfg.hidden(c_out);
        let stages = (0..Self::STAGES)
            .map(|_| Ok([ABlock::new(ch, cfg)?, ABlock::new(ch, cfg)?]))
            .collect::<Result<Vec<_>, NetError>>()?;
        let block = BA2C2f {
            hidden: ch,
            cv1: Conv::new(c_in, ch, 1, 1, cfg.activation),
            stages,
            cv2: Conv::new((Self::STAGES + 1) * ch, c_out, 1, 1, cfg.activation),
        };
        assert_eq!(block.cv2.c_in, 4 * block.hidden);
        Ok(block)
    }

    /// Output, the fusion input, and the stage outputs `A0..A3`.
    pub fn forward_parts(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap, Vec<FeatureMap>), NetError> {
        let mut a = vec![self.cv1.forward(x)?];
        for [b1, b2] in &self.stages {
            let prev = a.last().expect("non-empty");
            a.push(b2.forward(&b1.forward(prev)?)?);
        }
        let refs: Vec<&FeatureMap> = a.iter().collect();
        let cat = concat(&refs)?;
        Ok((self.cv2.forward(&cat)?, cat, a))
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NetError> {
        Ok(self.forward_parts(x)?.0)
    }
}

impl Module for BA2C2f {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        for (i, [b1, b2]) in self.stages.iter_mut().enumerate() {
            b1.visit(&join(prefix, &format!("stage{i}.0")), f);
            b2.visit(&join(prefix, &format!("stage{i}.1")), f);
        }
        self.cv2.visit(&join(prefix, "cv2"), f);
    }
}

/// Neck variant: `cv1` to `C_h`, fuse `A0 ⊕ U1(A0) ⊕ U2(U1(A0))`.
#[derive(Debug, Clone)]
pub struct NA2C2f {
    pub hidden: usize,
    pub cv1: Conv,
    pub m1: Bottleneck,
    pub m2: Bottleneck,
    pub cv2: Conv,
}

impl NA2C2f {
    pub fn new(c_in: usize, c_out: usize, cfg: &NetConfig) -> Self {
        let ch = cfg.hidden(c_out);
        let act = cfg.activation;
        let block = NA2C2f {
            hidden: ch,
            cv1: Conv::new(c_in, ch, 1, 1, act),
            m1: Bottleneck::new(ch, act),
            m2: Bottleneck::new(ch, act),
            cv2: Conv::new(3 * ch, c_out, 1, 1, act),
        };
        assert_eq!(block.cv2.c_in, 3 * block.hidden);
        block
    }

    pub fn forward_parts(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap), NetError> {
        let a0 = self.cv1.forward(x)?;
        let a1 = self.m1.forward(&a0)?;
        let a2 = self.m2.forward(&a1)?;
        let cat = concat(&[&a0, &a1, &a2])?;
        Ok((self.cv2.forward(&cat)?, cat))
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NetError> {
        Ok(self.forward_parts(x)?.0)
    }
}

impl Module for NA2C2f {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.m1.visit(&join(prefix, "m1"), f);
        self.m2.visit(&join(prefix, "m2"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }
}
