//! Four-block plain CNN with MixStyle insertion slots after each block.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mixstyle::{
    CoinSharing, MixStyleConfig, ShuffleSharing, apply_mixstyle, draw_coin, draw_mixing,
};
use crate::scalar::Scalar;
use crate::semisup::Classifier;
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 4;
const KERNEL: usize = 3;
/// Fixed input standardization applied before the first block.
const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub widths: [usize; NUM_BLOCKS],
    pub classes: usize,
}

impl BackboneSpec {
    pub fn new(in_channels: usize, widths: [usize; NUM_BLOCKS], classes: usize) -> Result<Self> {
        if in_channels == 0 || widths.contains(&0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if classes < 2 {
            return Err(Error::invalid(format!("K ≥ 2 required, got K={classes}")));
        }
        Ok(Self {
            in_channels,
            widths,
            classes,
        })
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for &w in &self.widths {
            shapes.push(vec![w, cin, KERNEL, KERNEL]);
            shapes.push(vec![w]);
            shapes.push(vec![w, w, KERNEL, KERNEL]);
            shapes.push(vec![w]);
            cin = w;
        }
        shapes.push(vec![cin, self.classes]);
        shapes.push(vec![self.classes]);
        shapes
    }
}

/// Backbone weights. Blocks are conv-relu-conv-relu-avgpool(2), the head is
/// global average pooling followed by a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<S> {
    pub spec: BackboneSpec,
    pub params: Vec<Tensor<S>>,
}

impl<S: Scalar> Backbone<S> {
    /// He-normal convolutions, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: BackboneSpec, rng: &mut R) -> Self {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| match shape.len() {
                1 => Tensor::zeros(&shape),
                _ => {
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let gain = if shape.len() == 4 { 2.0 } else { 1.0 };
                    let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
                    Tensor::from_fn(&shape, |_| S::lit(dist.sample(rng)))
                }
            })
            .collect();
        Self { spec, params }
    }

    /// Registers the weights as trainable leaves of `g`.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Runs the blocks, calling `hook(g, block_index, output)` after each
    /// block; the hook's returned node feeds the next block.
    pub fn forward_with(
        &self,
        g: &mut Graph<S>,
        vars: &[Var],
        input: Var,
        mut hook: impl FnMut(&mut Graph<S>, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let c = g.value(input).dims4()?.1;
        let gain = g.constant(Tensor::full(&[c], S::lit(1.0 / INPUT_STD)));
        let shift = g.constant(Tensor::full(&[c], S::lit(-INPUT_MEAN / INPUT_STD)));
        let mut x = g.scale_shift(input, gain, shift)?;
        for b in 0..NUM_BLOCKS {
            let p = &vars[b * 4..b * 4 + 4];
            x = g.conv2d(x, p[0], p[1], 1, 1)?;
            x = g.relu(x);
            x = g.conv2d(x, p[2], p[3], 1, 1)?;
            x = g.relu(x);
            let (_, _, h, w) = g.value(x).dims4()?;
            if h >= 2 && w >= 2 {
                x = g.avg_pool2d(x, 2)?;
            }
            x = hook(g, b, x)?;
        }
        let pooled = g.global_avg_pool(x)?;
        g.linear(pooled, vars[4 * NUM_BLOCKS], vars[4 * NUM_BLOCKS + 1])
    }

    /// Plain forward pass without any MixStyle module.
    pub fn forward(&self, g: &mut Graph<S>, vars: &[Var], input: Var) -> Result<Var> {
        self.forward_with(g, vars, input, |_, _, x| Ok(x))
    }

    /// Forward pass returning the logits and every block output.
    pub fn forward_features(&self, g: &mut Graph<S>, vars: &[Var], input: Var) -> Result<(Var, Vec<Var>)> {
        let mut feats = Vec::with_capacity(NUM_BLOCKS);
        let logits = self.forward_with(g, vars, input, |_, _, x| {
            feats.push(x);
            Ok(x)
        })?;
        Ok((logits, feats))
    }

    /// Logits of a batch without recording gradients.
    pub fn predict(&self, batch: Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(batch);
        let logits = self.forward(&mut g, &vars, x)?;
        Ok(g.value(logits).clone())
    }

    pub fn save(&self, path: &Path, config_text: &str) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(b"MXCK")?;
            let header = [
                1u32,
                self.spec.in_channels as u32,
                self.spec.widths[0] as u32,
                self.spec.widths[1] as u32,
                self.spec.widths[2] as u32,
                self.spec.widths[3] as u32,
                self.spec.classes as u32,
                config_text.len() as u32,
            ];
            for v in header {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(config_text.as_bytes())?;
            for p in &self.params {
                for v in p.data() {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; returns the weights and the embedded config text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != b"MXCK" {
            return Err(bad("bad magic"));
        }
        let mut header = [0u32; 8];
        for v in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            *v = u32::from_le_bytes(b);
        }
        if header[0] != 1 {
            return Err(bad("unsupported checkpoint version"));
        }
        let spec = BackboneSpec::new(
            header[1] as usize,
            [header[2] as usize, header[3] as usize, header[4] as usize, header[5] as usize],
            header[6] as usize,
        )?;
        let mut text = vec![0u8; header[7] as usize];
        r.read_exact(&mut text).map_err(|_| bad("truncated"))?;
        let text = String::from_utf8(text).map_err(|_| bad("config is not utf-8"))?;
        let mut params = Vec::new();
        for shape in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated weights"))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect();
            params.push(Tensor::from_vec(&shape, data)?);
        }
        Ok((Self { spec, params }, text))
    }
}

/// A backbone bound to a graph, with MixStyle modules at the configured
/// insertion points. `train = false` bypasses every module and draws no
/// randomness.
pub struct MixStyleNet<'a, S, R: ?Sized> {
    pub backbone: &'a Backbone<S>,
    pub vars: Vec<Var>,
    /// `None` runs the plain backbone (baseline).
    pub mixstyle: Option<&'a MixStyleConfig>,
    /// Group id per batch position, used by the cross-domain half swap.
    pub groups: Vec<usize>,
    pub rng: &'a mut R,
}

impl<'a, S: Scalar, R: Rng + ?Sized> MixStyleNet<'a, S, R> {
    pub fn new(
        g: &mut Graph<S>,
        backbone: &'a Backbone<S>,
        mixstyle: Option<&'a MixStyleConfig>,
        rng: &'a mut R,
    ) -> Self {
        Self {
            vars: backbone.bind(g),
            backbone,
            mixstyle,
            groups: Vec::new(),
            rng,
        }
    }

    /// Training or evaluation forward pass.
    pub fn forward(&mut self, g: &mut Graph<S>, input: Var, train: bool) -> Result<Var> {
        let cfg = match self.mixstyle {
            Some(cfg) if train && cfg.train_mode && !cfg.insertion_points.is_empty() => cfg,
            _ => return self.backbone.forward(g, &self.vars, input),
        };
        let batch = g.value(input).dims4()?.0;
        let groups = if self.groups.len() == batch {
            self.groups.clone()
        } else {
            vec![0; batch]
        };
        let eps = S::lit(cfg.epsilon);
        let rng = &mut *self.rng;
        let mut shared_coin: Option<bool> = None;
        let mut fixed_perm: Option<Vec<usize>> = None;
        self.backbone.forward_with(g, &self.vars, input, |g, block, x| {
            if !cfg.insertion_points.contains(block) {
                return Ok(x);
            }
            let active = match (cfg.coin, shared_coin) {
                (CoinSharing::Shared, Some(c)) => c,
                _ => {
                    let c = draw_coin(cfg, rng);
                    shared_coin = Some(c);
                    c
                }
            };
            if !active {
                return Ok(x);
            }
            let (mut perm, lambda) = draw_mixing::<S, R>(cfg, &groups, rng)?;
            if cfg.shuffle == ShuffleSharing::Fixed {
                match &fixed_perm {
                    Some(p) => perm = p.clone(),
                    None => fixed_perm = Some(perm.clone()),
                }
            }
            apply_mixstyle(g, x, &perm, &lambda, eps)
        })
    }
}

impl<S: Scalar, R: Rng + ?Sized> Classifier<S> for MixStyleNet<'_, S, R> {
    fn logits(&mut self, g: &mut Graph<S>, input: Var, train: bool) -> Result<Var> {
        self.forward(g, input, train)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny() -> Backbone<f32> {
        let spec = BackboneSpec::new(3, [4, 4, 6, 8], 5).unwrap();
        Backbone::init(spec, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn output_shape_and_param_count() {
        let net = tiny();
        assert_eq!(net.params.len(), 18);
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 7) as f32 / 7.0);
        let logits = net.predict(x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert!(logits.is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        net.save(&path, "[train]\nseed = 1\n").unwrap();
        let (back, text) = Backbone::<f32>::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(text, "[train]\nseed = 1\n");
        assert!(Backbone::<f32>::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn spec_rejects_single_class() {
        assert!(BackboneSpec::new(3, [4, 4, 4, 4], 1).is_err());
    }
}
