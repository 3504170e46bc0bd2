//! A constant-resolution conv segmentation net whose parameters are split
//! into a feature extractor and a mask predictor at a movable layer
//! boundary.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Extractor,
    Predictor,
}

/// Which parameters a selection covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleSelector {
    Extractor,
    Predictor,
    All,
}

impl RoleSelector {
    pub fn matches(self, role: ParamRole) -> bool {
        match self {
            RoleSelector::All => true,
            RoleSelector::Extractor => role == ParamRole::Extractor,
            RoleSelector::Predictor => role == ParamRole::Predictor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub layer_index: usize,
    pub tensor: Tensor,
}

/// Named parameters, ordered by layer, each tagged with its role.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    boundary: usize,
}

fn role_for(layer_index: usize, boundary: usize) -> ParamRole {
    if layer_index < boundary {
        ParamRole::Extractor
    } else {
        ParamRole::Predictor
    }
}

impl ParamStore {
    /// Build a store from `(name, layer_index, tensor)` triples. Roles follow
    /// from `boundary`.
    pub fn from_layers(
        layers: impl IntoIterator<Item = (String, usize, Tensor)>,
        boundary: usize,
    ) -> Result<Self> {
        let mut entries: Vec<ParamEntry> = Vec::new();
        for (name, layer_index, tensor) in layers {
            if entries.iter().any(|e| e.name == name) {
                return Err(Error::Structure(format!("duplicate parameter name `{name}`")));
            }
            if entries.last().is_some_and(|e| e.layer_index > layer_index) {
                return Err(Error::Structure(format!(
                    "parameter `{name}` breaks layer ordering"
                )));
            }
            entries.push(ParamEntry {
                name,
                role: role_for(layer_index, boundary),
                layer_index,
                tensor,
            });
        }
        let store = Self { entries, boundary };
        if boundary > store.layer_count() {
            return Err(Error::Config(format!(
                "partition boundary {boundary} exceeds layer count {}",
                store.layer_count()
            )));
        }
        Ok(store)
    }

    pub fn layer_count(&self) -> usize {
        self.entries.last().map_or(0, |e| e.layer_index + 1)
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    /// Move the extractor/predictor boundary. Only role tags change.
    pub fn set_boundary(&mut self, boundary: usize) -> Result<()> {
        if boundary > self.layer_count() {
            return Err(Error::Config(format!(
                "partition boundary {boundary} exceeds layer count {}",
                self.layer_count()
            )));
        }
        self.boundary = boundary;
        for e in &mut self.entries {
            e.role = role_for(e.layer_index, boundary);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// Entries whose role matches `selector`.
    pub fn subset(&self, selector: RoleSelector) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(move |e| selector.matches(e.role))
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// FNV-1a over names and raw float bits of the selected entries.
    pub fn checksum(&self, selector: RoleSelector) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in self.subset(selector) {
            eat(e.name.as_bytes());
            for v in e.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Same names, shapes and roles in the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structure(format!(
                "stores hold {} and {} parameters",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() || a.role != b.role {
                return Err(Error::Structure(format!(
                    "`{}` {:?} {:?} vs `{}` {:?} {:?}",
                    a.name,
                    a.tensor.shape(),
                    a.role,
                    b.name,
                    b.tensor.shape(),
                    b.role
                )));
            }
        }
        Ok(())
    }

    /// Bind every parameter on `tape`, returning one var per entry.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.param(&e.name, e.tensor.clone()))
            .collect::<Result<Vec<_>>>()?;
        let layers = self
            .layer_ranges()
            .into_iter()
            .map(|r| {
                let idx: Vec<usize> = r.collect();
                match idx.as_slice() {
                    [w, b] => Ok((vars[*w], vars[*b])),
                    _ => Err(Error::Structure(
                        "each layer needs exactly a weight and a bias".into(),
                    )),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { layers })
    }

    fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out: Vec<std::ops::Range<usize>> = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            match out.last_mut() {
                Some(r) if self.entries[r.start].layer_index == e.layer_index => r.end = i + 1,
                _ => out.push(i..i + 1),
            }
        }
        out
    }
}

/// Deep copy; the clone shares nothing with the original.
pub fn clone_params(params: &ParamStore) -> ParamStore {
    params.clone()
}

/// Parameters of one store bound as tape variables, one (kernel, bias)
/// pair per layer.
#[derive(Clone, Debug)]
pub struct BoundParams {
    layers: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Conv blocks with ReLU, then a linear head.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        let mut x = images;
        for (i, &(kernel, bias)) in self.layers.iter().enumerate() {
            x = tape.conv2d(x, kernel, bias)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Layers with index below this are extractor. `None` means the number
    /// of conv blocks, i.e. only the 1×1 head predicts.
    pub partition_boundary: Option<usize>,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden: vec![16, 32, 32],
            classes: 4,
            partition_boundary: None,
        }
    }
}

impl SegNetConfig {
    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn boundary(&self) -> usize {
        self.partition_boundary.unwrap_or(self.hidden.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.in_channels == 0 || self.hidden.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.boundary() > self.layer_count() {
            return Err(Error::Config(format!(
                "partition boundary {} exceeds layer count {}",
                self.boundary(),
                self.layer_count()
            )));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform weights, zero biases. Deterministic in `seed`.
pub fn init_model(config: &SegNetConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut cin = config.in_channels;
    let widths = config.hidden.iter().copied().chain([config.classes]);
    for (i, cout) in widths.enumerate() {
        let is_head = i == config.hidden.len();
        let k = if is_head { 1 } else { 3 };
        let fan_in = (cin * k * k) as f32;
        // He-uniform for ReLU blocks, LeCun-uniform for the linear head.
        let bound = if is_head {
            (3.0 / fan_in).sqrt()
        } else {
            (6.0 / fan_in).sqrt()
        };
        let weights = (0..cout * cin * k * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let prefix = if is_head {
            "head".to_string()
        } else {
            format!("block{i}")
        };
        layers.push((
            format!("{prefix}.weight"),
            i,
            Tensor::new(vec![cout, cin, k, k], weights)?,
        ));
        layers.push((format!("{prefix}.bias"), i, Tensor::zeros(vec![cout])));
        cin = cout;
    }
    ParamStore::from_layers(layers, config.boundary())
}

/// Logits `[B, K, H, W]` for a batch of images.
pub fn forward(params: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let x = tape.input(images.clone());
    let logits = bound.forward(&mut tape, x)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegNetConfig {
        SegNetConfig {
            in_channels: 3,
            hidden: vec![4, 5],
            classes: 3,
            partition_boundary: None,
        }
    }

    fn images(batch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * 3 * 6 * 6).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![batch, 3, 6, 6], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&tiny(), 7).unwrap();
        assert_eq!(a, init_model(&tiny(), 7).unwrap());
        assert_ne!(a, init_model(&tiny(), 8).unwrap());
    }

    #[test]
    fn default_architecture_parameter_count() {
        let p = init_model(&SegNetConfig::default(), 0).unwrap();
        // 3→16, 16→32, 32→32 (3×3) and a 32→4 1×1 head, each with biases.
        assert_eq!(p.param_count(), 448 + 4640 + 9248 + 132);
    }

    #[test]
    fn default_predictor_is_the_head_only() {
        let p = init_model(&SegNetConfig::default(), 0).unwrap();
        let predictor: Vec<&str> = p.subset(RoleSelector::Predictor).map(|e| e.name.as_str()).collect();
        assert_eq!(predictor, ["head.weight", "head.bias"]);
    }

    #[test]
    fn boundary_one_puts_only_first_block_in_extractor() {
        let cfg = SegNetConfig {
            partition_boundary: Some(1),
            ..SegNetConfig::default()
        };
        let p = init_model(&cfg, 0).unwrap();
        let extractor: Vec<&str> = p.subset(RoleSelector::Extractor).map(|e| e.name.as_str()).collect();
        assert_eq!(extractor, ["block0.weight", "block0.bias"]);
    }

    #[test]
    fn boundary_past_layer_count_rejected() {
        let cfg = SegNetConfig {
            partition_boundary: Some(5),
            ..SegNetConfig::default()
        };
        assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn subsets_partition_the_store() {
        let p = init_model(&tiny(), 1).unwrap();
        assert_eq!(p.subset(RoleSelector::All).count(), p.len());
        let e = p.subset(RoleSelector::Extractor).count();
        let g = p.subset(RoleSelector::Predictor).count();
        assert_eq!(e + g, p.len());
    }

    #[test]
    fn forward_shape_and_zero_image_symmetry() {
        let p = init_model(&tiny(), 2).unwrap();
        let out = forward(&p, &Tensor::zeros(vec![2, 3, 6, 6])).unwrap();
        assert_eq!(out.shape(), &[2, 3, 6, 6]);
        // Zero input and zero biases give zero logits everywhere.
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_equals_separate() {
        let p = init_model(&tiny(), 3).unwrap();
        let batch = images(3, 9);
        let together = forward(&p, &batch).unwrap();
        for i in 0..3 {
            let alone = forward(&p, &batch.batch_item(i).unwrap()).unwrap();
            let slice = together.batch_item(i).unwrap();
            for (a, b) in alone.data().iter().zip(slice.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clone_is_isolated() {
        let original = init_model(&tiny(), 4).unwrap();
        let mut copy = clone_params(&original);
        assert_eq!(copy, original);
        copy.get_mut("head.bias").unwrap().tensor.data_mut()[0] = 42.0;
        assert_eq!(original.get("head.bias").unwrap().tensor.data()[0], 0.0);
        assert_eq!(
            copy.iter().map(|e| e.role).collect::<Vec<_>>(),
            original.iter().map(|e| e.role).collect::<Vec<_>>()
        );
    }

    #[test]
    fn boundary_change_retags_only() {
        let mut p = init_model(&tiny(), 5).unwrap();
        let x = images(2, 1);
        let before = forward(&p, &x).unwrap();
        p.set_boundary(1).unwrap();
        assert_eq!(p.get("block1.weight").unwrap().role, ParamRole::Predictor);
        assert_eq!(before, forward(&p, &x).unwrap());
    }

    #[test]
    fn incompatible_stores_detected() {
        let a = init_model(&tiny(), 0).unwrap();
        let b = init_model(&SegNetConfig::default(), 0).unwrap();
        assert!(matches!(a.check_compatible(&b), Err(Error::Structure(_))));
    }
}
