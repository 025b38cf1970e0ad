//! Scoring heads: one discovery head and `B` localization heads over an
//! optional shared rectified hidden layer.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw per-proposal class scores, `num_proposals x num_classes`.
pub type Scores = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub feature_dim: usize,
    /// Width of the hidden layer; zero means no hidden layer.
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub num_branches: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 || self.num_branches == 0 {
            return Err(Error::InvalidConfig(format!(
                "dims must be positive (feature_dim={}, num_classes={}, num_branches={})",
                self.feature_dim, self.num_classes, self.num_branches
            )));
        }
        Ok(())
    }

    fn head_input(&self) -> usize {
        if self.hidden_dim > 0 {
            self.hidden_dim
        } else {
            self.feature_dim
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Discovery,
    Localization(usize),
}

/// Affine layer `y = x W + b` with `W` stored `inputs x outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlatLayer", into = "FlatLayer")]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn shape(&self) -> (usize, usize) {
        self.weight.dim()
    }
}

#[derive(Serialize, Deserialize)]
struct FlatLayer {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<FlatLayer> for Layer {
    type Error = String;

    fn try_from(f: FlatLayer) -> std::result::Result<Self, String> {
        if f.bias.len() != f.cols {
            return Err(format!("bias length {} != cols {}", f.bias.len(), f.cols));
        }
        let weight = Array2::from_shape_vec((f.rows, f.cols), f.weight).map_err(|e| format!("weight: {e}"))?;
        Ok(Layer {
            weight,
            bias: Array1::from(f.bias),
        })
    }
}

impl From<Layer> for FlatLayer {
    fn from(l: Layer) -> Self {
        let (rows, cols) = l.weight.dim();
        FlatLayer {
            rows,
            cols,
            weight: l.weight.iter().copied().collect(),
            bias: l.bias.to_vec(),
        }
    }
}

/// Model parameters. Gradients and momentum buffers reuse this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub hidden: Option<Layer>,
    pub discovery: Layer,
    pub localization: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let inp = dims.head_input();
        Ok(Self {
            dims,
            hidden: (dims.hidden_dim > 0).then(|| Layer::zeros(dims.feature_dim, dims.hidden_dim)),
            discovery: Layer::zeros(inp, dims.num_classes),
            localization: (0..dims.num_branches)
                .map(|_| Layer::zeros(inp, dims.num_classes))
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims).expect("dims already validated")
    }

    /// Structural and finiteness checks, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = self.dims;
        let inp = d.head_input();
        let check = |name: &str, l: &Layer, shape: (usize, usize)| -> Result<()> {
            if l.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    l.shape()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("{name}: non-finite entry")));
            }
            Ok(())
        };
        match (&self.hidden, d.hidden_dim) {
            (None, 0) => {}
            (Some(h), hd) if hd > 0 => check("hidden", h, (d.feature_dim, hd))?,
            _ => return Err(Error::Shape("hidden layer presence disagrees with dims".into())),
        }
        check("discovery", &self.discovery, (inp, d.num_classes))?;
        if self.localization.len() != d.num_branches {
            return Err(Error::Shape(format!(
                "expected {} localization heads, found {}",
                d.num_branches,
                self.localization.len()
            )));
        }
        for (k, l) in self.localization.iter().enumerate() {
            check(&format!("localization[{k}]"), l, (inp, d.num_classes))?;
        }
        Ok(())
    }

    fn head(&self, head: Head) -> Result<&Layer> {
        match head {
            Head::Discovery => Ok(&self.discovery),
            Head::Localization(k) => self.localization.get(k).ok_or_else(|| {
                Error::Shape(format!(
                    "localization head {k} out of range ({} heads)",
                    self.localization.len()
                ))
            }),
        }
    }

    fn head_mut(&mut self, head: Head) -> &mut Layer {
        match head {
            Head::Discovery => &mut self.discovery,
            Head::Localization(k) => &mut self.localization[k],
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.discovery))
            .chain(self.localization.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.discovery))
            .chain(self.localization.iter_mut())
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape("parameter sets have different dims".into()));
        }
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Weights i.i.d. uniform in `[-scale, scale]`, biases zero.
pub fn init_params(dims: Dims, seed: u64, scale: f64) -> Result<ModelParams> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "init scale {scale} must be finite and >= 0"
        )));
    }
    let mut params = ModelParams::zeros(dims)?;
    if scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in params.layers_mut() {
            layer.weight.mapv_inplace(|_| rng.random_range(-scale..=scale));
        }
    }
    Ok(params)
}

/// Intermediate values of a forward pass kept for backpropagation.
struct Activations {
    /// Pre-rectification hidden values, when a hidden layer exists.
    pre: Option<Array2<f64>>,
    /// Input to the head (rectified hidden output or the raw features).
    head_input: Array2<f64>,
}

fn activations(params: &ModelParams, features: &Array2<f64>) -> Result<Activations> {
    if features.ncols() != params.dims.feature_dim {
        return Err(Error::Shape(format!(
            "feature width {} != feature_dim {}",
            features.ncols(),
            params.dims.feature_dim
        )));
    }
    Ok(match &params.hidden {
        Some(h) => {
            let pre = h.apply(features);
            let head_input = pre.mapv(|v| v.max(0.0));
            Activations {
                pre: Some(pre),
                head_input,
            }
        }
        None => Activations {
            pre: None,
            head_input: features.to_owned(),
        },
    })
}

pub fn forward(params: &ModelParams, features: &Array2<f64>, head: Head) -> Result<Scores> {
    let layer = params.head(head)?;
    let act = activations(params, features)?;
    Ok(layer.apply(&act.head_input))
}

/// Scores for the discovery head and every localization head in one pass.
pub fn forward_all(params: &ModelParams, features: &Array2<f64>) -> Result<(Scores, Vec<Scores>)> {
    let act = activations(params, features)?;
    let disc = params.discovery.apply(&act.head_input);
    let loc = params.localization.iter().map(|l| l.apply(&act.head_input)).collect();
    Ok((disc, loc))
}

#[derive(Debug, Clone)]
pub struct HeadGradients {
    /// Gradients shaped like the model; untouched heads are zero.
    pub params: ModelParams,
    /// Gradient with respect to the input features.
    pub features: Array2<f64>,
}

/// Exact gradients of `sum(upstream * forward(head))`.
pub fn backward_head(
    params: &ModelParams,
    features: &Array2<f64>,
    head: Head,
    upstream: &Array2<f64>,
) -> Result<HeadGradients> {
    backward_head_with(params, features, head, upstream, true)
}

/// As [`backward_head`]; `into_hidden = false` stops the gradient at the
/// head input so the hidden layer receives nothing from this head.
pub fn backward_head_with(
    params: &ModelParams,
    features: &Array2<f64>,
    head: Head,
    upstream: &Array2<f64>,
    into_hidden: bool,
) -> Result<HeadGradients> {
    let layer = params.head(head)?;
    let act = activations(params, features)?;
    let expected = (features.nrows(), params.dims.num_classes);
    if upstream.dim() != expected {
        return Err(Error::Shape(format!(
            "upstream gradient {:?}, expected {expected:?}",
            upstream.dim()
        )));
    }
    let mut grads = params.zeros_like();
    {
        let g = grads.head_mut(head);
        g.weight = act.head_input.t().dot(upstream);
        g.bias = upstream.sum_axis(Axis(0));
    }
    let d_head_input = upstream.dot(&layer.weight.t());
    let d_features = match (&params.hidden, act.pre) {
        (Some(h), Some(pre)) => {
            let mut d_pre = d_head_input;
            d_pre.zip_mut_with(&pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            if into_hidden {
                let gh = grads.hidden.as_mut().expect("hidden present");
                gh.weight = features.t().dot(&d_pre);
                gh.bias = d_pre.sum_axis(Axis(0));
            }
            d_pre.dot(&h.weight.t())
        }
        _ => d_head_input,
    };
    Ok(HeadGradients {
        params: grads,
        features: d_features,
    })
}
