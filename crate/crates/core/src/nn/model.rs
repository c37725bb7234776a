use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrumentation::{DownsamplePointId, PointPath};
use crate::nn::network::{BatchNorm2d, Conv2d, Layer, Linear, MaxPool2d, Network, Param, Residual};
use crate::nn::ops::{ConvGeometry, PoolGeometry};
use crate::nn::Real;

/// Architecture families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Fully connected, one hidden layer.
    #[serde(rename = "fc-1h")]
    Fc1h,
    /// Fully connected, two hidden layers.
    #[serde(rename = "fc-2h")]
    Fc2h,
    /// Residual network, constant width across stages.
    #[serde(rename = "resnet-c")]
    ResnetC,
    /// Residual network, width doubling at each downsampling stage.
    #[serde(rename = "resnet-w")]
    ResnetW,
    /// Constant-width residual network grown in depth.
    #[serde(rename = "resnet-d")]
    ResnetD,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Fc1h,
        Family::Fc2h,
        Family::ResnetC,
        Family::ResnetW,
        Family::ResnetD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Fc1h => "fc-1h",
            Family::Fc2h => "fc-2h",
            Family::ResnetC => "resnet-c",
            Family::ResnetW => "resnet-w",
            Family::ResnetD => "resnet-d",
        }
    }

    pub fn is_resnet(self) -> bool {
        matches!(self, Family::ResnetC | Family::ResnetW | Family::ResnetD)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.as_str() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown architecture `{s}` (expected one of fc-1h, fc-2h, resnet-c, resnet-w, resnet-d)"
            ))
        })
    }
}

fn one() -> usize {
    1
}

/// Architecture description.
///
/// For residual families `base_width` is the channel count of the first
/// stage and `depth` the number of residual blocks per stage; for fully
/// connected families `base_width` is the hidden-layer width and `depth` is
/// unused.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub base_width: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub input_size: usize,
    #[serde(default = "one")]
    pub input_channels: usize,
    /// Stride of the stem convolution (1 for small inputs).
    #[serde(default = "one")]
    pub stem_stride: usize,
    /// Stride-2 3x3 max pool after the stem.
    #[serde(default)]
    pub stem_pool: bool,
}

impl ModelSpec {
    pub fn resnet(family: Family, base_width: usize, depth: usize, n_classes: usize, input_size: usize) -> Self {
        Self {
            family,
            base_width,
            depth,
            n_classes,
            input_size,
            input_channels: 1,
            stem_stride: 1,
            stem_pool: false,
        }
    }

    pub fn fc(family: Family, hidden: usize, n_classes: usize, input_size: usize) -> Self {
        Self {
            family,
            base_width: hidden,
            depth: 1,
            n_classes,
            input_size,
            input_channels: 1,
            stem_stride: 1,
            stem_pool: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::invalid("width must be positive"));
        }
        if self.n_classes == 0 || self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::invalid(
                "classes, input size and input channels must be positive",
            ));
        }
        if self.family.is_resnet() {
            if self.depth == 0 {
                return Err(Error::invalid("residual networks need at least one block per stage"));
            }
            if self.stem_stride == 0 {
                return Err(Error::invalid("stem stride must be positive"));
            }
            let reduction = self.stem_stride * if self.stem_pool { 2 } else { 1 } * 4;
            if self.input_size % reduction != 0 {
                return Err(Error::invalid(format!(
                    "input size {} is not divisible by the total downsampling factor {reduction}",
                    self.input_size
                )));
            }
        } else if self.stem_stride != 1 || self.stem_pool {
            return Err(Error::invalid("fully connected models have no stem"));
        }
        Ok(())
    }

    /// Channel counts of the three residual stages.
    pub fn stage_widths(&self) -> [usize; 3] {
        let w = self.base_width;
        match self.family {
            Family::ResnetW => [w, 2 * w, 4 * w],
            _ => [w, w, w],
        }
    }

    /// Trainable parameter count, from the architecture alone.
    pub fn param_count(&self) -> usize {
        let features = self.input_channels * self.input_size * self.input_size;
        let (h, k) = (self.base_width, self.n_classes);
        match self.family {
            Family::Fc1h => features * h + h + h * k + k,
            Family::Fc2h => features * h + h + h * h + h + h * k + k,
            _ => {
                let widths = self.stage_widths();
                let mut total = 9 * self.input_channels * widths[0] + 2 * widths[0];
                let mut cin = widths[0];
                for (stage, &cout) in widths.iter().enumerate() {
                    for block in 0..self.depth {
                        total += 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout;
                        if (stage > 0 && block == 0) || cin != cout {
                            total += cin * cout + 2 * cout;
                        }
                        cin = cout;
                    }
                }
                total + cin * k + k
            }
        }
    }
}

/// A network together with the specification it was built from.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub network: Network<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Kaiming (fan-in) normal initialization.
    fn kaiming<T: Real>(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Param<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        let len = shape.iter().product();
        let value = (0..len)
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.rng)))
            .collect();
        Param::new(name, shape, value)
    }

    fn conv<T: Real>(&mut self, name: &str, geometry: ConvGeometry, point: Option<DownsamplePointId>) -> Layer<T> {
        let g = geometry;
        let weight = self.kaiming(
            format!("{name}.weight"),
            vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
            g.in_channels * g.kernel * g.kernel,
        );
        Layer::Conv(Conv2d {
            geometry,
            weight,
            bias: None,
            point,
        })
    }

    fn linear<T: Real>(&mut self, name: &str, fin: usize, fout: usize) -> Layer<T> {
        Layer::Linear(Linear {
            weight: self.kaiming(format!("{name}.weight"), vec![fout, fin], fin),
            bias: Param::new(format!("{name}.bias"), vec![fout], vec![T::zero(); fout]),
        })
    }
}

pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let layers = if spec.family.is_resnet() {
        build_resnet(spec, &mut init)
    } else {
        build_fc(spec, &mut init)
    };
    Ok(Model {
        spec: spec.clone(),
        network: Network::new(layers),
    })
}

fn build_fc<T: Real>(spec: &ModelSpec, init: &mut Init) -> Vec<Layer<T>> {
    let features = spec.input_channels * spec.input_size * spec.input_size;
    let h = spec.base_width;
    let mut layers = vec![Layer::Flatten, init.linear("fc1", features, h), Layer::Relu];
    if spec.family == Family::Fc2h {
        layers.push(init.linear("fc2", h, h));
        layers.push(Layer::Relu);
    }
    layers.push(init.linear("out", h, spec.n_classes));
    layers
}

fn build_resnet<T: Real>(spec: &ModelSpec, init: &mut Init) -> Vec<Layer<T>> {
    let widths = spec.stage_widths();
    let stem_point = (spec.stem_stride > 1).then(|| DownsamplePointId::new(0, PointPath::Stem));
    let mut layers = vec![
        init.conv(
            "stem.conv",
            ConvGeometry::new(spec.input_channels, widths[0], 3, spec.stem_stride, 1),
            stem_point,
        ),
        Layer::BatchNorm(BatchNorm2d::new("stem.bn", widths[0])),
        Layer::Relu,
    ];
    if spec.stem_pool {
        layers.push(Layer::MaxPool(MaxPool2d {
            geometry: PoolGeometry {
                window: 3,
                stride: 2,
                padding: 1,
            },
            point: Some(DownsamplePointId::new(0, PointPath::Pool)),
        }));
    }

    let mut cin = widths[0];
    for (stage, &cout) in widths.iter().enumerate() {
        for block in 0..spec.depth {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let name = format!("stage{stage}.block{block}");
            let (main_point, skip_point) = if stride > 1 {
                (
                    Some(DownsamplePointId::new(stage, PointPath::Main)),
                    Some(DownsamplePointId::new(stage, PointPath::Skip)),
                )
            } else {
                (None, None)
            };
            let main = vec![
                init.conv(
                    &format!("{name}.conv1"),
                    ConvGeometry::new(cin, cout, 3, stride, 1),
                    main_point,
                ),
                Layer::BatchNorm(BatchNorm2d::new(&format!("{name}.bn1"), cout)),
                Layer::Relu,
                init.conv(&format!("{name}.conv2"), ConvGeometry::new(cout, cout, 3, 1, 1), None),
                Layer::BatchNorm(BatchNorm2d::new(&format!("{name}.bn2"), cout)),
            ];
            let shortcut = if stride > 1 || cin != cout {
                vec![
                    init.conv(
                        &format!("{name}.shortcut.conv"),
                        ConvGeometry::new(cin, cout, 1, stride, 0),
                        skip_point,
                    ),
                    Layer::BatchNorm(BatchNorm2d::new(&format!("{name}.shortcut.bn"), cout)),
                ]
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual(Residual { main, shortcut }));
            cin = cout;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Flatten);
    layers.push(init.linear("fc", cin, spec.n_classes));
    layers
}
