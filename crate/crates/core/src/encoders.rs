//! Instance Description Unit: a LeNet-style encoder from images to features.

use serde::{Deserialize, Serialize};

use crate::datasets::Bag;
use crate::error::{dim_err, Result};
use crate::numerics::{kaiming_uniform, Bound, ParamId, ParamSet, Rng, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IduConfig {
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub fc1: usize,
    /// Feature width `n`.
    pub n: usize,
    /// Square input side (28 for MNIST, 27 also tiles).
    pub side: usize,
}

impl Default for IduConfig {
    fn default() -> Self {
        Self {
            conv1: 20,
            conv2: 50,
            kernel: 5,
            fc1: 500,
            n: 500,
            side: 28,
        }
    }
}

impl IduConfig {
    /// Spatial side of the conv2 post-pool map, if the stack fits.
    pub fn map_side(&self) -> Option<usize> {
        let after = |s: usize| (s >= self.kernel).then(|| (s - self.kernel + 1) / 2).filter(|&p| p >= 1);
        after(self.side).and_then(after)
    }

    fn flat_len(&self) -> Result<usize> {
        let s = self.map_side().ok_or_else(|| {
            dim_err(
                "idu",
                format!("{0}x{0} input does not fit two {1}x{1} conv+pool stages", self.side, self.kernel),
            )
        })?;
        Ok(self.conv2 * s * s)
    }
}

/// The encoder's parameter layout inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Idu {
    pub config: IduConfig,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Tape output of a batched forward pass.
pub struct IduOutput<'t, F: Scalar> {
    /// `N x n` features.
    pub features: Var<'t, F>,
    /// `N x C x s x s` conv2 activations after pooling.
    pub local_map: Var<'t, F>,
}

/// f_i with, when requested, its conv2 map.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeature<F> {
    pub f: Vec<F>,
    pub local_map: Option<Tensor<F>>,
}

impl Idu {
    /// Kaiming-uniform weights, zero biases.
    pub fn new<F: Scalar>(config: IduConfig, params: &mut ParamSet<F>, prefix: &str, rng: &mut Rng) -> Result<Self> {
        let flat = config.flat_len()?;
        let k = config.kernel;
        let mut add = |name: &str, t: Tensor<F>| params.add(format!("{prefix}{name}"), t);
        Ok(Self {
            conv1_w: add("conv1.w", kaiming_uniform(&[config.conv1, 1, k, k], k * k, rng)),
            conv1_b: add("conv1.b", Tensor::zeros(&[config.conv1])),
            conv2_w: add(
                "conv2.w",
                kaiming_uniform(&[config.conv2, config.conv1, k, k], config.conv1 * k * k, rng),
            ),
            conv2_b: add("conv2.b", Tensor::zeros(&[config.conv2])),
            fc1_w: add("fc1.w", kaiming_uniform(&[config.fc1, flat], flat, rng)),
            fc1_b: add("fc1.b", Tensor::zeros(&[config.fc1])),
            fc2_w: add("fc2.w", kaiming_uniform(&[config.n, config.fc1], config.fc1, rng)),
            fc2_b: add("fc2.b", Tensor::zeros(&[config.n])),
            config,
        })
    }

    /// Forward pass over an `N x 1 x H x W` batch.
    pub fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Result<IduOutput<'t, F>> {
        let shape = x.shape();
        let c = &self.config;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != c.side || shape[3] != c.side {
            return Err(dim_err(
                "idu",
                format!("expected N x 1 x {0} x {0} input, got {shape:?}", c.side),
            ));
        }
        let batch = shape[0];
        let h1 = x
            .conv2d(p.get(self.conv1_w), 1)?
            .add_channel_bias(p.get(self.conv1_b))?
            .relu()?
            .max_pool2()?;
        let local_map = h1
            .conv2d(p.get(self.conv2_w), 1)?
            .add_channel_bias(p.get(self.conv2_b))?
            .relu()?
            .max_pool2()?;
        let flat = local_map.reshape(&[batch, c.flat_len()?])?;
        let features = flat
            .matmul_nt(p.get(self.fc1_w))?
            .add_row_bias(p.get(self.fc1_b))?
            .relu()?
            .matmul_nt(p.get(self.fc2_w))?
            .add_row_bias(p.get(self.fc2_b))?;
        Ok(IduOutput { features, local_map })
    }
}

/// Bytes scaled to `[0, 1]`, stacked as `N x 1 x rows x cols`.
pub fn images_tensor<F: Scalar>(images: &[&[u8]], rows: usize, cols: usize) -> Result<Tensor<F>> {
    let scale = F::lit(1.0 / 255.0);
    let mut data = Vec::with_capacity(images.len() * rows * cols);
    for img in images {
        if img.len() != rows * cols {
            return Err(dim_err("images_tensor", format!("{} bytes for a {rows}x{cols} image", img.len())));
        }
        data.extend(img.iter().map(|&b| F::lit(f64::from(b)) * scale));
    }
    Tensor::new(&[images.len(), 1, rows, cols], data)
}

pub fn bag_tensor<F: Scalar>(bag: &Bag) -> Result<Tensor<F>> {
    let views: Vec<&[u8]> = bag.instances().iter().map(|p| &p[..]).collect();
    images_tensor(&views, bag.rows(), bag.cols())
}

/// Encodes one `side x side` image without recording gradients.
pub fn encode_instance<F: Scalar>(
    idu: &Idu,
    params: &ParamSet<F>,
    image: &[u8],
    with_map: bool,
) -> Result<InstanceFeature<F>> {
    let side = (image.len() as f64).sqrt() as usize;
    if side * side != image.len() {
        return Err(dim_err("encode_instance", format!("{} bytes is not a square image", image.len())));
    }
    let (f, map) = encode_images(idu, params, &[image], side)?;
    Ok(InstanceFeature {
        f: f.to_vec(),
        local_map: with_map.then(|| {
            let s = map.shape();
            map.reshape(&s[1..]).expect("single map")
        }),
    })
}

/// `m x n` feature matrix of a bag, row `i` for instance `i`.
pub fn encode_bag<F: Scalar>(idu: &Idu, params: &ParamSet<F>, bag: &Bag) -> Result<Tensor<F>> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = idu.forward(&p, tape.constant(bag_tensor(bag)?))?;
    Ok(out.features.value())
}

fn encode_images<F: Scalar>(
    idu: &Idu,
    params: &ParamSet<F>,
    images: &[&[u8]],
    side: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = idu.forward(&p, tape.constant(images_tensor(images, side, side)?))?;
    Ok((out.features.value(), out.local_map.value()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_bags, synth_glyphs, ScenarioKind, ScenarioSpec, Split};
    use crate::numerics::GradCheck;

    fn small() -> IduConfig {
        IduConfig {
            conv1: 3,
            conv2: 4,
            kernel: 5,
            fc1: 6,
            n: 5,
            side: 16,
        }
    }

    fn build(config: IduConfig, seed: u64) -> (Idu, ParamSet<f64>) {
        let mut params = ParamSet::new();
        let idu = Idu::new(config, &mut params, "idu.", &mut Rng::new(seed)).unwrap();
        (idu, params)
    }

    #[test]
    fn map_geometry() {
        assert_eq!(IduConfig::default().map_side(), Some(4));
        let c27 = IduConfig { side: 27, ..IduConfig::default() };
        assert_eq!(c27.map_side(), Some(3));
        let tiny = IduConfig { side: 9, ..IduConfig::default() };
        assert_eq!(tiny.map_side(), None);
    }

    #[test]
    fn zero_image_gives_zero_feature() {
        let (idu, params) = build(small(), 1);
        let feat = encode_instance(&idu, &params, &[0u8; 256], true).unwrap();
        assert!(feat.f.iter().all(|&v| v == 0.0));
        assert_eq!(feat.local_map.unwrap().shape(), &[4, 1, 1]);
    }

    #[test]
    fn incompatible_size_is_a_dimension_error() {
        let (idu, params) = build(small(), 1);
        let err = encode_instance(&idu, &params, &[0u8; 400], false).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension { .. }), "{err}");
        let err = Idu::new::<f64>(
            IduConfig { side: 8, ..small() },
            &mut ParamSet::new(),
            "",
            &mut Rng::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, crate::Error::Dimension { .. }));
    }

    #[test]
    fn accepts_27_pixel_inputs() {
        let (idu, params) = build(IduConfig { side: 27, ..IduConfig::default() }, 2);
        let f = encode_instance(&idu, &params, &[128u8; 27 * 27], true).unwrap();
        assert_eq!(f.f.len(), 500);
        assert_eq!(f.local_map.unwrap().shape(), &[50, 3, 3]);
    }

    #[test]
    fn bag_encoding_is_a_rowwise_map() {
        let (idu, params) = build(IduConfig::default(), 3);
        let pool = synth_glyphs(2, 4, Split::Train);
        let spec = ScenarioSpec::standard(ScenarioKind::SingleDigit, 1, 5).with_cardinality(10.0, 0.0);
        let bag = &make_bags(&spec, &pool).unwrap()[0];
        let f = encode_bag(&idu, &params, bag).unwrap();
        assert_eq!(f.shape(), &[10, 500]);
        for (i, img) in bag.instances().iter().enumerate() {
            let single = encode_instance(&idu, &params, img, false).unwrap();
            assert_eq!(single.f.as_slice(), f.row(i));
        }
        let order: Vec<usize> = (0..10).rev().collect();
        let g = encode_bag(&idu, &params, &bag.permuted(&order)).unwrap();
        for (i, &j) in order.iter().enumerate() {
            assert_eq!(g.row(i), f.row(j));
        }
        let one = crate::datasets::singletons(bag).remove(3);
        assert_eq!(encode_bag(&idu, &params, &one).unwrap().data(), f.row(3));
    }

    #[test]
    fn identical_images_identical_features() {
        let (idu, params) = build(small(), 7);
        let img: Vec<u8> = (0..256).map(|i| (i * 7 % 256) as u8).collect();
        let a = encode_instance(&idu, &params, &img, true).unwrap();
        let b = encode_instance(&idu, &params, &img, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_check_through_the_encoder() {
        let (idu, params) = build(small(), 11);
        let mut rng = Rng::new(12);
        let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.uniform());
        let head = Tensor::from_fn(&[1, 5], |_| rng.normal(0.0, 1.0));
        let mut inputs = params.values().to_vec();
        inputs.push(x);
        inputs.push(head);
        let err = GradCheck::sampled(1e-5, 40, 13)
            .run(
                |_, vars| {
                    let n = vars.len();
                    let bound = Bound { vars: vars[..n - 2].to_vec() };
                    let out = idu.forward(&bound, vars[n - 2])?;
                    out.features.matmul_nt(vars[n - 1])?.tanh()?.sum()
                },
                &inputs,
            )
            .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
