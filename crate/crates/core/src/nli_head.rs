//! Pair combination `(u, v, |u−v|, u∘v)` and the three-layer Leaky-ReLU classifier.

use rand::{Rng, RngCore};

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Negative slope of the Leaky ReLU activations.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Affine map `x·Wᵀ + b` with `W` stored `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor::zeros(&[output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let data = (0..input * output).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            w: Tensor::new(vec![output, input], data).expect("positive dims"),
            b: Tensor::zeros(&[output]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    /// Sentence embedding width `D`; the classifier reads `4D` features.
    pub embedding_width: usize,
    pub mlp_width: usize,
    pub classes: usize,
    /// Dropout rate after the first two layers (training only).
    pub dropout: f64,
}

impl HeadConfig {
    pub fn feature_width(&self) -> usize {
        4 * self.embedding_width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub layers: [Affine; 3],
}

impl HeadParams {
    /// Weights uniform on `(-1/√fan_in, 1/√fan_in)`, biases 0.
    pub fn init<R: Rng + ?Sized>(config: &HeadConfig, rng: &mut R) -> Self {
        let (f, m) = (config.feature_width(), config.mlp_width);
        Self {
            layers: [Affine::init(f, m, rng), Affine::init(m, m, rng), Affine::init(m, config.classes, rng)],
        }
    }

    pub fn zeros(config: &HeadConfig) -> Self {
        let (f, m) = (config.feature_width(), config.mlp_width);
        Self {
            layers: [Affine::zeros(f, m), Affine::zeros(m, m), Affine::zeros(m, config.classes)],
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, a)| [(format!("head.fc{}.w", k + 1), &a.w), (format!("head.fc{}.b", k + 1), &a.b)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|a| [&mut a.w, &mut a.b]).collect()
    }

    pub fn bind(vars: &mut impl Iterator<Item = Var>) -> HeadVars {
        let mut next = || vars.next().expect("one var per head tensor");
        HeadVars {
            layers: [(next(), next()), (next(), next()), (next(), next())],
        }
    }
}

/// `(weight, bias)` per layer, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub layers: [(Var, Var); 3],
}

/// `[u, v, |u−v|, u∘v]` along the feature axis.
pub fn combine(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    if tape.value(u).shape() != tape.value(v).shape() {
        return Err(TensorError::Shape {
            op: "combine",
            left: tape.value(u).shape().to_vec(),
            right: tape.value(v).shape().to_vec(),
        });
    }
    let diff = tape.sub(u, v)?;
    let abs_diff = tape.abs(diff);
    let prod = tape.mul(u, v)?;
    tape.concat(&[u, v, abs_diff, prod], 1)
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(rng: &mut dyn RngCore, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// affine → LeakyReLU → dropout → affine → LeakyReLU → dropout → affine.
///
/// `dropout` carries the rng and rate while training; `None` evaluates
/// deterministically.
pub fn classify(tape: &mut Tape, features: Var, head: &HeadVars, dropout: Option<(&mut dyn RngCore, f64)>) -> Result<Var> {
    let mut dropout = dropout;
    let mut x = features;
    for (k, &(w, b)) in head.layers.iter().enumerate() {
        let lin = tape.matmul_nt(x, w)?;
        x = tape.add_row(lin, b)?;
        if k == 2 {
            break;
        }
        x = tape.leaky_relu(x, LEAKY_SLOPE);
        if let Some((rng, rate)) = dropout.as_mut() {
            if *rate > 0.0 {
                let mask = dropout_mask(&mut **rng, tape.value(x).numel(), *rate);
                x = tape.mul_const(x, mask)?;
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_setup(seed: u64) -> (HeadConfig, HeadParams, Tensor) {
        let cfg = HeadConfig {
            embedding_width: 2,
            mlp_width: 5,
            classes: 3,
            dropout: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = HeadParams::init(&cfg, &mut rng);
        let feats = Tensor::new(vec![2, 8], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (cfg, p, feats)
    }

    fn logits(p: &HeadParams, feats: &Tensor, dropout: Option<(&mut dyn RngCore, f64)>) -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let head = HeadParams::bind(&mut vars.into_iter());
        let f = tape.constant(feats.clone());
        let out = classify(&mut tape, f, &head, dropout).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn combine_layout() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let v = tape.constant(Tensor::from_rows(&[vec![3.0, 1.0]]));
        let c = combine(&mut tape, u, v).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 1.0, 3.0, 2.0]);

        let same = combine(&mut tape, u, u).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0, 1.0, 4.0]);

        let swapped = combine(&mut tape, v, u).unwrap();
        let (a, b) = (tape.value(c).data(), tape.value(swapped).data());
        assert_eq!(&a[..2], &b[2..4]);
        assert_eq!(&a[2..4], &b[..2]);
        assert_eq!(&a[4..], &b[4..]);

        let w = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(combine(&mut tape, u, w), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn feature_width_at_full_scale() {
        let cfg = HeadConfig {
            embedding_width: 3 * 2 * 600,
            mlp_width: 600,
            classes: 3,
            dropout: 0.1,
        };
        assert_eq!(cfg.feature_width(), 14400);
    }

    #[test]
    fn evaluation_is_deterministic_and_zero_rate_matches_it() {
        let (_, p, feats) = head_setup(1);
        let a = logits(&p, &feats, None);
        assert_eq!(a, logits(&p, &feats, None));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(a, logits(&p, &feats, Some((&mut rng, 0.0))));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_ne!(a, logits(&p, &feats, Some((&mut rng, 0.5))));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (_, p, _) = head_setup(1);
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let head = HeadParams::bind(&mut vars.into_iter());
        let f = tape.constant(Tensor::zeros(&[2, 7]));
        assert!(classify(&mut tape, f, &head, None).is_err());
    }

    #[test]
    fn keep_rate_matches_monte_carlo_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = dropout_mask(&mut rng, 100_000, 0.1);
        let kept = mask.iter().filter(|&&m| m != 0.0).count() as f64 / mask.len() as f64;
        assert!((kept - 0.9).abs() < 0.01, "{kept}");
        // inverted scaling keeps the expectation at 1
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        let sigma = (0.1f64 / 0.9 / mask.len() as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn dropped_activations_average_to_undropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = 0.37;
        let draws = 200_000;
        let samples: Vec<f64> = dropout_mask(&mut rng, draws, 0.1).into_iter().map(|m| m * x).collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!((mean - x).abs() < 3.0 * se, "{mean} vs {x} (se {se})");
    }

    #[test]
    fn head_passes_grad_check() {
        let (_, p, feats) = head_setup(3);
        let mut inputs: Vec<Tensor> = p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(feats);
        let report = grad_check(
            |tape, v| {
                let head = HeadParams::bind(&mut v[..6].iter().copied());
                let out = classify(tape, v[6], &head, None)?;
                tape.softmax_cross_entropy(out, &[0, 2])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }
}
