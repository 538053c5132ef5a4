//! Central finite-difference checks of the reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::models::{Model, ModelConfig, ModelError, ModelKind};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Coordinates checked per case (all of them when fewer exist).
    pub points: usize,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            points: 100,
            tolerance: 1e-5,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose `±h` perturbation crossed a relu/abs kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients of `f` with respect to `inputs`.
/// Non-scalar outputs are reduced with a fixed random projection.
pub fn check<E, F>(name: &str, inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut projection: Option<Tensor> = None;
    let mut eval = |inputs: &[Tensor], grad: bool| -> Result<(f64, Vec<bool>, Option<Vec<Tensor>>), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).len() == 1 {
            tape.reshape(out, &[1])?
        } else {
            let shape = tape.shape(out).to_vec();
            let r = projection.get_or_insert_with(|| {
                let n = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("projection")
            });
            let r = tape.constant(r.clone());
            let weighted = tape.mul(out, r)?;
            tape.sum(weighted)
        };
        let value = tape.value(loss).item();
        let grads = if grad {
            let g = tape.backward(loss)?;
            Some(vars.iter().map(|&v| g.wrt(v)).collect())
        } else {
            None
        };
        Ok((value, tape.kink_pattern(), grads))
    };

    let (_, base_pattern, grads) = eval(inputs, true)?;
    let grads = grads.expect("gradients requested");
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut coord_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let order: Vec<usize> = sample(&mut coord_rng, total, total).into_vec();

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
    };
    let mut work = inputs.to_vec();
    for flat in order {
        if report.checked >= cfg.points {
            break;
        }
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let original = work[t].values()[i];
        work[t].values_mut()[i] = original + cfg.step;
        let (plus, plus_pattern, _) = eval(&work, false)?;
        work[t].values_mut()[i] = original - cfg.step;
        let (minus, minus_pattern, _) = eval(&work, false)?;
        work[t].values_mut()[i] = original;
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let err = relative_error(grads[t].values()[i], numeric, cfg.floor);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>);

/// One case per differentiable tape operation.
pub fn op_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut r = |shape: &[usize]| random(&mut rng, shape, -1.0, 1.0);
    let target = Tensor::new(vec![10, 12], (0..120).map(|i| f64::from(i % 3 == 0)).collect())?;
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![r(&[8, 12]), r(&[12, 9])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![r(&[10, 12]), r(&[12])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(&[10, 12]), r(&[10, 12])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![r(&[10, 12]), r(&[10, 12])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul-scalar", vec![r(&[10, 12]), r(&[1])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![r(&[10, 12])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add-scalar", vec![r(&[10, 12])], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("sigmoid", vec![r(&[10, 12])], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", vec![r(&[10, 12])], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("relu", vec![r(&[10, 12])], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("abs", vec![r(&[10, 12])], Box::new(|t, v| Ok(t.abs(v[0])))),
        ("sum", vec![r(&[10, 12])], Box::new(|t, v| {
            let s = t.sum(v[0]);
            Ok(t.mul(s, s)?)
        })),
        ("mean", vec![r(&[10, 12])], Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        })),
        ("concat", vec![r(&[4, 12]), r(&[6, 12])], Box::new(|t, v| t.concat(&[v[0], v[1]], 0))),
        ("concat-cols", vec![r(&[10, 5]), r(&[10, 7])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![r(&[10, 12])], Box::new(|t, v| t.slice(v[0], 1, 3, 9))),
        ("transpose", vec![r(&[10, 12])], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![r(&[10, 12])], Box::new(|t, v| t.reshape(v[0], &[12, 10]))),
        ("flip", vec![r(&[10, 12])], Box::new(|t, v| t.flip(v[0], 0))),
        ("softmax", vec![r(&[10, 12])], Box::new(|t, v| t.softmax(v[0]))),
        ("bce", vec![r(&[10, 12])], Box::new(move |t, v| {
            let p = t.sigmoid(v[0]);
            t.binary_cross_entropy(p, &target)
        })),
        ("conv1d", vec![r(&[3, 20]), r(&[4, 3, 3]), r(&[4])], Box::new(|t, v| t.conv1d_dilated_causal(v[0], v[1], Some(v[2]), 2))),
        ("block-matvec", vec![r(&[5, 4, 6]), r(&[5, 6])], Box::new(|t, v| t.block_matvec(v[0], v[1]))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check(name, &inputs, f, cfg))
        .collect()
}

/// Gradient of a model's prediction with respect to its parameters and input window.
pub fn check_model(model: &Model, window: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let params = model.params();
    let n = params.len();
    let mut inputs = params.tensors().to_vec();
    inputs.push(window.clone());
    check(
        model.kind().name(),
        &inputs,
        |tape, vars| model.forward(tape, &params.bind(vars[..n].to_vec()), vars[n]),
        cfg,
    )
}

/// Small configurations of every architecture, as used by the model suite.
pub fn suite_configs() -> Vec<ModelConfig> {
    let (n_vars, window) = (3, 16);
    ModelKind::ALL
        .into_iter()
        .map(|kind| {
            let mut cfg = ModelConfig::new(kind, n_vars, window);
            cfg.hidden = 8;
            cfg.rhn_depth = 3;
            cfg
        })
        .collect()
}

pub fn model_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    suite_configs()
        .into_iter()
        .map(|mc| {
            let window = random(&mut rng, &[mc.window, mc.n_vars], -2.0, 2.0);
            let model = Model::new(mc, rng.gen())?;
            check_model(&model, &window, cfg)
        })
        .collect()
}
