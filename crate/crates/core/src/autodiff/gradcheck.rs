use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Primitive, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Pass threshold on the per-parameter max relative error.
    pub tolerance: f64,
    /// Entries probed per parameter; `None` probes every entry.
    pub max_probes: Option<usize>,
    pub seed: u64,
    /// Negative control: corrupt the backward rule of one primitive.
    pub fault: Option<Primitive>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-4,
            max_probes: Some(24),
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub probes: usize,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over probes.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Set when a forward or backward evaluation failed.
    pub fault: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.fault.is_none() && self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }
}

/// Compare reverse-mode gradients of `f` with central finite differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar. Failures during probing are recorded in the report.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], options: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut report = GradCheckReport {
        params: Vec::new(),
        tolerance: options.tolerance,
        fault: None,
    };
    let analytic = match analytic_grads(&f, params, options.fault) {
        Ok(g) => g,
        Err(e) => {
            report.fault = Some(e.to_string());
            return report;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe_params = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let entries: Vec<usize> = match options.max_probes {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut max_diff: f64 = 0.0;
        let mut max_mag: f64 = 0.0;
        for &e in &entries {
            let original = param.data()[e];
            let mut eval = |x: f64| -> Result<f64, TensorError> {
                probe_params[pi].data_mut()[e] = x;
                let out = forward_value(&f, &probe_params);
                probe_params[pi].data_mut()[e] = original;
                out
            };
            let plus = eval(original + options.epsilon);
            let minus = eval(original - options.epsilon);
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.fault = Some(e.to_string());
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * options.epsilon);
            let a = analytic[pi][e];
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
        }
        let max_rel_error = if max_mag > 0.0 { max_diff / max_mag } else { max_diff };
        report.params.push(ParamCheck {
            index: pi,
            probes: entries.len(),
            max_rel_error,
        });
    }
    report
}

fn forward_value<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Contract(format!("objective must be scalar, got {:?}", v.dims())));
    }
    Ok(v.data()[0])
}

fn analytic_grads<F>(f: &F, params: &[Tensor<f64>], fault: Option<Primitive>) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect())
}
