use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumError, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub trials: usize,
    /// Central-difference step.
    pub h: f64,
    pub seed: u64,
    /// Coordinates probed per input tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Exclude coordinates where a ReLU or max switches branch inside
    /// `[x - h, x + h]`, detected by the two one-sided slopes disagreeing by
    /// more than `kink_tol` relative.
    pub skip_kinks: bool,
    pub kink_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probed: usize,
    pub skipped_kinks: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            trials: 10,
            h: 1e-5,
            seed: 0,
            max_coords: 64,
            skip_kinks: false,
            kink_tol: 1e-3,
        }
    }
}

fn evaluate<'p, F>(inputs: &[Tensor], build: &F) -> Result<f64, NumError>
where
    F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(NumError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients against central differences.
///
/// For every trial, `make_inputs` draws fresh tensors; those with
/// `requires_grad` set are probed. Returns the maximum over trials and probed
/// coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<'p, M, F>(opts: GradCheckOptions, make_inputs: M, build: F) -> Result<f64, NumError>
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var, NumError>,
{
    Ok(grad_check_report(opts, make_inputs, build)?.max_rel_error)
}

/// [`grad_check`] with probe and kink counts.
pub fn grad_check_report<'p, M, F>(opts: GradCheckOptions, make_inputs: M, build: F) -> Result<GradCheckReport, NumError>
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var, NumError>,
{
    let mut worst: f64 = 0.0;
    let (mut probed, mut skipped) = (0, 0);
    for trial in 0..opts.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(trial as u64));
        let inputs = make_inputs(&mut rng);

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let f0 = tape.value(out).data()[0];

        for (k, input) in inputs.iter().enumerate() {
            if !input.requires_grad() {
                continue;
            }
            let analytic = grads
                .wrt(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            let coords: Vec<usize> = if input.len() <= opts.max_coords {
                (0..input.len()).collect()
            } else {
                let mut c = sample(&mut rng, input.len(), opts.max_coords).into_vec();
                c.sort_unstable();
                c
            };
            let mut probe = inputs.clone();
            for i in coords {
                let orig = input.data()[i];
                probe[k].data_mut()[i] = orig + opts.h;
                let up = evaluate(&probe, &build)?;
                probe[k].data_mut()[i] = orig - opts.h;
                let down = evaluate(&probe, &build)?;
                probe[k].data_mut()[i] = orig;
                if opts.skip_kinks {
                    let (fwd, bwd) = (up - f0, f0 - down);
                    if (fwd - bwd).abs() > opts.kink_tol * fwd.abs().max(bwd.abs()) {
                        skipped += 1;
                        continue;
                    }
                }
                probed += 1;
                let numeric = (up - down) / (2.0 * opts.h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probed,
        skipped_kinks: skipped,
    })
}
