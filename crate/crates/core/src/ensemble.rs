//! Paired training data: the unit-ball dataset generator, prefix sub-ensemble
//! views, the average endpoint error metric, and dataset serialization.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{flow, uplift, ControlSignal, Model, ReadoutMap};
use crate::error::{Error, Result};

/// One paired sample `(x, y)` with its 1-based position in the index set.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub index: usize,
}

/// Ordered list of paired samples with pairwise-distinct inputs.
#[derive(Debug, Clone)]
pub struct Ensemble {
    samples: Vec<Sample>,
    input_dim: usize,
    output_dim: usize,
}

impl Ensemble {
    pub fn new(samples: Vec<Sample>) -> Result<Ensemble> {
        if samples.is_empty() {
            return Err(Error::InvalidEnsemble("no samples".into()));
        }
        let input_dim = samples[0].x.len();
        let output_dim = samples[0].y.len();
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidEnsemble("zero-dimensional sample".into()));
        }
        for (pos, s) in samples.iter().enumerate() {
            if s.index != pos + 1 {
                return Err(Error::InvalidEnsemble(format!(
                    "sample at position {} has index {}, expected {}",
                    pos,
                    s.index,
                    pos + 1
                )));
            }
            if s.x.len() != input_dim || s.y.len() != output_dim {
                return Err(Error::InvalidEnsemble(format!(
                    "sample {} has inconsistent dimensions",
                    s.index
                )));
            }
        }
        for i in 0..samples.len() {
            for j in (i + 1)..samples.len() {
                if samples[i].x == samples[j].x {
                    return Err(Error::InvalidEnsemble(format!(
                        "samples {} and {} share the same input point",
                        samples[i].index, samples[j].index
                    )));
                }
            }
        }
        Ok(Ensemble {
            samples,
            input_dim,
            output_dim,
        })
    }

    /// Ensemble cardinality `q`.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Sample with 1-based `index`.
    pub fn sample(&self, index: usize) -> Result<&Sample> {
        if index == 0 || index > self.samples.len() {
            return Err(Error::IndexOutOfRange {
                index,
                capacity: self.samples.len(),
            });
        }
        Ok(&self.samples[index - 1])
    }

    /// View of the samples with indices in `(lo, hi]`.
    pub fn view(&self, lo: usize, hi: usize) -> Result<SubEnsembleView<'_>> {
        if lo > hi || hi > self.samples.len() {
            return Err(Error::IndexOutOfRange {
                index: hi,
                capacity: self.samples.len(),
            });
        }
        Ok(SubEnsembleView {
            parent: self,
            lo,
            hi,
        })
    }

    /// Prefix view of the first `j` samples.
    pub fn prefix(&self, j: usize) -> Result<SubEnsembleView<'_>> {
        self.view(0, j)
    }
}

/// Range view into an [`Ensemble`]: the samples with indices `lo < i ≤ hi`.
/// The prefix `X^j` is `(0, j]`, the expansion remainder is `(j, q]`.
#[derive(Debug, Clone, Copy)]
pub struct SubEnsembleView<'a> {
    parent: &'a Ensemble,
    lo: usize,
    hi: usize,
}

impl<'a> SubEnsembleView<'a> {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a Sample> + '_ {
        self.parent.samples[self.lo..self.hi].iter()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        (self.lo + 1)..=self.hi
    }

    pub fn parent(&self) -> &'a Ensemble {
        self.parent
    }
}

/// Splits the index set at `j` into the prefix view and its complement.
pub fn split(ensemble: &Ensemble, j: usize) -> Result<(SubEnsembleView<'_>, SubEnsembleView<'_>)> {
    let prefix = ensemble.view(0, j)?;
    let rest = ensemble.view(j, ensemble.len())?;
    Ok((prefix, rest))
}

/// Label rule of the unit-ball study: `−1` if `‖x‖² ≤ 1` (boundary counts as
/// inside), `+1` otherwise.
pub fn ball_label(x: &DVector<f64>) -> f64 {
    if x.norm_squared() <= 1.0 {
        -1.0
    } else {
        1.0
    }
}

/// Minimum pairwise separation enforced during generation, so downstream
/// constraint blocks stay well separated.
const MIN_PAIR_DISTANCE: f64 = 1e-9;

/// Rejection-sampling attempts per requested point before giving up.
const MAX_ATTEMPTS_PER_POINT: usize = 10_000;

/// Draws `q` pairwise-distinct points uniformly from
/// `[−box_halfwidth, box_halfwidth]²`, excluding the annulus
/// `| ‖x‖ − 1 | < margin` around the unit circle, labeled by [`ball_label`].
/// Deterministic given `seed`.
pub fn generate_ball_dataset(
    q: usize,
    seed: u64,
    margin: f64,
    box_halfwidth: f64,
) -> Result<Ensemble> {
    if q == 0 {
        return Err(Error::InvalidEnsemble("q must be at least 1".into()));
    }
    if margin.is_nan() || box_halfwidth.is_nan() || margin < 0.0 || margin >= box_halfwidth - 1.0 {
        return Err(Error::InvalidEnsemble(format!(
            "margin {} must be nonnegative and smaller than box_halfwidth − 1 = {}",
            margin,
            box_halfwidth - 1.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Sample> = Vec::with_capacity(q);
    let budget = q * MAX_ATTEMPTS_PER_POINT;
    let mut attempts = 0;
    while samples.len() < q {
        if attempts >= budget {
            return Err(Error::GenerationFailed { attempts });
        }
        attempts += 1;
        let x = DVector::from_fn(2, |_, _| rng.random_range(-box_halfwidth..box_halfwidth));
        if (x.norm() - 1.0).abs() < margin {
            continue;
        }
        if samples
            .iter()
            .any(|s| (&s.x - &x).norm() < MIN_PAIR_DISTANCE)
        {
            continue;
        }
        let y = DVector::from_element(1, ball_label(&x));
        samples.push(Sample {
            x,
            y,
            index: samples.len() + 1,
        });
    }
    Ensemble::new(samples)
}

/// Average endpoint error of a control on a view:
/// the mean over the view of `‖C·φ(u, E(x)) − y‖`.
pub fn average_error(
    model: &Model,
    readout: &ReadoutMap,
    u: &ControlSignal,
    view: &SubEnsembleView<'_>,
) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::EmptyView);
    }
    let mut total = 0.0;
    for sample in view.iter() {
        let lifted = uplift(&sample.x, model.nbar())?;
        let traj = flow(model, u, &lifted)?;
        let out = readout.apply(traj.final_state())?;
        total += (out - &sample.y).norm();
    }
    Ok(total / view.len() as f64)
}

/// Serializes a dataset: a header line, then one `index,x…,y…` record per
/// sample in decimal text.
pub fn dataset_to_string(ensemble: &Ensemble, seed: u64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# ball-dataset v1 n={} no={} q={} seed={}\n",
        ensemble.input_dim(),
        ensemble.output_dim(),
        ensemble.len(),
        seed
    ));
    for s in ensemble.samples() {
        out.push_str(&format!("{}", s.index));
        for v in s.x.iter() {
            out.push_str(&format!(",{}", v));
        }
        for v in s.y.iter() {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, ensemble: &Ensemble, seed: u64) -> Result<()> {
    std::fs::write(path, dataset_to_string(ensemble, seed))?;
    Ok(())
}

/// Parses the dataset format; returns the ensemble and the seed recorded in
/// the header.
pub fn parse_dataset(text: &str) -> Result<(Ensemble, u64)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty dataset file".into(),
    })?;
    let (n, n_out, q, seed) = parse_dataset_header(header)?;
    let mut samples = Vec::with_capacity(q);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + n + n_out {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected {} fields, got {}", 1 + n + n_out, fields.len()),
            });
        }
        let parse_f = |tok: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("bad value {:?}: {}", tok, e),
            })
        };
        let index: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad index {:?}", fields[0]),
        })?;
        let x = DVector::from_fn(n, |r, _| parse_f(fields[1 + r]).unwrap_or(f64::NAN));
        let y = DVector::from_fn(n_out, |r, _| parse_f(fields[1 + n + r]).unwrap_or(f64::NAN));
        if x.iter().chain(y.iter()).any(|v| v.is_nan()) {
            return Err(Error::Parse {
                line: idx + 1,
                message: "bad numeric value".into(),
            });
        }
        samples.push(Sample { x, y, index });
    }
    if samples.len() != q {
        return Err(Error::Parse {
            line: 0,
            message: format!("expected {} records, got {}", q, samples.len()),
        });
    }
    Ok((Ensemble::new(samples)?, seed))
}

pub fn load_dataset(path: &Path) -> Result<(Ensemble, u64)> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text)
}

fn parse_dataset_header(line: &str) -> Result<(usize, usize, usize, u64)> {
    let err = |message: String| Error::Parse { line: 1, message };
    let rest = line
        .strip_prefix("# ball-dataset v1 ")
        .ok_or_else(|| err("expected '# ball-dataset v1' header".into()))?;
    let mut n = None;
    let mut n_out = None;
    let mut q = None;
    let mut seed = None;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("bad header field {:?}", field)))?;
        let parsed = value
            .parse::<u64>()
            .map_err(|_| err(format!("bad value {:?} for {}", value, key)))?;
        match key {
            "n" => n = Some(parsed as usize),
            "no" => n_out = Some(parsed as usize),
            "q" => q = Some(parsed as usize),
            "seed" => seed = Some(parsed),
            other => return Err(err(format!("unknown header field {:?}", other))),
        }
    }
    Ok((
        n.ok_or_else(|| err("missing n".into()))?,
        n_out.ok_or_else(|| err("missing no".into()))?,
        q.ok_or_else(|| err("missing q".into()))?,
        seed.ok_or_else(|| err("missing seed".into()))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::scalar_multiplicative;
    use nalgebra::DMatrix;

    #[test]
    fn label_rule_inside_outside_boundary() {
        assert_eq!(ball_label(&DVector::from_column_slice(&[0.0, 0.0])), -1.0);
        assert_eq!(ball_label(&DVector::from_column_slice(&[2.0, 0.0])), 1.0);
        // the boundary counts as inside
        assert_eq!(ball_label(&DVector::from_column_slice(&[1.0, 0.0])), -1.0);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let a = generate_ball_dataset(64, 9, 0.1, 2.0).unwrap();
        let b = generate_ball_dataset(64, 9, 0.1, 2.0).unwrap();
        assert_eq!(a.len(), 64);
        for (sa, sb) in a.samples().iter().zip(b.samples()) {
            assert_eq!(sa.x, sb.x);
            assert_eq!(sa.y, sb.y);
        }
        for s in a.samples() {
            assert!(s.x.iter().all(|v| v.abs() <= 2.0));
            assert!((s.x.norm() - 1.0).abs() >= 0.1);
            assert_eq!(s.y[0], ball_label(&s.x));
        }
    }

    #[test]
    fn generation_rejects_bad_margin() {
        assert!(generate_ball_dataset(4, 1, 1.5, 2.0).is_err());
        assert!(generate_ball_dataset(0, 1, 0.1, 2.0).is_err());
    }

    #[test]
    fn split_views_partition_the_index_set() {
        let ens = generate_ball_dataset(64, 3, 0.1, 2.0).unwrap();
        let (pre, rest) = split(&ens, 16).unwrap();
        assert_eq!(pre.len(), 16);
        assert_eq!(rest.len(), 48);
        let all: Vec<usize> = pre.indices().chain(rest.indices()).collect();
        assert_eq!(all, (1..=64).collect::<Vec<_>>());

        let (pre0, rest0) = split(&ens, 0).unwrap();
        assert!(pre0.is_empty());
        assert_eq!(rest0.len(), 64);

        let (pre_q, rest_q) = split(&ens, 64).unwrap();
        assert_eq!(pre_q.len(), 64);
        assert!(rest_q.is_empty());

        assert!(split(&ens, 65).is_err());
    }

    #[test]
    fn distinctness_is_enforced() {
        let x = DVector::from_column_slice(&[0.5, 0.5]);
        let samples = vec![
            Sample {
                x: x.clone(),
                y: DVector::from_element(1, -1.0),
                index: 1,
            },
            Sample {
                x,
                y: DVector::from_element(1, -1.0),
                index: 2,
            },
        ];
        assert!(Ensemble::new(samples).is_err());
    }

    #[test]
    fn average_error_trivial_cases() {
        // Scalar system ẋ = u x with u ≡ 0 keeps every point fixed, and the
        // identity readout makes the residual ‖x − y‖ directly.
        let model = scalar_multiplicative();
        let readout = ReadoutMap::canonical(1, 1).unwrap();
        let u = ControlSignal::from_matrix(DMatrix::zeros(1, 4), 1.0).unwrap();

        let make = |points: &[(f64, f64)]| {
            Ensemble::new(
                points
                    .iter()
                    .enumerate()
                    .map(|(i, &(x, y))| Sample {
                        x: DVector::from_element(1, x),
                        y: DVector::from_element(1, y),
                        index: i + 1,
                    })
                    .collect(),
            )
            .unwrap()
        };

        // all residuals zero
        let ens = make(&[(0.5, 0.5), (-0.25, -0.25)]);
        let view = ens.prefix(2).unwrap();
        assert_eq!(average_error(&model, &readout, &u, &view).unwrap(), 0.0);

        // residual norms 0.2 and 0.4 average to 0.3
        let ens = make(&[(0.5, 0.3), (0.1, -0.3)]);
        let view = ens.prefix(2).unwrap();
        let e = average_error(&model, &readout, &u, &view).unwrap();
        assert!((e - 0.3).abs() < 1e-15);

        // singleton view equals that sample's residual norm
        let one = ens.view(0, 1).unwrap();
        let e1 = average_error(&model, &readout, &u, &one).unwrap();
        assert!((e1 - 0.2).abs() < 1e-15);

        // empty view errors
        let empty = ens.view(1, 1).unwrap();
        assert!(average_error(&model, &readout, &u, &empty).is_err());
    }

    #[test]
    fn dataset_parser_rejects_malformed_input() {
        // wrong magic
        assert!(parse_dataset("# ball-dataset v2 n=2 no=1 q=1 seed=0\n1,0,0,-1\n").is_err());
        // record count mismatch
        assert!(parse_dataset("# ball-dataset v1 n=2 no=1 q=2 seed=0\n1,0,0,-1\n").is_err());
        // wrong field count
        assert!(parse_dataset("# ball-dataset v1 n=2 no=1 q=1 seed=0\n1,0,0\n").is_err());
        // bad number
        assert!(parse_dataset("# ball-dataset v1 n=2 no=1 q=1 seed=0\n1,0,zero,-1\n").is_err());
        // duplicate points fail ensemble validation
        let text = "# ball-dataset v1 n=2 no=1 q=2 seed=0\n1,0.5,0.5,-1\n2,0.5,0.5,-1\n";
        assert!(parse_dataset(text).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_byte_identical() {
        let ens = generate_ball_dataset(16, 5, 0.1, 2.0).unwrap();
        let text = dataset_to_string(&ens, 5);
        let (parsed, seed) = parse_dataset(&text).unwrap();
        assert_eq!(seed, 5);
        assert_eq!(parsed.len(), 16);
        for (a, b) in ens.samples().iter().zip(parsed.samples()) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
        }
        assert_eq!(text, dataset_to_string(&parsed, seed));
    }
}
