//! Random traces near the critical set, written as `*.trace` files with a
//! JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{Nonneg, RunConfig};
use crate::critical::{eval_on_sphere, project_to_s, reference_energies_on, QuadraticBlowup};
use crate::energy::w_of_extension;
use crate::error::{Error, Result};
use crate::sphere::{sup_negative_part, SphereBasis, Trace};

/// Nodal values below this count as negative.
pub const NONNEG_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub count: usize,
    /// L2 amplitude ranges of the perturbation in degrees < 2, = 2 and > 2.
    pub amp_minus: (f64, f64),
    pub amp_zero: (f64, f64),
    pub amp_plus: (f64, f64),
    pub nonneg: Nonneg,
    pub delta: f64,
}

impl CorpusSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        CorpusSpec {
            seed: cfg.seed,
            count: cfg.corpus_size,
            amp_minus: cfg.amp_minus,
            amp_zero: cfg.amp_zero,
            amp_plus: cfg.amp_plus,
            nonneg: cfg.nonneg,
            delta: cfg.delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    /// L2 distance to the closest element of S.
    pub dist: f64,
    /// `W(z) - W(S)`.
    pub gap: f64,
    pub nodal_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub d: usize,
    pub l: usize,
    pub draws: usize,
    pub rejected: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub traces: Vec<Trace>,
    pub manifest: Manifest,
}

fn random_part(b: &Arc<SphereBasis>, rng: &mut ChaCha8Rng, keep: impl Fn(usize) -> bool, amp: (f64, f64)) -> Trace {
    let a = if amp.1 > amp.0 { rng.random_range(amp.0..amp.1) } else { amp.0 };
    let coeffs: Vec<f64> = b
        .modes()
        .iter()
        .map(|m| {
            let g: f64 = rng.sample(StandardNormal);
            if keep(m.degree) {
                g / (1.0 + m.degree as f64)
            } else {
                0.0
            }
        })
        .collect();
    let t = Trace::from_coeffs(b, coeffs).expect("one coefficient per mode");
    let n = t.norm();
    if n > 0.0 {
        t.scale(a / n)
    } else {
        t
    }
}

/// Draws `Q + eta` with `Q` random in S and accepts traces that are
/// nonnegative (after the lift, in lift mode), within `delta` of S and with
/// gap at most 1. Gives up once more than 99% of draws are rejected.
pub fn generate_corpus(basis: &Arc<SphereBasis>, spec: &CorpusSpec) -> Result<Corpus> {
    let d = basis.dim();
    let w_s = reference_energies_on(basis)?.w_s;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut traces = Vec::with_capacity(spec.count);
    let mut entries = Vec::with_capacity(spec.count);
    let mut draws = 0usize;
    while traces.len() < spec.count {
        if draws >= 100 * spec.count {
            return Err(Error::CorpusInfeasible {
                accepted: traces.len(),
                tried: draws,
            });
        }
        draws += 1;
        let q = eval_on_sphere(&QuadraticBlowup::random(d, &mut rng), basis)?;
        let eta = random_part(basis, &mut rng, |k| k < 2, spec.amp_minus)
            .add(&random_part(basis, &mut rng, |k| k == 2, spec.amp_zero))
            .add(&random_part(basis, &mut rng, |k| k > 2, spec.amp_plus));
        let mut c = q.add(&eta);
        match spec.nonneg {
            Nonneg::Rejection => {
                if sup_negative_part(&c) > 0.0 {
                    continue;
                }
            }
            Nonneg::Lift => c = c.add(&Trace::constant(basis, sup_negative_part(&c))),
        }
        let nodal_min = c.nodal_min();
        let dist = project_to_s(&c)?.distance;
        let gap = w_of_extension(&c) - w_s;
        if nodal_min < -NONNEG_TOL || dist > spec.delta || gap > 1.0 {
            continue;
        }
        entries.push(ManifestEntry {
            file: format!("{:04}.trace", traces.len()),
            dist,
            gap,
            nodal_min,
        });
        traces.push(c);
    }
    Ok(Corpus {
        traces,
        manifest: Manifest {
            seed: spec.seed,
            d,
            l: basis.max_degree(),
            draws,
            rejected: draws - spec.count,
            entries,
        },
    })
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, e) in corpus.traces.iter().zip(&corpus.manifest.entries) {
        fs::write(dir.join(&e.file), t.to_text())?;
    }
    fs::write(dir.join("manifest.json"), manifest_json(&corpus.manifest))?;
    Ok(())
}

pub fn manifest_json(m: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("plain data serializes");
    s.push('\n');
    s
}

/// Reads every `*.trace` in `dir` (sorted by name) and checks it is
/// nonnegative at the nodes.
pub fn load_corpus(dir: &Path, basis: &Arc<SphereBasis>) -> Result<Vec<(PathBuf, Trace)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "trace"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput {
            path: dir.to_path_buf(),
            detail: "no .trace files".into(),
        });
    }
    files
        .into_iter()
        .map(|p| {
            let t = Trace::from_text(basis, &fs::read_to_string(&p)?, &p)?;
            let min = t.nodal_min();
            if min < -NONNEG_TOL {
                return Err(Error::InvalidInput {
                    path: p,
                    detail: format!("trace is negative at a node (min {min:e})"),
                });
            }
            Ok((p, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::build_basis;

    fn spec(count: usize) -> CorpusSpec {
        CorpusSpec::from_config(&RunConfig {
            corpus_size: count,
            ..RunConfig::for_dim(2)
        })
    }

    #[test]
    fn zero_amplitudes_give_elements_of_s() {
        let b = build_basis(2, 8).unwrap();
        let s = CorpusSpec {
            amp_minus: (0.0, 0.0),
            amp_zero: (0.0, 0.0),
            amp_plus: (0.0, 0.0),
            ..spec(10)
        };
        let c = generate_corpus(&b, &s).unwrap();
        for e in &c.manifest.entries {
            assert!(e.dist < 1e-12 && e.gap.abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn manifests_are_deterministic() {
        let b = build_basis(2, 8).unwrap();
        let a = manifest_json(&generate_corpus(&b, &spec(20)).unwrap().manifest);
        let c = manifest_json(&generate_corpus(&b, &spec(20)).unwrap().manifest);
        assert_eq!(a, c);
        let other = manifest_json(&generate_corpus(&b, &CorpusSpec { seed: 9, ..spec(20) }).unwrap().manifest);
        assert_ne!(a, other);
    }

    #[test]
    fn every_trace_meets_the_hypotheses() {
        for (d, l) in [(2, 16), (3, 6)] {
            let b = build_basis(d, l).unwrap();
            for nonneg in [Nonneg::Rejection, Nonneg::Lift] {
                let c = generate_corpus(&b, &CorpusSpec { nonneg, ..spec(30) }).unwrap();
                for (t, e) in c.traces.iter().zip(&c.manifest.entries) {
                    assert!(e.dist <= 1e-2 && e.gap <= 1.0 && e.nodal_min >= -NONNEG_TOL);
                    assert!(sup_negative_part(t) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_reported() {
        let b = build_basis(2, 8).unwrap();
        let s = CorpusSpec {
            amp_minus: (0.5, 0.5),
            ..spec(3)
        };
        assert!(matches!(generate_corpus(&b, &s), Err(Error::CorpusInfeasible { .. })));
    }

    #[test]
    fn corpus_files_round_trip_and_negative_files_are_named() {
        let b = build_basis(2, 8).unwrap();
        let c = generate_corpus(&b, &spec(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let back = load_corpus(dir.path(), &b).unwrap();
        assert_eq!(back.len(), 5);
        for ((_, t), orig) in back.iter().zip(&c.traces) {
            assert!(t.sub(orig).norm() < 1e-15);
        }
        let bad = Trace::constant(&b, -0.1);
        fs::write(dir.path().join("0002.trace"), bad.to_text()).unwrap();
        match load_corpus(dir.path(), &b) {
            Err(Error::InvalidInput { path, .. }) => assert!(path.ends_with("0002.trace")),
            other => panic!("{other:?}"),
        }
    }
}
