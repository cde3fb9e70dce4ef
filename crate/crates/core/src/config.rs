//! Flat `key=value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::competitor::pinned_kappa_cal;
use crate::error::{Error, Result};
use crate::sphere::SphereBasis;

/// How the corpus keeps traces nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonneg {
    Rejection,
    Lift,
}

/// Inequality slacks and tolerances used by the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tolerances {
    pub oracle: f64,
    pub reference: f64,
    pub identity: f64,
    pub positivity: f64,
    pub certificate: f64,
    pub gain: f64,
    pub lojasiewicz: f64,
    pub gronwall: f64,
    pub form: f64,
    pub decay: f64,
    pub slope: f64,
    pub dyadic: f64,
    pub psor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            oracle: 1e-5,
            reference: 1e-10,
            identity: 1e-9,
            positivity: 1e-10,
            certificate: 1e-10,
            gain: 1e-8,
            lojasiewicz: 1e-6,
            gronwall: 1e-8,
            form: 1e-6,
            decay: 1e-8,
            slope: 0.01,
            dyadic: 0.02,
            psor: 1e-9,
        }
    }
}

impl Tolerances {
    fn entries_mut(&mut self) -> [(&'static str, &mut f64); 13] {
        [
            ("oracle", &mut self.oracle),
            ("reference", &mut self.reference),
            ("identity", &mut self.identity),
            ("positivity", &mut self.positivity),
            ("certificate", &mut self.certificate),
            ("gain", &mut self.gain),
            ("lojasiewicz", &mut self.lojasiewicz),
            ("gronwall", &mut self.gronwall),
            ("form", &mut self.form),
            ("decay", &mut self.decay),
            ("slope", &mut self.slope),
            ("dyadic", &mut self.dyadic),
            ("psor", &mut self.psor),
        ]
    }

    fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut copy = self.clone();
        copy.entries_mut().into_iter().map(|(k, v)| (k, *v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub l: usize,
    /// Quadrature oversampling `q`: `2 q L + 1` nodes on the circle,
    /// `q L + 1` per angular axis on the 2-sphere; `q = 2` is the default
    /// quadrature.
    pub oversample: usize,
    pub delta: f64,
    pub eps_cap: f64,
    pub kappa_cal: f64,
    /// Upper cap on the assembly's `eps_kappa`; `None` keeps the derived value.
    pub eps_kappa: Option<f64>,
    /// Projected Euler step; `None` uses the stability limit.
    pub dt: Option<f64>,
    pub t_max: f64,
    pub corpus_size: usize,
    pub seed: u64,
    pub amp_minus: (f64, f64),
    pub amp_zero: (f64, f64),
    pub amp_plus: (f64, f64),
    pub nonneg: Nonneg,
    /// Read traces from this directory instead of generating them.
    pub corpus_dir: Option<PathBuf>,
    pub psor: bool,
    pub psor_n: usize,
    pub tol: Tolerances,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn for_dim(d: usize) -> Self {
        RunConfig {
            d,
            l: if d == 2 { 16 } else { 8 },
            oversample: 2,
            delta: 1e-2,
            eps_cap: 0.5,
            kappa_cal: pinned_kappa_cal(d),
            eps_kappa: None,
            dt: None,
            t_max: 0.5,
            corpus_size: 200,
            seed: 1,
            amp_minus: (0.0, 3e-3),
            amp_zero: (0.0, 3e-3),
            amp_plus: (0.0, 1e-2),
            nonneg: Nonneg::Rejection,
            corpus_dir: None,
            psor: true,
            psor_n: 128,
            tol: Tolerances::default(),
            out: PathBuf::from("epilab-out"),
        }
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text.lines())?;
        let d = match pairs.get("d") {
            Some(v) => parse_num::<usize>("d", v)?,
            None => 2,
        };
        let mut cfg = RunConfig::for_dim(d);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<'a>(&mut self, items: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let pairs = parse_pairs(items)?;
        if let Some(v) = pairs.get("d") {
            let d = parse_num::<usize>("d", v)?;
            if d != self.d {
                // dimension-dependent defaults follow the new dimension
                let base = RunConfig::for_dim(d);
                self.l = base.l;
                self.kappa_cal = base.kappa_cal;
            }
        }
        for (k, v) in &pairs {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d" => self.d = parse_num("d", v)?,
            "L" | "l" => self.l = parse_num("L", v)?,
            "oversample" => self.oversample = parse_num(key, v)?,
            "delta" => self.delta = parse_num(key, v)?,
            "eps_cap" => self.eps_cap = parse_num(key, v)?,
            "kappa_cal" => self.kappa_cal = parse_num(key, v)?,
            "eps_kappa" => self.eps_kappa = parse_auto(key, v)?,
            "dt" => self.dt = parse_auto(key, v)?,
            "t_max" => self.t_max = parse_num(key, v)?,
            "corpus_size" => self.corpus_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "amp_minus" => self.amp_minus = parse_range(key, v)?,
            "amp_zero" => self.amp_zero = parse_range(key, v)?,
            "amp_plus" => self.amp_plus = parse_range(key, v)?,
            "nonneg" => {
                self.nonneg = match v {
                    "rejection" => Nonneg::Rejection,
                    "lift" => Nonneg::Lift,
                    _ => return Err(Error::Config(format!("nonneg must be rejection or lift, got {v:?}"))),
                }
            }
            "corpus_dir" => self.corpus_dir = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "psor" => self.psor = parse_num(key, v)?,
            "psor_n" => self.psor_n = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "tol" => {
                let t: f64 = parse_num(key, v)?;
                for (_, slot) in self.tol.entries_mut() {
                    *slot = t;
                }
            }
            _ => {
                let name = key.strip_prefix("tol.").ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let t: f64 = parse_num(key, v)?;
                let mut entries = self.tol.entries_mut();
                let slot = entries
                    .iter_mut()
                    .find(|(k, _)| *k == name)
                    .ok_or_else(|| Error::Config(format!("unknown tolerance {key:?}")))?;
                *slot.1 = t;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d != 2 && self.d != 3 {
            return bad(format!("d = {} (only 2 and 3 are supported)", self.d));
        }
        if self.l < 3 {
            return bad(format!("L = {} is below 3", self.l));
        }
        if self.oversample < 2 {
            return bad("oversample must be at least 2".into());
        }
        for (k, v) in self.tol.entries() {
            if !(v > 0.0) {
                return bad(format!("tol.{k} = {v} must be positive"));
            }
        }
        let positive = [
            ("delta", self.delta),
            ("eps_cap", self.eps_cap),
            ("kappa_cal", self.kappa_cal),
            ("t_max", self.t_max),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return bad(format!("{k} = {v} must be positive"));
            }
        }
        if self.eps_kappa.is_some_and(|v| !(v > 0.0)) || self.dt.is_some_and(|v| !(v > 0.0)) {
            return bad("eps_kappa and dt must be positive".into());
        }
        for (k, (lo, hi)) in [("amp_minus", self.amp_minus), ("amp_zero", self.amp_zero), ("amp_plus", self.amp_plus)] {
            if !(lo >= 0.0 && hi >= lo) {
                return bad(format!("{k} = {lo}:{hi} is not a range of nonnegative amplitudes"));
            }
        }
        if self.corpus_size == 0 {
            return bad("corpus_size must be positive".into());
        }
        if self.psor_n < 16 || self.psor_n % 2 != 0 {
            return bad("psor_n must be even and at least 16".into());
        }
        Ok(())
    }

    /// The resolved configuration, one sorted `key=value` per line.
    pub fn to_kv(&self) -> String {
        let auto = |v: Option<f64>| v.map_or("auto".to_string(), |x| format!("{x:e}"));
        let mut map = BTreeMap::new();
        map.insert("d".to_string(), self.d.to_string());
        map.insert("L".into(), self.l.to_string());
        map.insert("oversample".into(), self.oversample.to_string());
        map.insert("delta".into(), format!("{:e}", self.delta));
        map.insert("eps_cap".into(), format!("{:e}", self.eps_cap));
        map.insert("kappa_cal".into(), format!("{:e}", self.kappa_cal));
        map.insert("eps_kappa".into(), auto(self.eps_kappa));
        map.insert("dt".into(), auto(self.dt));
        map.insert("t_max".into(), format!("{:e}", self.t_max));
        map.insert("corpus_size".into(), self.corpus_size.to_string());
        map.insert("seed".into(), self.seed.to_string());
        for (k, (lo, hi)) in [("amp_minus", self.amp_minus), ("amp_zero", self.amp_zero), ("amp_plus", self.amp_plus)] {
            map.insert(k.into(), format!("{lo:e}:{hi:e}"));
        }
        map.insert(
            "nonneg".into(),
            match self.nonneg {
                Nonneg::Rejection => "rejection".into(),
                Nonneg::Lift => "lift".into(),
            },
        );
        map.insert(
            "corpus_dir".into(),
            self.corpus_dir.as_ref().map_or("none".into(), |p| p.display().to_string()),
        );
        map.insert("psor".into(), self.psor.to_string());
        map.insert("psor_n".into(), self.psor_n.to_string());
        map.insert("out".into(), self.out.display().to_string());
        for (k, v) in self.tol.entries() {
            map.insert(format!("tol.{k}"), format!("{v:e}"));
        }
        map.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the resolved configuration, without the output directory.
    pub fn hash(&self) -> String {
        let text: String = self.to_kv().lines().filter(|l| !l.starts_with("out=")).map(|l| format!("{l}\n")).collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn basis(&self) -> Result<Arc<SphereBasis>> {
        let n = if self.d == 2 { 2 * self.oversample * self.l + 1 } else { self.oversample * self.l + 1 };
        SphereBasis::with_nodes(self.d, self.l, n).map(Arc::new)
    }
}

fn parse_pairs<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for raw in lines {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn parse_auto(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    match v.split_once(':') {
        Some((a, b)) => Ok((parse_num(key, a)?, parse_num(key, b)?)),
        None => {
            let x = parse_num(key, v)?;
            Ok((x, x))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::for_dim(3);
        cfg.apply_overrides(["seed=7", "amp_plus=0.001:0.02", "tol.gain=1e-7", "dt=0.001"]).unwrap();
        let back = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::from_kv("# run\nd = 2\nL=12  # band limit\nnonneg=lift\ntol=1e-15\n").unwrap();
        assert_eq!((cfg.d, cfg.l, cfg.nonneg), (2, 12, Nonneg::Lift));
        assert_eq!(cfg.tol.gain, 1e-15);
        assert_eq!(cfg.tol.oracle, 1e-15);
        let mut other = cfg.clone();
        other.apply_overrides(["out=/tmp/elsewhere"]).unwrap();
        assert_eq!(other.hash(), cfg.hash());
        other.apply_overrides(["seed=2"]).unwrap();
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_values() {
        for bad in ["d=4", "L=2", "tol.gain=0", "tol.nope=1", "delta=-1", "nonneg=maybe", "bogus=1", "seed"] {
            assert!(matches!(RunConfig::from_kv(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn switching_dimension_resets_its_defaults() {
        let mut cfg = RunConfig::for_dim(2);
        cfg.apply_overrides(["d=3"]).unwrap();
        assert_eq!((cfg.d, cfg.l), (3, 8));
        let b = cfg.basis().unwrap();
        assert_eq!(b.n_nodes(), 17 * 17);
    }
}
