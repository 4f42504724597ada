//! Flat `key = value` run configuration and the hyperparameter grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{PkefError, Result};
use crate::propagation::FusionScheme;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Behavior names in cascade order; the last is the target.
    pub behaviors: Vec<String>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(behaviors: Vec<String>) -> Self {
        let train = TrainConfig::defaults(behaviors.len());
        RunConfig {
            data: None,
            behaviors,
            out: None,
            train,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PkefError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            PkefError::Format { line, detail, .. } => PkefError::Format {
                path: path.to_path_buf(),
                line,
                detail,
            },
            other => other,
        })
    }

    /// Parses a config. `behaviors` is applied first so per-behavior
    /// defaults match its length; everything else overrides them.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format_error(i + 1, format!("expected key = value, got '{line}'")));
            };
            entries.push((i + 1, key.trim().to_string(), value.trim().to_string()));
        }
        let behaviors = match entries.iter().find(|e| e.1 == "behaviors") {
            Some((_, _, v)) => parse_names(v),
            None => ["view", "cart", "buy"].map(String::from).to_vec(),
        };
        let mut cfg = RunConfig::new(behaviors);
        for (line, key, value) in entries {
            if key == "behaviors" {
                continue;
            }
            cfg.set(&key, &value).map_err(|e| format_error(line, e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies one setting, as from the config file or a command-line flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "behaviors" => {
                self.behaviors = parse_names(value);
                let fresh = TrainConfig::defaults(self.behaviors.len());
                t.layers = fresh.layers;
                t.lambda = fresh.lambda;
            }
            "dim" => t.dim = num(key, value)?,
            "layers" => t.layers = list(key, value, num)?,
            "lambda" => t.lambda = list(key, value, real)?,
            "fusion" => t.fusion = parse_fusion(value)?,
            "head" => t.head = value.parse()?,
            "tower" => t.tower = value.parse()?,
            "gamma" => t.gamma = real(key, value)?,
            "mu" => t.mu = real(key, value)?,
            "lr" => t.lr = real(key, value)?,
            "batch" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "k" => t.k = num(key, value)?,
            "eval_every" => t.eval_every = num(key, value)?,
            other => return Err(PkefError::Config(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate(self.behaviors.len())
    }

    /// Serializes every setting; [`RunConfig::parse`] reads it back to an
    /// equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let join = |xs: Vec<String>| xs.join(",");
        if let Some(d) = &self.data {
            let _ = writeln!(s, "data = {}", d.display());
        }
        if let Some(o) = &self.out {
            let _ = writeln!(s, "out = {}", o.display());
        }
        let _ = writeln!(s, "behaviors = {}", self.behaviors.join(","));
        let _ = writeln!(s, "dim = {}", t.dim);
        let _ = writeln!(s, "layers = {}", join(t.layers.iter().map(|x| x.to_string()).collect()));
        let _ = writeln!(s, "lambda = {}", join(t.lambda.iter().map(|x| format!("{x:?}")).collect()));
        let fusion = t.fusion.map_or("none".to_string(), |f| f.to_string());
        let _ = writeln!(s, "fusion = {fusion}");
        let _ = writeln!(s, "head = {}", t.head);
        let _ = writeln!(s, "tower = {}", t.tower);
        for (k, v) in [("gamma", t.gamma), ("mu", t.mu), ("lr", t.lr)] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        for (k, v) in [
            ("batch", t.batch_size as u64),
            ("epochs", t.epochs as u64),
            ("patience", t.patience as u64),
            ("seed", t.seed),
            ("k", t.k as u64),
            ("eval_every", t.eval_every as u64),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn format_error(line: usize, detail: String) -> PkefError {
    PkefError::Format {
        path: PathBuf::from("<config>"),
        line,
        detail,
    }
}

fn parse_names(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

pub fn parse_fusion(v: &str) -> Result<Option<FusionScheme>> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        Ok(Some(v.parse()?))
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| PkefError::Config(format!("{key}: '{v}' is not a valid count")))
}

/// Real number, also accepting a `p/q` fraction.
fn real(key: &str, v: &str) -> Result<f64> {
    let v = v.trim();
    let bad = || PkefError::Config(format!("{key}: '{v}' is not a number"));
    match v.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.trim().parse().map_err(|_| bad())?;
            let q: f64 = q.trim().parse().map_err(|_| bad())?;
            Ok(p / q)
        }
        None => v.parse().map_err(|_| bad()),
    }
}

fn list<T>(key: &str, v: &str, item: fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|x| item(key, x)).collect()
}

/// Loss-weight vectors over `{0, 1/6, …, 1}` that sum to one.
pub fn lambda_grid(behaviors: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&x| x as f64 / 6.0).collect());
            cur.pop();
            return;
        }
        for x in 0..=left {
            cur.push(x);
            rec(left - x, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if behaviors > 0 {
        rec(6, behaviors, &mut Vec::new(), &mut out);
    }
    out
}

/// Layer-count vectors over `{1, 2, 3, 4}` per behavior.
pub fn layer_grid(behaviors: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..behaviors {
        out = out
            .into_iter()
            .flat_map(|p| {
                (1..=4).map(move |l| {
                    let mut q = p.clone();
                    q.push(l);
                    q
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::HeadVariant;

    #[test]
    fn parse_and_round_trip() {
        let text = "# run\ndata = /tmp/beibei\nbehaviors = view, cart, buy\nlayers = 4,1,1\nlambda = 0, 4/6, 2/6\nfusion = summation\nhead = mmoe\nlr = 0.01\nseed = 9\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.behaviors, vec!["view", "cart", "buy"]);
        assert_eq!(cfg.train.lambda, vec![0.0, 4.0 / 6.0, 2.0 / 6.0]);
        assert_eq!(cfg.train.fusion, Some(FusionScheme::Summation));
        assert_eq!(cfg.train.head, HeadVariant::Mmoe);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_lines_report_position() {
        match RunConfig::parse("dim = 8\nnonsense\n") {
            Err(PkefError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("dim = -3").is_err());
        assert_eq!(RunConfig::parse("fusion = none").unwrap().train.fusion, None);
    }

    #[test]
    fn behaviors_resize_defaults() {
        let cfg = RunConfig::parse("behaviors = click,buy").unwrap();
        assert_eq!(cfg.train.layers, vec![4, 1]);
        assert_eq!(cfg.train.lambda.len(), 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn grids() {
        let g = lambda_grid(3);
        assert_eq!(g.len(), 28);
        assert!(g.iter().all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        assert!(g.contains(&vec![0.0, 4.0 / 6.0, 2.0 / 6.0]));
        assert_eq!(layer_grid(3).len(), 64);
        assert!(layer_grid(2).contains(&vec![4, 1]));
    }
}
