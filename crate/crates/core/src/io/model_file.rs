//! Versioned text model format; see `docs/model-format.md`.

use std::fmt::Write as _;
use std::path::Path;

use crate::data_terms::ProblemKind;
use crate::diffusion::{Model, StageParams};
use crate::error::{Result, TnrdError};
use crate::filters::FilterAtom;
use crate::influence::{InfluenceFunction, RbfKind, RbfSpec};

pub const MODEL_MAGIC: &str = "tnrd-model";
pub const MODEL_VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    // `{:?}` prints the shortest decimal that parses back to the same bits.
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

/// Serializes `model`.
pub fn write_model(model: &Model) -> String {
    let mut s = String::new();
    let rbf = &model.rbf;
    let _ = writeln!(s, "{MODEL_MAGIC} {MODEL_VERSION}");
    let _ = writeln!(s, "problem {} {:?}", model.problem.name(), model.problem.parameter());
    let _ = writeln!(s, "stages {}", model.num_stages());
    let _ = writeln!(s, "kernel {}", model.kernel_size());
    let _ = writeln!(s, "filters {}", model.num_filters());
    let _ = writeln!(
        s,
        "rbf {} {:?} {:?} {} {:?}",
        rbf.kind.name(),
        rbf.min,
        rbf.step,
        rbf.count,
        rbf.gamma
    );
    let _ = writeln!(s, "pad {}", model.pad_border);
    for (t, stage) in model.stages.iter().enumerate() {
        let _ = writeln!(s, "stage {}", t + 1);
        let _ = writeln!(s, "lambda_raw {:?}", stage.lambda_raw);
        for (i, f) in stage.filters.iter().enumerate() {
            let _ = writeln!(s, "omega {} {}", i + 1, join(&f.omega));
        }
        for (i, p) in stage.influences.iter().enumerate() {
            let _ = writeln!(s, "weights {} {}", i + 1, join(&p.weights));
        }
    }
    s.push_str("end\n");
    s
}

struct Lines<'a> {
    iter: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> TnrdError {
        TnrdError::parse(format!("model file line {}", self.line), message)
    }

    /// Next non-blank, non-comment line split into words, which must start with `key`.
    fn expect(&mut self, key: &str) -> Result<Vec<&'a str>> {
        loop {
            let Some((n, raw)) = self.iter.next() else {
                return Err(self.err(format!("unexpected end of file, expected '{key}'")));
            };
            self.line = n + 1;
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let mut words: Vec<&str> = text.split_whitespace().collect();
            if words[0] != key {
                return Err(self.err(format!("expected '{key}', found '{}'", words[0])));
            }
            words.remove(0);
            return Ok(words);
        }
    }

    fn expect_n(&mut self, key: &str, n: usize) -> Result<Vec<&'a str>> {
        let words = self.expect(key)?;
        if words.len() != n {
            return Err(self.err(format!("'{key}' takes {n} values, found {}", words.len())));
        }
        Ok(words)
    }

    fn num<T: std::str::FromStr>(&self, word: &str) -> Result<T> {
        word.parse()
            .map_err(|_| self.err(format!("cannot parse '{word}' as a number")))
    }

    fn floats(&self, words: &[&str]) -> Result<Vec<f64>> {
        words.iter().map(|w| self.num(w)).collect()
    }

    fn indexed(&mut self, key: &str, index: usize, len: usize) -> Result<Vec<f64>> {
        let words = self.expect_n(key, len + 1)?;
        if self.num::<usize>(words[0])? != index {
            return Err(self.err(format!("expected {key} {index}")));
        }
        self.floats(&words[1..])
    }
}

/// Parses a model document.
pub fn parse_model(text: &str) -> Result<Model> {
    let mut lines = Lines {
        iter: text.lines().enumerate().peekable(),
        line: 0,
    };
    let header = lines.expect_n(MODEL_MAGIC, 1)?;
    let version: u32 = lines.num(header[0])?;
    if version != MODEL_VERSION {
        return Err(TnrdError::Unsupported(format!("model format version {version}")));
    }
    let w = lines.expect_n("problem", 2)?;
    let problem = ProblemKind::from_name(w[0], lines.num(w[1])?)
        .map_err(|e| lines.err(e.to_string()))?;
    problem.validate(false).map_err(|e| lines.err(e.to_string()))?;
    let w = lines.expect_n("stages", 1)?;
    let num_stages: usize = lines.num(w[0])?;
    let w = lines.expect_n("kernel", 1)?;
    let kernel: usize = lines.num(w[0])?;
    let w = lines.expect_n("filters", 1)?;
    let num_filters: usize = lines.num(w[0])?;
    let w = lines.expect_n("rbf", 5)?;
    let kind = RbfKind::from_name(w[0]).ok_or_else(|| lines.err(format!("unknown RBF kind '{}'", w[0])))?;
    let rbf = RbfSpec::new(kind, lines.num(w[1])?, lines.num(w[2])?, lines.num(w[3])?, lines.num(w[4])?)
        .map_err(|e| lines.err(e.to_string()))?;
    let w = lines.expect_n("pad", 1)?;
    let pad: usize = lines.num(w[0])?;
    if kernel % 2 == 0 || kernel < 3 {
        return Err(lines.err(format!("invalid kernel size {kernel}")));
    }
    let basis_len = kernel * kernel - 1;

    let mut stages = Vec::with_capacity(num_stages);
    for t in 1..=num_stages {
        let w = lines.expect_n("stage", 1)?;
        if lines.num::<usize>(w[0])? != t {
            return Err(lines.err(format!("expected stage {t}")));
        }
        let w = lines.expect_n("lambda_raw", 1)?;
        let lambda_raw: f64 = lines.num(w[0])?;
        let filters = (1..=num_filters)
            .map(|i| Ok(FilterAtom::new(lines.indexed("omega", i, basis_len)?)))
            .collect::<Result<Vec<_>>>()?;
        let influences = (1..=num_filters)
            .map(|i| Ok(InfluenceFunction::new(lines.indexed("weights", i, rbf.count)?)))
            .collect::<Result<Vec<_>>>()?;
        stages.push(StageParams {
            lambda_raw,
            filters,
            influences,
        });
    }
    lines.expect_n("end", 0)?;
    Model::with_pad_border(problem, kernel, rbf, stages, pad).map_err(|e| lines.err(e.to_string()))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_model(model)).map_err(|e| TnrdError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TnrdError::io(path, e))?;
    parse_model(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::plain_init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = plain_init(ProblemKind::SuperResolve { factor: 3 }, 3, 5, RbfSpec::default(), 2).unwrap();
        for s in &mut m.stages {
            s.lambda_raw += rng.random_range(-1.0..1.0);
            s.filters.iter_mut().flat_map(|f| f.omega.iter_mut()).for_each(|v| *v += rng.random::<f64>() * 1e-7);
            s.influences.iter_mut().flat_map(|p| p.weights.iter_mut()).for_each(|v| *v *= 1.0 + rng.random::<f64>());
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = perturbed(1);
        let back = parse_model(&write_model(&model)).unwrap();
        assert_eq!(back, model);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tnrd");
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), write_model(&model));
    }

    #[test]
    fn null_model_round_trips() {
        let model = Model::null(ProblemKind::Deblock { quality: 20 }, 5, 3, RbfSpec::with_kind(RbfKind::Triangular), 1).unwrap();
        let text = write_model(&model);
        assert!(text.contains("lambda_raw -inf"));
        assert_eq!(parse_model(&text).unwrap(), model);
    }

    #[test]
    fn header_layout() {
        let text = write_model(&perturbed(2));
        let head: Vec<&str> = text.lines().take(7).collect();
        assert_eq!(
            head,
            [
                "tnrd-model 1",
                "problem sisr 3.0",
                "stages 2",
                "kernel 3",
                "filters 5",
                "rbf gaussian -310.0 10.0 63 10.0",
                "pad 4"
            ]
        );
    }

    #[test]
    fn malformed_documents_are_rejected() {
        let good = write_model(&perturbed(3));
        assert!(matches!(parse_model(&good.replace("tnrd-model 1", "tnrd-model 2")), Err(TnrdError::Unsupported(_))));
        assert!(matches!(parse_model(&good.replace("end\n", "")), Err(TnrdError::Parse { .. })));
        assert!(matches!(parse_model(&good.replace("stage 2", "stage 3")), Err(TnrdError::Parse { .. })));
        let truncated: String = good.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(parse_model(&truncated).is_err());
        let bad_number = good.replacen("omega 1 ", "omega 1 x", 1);
        assert!(matches!(parse_model(&bad_number), Err(TnrdError::Parse { .. })));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn any_finite_parameters_round_trip(
                lambda_raw in any::<f64>().prop_filter("finite", |v| v.is_finite()),
                omega in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 8),
                w in -1e300f64..1e300,
            ) {
                let mut model = Model::null(ProblemKind::Denoise { sigma: 25.0 }, 3, 1, RbfSpec::default(), 1).unwrap();
                model.stages[0].lambda_raw = lambda_raw;
                model.stages[0].filters[0].omega = omega;
                model.stages[0].influences[0].weights[7] = w;
                prop_assert_eq!(parse_model(&write_model(&model)).unwrap(), model);
            }
        }
    }
}
