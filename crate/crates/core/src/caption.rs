//! Caption rendering and the bag-of-tokens caption embedding.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};

const PREFIX: &str = "a satellite image";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub object_class: Option<String>,
    pub country: Option<String>,
}

impl Caption {
    pub fn new(object_class: impl Into<String>, country: impl Into<String>) -> Self {
        Caption {
            object_class: Some(object_class.into()),
            country: Some(country.into()),
        }
    }

    /// Renders the full caption with no clause dropped.
    pub fn text(&self) -> String {
        format_caption(self.object_class.as_deref(), self.country.as_deref())
    }
}

fn format_caption(object: Option<&str>, country: Option<&str>) -> String {
    let mut s = String::from(PREFIX);
    if let Some(o) = object {
        s.push_str(" of a ");
        s.push_str(o);
    }
    if let Some(c) = country {
        s.push_str(" in ");
        s.push_str(c);
    }
    s
}

/// Renders the caption, dropping each optional clause independently with
/// probability `p_drop`. Always consumes two draws.
pub fn render_caption<R: Rng + ?Sized>(caption: &Caption, rng: &mut R, p_drop: f64) -> String {
    let keep_object = rng.random::<f64>() >= p_drop;
    let keep_country = rng.random::<f64>() >= p_drop;
    format_caption(
        caption.object_class.as_deref().filter(|_| keep_object),
        caption.country.as_deref().filter(|_| keep_country),
    )
}

/// Recovers the clauses of a caption rendered by [`render_caption`].
pub fn parse_caption(text: &str) -> Result<Caption> {
    let rest = text
        .strip_prefix(PREFIX)
        .ok_or_else(|| Error::format("caption", format!("missing prefix in '{text}'")))?;
    let (object_part, country) = match rest.rfind(" in ") {
        Some(i) => (&rest[..i], Some(rest[i + 4..].to_string())),
        None => (rest, None),
    };
    let object_class = if object_part.is_empty() {
        None
    } else {
        Some(
            object_part
                .strip_prefix(" of a ")
                .ok_or_else(|| Error::format("caption", format!("unexpected clause in '{text}'")))?
                .to_string(),
        )
    };
    Ok(Caption {
        object_class,
        country,
    })
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token table with a learned embedding row per token. Row 0 is the unknown
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub table: Param,
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

impl Vocabulary {
    /// Builds a vocabulary from every token appearing in `texts`, sorted for
    /// a stable layout, with small uniform random rows.
    pub fn build<'a, R: Rng + ?Sized>(
        texts: impl IntoIterator<Item = &'a str>,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
        tokens.extend(set.into_iter().filter(|t| t != UNKNOWN_TOKEN));
        let values = (0..tokens.len() * dim)
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        Self::from_parts(tokens, values, dim).expect("consistent by construction")
    }

    pub fn from_parts(tokens: Vec<String>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::format("vocabulary", "row 0 must be the unknown token"));
        }
        if values.len() != tokens.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "vocabulary table",
                expected: tokens.len() * dim,
                actual: values.len(),
            });
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let table = Param::new("vocab.table", vec![tokens.len(), dim], values);
        Ok(Vocabulary {
            tokens,
            index,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.shape[1]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.table.value[i * d..(i + 1) * d]
    }

    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.lookup(t)).collect()
    }

    /// Mean of the token rows; the empty caption embeds to zero.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.embed_ids(&self.token_ids(text))
    }

    pub fn embed_ids(&self, ids: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        if ids.is_empty() {
            return out;
        }
        for &i in ids {
            out.iter_mut().zip(self.row(i)).for_each(|(a, v)| *a += v);
        }
        let n = ids.len() as f64;
        out.iter_mut().for_each(|a| *a /= n);
        out
    }

    /// Accumulates the gradient of [`Vocabulary::embed_ids`].
    pub fn backward(&mut self, ids: &[usize], dy: &[f64]) {
        if ids.is_empty() {
            return;
        }
        let d = self.dim();
        let scale = 1.0 / ids.len() as f64;
        for &i in ids {
            let g = &mut self.table.grad[i * d..(i + 1) * d];
            g.iter_mut().zip(dy).for_each(|(a, v)| *a += scale * v);
        }
    }
}

pub fn embed_caption(text: &str, vocab: &Vocabulary) -> Vec<f64> {
    vocab.embed(text)
}

impl Parameterized for Vocabulary {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.table)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn render_examples() {
        let mut rng = seeded(0);
        let c = Caption::new("airport", "USA");
        assert_eq!(render_caption(&c, &mut rng, 0.0), "a satellite image of a airport in USA");
        assert_eq!(render_caption(&c, &mut rng, 1.0), "a satellite image");
        let c = Caption {
            object_class: None,
            country: Some("Japan".into()),
        };
        assert_eq!(render_caption(&c, &mut rng, 0.0), "a satellite image in Japan");
    }

    #[test]
    fn clause_drop_rate_is_independent() {
        let mut rng = seeded(1);
        let c = Caption::new("park", "Chile");
        let n = 20_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let parsed = parse_caption(&render_caption(&c, &mut rng, 0.3)).unwrap();
            let idx = parsed.object_class.is_some() as usize * 2 + parsed.country.is_some() as usize;
            counts[idx] += 1;
        }
        let both_dropped = counts[0] as f64 / n as f64;
        assert!((both_dropped - 0.09).abs() < 0.01, "{both_dropped}");
    }

    #[test]
    fn parse_rejects_foreign_text() {
        assert!(parse_caption("an aerial photo").is_err());
        assert!(parse_caption("a satellite image with a park").is_err());
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a b c"], 3, &mut seeded(2))
    }

    #[test]
    fn embedding_examples() {
        let v = vocab();
        assert_eq!(embed_caption("", &v), vec![0.0; 3]);
        let b = v.lookup("b");
        assert_eq!(embed_caption("B", &v), v.row(b).to_vec());
        let a = v.lookup("a");
        let got = embed_caption("a a b", &v);
        for i in 0..3 {
            let want = (2.0 * v.row(a)[i] + v.row(b)[i]) / 3.0;
            assert!((got[i] - want).abs() < 1e-15);
        }
        assert_eq!(v.lookup("zebra"), 0);
    }

    #[test]
    fn embedding_gradient_matches_finite_difference() {
        let mut v = vocab();
        let ids = v.token_ids("a c c zebra");
        let probe = [0.3, -1.1, 0.7];
        v.backward(&ids, &probe);
        let loss = |v: &Vocabulary| -> f64 {
            v.embed_ids(&ids).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        for i in 0..v.table.len() {
            let mut p = v.clone();
            p.table.value[i] += 1e-6;
            let mut m = v.clone();
            m.table.value[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - v.table.grad[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn embedding_ignores_token_order(perm in Just(vec!["a", "b", "c", "a", "zebra"]).prop_shuffle()) {
            let v = vocab();
            let got = embed_caption(&perm.join(" "), &v);
            let mut sorted = perm.clone();
            sorted.sort();
            let want = embed_caption(&sorted.join(" "), &v);
            for (x, y) in got.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }

        #[test]
        fn full_caption_round_trips(obj in "[a-z]{1,8}( [a-z]{1,8})?", country in "[A-Z][a-z]{1,10}") {
            let c = Caption::new(obj, country);
            let text = render_caption(&c, &mut seeded(0), 0.0);
            prop_assert_eq!(parse_caption(&text).unwrap(), c);
        }
    }
}
