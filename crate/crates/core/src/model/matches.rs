use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::text::lines;
use super::{FormatError, ImageId, ImagePair, ModelError, Reconstruction};

/// A verified correspondence: `(xi, yi)` on the lower-id image of the pair,
/// `(xj, yj)` on the higher-id image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub xi: f64,
    pub yi: f64,
    pub xj: f64,
    pub yj: f64,
}

impl Correspondence {
    fn swapped(self) -> Self {
        Self {
            xi: self.xj,
            yi: self.yj,
            xj: self.xi,
            yj: self.yi,
        }
    }

    fn is_finite(&self) -> bool {
        [self.xi, self.yi, self.xj, self.yj].iter().all(|v| v.is_finite())
    }
}

/// Inlier correspondences per canonical image pair. The inlier count of a
/// pair is the length of its correspondence list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pairs: BTreeMap<ImagePair, Vec<Correspondence>>,
}

impl MatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts the matches of `(a, b)`, where each correspondence is given as
    /// `(x_a, y_a, x_b, y_b)`. Coordinates are swapped when `a > b`.
    pub fn insert(
        &mut self,
        a: ImageId,
        b: ImageId,
        correspondences: Vec<Correspondence>,
    ) -> Result<(), ModelError> {
        let pair = ImagePair::new(a, b).ok_or(ModelError::SelfPair(a))?;
        if correspondences.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::NonFinite(format!("matches of pair {pair}")));
        }
        if self.pairs.contains_key(&pair) {
            return Err(ModelError::DuplicatePair(pair));
        }
        let correspondences = if a > b {
            correspondences.into_iter().map(Correspondence::swapped).collect()
        } else {
            correspondences
        };
        self.pairs.insert(pair, correspondences);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, pair: &ImagePair) -> Option<&[Correspondence]> {
        self.pairs.get(pair).map(Vec::as_slice)
    }

    pub fn inliers(&self, pair: &ImagePair) -> usize {
        self.pairs.get(pair).map_or(0, Vec::len)
    }

    /// Pairs in canonical order with their correspondences.
    pub fn iter(&self) -> impl Iterator<Item = (ImagePair, &[Correspondence])> {
        self.pairs.iter().map(|(p, c)| (*p, c.as_slice()))
    }

    /// Checks that every referenced image exists and that every coordinate lies
    /// within its image.
    pub fn validate_against(&self, r: &Reconstruction) -> Result<(), ModelError> {
        for (pair, corr) in self.iter() {
            let lookup = |id| {
                r.image(id)
                    .ok_or(ModelError::UnknownPairImage { pair, image: id })
            };
            let (img_i, img_j) = (lookup(pair.lo())?, lookup(pair.hi())?);
            for (index, c) in corr.iter().enumerate() {
                if !img_i.contains(c.xi, c.yi) || !img_j.contains(c.xj, c.yj) {
                    return Err(ModelError::OutOfBounds { pair, index });
                }
            }
        }
        Ok(())
    }
}

/// Parses the matches text format: a `PAIR <i> <j> <n>` header followed by `n`
/// correspondence lines `<xi> <yi> <xj> <yj>`.
pub fn parse_matches(input: &str) -> Result<MatchSet, FormatError> {
    let mut set = MatchSet::new();
    let mut iter = lines(input);
    while let Some(line) = iter.next() {
        let keyword = line.tokens[0];
        if keyword.text != "PAIR" {
            return Err(line.error(keyword.column, format!("expected PAIR, found {:?}", keyword.text)));
        }
        line.expect_len(4)?;
        let a = ImageId(line.field(1, "image_id_i")?);
        let b = ImageId(line.field(2, "image_id_j")?);
        let n: usize = line.field(3, "n_inliers")?;
        let mut corr = Vec::with_capacity(n.min(1 << 16));
        for k in 0..n {
            let Some(row) = iter.next() else {
                return Err(FormatError::Syntax {
                    line: line.number,
                    column: line.tokens[3].column,
                    message: format!("pair declares {n} inliers but input ends after {k}"),
                });
            };
            if row.tokens[0].text == "PAIR" {
                return Err(row.error(1, format!("pair on line {} declares {n} inliers, found {k}", line.number)));
            }
            row.expect_len(4)?;
            corr.push(Correspondence {
                xi: row.finite(0, "xi")?,
                yi: row.finite(1, "yi")?,
                xj: row.finite(2, "xj")?,
                yj: row.finite(3, "yj")?,
            });
        }
        set.insert(a, b, corr).map_err(|e| line.invalid(e))?;
    }
    Ok(set)
}

pub fn write_matches(set: &MatchSet) -> String {
    let mut out = String::from("# pairforge matches v1\n");
    for (pair, corr) in set.iter() {
        let _ = writeln!(out, "PAIR {} {} {}", pair.lo(), pair.hi(), corr.len());
        for c in corr {
            let _ = writeln!(out, "{:?} {:?} {:?} {:?}", c.xi, c.yi, c.xj, c.yj);
        }
    }
    out
}
