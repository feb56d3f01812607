//! Ranking metrics for cross-modality retrieval.

use std::fmt;
use std::io::Write;

use mid_tensor::{par, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MidError, Result};
use crate::modality::Modality;

/// Query × gallery similarities with identity labels on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    query_labels: Vec<usize>,
    gallery_labels: Vec<usize>,
}

impl SimilarityMatrix {
    /// `values` is row-major `[Q, Gal]`. Every query needs at least one
    /// gallery item with its label.
    pub fn new(values: Vec<f64>, query_labels: Vec<usize>, gallery_labels: Vec<usize>) -> Result<Self> {
        let (q, g) = (query_labels.len(), gallery_labels.len());
        if q == 0 || g == 0 {
            return Err(MidError::Metric("empty query or gallery".into()));
        }
        if values.len() != q * g {
            return Err(MidError::Metric(format!("{} values for a {q}×{g} matrix", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MidError::Metric("non-finite similarity".into()));
        }
        if let Some((i, l)) = query_labels.iter().enumerate().find(|(_, l)| !gallery_labels.contains(l)) {
            return Err(MidError::Metric(format!("query {i} (identity {l}) has no match in the gallery")));
        }
        Ok(Self { values, query_labels, gallery_labels })
    }

    pub fn n_queries(&self) -> usize {
        self.query_labels.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_labels.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let g = self.n_gallery();
        &self.values[q * g..(q + 1) * g]
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.n_gallery() + g]
    }

    pub fn query_labels(&self) -> &[usize] {
        &self.query_labels
    }

    pub fn gallery_labels(&self) -> &[usize] {
        &self.gallery_labels
    }

    /// Gallery-as-query view.
    pub fn transpose(&self) -> Result<Self> {
        let (q, g) = (self.n_queries(), self.n_gallery());
        let mut values = vec![0.0; q * g];
        for i in 0..q {
            for j in 0..g {
                values[j * q + i] = self.values[i * g + j];
            }
        }
        Self::new(values, self.gallery_labels.clone(), self.query_labels.clone())
    }

    /// Elementwise sum of two matrices over the same labels.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.query_labels != other.query_labels || self.gallery_labels != other.gallery_labels {
            return Err(MidError::Metric("adding similarity matrices with different labels".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Self::new(values, self.query_labels.clone(), self.gallery_labels.clone())
    }

    /// Applies `f` to every entry, keeping the labels.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| f(v)).collect(), self.query_labels.clone(), self.gallery_labels.clone())
    }

    /// Gallery indices of query `q` by descending similarity, ties broken by
    /// ascending gallery index.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
    }

    /// Per query, whether each ranked gallery item shares its identity.
    fn relevance(&self) -> Vec<Vec<bool>> {
        par::map_range(self.n_queries(), |q| {
            let label = self.query_labels[q];
            self.ranking(q).into_iter().map(|g| self.gallery_labels[g] == label).collect()
        })
    }
}

/// Cosine similarity between the rows of `a` (`[Q, D]`) and `b` (`[Gal, D]`).
pub fn cosine_similarity_matrix(
    a: &Tensor,
    b: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<SimilarityMatrix> {
    let (q, d) = match *a.shape() {
        [q, d] => (q, d),
        _ => return Err(MidError::Metric(format!("query features {:?} are not [Q, D]", a.shape()))),
    };
    let g = match *b.shape() {
        [g, d2] if d2 == d => g,
        _ => return Err(MidError::Metric(format!("gallery features {:?} do not match D = {d}", b.shape()))),
    };
    if query_labels.len() != q || gallery_labels.len() != g {
        return Err(MidError::Metric("label count does not match feature rows".into()));
    }
    let norms = |t: &Tensor, n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|i| {
                let s: f64 = t.data()[i * d..(i + 1) * d].iter().map(|&v| (v as f64) * (v as f64)).sum();
                if s == 0.0 {
                    Err(MidError::Metric(format!("feature row {i} has zero norm")))
                } else {
                    Ok(s.sqrt())
                }
            })
            .collect()
    };
    let (na, nb) = (norms(a, q)?, norms(b, g)?);
    let rows = par::map_range(q, |i| {
        let ai = &a.data()[i * d..(i + 1) * d];
        (0..g)
            .map(|j| {
                let bj = &b.data()[j * d..(j + 1) * d];
                let dot: f64 = ai.iter().zip(bj).map(|(&x, &y)| x as f64 * y as f64).sum();
                dot / (na[i] * nb[j])
            })
            .collect::<Vec<f64>>()
    });
    SimilarityMatrix::new(rows.concat(), query_labels.to_vec(), gallery_labels.to_vec())
}

/// Fraction of queries with a correct match among their top `k` gallery items.
pub fn cmc_rank_k(s: &SimilarityMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > s.n_gallery() {
        return Err(MidError::Metric(format!("rank {k} outside 1..={}", s.n_gallery())));
    }
    let hits = s.relevance().iter().filter(|r| r[..k].contains(&true)).count();
    Ok(hits as f64 / s.n_queries() as f64)
}

fn average_precision(relevant: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut total = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            found += 1;
            total += found as f64 / (i + 1) as f64;
        }
    }
    total / found as f64
}

/// Mean over queries of the average precision of the ranked gallery.
pub fn mean_ap(s: &SimilarityMatrix) -> Result<f64> {
    let rel = s.relevance();
    Ok(rel.iter().map(|r| average_precision(r)).sum::<f64>() / rel.len() as f64)
}

/// `mAP(S) + Σ_{k=1..K} rank-k(S) / k`.
pub fn eval_score(s: &SimilarityMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > s.n_gallery() {
        return Err(MidError::Metric(format!("K = {k} outside 1..={}", s.n_gallery())));
    }
    let rel = s.relevance();
    let n = rel.len() as f64;
    let map = rel.iter().map(|r| average_precision(r)).sum::<f64>() / n;
    // First relevant position per query gives every rank-k at once.
    let first: Vec<usize> = rel.iter().map(|r| r.iter().position(|&x| x).unwrap_or(usize::MAX)).collect();
    let cmc: f64 = (1..=k).map(|kk| first.iter().filter(|&&f| f < kk).count() as f64 / n / kk as f64).sum();
    Ok(map + cmc)
}

/// Scores for one retrieval direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub rows: Vec<DirectionReport>,
}

fn direction_name(query: Modality, gallery: Modality) -> String {
    format!("{query}_to_{gallery}")
}

/// Rank-k clipped to the gallery size, so tiny galleries still report.
fn clipped_rank(s: &SimilarityMatrix, k: usize) -> Result<f64> {
    cmc_rank_k(s, k.min(s.n_gallery()))
}

fn direction(s: &SimilarityMatrix, name: String, epoch: usize) -> Result<DirectionReport> {
    Ok(DirectionReport {
        direction: name,
        rank1: clipped_rank(s, 1)?,
        rank5: clipped_rank(s, 5)?,
        rank10: clipped_rank(s, 10)?,
        map: mean_ap(s)?,
        epoch,
    })
}

/// Evaluates both retrieval directions between two modalities.
pub fn retrieval_eval(
    query: (Modality, &Tensor, &[usize]),
    gallery: (Modality, &Tensor, &[usize]),
    epoch: usize,
) -> Result<RetrievalReport> {
    let s = cosine_similarity_matrix(query.1, gallery.1, query.2, gallery.2)?;
    let forward = direction(&s, direction_name(query.0, gallery.0), epoch)?;
    let backward = direction(&s.transpose()?, direction_name(gallery.0, query.0), epoch)?;
    Ok(RetrievalReport { rows: vec![forward, backward] })
}

impl RetrievalReport {
    pub fn row(&self, direction: &str) -> Option<&DirectionReport> {
        self.rows.iter().find(|r| r.direction == direction)
    }

    pub fn mean_rank1(&self) -> f64 {
        self.rows.iter().map(|r| r.rank1).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_map(&self) -> f64 {
        self.rows.iter().map(|r| r.map).sum::<f64>() / self.rows.len() as f64
    }

    /// Writes the rows as CSV with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(MidError::io("<csv>"))?;
        Ok(())
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>7} {:>7} {:>7} {:>7}", "direction", "rank1", "rank5", "rank10", "mAP")?;
        for r in &self.rows {
            writeln!(f, "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", r.direction, r.rank1, r.rank5, r.rank10, r.map)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(n: usize) -> SimilarityMatrix {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        SimilarityMatrix::new(v, (0..n).collect(), (0..n).collect()).unwrap()
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = cosine_similarity_matrix(&a, &a, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(s.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn antipodal_is_minus_one() {
        let a = Tensor::new(&[1, 3], vec![1.0, 2.0, -1.0]).unwrap();
        let b = Tensor::new(&[1, 3], vec![-1.0, -2.0, 1.0]).unwrap();
        let s = cosine_similarity_matrix(&a, &b, &[0], &[0]).unwrap();
        assert!((s.get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_is_rejected() {
        let a = Tensor::zeros(&[1, 3]);
        assert!(cosine_similarity_matrix(&a, &a, &[0], &[0]).is_err());
    }

    #[test]
    fn perfect_retrieval() {
        let s = diag(4);
        assert_eq!(cmc_rank_k(&s, 1).unwrap(), 1.0);
        assert_eq!(mean_ap(&s).unwrap(), 1.0);
        assert!((eval_score(&s, 2).unwrap() - 2.5).abs() < 1e-12);
        assert!((eval_score(&s, 1).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn full_gallery_rank_is_one() {
        let s = SimilarityMatrix::new(vec![0.9, 0.1, 0.5, 0.2, 0.8, 0.3], vec![1, 0], vec![0, 0, 1]).unwrap();
        assert_eq!(cmc_rank_k(&s, 3).unwrap(), 1.0);
        assert!(cmc_rank_k(&s, 4).is_err());
        assert!(cmc_rank_k(&s, 0).is_err());
    }

    #[test]
    fn single_relevant_item_second() {
        let s = SimilarityMatrix::new(vec![0.9, 0.5, 0.1], vec![1], vec![0, 1, 2]).unwrap();
        assert_eq!(mean_ap(&s).unwrap(), 0.5);
    }

    #[test]
    fn swapped_pair_hand_case() {
        // Query 0 and 1 see each other's match first.
        let v = vec![0.2, 0.9, 0.1, 0.8, 0.3, 0.0, 0.0, 0.1, 0.7];
        let s = SimilarityMatrix::new(v, vec![0, 1, 2], vec![0, 1, 2]).unwrap();
        assert!((cmc_rank_k(&s, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(cmc_rank_k(&s, 2).unwrap(), 1.0);
        assert!((mean_ap(&s).unwrap() - (0.5 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let s = SimilarityMatrix::new(vec![0.5; 3], vec![2], vec![0, 1, 2]).unwrap();
        assert_eq!(s.ranking(0), vec![0, 1, 2]);
        assert_eq!(cmc_rank_k(&s, 2).unwrap(), 0.0);
        assert!((mean_ap(&s).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unmatched_query_is_an_error() {
        assert!(SimilarityMatrix::new(vec![0.0, 0.0], vec![5], vec![0, 1]).is_err());
    }

    #[test]
    fn report_labels_follow_direction() {
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = retrieval_eval((Modality::Rgb, &a, &[0, 1]), (Modality::Ir, &a, &[0, 1]), 3).unwrap();
        assert_eq!(r.rows[0].direction, "rgb_to_ir");
        assert_eq!(r.rows[1].direction, "ir_to_rgb");
        let swapped = retrieval_eval((Modality::Ir, &a, &[0, 1]), (Modality::Rgb, &a, &[0, 1]), 3).unwrap();
        assert_eq!(swapped.rows[0].direction, "ir_to_rgb");
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("direction,rank1,rank5,rank10,mAP,epoch\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
