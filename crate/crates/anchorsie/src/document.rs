//! Document primitives: recognized words, serialization orders, entities and
//! entity groups.
//!
//! A document is a flat list of OCR words plus a set of entity groups over
//! them. Words carry normalized boxes; entities carry a class label, a box,
//! and (for ground truth) the index span of their words.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::geometry::BBox;

/// One recognized word with its position in the input sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrWord {
    pub index: usize,
    pub text: String,
    pub box_: BBox,
}

impl OcrWord {
    pub fn new(index: usize, text: impl Into<String>, box_: BBox) -> Self {
        Self {
            index,
            text: text.into(),
            box_,
        }
    }
}

/// Serialization of the word list fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    RasterScan,
    Oracle,
    AsGiven,
}

/// Ordered word list with the serialization that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrSequence {
    pub words: Vec<OcrWord>,
    pub order_mode: OrderMode,
}

impl OcrSequence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Half the median word height; the default row grouping tolerance for
/// raster ordering. Falls back to a small constant for empty input.
pub fn default_row_tolerance(words: &[OcrWord]) -> f64 {
    if words.is_empty() {
        return 0.01;
    }
    let mut heights: Vec<f64> = words.iter().map(|w| w.box_.h).collect();
    heights.sort_by(|a, b| a.total_cmp(b));
    0.5 * heights[heights.len() / 2]
}

/// Row clusters over center-y values: sort by cy and break where the gap
/// between consecutive centers exceeds `row_tolerance`. Returns word
/// positions (into `words`) grouped per row, rows top to bottom.
fn row_clusters(words: &[OcrWord], row_tolerance: f64) -> Vec<Vec<usize>> {
    let mut by_cy: Vec<usize> = (0..words.len()).collect();
    by_cy.sort_by(|&a, &b| {
        words[a]
            .box_
            .cy
            .total_cmp(&words[b].box_.cy)
            .then_with(|| words[a].index.cmp(&words[b].index))
    });
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for pos in by_cy {
        let cy = words[pos].box_.cy;
        match rows.last_mut() {
            Some(row) if cy - words[*row.last().unwrap()].box_.cy <= row_tolerance => {
                row.push(pos)
            }
            _ => rows.push(vec![pos]),
        }
    }
    rows
}

/// Sort words into raster-scan reading order: rows top to bottom (grouped by
/// center-y within `row_tolerance`), left to right within a row, ties broken
/// by the original index. The result is re-indexed 0..N-1.
pub fn order_raster(words: &[OcrWord], row_tolerance: f64) -> OcrSequence {
    let mut ordered: Vec<OcrWord> = Vec::with_capacity(words.len());
    for row in row_clusters(words, row_tolerance) {
        let mut row = row;
        row.sort_by(|&a, &b| {
            words[a]
                .box_
                .cx
                .total_cmp(&words[b].box_.cx)
                .then_with(|| words[a].index.cmp(&words[b].index))
        });
        ordered.extend(row.into_iter().map(|p| words[p].clone()));
    }
    for (i, w) in ordered.iter_mut().enumerate() {
        w.index = i;
    }
    OcrSequence {
        words: ordered,
        order_mode: OrderMode::RasterScan,
    }
}

/// Positions (into `ocr.words`) of the words whose centers lie inside `box_`,
/// in raster order regardless of the sequence's own serialization.
pub fn word_positions_in_box(box_: &BBox, ocr: &OcrSequence) -> Vec<usize> {
    let hits: Vec<usize> = (0..ocr.words.len())
        .filter(|&i| {
            let (cx, cy) = ocr.words[i].box_.center();
            box_.contains_point(cx, cy)
        })
        .collect();
    raster_sort_positions(&hits, &ocr.words)
}

/// Words whose centers lie inside `box_` (boundary inclusive), raster-ordered.
pub fn words_in_box<'a>(box_: &BBox, ocr: &'a OcrSequence) -> Vec<&'a OcrWord> {
    word_positions_in_box(box_, ocr)
        .into_iter()
        .map(|i| &ocr.words[i])
        .collect()
}

/// Raster-order a subset of word positions using the subset's own default
/// row tolerance.
pub fn raster_sort_positions(positions: &[usize], words: &[OcrWord]) -> Vec<usize> {
    let subset: Vec<OcrWord> = positions.iter().map(|&p| words[p].clone()).collect();
    let tol = default_row_tolerance(&subset);
    let mut order: Vec<usize> = Vec::with_capacity(positions.len());
    for row in row_clusters(&subset, tol) {
        let mut row = row;
        row.sort_by(|&a, &b| {
            subset[a]
                .box_
                .cx
                .total_cmp(&subset[b].box_.cx)
                .then_with(|| subset[a].index.cmp(&subset[b].index))
        });
        order.extend(row.into_iter().map(|p| positions[p]));
    }
    order
}

/// A typed entity: class label, bounding box, aggregated text, and (ground
/// truth only) the indices of its words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub label: String,
    pub box_: BBox,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Vec<usize>>,
}

impl Entity {
    pub fn new(label: impl Into<String>, box_: BBox) -> Self {
        Self {
            label: label.into(),
            box_,
            text: String::new(),
            span: None,
        }
    }

    pub fn with_span(mut self, span: Vec<usize>) -> Self {
        self.span = Some(span);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = text.into();
        self
    }
}

/// Relation kind of an entity group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    LineItem,
    KeyValue,
    Singleton,
}

/// A primary entity plus the secondaries related to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityGroup {
    pub primary: Entity,
    pub secondaries: Vec<Entity>,
    pub group_kind: GroupKind,
}

impl EntityGroup {
    pub fn singleton(entity: Entity) -> Self {
        Self {
            primary: entity,
            secondaries: Vec::new(),
            group_kind: GroupKind::Singleton,
        }
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        std::iter::once(&self.primary).chain(self.secondaries.iter())
    }
}

/// A fully annotated document: ordered OCR words, entity groups, and the
/// pixel page size used only for denormalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAnnotation {
    pub ocr: OcrSequence,
    pub groups: Vec<EntityGroup>,
    pub page_size: (f64, f64),
}

impl DocumentAnnotation {
    /// Check span validity and group disjointness. The two invariants every
    /// downstream consumer assumes.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.ocr.len();
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (gi, group) in self.groups.iter().enumerate() {
            for entity in group.entities() {
                if let Some(span) = &entity.span {
                    for &idx in span {
                        if idx >= n {
                            return Err(format!(
                                "group {gi}: span index {idx} out of range (doc has {n} words)"
                            ));
                        }
                        if !seen.insert(idx) {
                            return Err(format!(
                                "group {gi}: word {idx} belongs to more than one entity"
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Every entity of every group, primaries first within each group.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.groups.iter().flat_map(|g| g.entities())
    }
}

/// Re-serialize a document's words under `mode`, remapping entity spans to
/// the new indices. `Oracle` keeps each entity's words contiguous: entities
/// in raster order, each entity's words in raster order within it, then all
/// non-entity words in raster order.
pub fn reserialize(doc: &DocumentAnnotation, mode: OrderMode) -> DocumentAnnotation {
    let words = &doc.ocr.words;
    let order: Vec<usize> = match mode {
        OrderMode::AsGiven => (0..words.len()).collect(),
        OrderMode::RasterScan => raster_sort_all(words),
        OrderMode::Oracle => {
            let mut in_entity = vec![false; words.len()];
            // (raster key of first span word, span in raster order)
            let mut entity_blocks: Vec<(usize, Vec<usize>)> = Vec::new();
            let full_raster = raster_sort_all(words);
            let mut raster_rank = vec![0usize; words.len()];
            for (rank, &pos) in full_raster.iter().enumerate() {
                raster_rank[pos] = rank;
            }
            for group in &doc.groups {
                for entity in group.entities() {
                    if let Some(span) = &entity.span {
                        let ordered = raster_sort_positions(span, words);
                        for &p in &ordered {
                            in_entity[p] = true;
                        }
                        let key = ordered.first().map(|&p| raster_rank[p]).unwrap_or(0);
                        entity_blocks.push((key, ordered));
                    }
                }
            }
            entity_blocks.sort_by_key(|(key, _)| *key);
            let mut order: Vec<usize> =
                entity_blocks.into_iter().flat_map(|(_, span)| span).collect();
            order.extend(full_raster.into_iter().filter(|&p| !in_entity[p]));
            order
        }
    };

    let mut new_index = vec![0usize; words.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let new_words: Vec<OcrWord> = order
        .iter()
        .enumerate()
        .map(|(i, &old)| OcrWord::new(i, words[old].text.clone(), words[old].box_))
        .collect();
    let remap_entity = |e: &Entity| -> Entity {
        let mut e = e.clone();
        if let Some(span) = &mut e.span {
            for idx in span.iter_mut() {
                *idx = new_index[*idx];
            }
        }
        e
    };
    let groups = doc
        .groups
        .iter()
        .map(|g| EntityGroup {
            primary: remap_entity(&g.primary),
            secondaries: g.secondaries.iter().map(remap_entity).collect(),
            group_kind: g.group_kind,
        })
        .collect();
    DocumentAnnotation {
        ocr: OcrSequence {
            words: new_words,
            order_mode: mode,
        },
        groups,
        page_size: doc.page_size,
    }
}

fn raster_sort_all(words: &[OcrWord]) -> Vec<usize> {
    let positions: Vec<usize> = (0..words.len()).collect();
    let tol = default_row_tolerance(words);
    let mut out = Vec::with_capacity(words.len());
    for row in row_clusters(words, tol) {
        let mut row = row;
        row.sort_by(|&a, &b| {
            words[a]
                .box_
                .cx
                .total_cmp(&words[b].box_.cx)
                .then_with(|| words[a].index.cmp(&words[b].index))
        });
        out.extend(row);
    }
    debug_assert_eq!(out.len(), positions.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::SliceRandom;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn word(i: usize, text: &str, cx: f64, cy: f64) -> OcrWord {
        OcrWord::new(i, text, BBox::new(cx, cy, 0.05, 0.02))
    }

    #[test]
    fn strict_vertical_order() {
        let words = vec![word(0, "bottom", 0.5, 0.50), word(1, "top", 0.5, 0.10)];
        let seq = order_raster(&words, 0.01);
        assert_eq!(seq.words[0].text, "top");
        assert_eq!(seq.words[1].text, "bottom");
        assert_eq!(seq.words[0].index, 0);
    }

    #[test]
    fn same_row_orders_left_first() {
        let words = vec![word(0, "A", 0.7, 0.20), word(1, "B", 0.2, 0.21)];
        let seq = order_raster(&words, 0.05);
        assert_eq!(seq.words[0].text, "B");
        assert_eq!(seq.words[1].text, "A");
    }

    #[test]
    fn empty_input_yields_empty_sequence() {
        let seq = order_raster(&[], 0.01);
        assert!(seq.is_empty());
    }

    /// Independent reference: exhaustive pairwise within-tolerance edges,
    /// union-find components as rows, rows by min cy, then cx/index.
    fn brute_force_raster(words: &[OcrWord], tol: f64) -> Vec<String> {
        let n = words.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let r = find(parent, parent[i]);
                parent[i] = r;
            }
            parent[i]
        }
        for i in 0..n {
            for j in 0..n {
                if (words[i].box_.cy - words[j].box_.cy).abs() <= tol {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri] = rj;
                    }
                }
            }
        }
        let mut rows: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut parent, i);
            rows.entry(r).or_default().push(i);
        }
        let mut row_list: Vec<Vec<usize>> = rows.into_values().collect();
        row_list.sort_by(|a, b| {
            let cy_a = a.iter().map(|&i| words[i].box_.cy).fold(f64::INFINITY, f64::min);
            let cy_b = b.iter().map(|&i| words[i].box_.cy).fold(f64::INFINITY, f64::min);
            cy_a.total_cmp(&cy_b)
        });
        let mut out = Vec::new();
        for mut row in row_list {
            row.sort_by(|&a, &b| {
                words[a]
                    .box_
                    .cx
                    .total_cmp(&words[b].box_.cx)
                    .then_with(|| words[a].index.cmp(&words[b].index))
            });
            out.extend(row.into_iter().map(|i| words[i].text.clone()));
        }
        out
    }

    #[test]
    fn random_words_match_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = 20;
            let words: Vec<OcrWord> = (0..n)
                .map(|i| {
                    word(
                        i,
                        &format!("w{i}"),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let tol = 0.03;
            let got: Vec<String> = order_raster(&words, tol)
                .words
                .iter()
                .map(|w| w.text.clone())
                .collect();
            let want = brute_force_raster(&words, tol);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn words_in_box_selects_by_center() {
        let words = vec![
            word(0, "in", 0.3, 0.3),
            word(1, "out", 0.9, 0.9),
            word(2, "also", 0.4, 0.3),
        ];
        let seq = order_raster(&words, 0.01);
        let sel = words_in_box(&BBox::from_corners(0.2, 0.2, 0.5, 0.4), &seq);
        let texts: Vec<&str> = sel.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(texts, vec!["in", "also"]);

        let all = words_in_box(&BBox::from_corners(0.0, 0.0, 1.0, 1.0), &seq);
        assert_eq!(all.len(), 3);
        let none = words_in_box(&BBox::from_corners(0.0, 0.0, 0.01, 0.01), &seq);
        assert!(none.is_empty());
    }

    #[test]
    fn oracle_reserialization_keeps_entities_contiguous() {
        // Two-line wrapped name interleaved with a price in raster order.
        let words = vec![
            word(0, "Chicken", 0.10, 0.30),
            word(1, "Katsu", 0.20, 0.30),
            word(2, "$5.00", 0.80, 0.30),
            word(3, "Curry", 0.12, 0.35),
        ];
        let ocr = OcrSequence {
            words,
            order_mode: OrderMode::RasterScan,
        };
        let name = Entity::new("name", BBox::from_corners(0.05, 0.28, 0.30, 0.37))
            .with_span(vec![0, 1, 3])
            .with_text("Chicken Katsu Curry");
        let price = Entity::new("price", BBox::from_corners(0.75, 0.28, 0.85, 0.32))
            .with_span(vec![2])
            .with_text("$5.00");
        let doc = DocumentAnnotation {
            ocr,
            groups: vec![EntityGroup {
                primary: name,
                secondaries: vec![price],
                group_kind: GroupKind::LineItem,
            }],
            page_size: (1000.0, 1000.0),
        };
        doc.validate().unwrap();
        let oracle = reserialize(&doc, OrderMode::Oracle);
        let span = oracle.groups[0].primary.span.as_ref().unwrap();
        let mut sorted = span.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2], "name words must be contiguous");
        let texts: Vec<&str> = oracle.ocr.words.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(texts, vec!["Chicken", "Katsu", "Curry", "$5.00"]);
    }

    #[test]
    fn validate_rejects_overlapping_spans() {
        let words = vec![word(0, "a", 0.1, 0.1), word(1, "b", 0.2, 0.1)];
        let ocr = OcrSequence {
            words,
            order_mode: OrderMode::RasterScan,
        };
        let e1 = Entity::new("k", BBox::new(0.1, 0.1, 0.1, 0.05)).with_span(vec![0, 1]);
        let e2 = Entity::new("v", BBox::new(0.2, 0.1, 0.1, 0.05)).with_span(vec![1]);
        let doc = DocumentAnnotation {
            ocr,
            groups: vec![EntityGroup::singleton(e1), EntityGroup::singleton(e2)],
            page_size: (100.0, 100.0),
        };
        assert!(doc.validate().is_err());
    }

    proptest! {
        /// Raster order is a total order: ordering any permutation of the
        /// same words yields the same text sequence.
        #[test]
        fn raster_order_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let words: Vec<OcrWord> = (0..n)
                .map(|i| word(i, &format!("w{i}"), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                .collect();
            let base: Vec<String> = order_raster(&words, 0.04).words.iter().map(|w| w.text.clone()).collect();
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut rng);
            // Re-assign indices by new list position but keep a stable map to
            // the original identity through the text.
            for (i, w) in shuffled.iter_mut().enumerate() { w.index = i; }
            let permuted: Vec<String> = order_raster(&shuffled, 0.04).words.iter().map(|w| w.text.clone()).collect();
            prop_assert_eq!(base, permuted);
        }
    }
}
