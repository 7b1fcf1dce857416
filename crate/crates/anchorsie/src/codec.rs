//! Anchor-word target encoding and prediction decoding.
//!
//! Encoding turns an annotated document into per-token supervision: an
//! anchor class (with class 0 for non-anchors), an entity box on anchor
//! tokens, a primary flag, and the binary link matrix between primary and
//! secondary anchors. Decoding inverts the process on model outputs and
//! reassembles grouped entities.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::document::{
    raster_sort_positions, word_positions_in_box, DocumentAnnotation, Entity, EntityGroup,
    GroupKind, OcrSequence,
};
use crate::errors::CodecError;
use crate::geometry::{iou, BBox};
use crate::model::Predictions;

/// Same-class anchors whose boxes overlap this much are duplicates; the one
/// with the higher class probability survives.
pub const NMS_IOU: f64 = 0.9;
/// A last anchor folds into a first anchor of the same class when their
/// boxes overlap at least this much; otherwise it is dropped.
pub const LAST_MERGE_IOU: f64 = 0.5;

/// Which span word(s) of an entity act as its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    First,
    Last,
    FirstLast,
}

/// How the primary entity of a line-item group is designated. Key-value
/// groups always take the key as primary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryRule {
    ByClass(String),
    FirstEntity,
}

/// Ordered entity labels; class id 0 is reserved for the empty class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    labels: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    /// Total class count including the empty class.
    pub fn len(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Class id of a label; ids start at 1, 0 being the empty class.
    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|p| p + 1)
    }

    /// Label of a non-empty class id.
    pub fn label_of(&self, id: usize) -> Option<&str> {
        if id == 0 {
            None
        } else {
            self.labels.get(id - 1).map(|s| s.as_str())
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Configuration of the anchor target codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub anchor_mode: AnchorMode,
    pub primary_rule: PrimaryRule,
    /// Affinity threshold tau: a secondary links to its argmax primary only
    /// above this value.
    pub link_threshold: f64,
    pub primary_threshold: f64,
    pub class_set: ClassSet,
    /// Label whose anchors act as keys of key-value groups.
    #[serde(default)]
    pub key_label: Option<String>,
}

impl AnchorConfig {
    pub fn new(class_set: ClassSet) -> Self {
        let key_label = class_set.id_of("key").map(|_| "key".to_string());
        Self {
            anchor_mode: AnchorMode::First,
            primary_rule: PrimaryRule::ByClass("name".into()),
            link_threshold: 0.5,
            primary_threshold: 0.5,
            class_set,
            key_label,
        }
    }

    pub fn with_mode(mut self, mode: AnchorMode) -> Self {
        self.anchor_mode = mode;
        self
    }

    pub fn with_primary_rule(mut self, rule: PrimaryRule) -> Self {
        self.primary_rule = rule;
        self
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if !ok(self.link_threshold) || !ok(self.primary_threshold) {
            return Err(CodecError::InvalidAnnotation(
                "thresholds must lie strictly inside (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// Role a token plays for its entity's span, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRole {
    None,
    First,
    Last,
}

/// Per-token supervision produced by [`encode_targets`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    /// Class id per token; 0 marks the empty class.
    pub anchor_class: Vec<usize>,
    pub anchor_role: Vec<AnchorRole>,
    /// Entity box per token, present exactly where the class is non-empty.
    pub boxes: Vec<Option<BBox>>,
    pub is_primary: Vec<bool>,
    /// Key anchor tokens flagged primary, ascending; the row order of the
    /// link matrix.
    pub primary_tokens: Vec<usize>,
    /// Remaining key anchor tokens, ascending; the column order.
    pub secondary_tokens: Vec<usize>,
    /// Binary m x n link matrix over primary x secondary anchors.
    pub link_matrix: Array2<f64>,
}

impl AnchorTargets {
    pub fn len(&self) -> usize {
        self.anchor_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_class.is_empty()
    }

    /// Tokens that key an entity (one per ground-truth entity).
    pub fn key_anchor_tokens(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .primary_tokens
            .iter()
            .chain(self.secondary_tokens.iter())
            .copied()
            .collect();
        t.sort_unstable();
        t
    }
}

/// The anchor role that keys an entity under the given mode.
fn key_role(mode: AnchorMode) -> AnchorRole {
    match mode {
        AnchorMode::First | AnchorMode::FirstLast => AnchorRole::First,
        AnchorMode::Last => AnchorRole::Last,
    }
}

struct EntityRef<'a> {
    entity: &'a Entity,
    group_index: usize,
    is_primary: bool,
    /// Span positions in raster order.
    span_raster: Vec<usize>,
}

/// Resolve the primary entity index within a group's entity list.
fn resolve_primary(
    group: &EntityGroup,
    group_index: usize,
    cfg: &AnchorConfig,
    raster_rank: &[usize],
    ocr: &OcrSequence,
) -> Result<usize, CodecError> {
    let entities: Vec<&Entity> = group.entities().collect();
    match group.group_kind {
        // The stored primary is authoritative for key-value pairs and
        // singletons; the configurable rule only concerns line items.
        GroupKind::KeyValue | GroupKind::Singleton => Ok(0),
        GroupKind::LineItem => match &cfg.primary_rule {
            PrimaryRule::ByClass(label) => {
                let mut candidates: Vec<usize> = entities
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| &e.label == label)
                    .map(|(i, _)| i)
                    .collect();
                if candidates.is_empty() {
                    return Err(CodecError::MissingPrimaryLabel {
                        group_index,
                        label: label.clone(),
                    });
                }
                candidates.sort_by_key(|&i| entity_raster_key(entities[i], raster_rank, ocr));
                Ok(candidates[0])
            }
            PrimaryRule::FirstEntity => {
                let mut order: Vec<usize> = (0..entities.len()).collect();
                order.sort_by_key(|&i| entity_raster_key(entities[i], raster_rank, ocr));
                Ok(order[0])
            }
        },
    }
}

/// Raster rank of an entity's first span word; used to order entities
/// independently of the current serialization.
fn entity_raster_key(entity: &Entity, raster_rank: &[usize], ocr: &OcrSequence) -> usize {
    match &entity.span {
        Some(span) if !span.is_empty() => {
            let ordered = raster_sort_positions(span, &ocr.words);
            raster_rank[ordered[0]]
        }
        _ => usize::MAX,
    }
}

/// Encode a ground-truth annotation into per-token anchor targets.
pub fn encode_targets(
    doc: &DocumentAnnotation,
    cfg: &AnchorConfig,
) -> Result<AnchorTargets, CodecError> {
    cfg.validate()?;
    doc.validate().map_err(CodecError::InvalidAnnotation)?;
    let n = doc.ocr.len();
    let words = &doc.ocr.words;

    let raster_rank = {
        let order = raster_sort_positions(&(0..n).collect::<Vec<_>>(), words);
        let mut rank = vec![0usize; n];
        for (r, &p) in order.iter().enumerate() {
            rank[p] = r;
        }
        rank
    };

    // Flatten groups into entity refs with resolved primaries.
    let mut refs: Vec<EntityRef> = Vec::new();
    for (gi, group) in doc.groups.iter().enumerate() {
        let primary_idx = resolve_primary(group, gi, cfg, &raster_rank, &doc.ocr)?;
        for (ei, entity) in group.entities().enumerate() {
            let span = entity.span.as_ref().ok_or_else(|| {
                CodecError::InvalidAnnotation(format!(
                    "group {gi}: entity '{}' has no word span",
                    entity.label
                ))
            })?;
            if span.is_empty() {
                return Err(CodecError::InvalidAnnotation(format!(
                    "group {gi}: entity '{}' has an empty span",
                    entity.label
                )));
            }
            refs.push(EntityRef {
                entity,
                group_index: gi,
                is_primary: ei == primary_idx,
                span_raster: raster_sort_positions(span, words),
            });
        }
    }

    let mut anchor_class = vec![0usize; n];
    let mut anchor_role = vec![AnchorRole::None; n];
    let mut boxes: Vec<Option<BBox>> = vec![None; n];
    let mut is_primary = vec![false; n];
    // key token -> (group index, primary?)
    let mut key_tokens: BTreeMap<usize, (usize, bool)> = BTreeMap::new();

    for r in &refs {
        let class_id = cfg
            .class_set
            .id_of(&r.entity.label)
            .ok_or_else(|| CodecError::UnknownLabel(r.entity.label.clone()))?;
        let first = r.span_raster[0];
        let last = *r.span_raster.last().unwrap();
        let mut mark = |token: usize, role: AnchorRole| {
            anchor_class[token] = class_id;
            anchor_role[token] = role;
            boxes[token] = Some(r.entity.box_);
        };
        let key_token = match cfg.anchor_mode {
            AnchorMode::First => {
                mark(first, AnchorRole::First);
                first
            }
            AnchorMode::Last => {
                mark(last, AnchorRole::Last);
                last
            }
            AnchorMode::FirstLast => {
                // A single-word entity carries one anchor with the first role.
                mark(first, AnchorRole::First);
                if last != first {
                    mark(last, AnchorRole::Last);
                }
                first
            }
        };
        if r.is_primary {
            is_primary[key_token] = true;
        }
        key_tokens.insert(key_token, (r.group_index, r.is_primary));
    }

    let primary_tokens: Vec<usize> = key_tokens
        .iter()
        .filter(|(_, (_, p))| *p)
        .map(|(&t, _)| t)
        .collect();
    let secondary_tokens: Vec<usize> = key_tokens
        .iter()
        .filter(|(_, (_, p))| !*p)
        .map(|(&t, _)| t)
        .collect();

    let mut link_matrix = Array2::zeros((primary_tokens.len(), secondary_tokens.len()));
    for (i, pt) in primary_tokens.iter().enumerate() {
        for (j, st) in secondary_tokens.iter().enumerate() {
            if key_tokens[pt].0 == key_tokens[st].0 {
                link_matrix[[i, j]] = 1.0;
            }
        }
    }

    Ok(AnchorTargets {
        anchor_class,
        anchor_role,
        boxes,
        is_primary,
        primary_tokens,
        secondary_tokens,
        link_matrix,
    })
}

/// One decoded field of a parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedField {
    pub label: String,
    pub text: String,
    /// Corner form [x0, y0, x1, y1].
    #[serde(rename = "box")]
    pub box_: [f64; 4],
}

impl ParsedField {
    fn from_entity(e: &Entity) -> Self {
        Self {
            label: e.label.clone(),
            text: e.text.clone(),
            box_: e.box_.corner_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedGroup {
    pub kind: GroupKind,
    /// Primary field first, secondaries after in token order.
    pub fields: Vec<ParsedField>,
}

/// Decode bookkeeping: how many anchors, links and suppressions occurred.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeDiagnostics {
    pub anchors_decoded: usize,
    pub links_decoded: usize,
    pub duplicates_suppressed: usize,
    pub last_anchors_merged: usize,
    pub last_anchors_dropped: usize,
}

/// Grouped entities decoded from model predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseResult {
    pub groups: Vec<EntityGroup>,
    pub orphans: Vec<Entity>,
    pub diagnostics: DecodeDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct ParseResultWire {
    groups: Vec<ParsedGroup>,
    orphans: Vec<ParsedField>,
}

impl ParseResult {
    pub fn empty() -> Self {
        Self {
            groups: Vec::new(),
            orphans: Vec::new(),
            diagnostics: DecodeDiagnostics::default(),
        }
    }

    /// Stable JSON wire form: groups with kind and ordered fields, then
    /// orphans.
    pub fn to_json(&self) -> serde_json::Value {
        let wire = ParseResultWire {
            groups: self
                .groups
                .iter()
                .map(|g| ParsedGroup {
                    kind: g.group_kind,
                    fields: g.entities().map(ParsedField::from_entity).collect(),
                })
                .collect(),
            orphans: self.orphans.iter().map(ParsedField::from_entity).collect(),
        };
        serde_json::to_value(&wire).expect("parse result serializes")
    }

    pub fn entity_count(&self) -> usize {
        self.groups.iter().map(|g| 1 + g.secondaries.len()).sum::<usize>() + self.orphans.len()
    }
}

/// An anchor surviving detection, before grouping.
#[derive(Debug, Clone)]
pub struct DecodedAnchor {
    pub token: usize,
    pub class_id: usize,
    pub box_: BBox,
    pub class_prob: f64,
}

/// Decode per-token predictions into grouped entities.
///
/// Tokens with a non-empty argmax class are anchors. In `first_last` mode a
/// last anchor (a token that is not the raster-first word inside its own
/// predicted box) widens the matching first anchor's box or is dropped.
/// Primaries are thresholded on the primary head; each secondary joins its
/// argmax-affinity primary when the affinity clears `link_threshold`.
pub fn decode_predictions(
    preds: &Predictions,
    ocr: &OcrSequence,
    cfg: &AnchorConfig,
) -> Result<ParseResult, CodecError> {
    cfg.validate()?;
    if preds.len() != ocr.len() {
        return Err(CodecError::LengthMismatch {
            pred_len: preds.len(),
            doc_len: ocr.len(),
        });
    }
    if ocr.is_empty() {
        return Ok(ParseResult::empty());
    }

    let classes = preds.argmax_classes();
    let class_probs = preds.argmax_probs();
    let mut diagnostics = DecodeDiagnostics::default();

    let mut keys: Vec<DecodedAnchor> = Vec::new();
    let mut lasts: Vec<DecodedAnchor> = Vec::new();
    for token in 0..preds.len() {
        if classes[token] == 0 {
            continue;
        }
        let anchor = DecodedAnchor {
            token,
            class_id: classes[token],
            box_: preds.box_at(token),
            class_prob: class_probs[token],
        };
        diagnostics.anchors_decoded += 1;
        match cfg.anchor_mode {
            AnchorMode::First | AnchorMode::Last => keys.push(anchor),
            AnchorMode::FirstLast => {
                let members = word_positions_in_box(&anchor.box_, ocr);
                let leads = members.first() == Some(&token) || !members.contains(&token);
                if leads {
                    keys.push(anchor);
                } else {
                    lasts.push(anchor);
                }
            }
        }
    }

    // Duplicate suppression among entity keys: same class, near-identical
    // boxes, keep the more confident one.
    keys.sort_by(|a, b| {
        b.class_prob
            .total_cmp(&a.class_prob)
            .then_with(|| a.token.cmp(&b.token))
    });
    let mut kept: Vec<DecodedAnchor> = Vec::new();
    for cand in keys {
        let dup = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.box_, &cand.box_) > NMS_IOU);
        if dup {
            diagnostics.duplicates_suppressed += 1;
        } else {
            kept.push(cand);
        }
    }
    kept.sort_by_key(|a| a.token);

    // Fold last anchors into the best-overlapping first anchor of the same
    // class; unmatched last anchors are dropped.
    let mut entity_boxes: Vec<BBox> = kept.iter().map(|a| a.box_).collect();
    for last in &lasts {
        let mut best: Option<(usize, f64)> = None;
        for (i, key) in kept.iter().enumerate() {
            if key.class_id != last.class_id {
                continue;
            }
            let overlap = iou(&entity_boxes[i], &last.box_);
            if overlap > LAST_MERGE_IOU && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((i, overlap));
            }
        }
        match best {
            Some((i, _)) => {
                entity_boxes[i] = entity_boxes[i].union_hull(&last.box_);
                diagnostics.last_anchors_merged += 1;
            }
            None => diagnostics.last_anchors_dropped += 1,
        }
    }
    for (anchor, box_) in kept.iter_mut().zip(entity_boxes) {
        anchor.box_ = box_;
    }

    let primary_probs = preds.primary_probs();
    let is_primary: Vec<bool> = kept
        .iter()
        .map(|a| primary_probs[a.token] > cfg.primary_threshold)
        .collect();

    group_anchors(&kept, &is_primary, preds, ocr, cfg, diagnostics)
}

/// Link primaries and secondaries via the affinity matrix and assemble the
/// final groups. Shared by the anchor decoder and the tagging baseline.
pub fn group_anchors(
    anchors: &[DecodedAnchor],
    is_primary: &[bool],
    preds: &Predictions,
    ocr: &OcrSequence,
    cfg: &AnchorConfig,
    mut diagnostics: DecodeDiagnostics,
) -> Result<ParseResult, CodecError> {
    let primaries: Vec<&DecodedAnchor> = anchors
        .iter()
        .zip(is_primary)
        .filter(|(_, &p)| p)
        .map(|(a, _)| a)
        .collect();
    let secondaries: Vec<&DecodedAnchor> = anchors
        .iter()
        .zip(is_primary)
        .filter(|(_, &p)| !p)
        .map(|(a, _)| a)
        .collect();

    let make_entity = |a: &DecodedAnchor| -> Entity {
        let label = cfg
            .class_set
            .label_of(a.class_id)
            .unwrap_or("unknown")
            .to_string();
        let text = aggregate_entity_text(&a.box_, ocr);
        Entity::new(label, a.box_).with_text(text)
    };

    // Affinity rows follow the primaries' token order, columns the
    // secondaries'.
    let rows: Vec<usize> = primaries.iter().map(|a| a.token).collect();
    let cols: Vec<usize> = secondaries.iter().map(|a| a.token).collect();
    let affinity = select_affinity(preds, &rows, &cols);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); primaries.len()];
    let mut orphans: Vec<Entity> = Vec::new();
    for (j, sec) in secondaries.iter().enumerate() {
        let mut best: Option<usize> = None;
        for i in 0..primaries.len() {
            if best.map_or(true, |b| affinity[[i, j]] > affinity[[b, j]]) {
                best = Some(i);
            }
        }
        match best {
            Some(i) if affinity[[i, j]] > cfg.link_threshold => {
                members[i].push(j);
                diagnostics.links_decoded += 1;
            }
            _ => orphans.push(make_entity(sec)),
        }
    }

    let mut groups: Vec<EntityGroup> = Vec::new();
    for (i, prim) in primaries.iter().enumerate() {
        let primary = make_entity(prim);
        let linked: Vec<Entity> = members[i].iter().map(|&j| make_entity(secondaries[j])).collect();
        let is_key = cfg
            .key_label
            .as_deref()
            .map_or(false, |k| primary.label == k);
        let group_kind = if is_key {
            GroupKind::KeyValue
        } else if linked.is_empty() {
            GroupKind::Singleton
        } else {
            GroupKind::LineItem
        };
        groups.push(EntityGroup {
            primary,
            secondaries: linked,
            group_kind,
        });
    }

    Ok(ParseResult {
        groups,
        orphans,
        diagnostics,
    })
}

/// Affinity over the selected primary and secondary token rows.
pub fn select_affinity(preds: &Predictions, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    let h = preds.ep_head.ncols();
    let mut ep = Array2::zeros((rows.len(), h));
    for (i, &t) in rows.iter().enumerate() {
        ep.row_mut(i).assign(&preds.ep_head.row(t));
    }
    let mut es = Array2::zeros((cols.len(), h));
    for (j, &t) in cols.iter().enumerate() {
        es.row_mut(j).assign(&preds.es_head.row(t));
    }
    crate::model::affinity(&ep, &es)
}

/// Raster-ordered, single-space concatenation of the words inside `box_`.
pub fn aggregate_entity_text(box_: &BBox, ocr: &OcrSequence) -> String {
    crate::document::words_in_box(box_, ocr)
        .iter()
        .map(|w| w.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build predictions that reproduce the targets exactly: saturated one-hot
/// class logits, exact boxes, saturated primary logits, and association
/// embeddings whose affinity matches the link matrix. Test and demo helper.
pub fn perfect_predictions(
    targets: &AnchorTargets,
    class_count: usize,
    fallback_box: impl Fn(usize) -> BBox,
) -> Predictions {
    const BIG: f64 = 16.0;
    let n = targets.len();
    let m = targets.primary_tokens.len();
    let h = m.max(1);

    let mut class_logits = Array2::zeros((n, class_count));
    let mut boxes = Array2::zeros((n, 4));
    let mut primary_logits = Array2::from_elem((n, 1), -BIG);
    let mut ep = Array2::zeros((n, h));
    let mut es = Array2::zeros((n, h));

    for t in 0..n {
        class_logits[[t, targets.anchor_class[t]]] = BIG;
        let b = targets.boxes[t].unwrap_or_else(|| fallback_box(t));
        boxes[[t, 0]] = b.cx;
        boxes[[t, 1]] = b.cy;
        boxes[[t, 2]] = b.w;
        boxes[[t, 3]] = b.h;
        if targets.is_primary[t] {
            primary_logits[[t, 0]] = BIG;
        }
    }
    for (i, &t) in targets.primary_tokens.iter().enumerate() {
        ep[[t, i]] = BIG;
    }
    for (j, &t) in targets.secondary_tokens.iter().enumerate() {
        // Column j of the link matrix has at most one 1; point the secondary
        // embedding at that group's primary slot, away from all others.
        let owner = (0..m).find(|&i| targets.link_matrix[[i, j]] > 0.5);
        match owner {
            Some(i) => {
                for k in 0..h {
                    es[[t, k]] = if k == i { 1.0 } else { -1.0 };
                }
            }
            None => {
                for k in 0..h {
                    es[[t, k]] = -1.0;
                }
            }
        }
    }

    Predictions {
        class_logits,
        boxes,
        primary_logits,
        ep_head: ep,
        es_head: es,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{OcrWord, OrderMode};

    fn word(i: usize, text: &str, cx: f64, cy: f64) -> OcrWord {
        OcrWord::new(i, text, BBox::new(cx, cy, 0.06, 0.02))
    }

    /// The running receipt: a key-value pair ("Ship To:" -> "ABC") and a
    /// line item (Chicken / 2 / $5.00).
    fn fig2_doc() -> DocumentAnnotation {
        let words = vec![
            word(0, "Ship", 0.10, 0.10),
            word(1, "To:", 0.18, 0.10),
            word(2, "ABC", 0.30, 0.10),
            word(3, "Chicken", 0.12, 0.30),
            word(4, "2", 0.50, 0.30),
            word(5, "$5.00", 0.80, 0.30),
        ];
        let ocr = OcrSequence {
            words,
            order_mode: OrderMode::RasterScan,
        };
        let ent = |label: &str, span: Vec<usize>, x0: f64, x1: f64, cy: f64| {
            Entity::new(label, BBox::from_corners(x0, cy - 0.02, x1, cy + 0.02)).with_span(span)
        };
        let key = ent("key", vec![0, 1], 0.05, 0.22, 0.10);
        let value = ent("value", vec![2], 0.26, 0.34, 0.10);
        let name = ent("name", vec![3], 0.07, 0.17, 0.30);
        let count = ent("count", vec![4], 0.46, 0.54, 0.30);
        let price = ent("price", vec![5], 0.75, 0.85, 0.30);
        DocumentAnnotation {
            ocr,
            groups: vec![
                EntityGroup {
                    primary: key,
                    secondaries: vec![value],
                    group_kind: GroupKind::KeyValue,
                },
                EntityGroup {
                    primary: name,
                    secondaries: vec![count, price],
                    group_kind: GroupKind::LineItem,
                },
            ],
            page_size: (1000.0, 1000.0),
        }
    }

    fn receipt_classes() -> ClassSet {
        ClassSet::new(["name", "count", "price", "key", "value", "total"])
    }

    #[test]
    fn encode_marks_anchors_and_links() {
        let doc = fig2_doc();
        let cfg = AnchorConfig::new(receipt_classes());
        let t = encode_targets(&doc, &cfg).unwrap();

        let label_at = |i: usize| cfg.class_set.label_of(t.anchor_class[i]);
        assert_eq!(label_at(0), Some("key")); // Ship
        assert_eq!(label_at(1), None); // To: is not an anchor
        assert_eq!(label_at(2), Some("value")); // ABC
        assert_eq!(label_at(3), Some("name")); // Chicken
        assert_eq!(label_at(4), Some("count")); // 2
        assert_eq!(label_at(5), Some("price")); // $5.00

        // Primaries: the key and the name.
        assert_eq!(t.primary_tokens, vec![0, 3]);
        assert_eq!(t.secondary_tokens, vec![2, 4, 5]);
        // ABC links to Ship; 2 and $5.00 link to Chicken.
        assert_eq!(t.link_matrix[[0, 0]], 1.0);
        assert_eq!(t.link_matrix[[1, 0]], 0.0);
        assert_eq!(t.link_matrix[[1, 1]], 1.0);
        assert_eq!(t.link_matrix[[1, 2]], 1.0);
        assert_eq!(t.link_matrix[[0, 1]], 0.0);

        // One empty token: N - anchors = 6 - 5.
        assert_eq!(t.anchor_class.iter().filter(|&&c| c == 0).count(), 1);
    }

    #[test]
    fn zero_entity_document_is_all_empty() {
        let words = vec![word(0, "nothing", 0.5, 0.5)];
        let doc = DocumentAnnotation {
            ocr: OcrSequence {
                words,
                order_mode: OrderMode::RasterScan,
            },
            groups: vec![],
            page_size: (100.0, 100.0),
        };
        let cfg = AnchorConfig::new(receipt_classes());
        let t = encode_targets(&doc, &cfg).unwrap();
        assert!(t.anchor_class.iter().all(|&c| c == 0));
        assert_eq!(t.link_matrix.dim(), (0, 0));
    }

    #[test]
    fn missing_primary_label_is_an_error_naming_the_group() {
        let mut doc = fig2_doc();
        doc.groups[1].primary.label = "price".into(); // no name left
        doc.groups[1].secondaries[1].label = "count".into();
        let cfg = AnchorConfig::new(receipt_classes());
        // count appears twice now; still no "name" entity in group 1.
        match encode_targets(&doc, &cfg) {
            Err(CodecError::MissingPrimaryLabel { group_index, label }) => {
                assert_eq!(group_index, 1);
                assert_eq!(label, "name");
            }
            other => panic!("expected MissingPrimaryLabel, got {other:?}"),
        }
    }

    #[test]
    fn first_last_single_word_entities_carry_one_anchor() {
        let doc = fig2_doc();
        let cfg = AnchorConfig::new(receipt_classes()).with_mode(AnchorMode::FirstLast);
        let t = encode_targets(&doc, &cfg).unwrap();
        // "Ship To:" has distinct first and last anchors; single-word
        // entities carry only the first role.
        assert_eq!(t.anchor_role[0], AnchorRole::First);
        assert_eq!(t.anchor_role[1], AnchorRole::Last);
        assert_eq!(t.anchor_role[3], AnchorRole::First);
        let firsts = t.anchor_role.iter().filter(|r| **r == AnchorRole::First).count();
        assert_eq!(firsts, 5, "one first anchor per entity");
    }

    #[test]
    fn perfect_round_trip_recovers_groups() {
        let doc = fig2_doc();
        for mode in [AnchorMode::First, AnchorMode::Last, AnchorMode::FirstLast] {
            let cfg = AnchorConfig::new(receipt_classes()).with_mode(mode);
            let t = encode_targets(&doc, &cfg).unwrap();
            let preds = perfect_predictions(&t, cfg.class_set.len(), |i| doc.ocr.words[i].box_);
            let parse = decode_predictions(&preds, &doc.ocr, &cfg).unwrap();
            assert_eq!(parse.groups.len(), 2, "mode {mode:?}");
            assert!(parse.orphans.is_empty());
            let kv = parse
                .groups
                .iter()
                .find(|g| g.group_kind == GroupKind::KeyValue)
                .unwrap();
            assert_eq!(kv.primary.text, "Ship To:");
            assert_eq!(kv.secondaries[0].text, "ABC");
            let li = parse
                .groups
                .iter()
                .find(|g| g.group_kind == GroupKind::LineItem)
                .unwrap();
            assert_eq!(li.primary.text, "Chicken");
            let mut texts: Vec<&str> = li.secondaries.iter().map(|e| e.text.as_str()).collect();
            texts.sort_unstable();
            assert_eq!(texts, vec!["$5.00", "2"]);
        }
    }

    #[test]
    fn suppressed_affinity_moves_entity_to_orphans() {
        let doc = fig2_doc();
        let cfg = AnchorConfig::new(receipt_classes());
        let t = encode_targets(&doc, &cfg).unwrap();
        let mut preds = perfect_predictions(&t, cfg.class_set.len(), |i| doc.ocr.words[i].box_);
        // Token 4 ("2") is a secondary; point its embedding away from every
        // primary so its best affinity falls below the threshold.
        for k in 0..preds.es_head.ncols() {
            preds.es_head[[4, k]] = -1.0;
        }
        let parse = decode_predictions(&preds, &doc.ocr, &cfg).unwrap();
        assert_eq!(parse.orphans.len(), 1);
        assert_eq!(parse.orphans[0].text, "2");
        let li = parse
            .groups
            .iter()
            .find(|g| g.group_kind == GroupKind::LineItem)
            .unwrap();
        assert_eq!(li.secondaries.len(), 1);
        assert_eq!(li.secondaries[0].text, "$5.00");
        let kv = parse
            .groups
            .iter()
            .find(|g| g.group_kind == GroupKind::KeyValue)
            .unwrap();
        assert_eq!(kv.secondaries.len(), 1, "other groups unchanged");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let doc = fig2_doc();
        let cfg = AnchorConfig::new(receipt_classes());
        let t = encode_targets(&doc, &cfg).unwrap();
        let preds = perfect_predictions(&t, cfg.class_set.len(), |i| doc.ocr.words[i].box_);
        let mut short = doc.ocr.clone();
        short.words.pop();
        assert!(matches!(
            decode_predictions(&preds, &short, &cfg),
            Err(CodecError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_text_joins_in_raster_order() {
        let doc = fig2_doc();
        let key_box = doc.groups[0].primary.box_;
        assert_eq!(aggregate_entity_text(&key_box, &doc.ocr), "Ship To:");
        let empty = BBox::from_corners(0.9, 0.9, 0.95, 0.95);
        assert_eq!(aggregate_entity_text(&empty, &doc.ocr), "");
    }

    #[test]
    fn parse_result_json_shape_is_stable() {
        let doc = fig2_doc();
        let cfg = AnchorConfig::new(receipt_classes());
        let t = encode_targets(&doc, &cfg).unwrap();
        let preds = perfect_predictions(&t, cfg.class_set.len(), |i| doc.ocr.words[i].box_);
        let parse = decode_predictions(&preds, &doc.ocr, &cfg).unwrap();
        let json = parse.to_json();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, vec!["groups", "orphans"]);
        let g0 = &json["groups"][0];
        assert!(g0.get("kind").is_some());
        let f0 = &g0["fields"][0];
        for k in ["label", "text", "box"] {
            assert!(f0.get(k).is_some(), "missing field key {k}");
        }
        assert_eq!(f0["box"].as_array().unwrap().len(), 4);
    }
}
