"""Per-class overlap regression, proposal labeling, and spatial-pyramid
scene classification.

Each category model predicts the IoU of a region with the best-matching
ground-truth object of its class; proposals are labeled by the argmax over
per-class predictions. Ridge regression (closed form, bias unpenalized) is
the default; an epsilon-insensitive linear SVR is available behind the same
interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import SegmentMask, mask_iou


@dataclass
class CategoryModel:
    class_id: int
    weights: np.ndarray
    bias: float
    regularization: float

    def predict(self, features):
        return np.asarray(features) @ self.weights + self.bias


@dataclass
class LabeledSegment:
    mask: SegmentMask
    class_id: int
    confidence: float


@dataclass
class TrainingSets:
    """Shared feature rows with one target vector per class."""

    features: np.ndarray   # (m, n)
    class_ids: list        # (C,)
    targets: np.ndarray    # (C, m)


def ridge_fit(x, t, regularization):
    """Minimize sum (w.x + b - t)^2 + reg ||w||^2 with an unpenalized bias."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.ptp(t) == 0.0:
        return np.zeros(x.shape[1]), float(t[0]) if len(t) else 0.0
    x_mean = x.mean(axis=0)
    t_mean = t.mean()
    xc = x - x_mean
    n = x.shape[1]
    gram = xc.T @ xc + regularization * np.eye(n)
    w = np.linalg.solve(gram, xc.T @ (t - t_mean))
    return w, float(t_mean - x_mean @ w)


def _svr_fit(x, t, regularization, epsilon=0.05, iterations=500, lr=None):
    """Epsilon-insensitive linear SVR by deterministic full-batch subgradient
    descent on reg/2 ||w||^2 + sum max(0, |w.x + b - t| - eps)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    m, n = x.shape
    w = np.zeros(n)
    b = t.mean()
    scale = max(np.abs(x).max(), 1.0)
    lr = lr if lr is not None else 1.0 / (m * scale**2)
    for it in range(iterations):
        resid = x @ w + b - t
        active = np.abs(resid) > epsilon
        sign = np.sign(resid) * active
        gw = regularization * w + x.T @ sign
        gb = sign.sum()
        step = lr / (1 + it / 50)
        w -= step * gw
        b -= step * gb
    return w, float(b)


def assemble_training(gt, proposals, gt_features, proposal_features) -> TrainingSets:
    """Build per-class regression sets from ground truth and proposals.

    gt: per image, a list of (class_id, SegmentMask) objects.
    proposals: per image, a list of SegmentMask proposals.
    gt_features / proposal_features: per image, aligned descriptor matrices.

    Targets: a ground-truth mask scores 1 for its own class and 0 for every
    other class; a proposal scores its IoU with the best-matching ground-truth
    object of each class (0 when the image has none).
    """
    if len(gt) != len(proposals):
        raise ValueError("ground truth and proposals cover different image counts")
    rows, row_classes, row_kind, row_image = [], [], [], []
    for img, (objs, props) in enumerate(zip(gt, proposals)):
        feats = np.atleast_2d(gt_features[img]) if len(objs) else np.zeros((0, 0))
        if len(objs) and feats.shape[0] != len(objs):
            raise ValueError(f"image {img}: missing descriptor for a ground-truth mask")
        pfeats = np.atleast_2d(proposal_features[img]) if len(props) else np.zeros((0, 0))
        if len(props) and pfeats.shape[0] != len(props):
            raise ValueError(f"image {img}: missing descriptor for a proposal")
        for k, (class_id, _) in enumerate(objs):
            rows.append(feats[k])
            row_classes.append(class_id)
            row_kind.append("gt")
            row_image.append(img)
        for k in range(len(props)):
            rows.append(pfeats[k])
            row_classes.append(-1)
            row_kind.append("proposal")
            row_image.append(img)
    if not rows:
        raise ValueError("no training regions")
    features = np.vstack(rows)

    class_ids = sorted({c for objs in gt for c, _ in objs})
    targets = np.zeros((len(class_ids), len(rows)))
    # per image and class, best IoU of each proposal with that class's objects
    for img, (objs, props) in enumerate(zip(gt, proposals)):
        by_class = {}
        for class_id, mask in objs:
            by_class.setdefault(class_id, []).append(mask)
        prop_rows = [r for r in range(len(rows))
                     if row_image[r] == img and row_kind[r] == "proposal"]
        for ci, class_id in enumerate(class_ids):
            masks = by_class.get(class_id, [])
            if not masks:
                continue
            for r, prop in zip(prop_rows, props):
                targets[ci, r] = max(mask_iou(prop, m) for m in masks)
    for r, (class_id, kind) in enumerate(zip(row_classes, row_kind)):
        if kind == "gt":
            for ci, cid in enumerate(class_ids):
                targets[ci, r] = 1.0 if cid == class_id else 0.0
    return TrainingSets(features=features, class_ids=class_ids, targets=targets)


def train_category_models(sets: TrainingSets, regularization: float,
                          loss: str = "ridge") -> list:
    """One model per class over the shared feature rows.

    With the ridge loss the normal-equation factorization is shared across
    classes. A class whose targets are all identical degenerates to weights 0
    and bias equal to that target.
    """
    x = sets.features
    m, n = x.shape
    if m < 2:
        raise ValueError("need at least 2 training samples per class")
    models = []
    if loss == "ridge":
        x_mean = x.mean(axis=0)
        xc = x - x_mean
        gram = xc.T @ xc + regularization * np.eye(n)
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            chol = None
        for class_id, t in zip(sets.class_ids, sets.targets):
            if np.ptp(t) == 0.0:
                models.append(CategoryModel(class_id, np.zeros(n), float(t[0]),
                                            regularization))
                continue
            rhs = xc.T @ (t - t.mean())
            if chol is not None:
                w = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
            else:
                w = np.linalg.solve(gram, rhs)
            b = float(t.mean() - x_mean @ w)
            models.append(CategoryModel(class_id, w, b, regularization))
    elif loss == "svr":
        for class_id, t in zip(sets.class_ids, sets.targets):
            if np.ptp(t) == 0.0:
                models.append(CategoryModel(class_id, np.zeros(n), float(t[0]),
                                            regularization))
                continue
            w, b = _svr_fit(x, t, regularization)
            models.append(CategoryModel(class_id, w, b, regularization))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return models


def label_proposals(masks, features, models) -> list:
    """Argmax of per-class predicted overlap; ties go to the lowest class id."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(masks) != features.shape[0]:
        raise ValueError("mask/descriptor count mismatch")
    if features.shape[0] == 0:
        return []
    dim = models[0].weights.shape[0]
    if features.shape[1] != dim:
        raise ValueError(
            f"descriptor dim {features.shape[1]} does not match model dim {dim}")
    ordered = sorted(models, key=lambda m: m.class_id)
    scores = np.column_stack([m.predict(features) for m in ordered])
    best = np.argmax(scores, axis=1)  # argmax picks the lowest tied index
    return [
        LabeledSegment(mask=mask, class_id=ordered[k].class_id,
                       confidence=float(scores[i, k]))
        for i, (mask, k) in enumerate(zip(masks, best))
    ]


# -- scene classification -------------------------------------------------------

PYRAMID_GRIDS = (1, 2, 4)


def pyramid_cells(width: int, height: int) -> list:
    """The 21 full-cell masks of the 1, 2x2, 4x4 spatial pyramid."""
    cells = []
    for n in PYRAMID_GRIDS:
        ys = np.linspace(0, height, n + 1).astype(int)
        xs = np.linspace(0, width, n + 1).astype(int)
        for j in range(n):
            for i in range(n):
                bits = np.zeros((height, width), dtype=bool)
                bits[ys[j]:ys[j + 1], xs[i]:xs[i + 1]] = True
                cells.append(SegmentMask(bits))
    return cells


def scene_descriptor(describer, bank) -> np.ndarray:
    """Pooled blocks of all 21 pyramid cells, concatenated."""
    frame = describer.frame
    pieces = []
    for cell in pyramid_cells(frame.width, frame.height):
        region = describer.describe(cell, bank)
        pieces.append(region.concatenated)
    return np.concatenate(pieces)


@dataclass
class SceneModel:
    class_names: list
    weights: np.ndarray  # (C, dim)
    biases: np.ndarray   # (C,)
    regularization: float

    def scores(self, vec):
        return self.weights @ np.asarray(vec) + self.biases


def train_scene_models(vectors, labels, regularization: float = 1.0) -> SceneModel:
    """One-vs-all ridge scoring over scene descriptor vectors."""
    x = np.asarray(vectors, dtype=np.float64)
    names = sorted(set(labels))
    if len(names) < 2:
        raise ValueError("scene training needs at least 2 classes")
    weights, biases = [], []
    for name in names:
        t = np.array([1.0 if lab == name else 0.0 for lab in labels])
        w, b = ridge_fit(x, t, regularization)
        weights.append(w)
        biases.append(b)
    return SceneModel(class_names=names, weights=np.vstack(weights),
                      biases=np.array(biases), regularization=regularization)


def scene_classify(frame, cloud, models, bank=None, describer=None,
                   config=None):
    """Scene class and per-class scores for one frame."""
    from .descriptors import RegionDescriber

    if models is None:
        raise ValueError("scene models are not trained")
    if describer is None:
        describer = RegionDescriber(frame, cloud, config)
    vec = scene_descriptor(describer, bank)
    scores = models.scores(vec)
    best = int(np.argmax(scores))
    return models.class_names[best], dict(zip(models.class_names, scores))


# -- model files ------------------------------------------------------------------

def save_category_models(path, models) -> None:
    """Header (class count, dim as u32 LE) then per-class weights+bias f32."""
    import struct

    ordered = sorted(models, key=lambda m: m.class_id)
    dim = ordered[0].weights.shape[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(ordered), dim))
        for m in ordered:
            fh.write(struct.pack("<I", m.class_id))
            fh.write(m.weights.astype("<f4").tobytes())
            fh.write(struct.pack("<f", m.bias))


def load_category_models(path, regularization: float = 0.0) -> list:
    import struct

    with open(path, "rb") as fh:
        count, dim = struct.unpack("<II", fh.read(8))
        models = []
        for _ in range(count):
            (class_id,) = struct.unpack("<I", fh.read(4))
            w = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64)
            (b,) = struct.unpack("<f", fh.read(4))
            models.append(CategoryModel(class_id, w, float(b), regularization))
    return models
