"""Metrics and protocols: confusion/ACC, ROC/AUC, pair verification,
gallery identification, and raw branch-feature export."""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, UndefinedMetricError

FEATURE_MAGIC = b"TMEX"
FEATURE_FORMAT_VERSION = 1


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion(probabilities, labels, threshold=0.5):
    """Count TP/FP/TN/FN at the given probability threshold.

    A probability exactly equal to the threshold counts as positive.
    """
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"got {p.size} probabilities but {y.size} labels")
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = p >= threshold
    truth = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def accuracy(cm):
    """(TP + TN) / (TP + TN + FP + FN)."""
    if cm.total == 0:
        raise UndefinedMetricError("accuracy is undefined on zero samples")
    return (cm.tp + cm.tn) / cm.total


@dataclass
class RocCurve:
    """Threshold-sweep operating points, (0,0) to (1,1), plus trapezoid AUC."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("fpr,tpr,threshold\n")
            for f, t, thr in zip(self.fpr, self.tpr, self.thresholds):
                fh.write(f"{f:.10g},{t:.10g},{thr:.10g}\n")
        return path


def roc_auc(scores, labels):
    """ROC curve over the unique score thresholds, AUC by the trapezoid rule.

    The trapezoid area is accumulated with integer arithmetic (count
    deltas times count sums) and divided once at the end, so it equals the
    Mann-Whitney pair statistic with ties counted half, exactly.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1) == 1
    if s.shape[0] != y.shape[0]:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(~y_sorted)
    distinct = np.nonzero(np.diff(s_sorted))[0]
    last = np.concatenate([distinct, [s.size - 1]])
    tp_steps = np.concatenate([[0], tps[last]]).astype(np.int64)
    fp_steps = np.concatenate([[0], fps[last]]).astype(np.int64)
    # twice the trapezoid numerator: sum of d(FP) * (TP_prev + TP_next)
    twice_area = int(np.sum(np.diff(fp_steps) * (tp_steps[1:] + tp_steps[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    thresholds = np.concatenate([[np.inf], s_sorted[last]])
    return RocCurve(
        fpr=fp_steps / n_neg,
        tpr=tp_steps / n_pos,
        thresholds=thresholds,
        auc=auc,
    )


def best_threshold_accuracy(scores, labels):
    """Best 0/1 accuracy over the swept thresholds (decision: score >= t).

    The sweep covers every distinct decision boundary, so no fixed
    threshold can beat the returned accuracy on the same data.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1) == 1
    candidates = np.concatenate([np.unique(s), [np.inf]])
    best_acc, best_thr = -1.0, candidates[0]
    for thr in candidates:
        acc = float(np.mean((s >= thr) == y))
        if acc > best_acc:
            best_acc, best_thr = acc, float(thr)
    return best_acc, best_thr


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def embed(model, images, batch_size=64):
    """Face-branch embeddings for an (N, H, W, C) array, as float64 rows."""
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            out.append(model.forward_task(chunk.to(dtype), "face").double().numpy())
    return np.concatenate(out, axis=0)


@dataclass
class VerificationResult:
    accuracy: float
    threshold: float
    roc: RocCurve
    similarities: np.ndarray
    labels: np.ndarray


def verify_pairs(model, pairs):
    """One-to-one verification over (image_a, image_b, same) triples.

    Scores each pair by embedding cosine similarity, then reports accuracy
    at the best threshold found on the pair set itself (threshold sweep)
    together with the full ROC.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("pair list must be non-empty")
    a = np.stack([p[0] for p in pairs])
    b = np.stack([p[1] for p in pairs])
    same = np.array([bool(p[2]) for p in pairs])
    emb_a = embed(model, a)
    emb_b = embed(model, b)
    emb_a /= np.linalg.norm(emb_a, axis=1, keepdims=True)
    emb_b /= np.linalg.norm(emb_b, axis=1, keepdims=True)
    sims = np.sum(emb_a * emb_b, axis=1)
    roc = roc_auc(sims, same.astype(int))
    acc, threshold = best_threshold_accuracy(sims, same.astype(int))
    return VerificationResult(
        accuracy=acc, threshold=threshold, roc=roc, similarities=sims, labels=same
    )


def make_verification_pairs(dataset, n_pairs=200, seed=0):
    """Balanced same/different pairs drawn deterministically from a face set."""
    rng = np.random.default_rng([seed, 97])
    by_id = {}
    for idx, label in enumerate(dataset.labels):
        by_id.setdefault(int(label), []).append(idx)
    ids = sorted(i for i, members in by_id.items() if len(members) >= 2)
    if len(by_id) < 2 or not ids:
        raise ConfigError("need >= 2 identities with >= 2 images to build pairs")
    pairs = []
    for k in range(n_pairs // 2):
        pid = ids[k % len(ids)]
        i, j = rng.choice(by_id[pid], size=2, replace=False)
        pairs.append((dataset.images[i], dataset.images[j], True))
    all_ids = sorted(by_id)
    for k in range(n_pairs - n_pairs // 2):
        pid_a = all_ids[k % len(all_ids)]
        pid_b = all_ids[(k + 1 + rng.integers(len(all_ids) - 1)) % len(all_ids)]
        if pid_a == pid_b:
            pid_b = all_ids[(all_ids.index(pid_b) + 1) % len(all_ids)]
        i = rng.choice(by_id[pid_a])
        j = rng.choice(by_id[pid_b])
        pairs.append((dataset.images[i], dataset.images[j], False))
    return pairs


@dataclass
class Gallery:
    """Identity id -> unit-norm reference embeddings, plus decision threshold."""

    references: dict  # id -> (R, D) ndarray of unit rows
    threshold: float = 0.5

    def __post_init__(self):
        for identity, refs in self.references.items():
            refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
            norms = np.linalg.norm(refs, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError(f"gallery embeddings for id {identity} are not unit-norm")
            self.references[identity] = refs

    @classmethod
    def from_dataset(cls, model, dataset, threshold=0.5):
        """Mean embedding per identity, re-normalized."""
        embeddings = embed(model, dataset.images)
        refs = {}
        for identity in sorted(set(int(l) for l in dataset.labels)):
            mean = embeddings[dataset.labels == identity].mean(axis=0)
            refs[identity] = (mean / np.linalg.norm(mean))[None, :]
        return cls(references=refs, threshold=threshold)


def identify(embedding, gallery):
    """Best-match identity by cosine similarity, or None below threshold.

    Equal-similarity ties resolve to the lowest identity id.
    """
    if not gallery.references:
        raise ConfigError("gallery is empty")
    q = np.asarray(embedding, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("query embedding has zero norm")
    q = q / norm
    best_id, best_sim = None, -np.inf
    for identity in sorted(gallery.references):
        sim = float(np.max(gallery.references[identity] @ q))
        if sim > best_sim:
            best_id, best_sim = identity, sim
    return best_id if best_sim >= gallery.threshold else None


def export_branch_features(model, images, path):
    """Write both branches' LASE output tensors for a batch to ``path``.

    Format: magic ``TMEX``, u32 header length, JSON header (version,
    dtype, per-record shape, branch names, record count per branch), then
    length-prefixed raw little-endian records ordered branch-major.
    """
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model.forward_both(torch.from_numpy(np.ascontiguousarray(images)).to(dtype))
    branch_tensors = {
        "fatigue": out.fatigue_features.double().numpy(),
        "face": out.face_features.double().numpy(),
    }
    count = images.shape[0]
    shape = list(branch_tensors["fatigue"].shape[1:])
    header = {
        "format_version": FEATURE_FORMAT_VERSION,
        "dtype": "<f8",
        "shape": shape,
        "branches": ["fatigue", "face"],
        "count": count,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for branch in header["branches"]:
                arr = branch_tensors[branch]
                for i in range(count):
                    record = np.ascontiguousarray(arr[i]).astype("<f8").tobytes()
                    fh.write(struct.pack("<I", len(record)))
                    fh.write(record)
    except OSError as exc:
        raise OSError(f"feature export to {path} failed: {exc}") from exc
    return path


def read_branch_features(path):
    """Round-trip reader for export_branch_features output."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature export file")
    (header_len,) = struct.unpack_from("<I", raw, len(FEATURE_MAGIC))
    offset = len(FEATURE_MAGIC) + 4
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    shape = tuple(header["shape"])
    result = {}
    for branch in header["branches"]:
        records = []
        for _ in range(header["count"]):
            (nbytes,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            records.append(
                np.frombuffer(raw[offset : offset + nbytes], dtype="<f8").reshape(shape)
            )
            offset += nbytes
        result[branch] = np.stack(records) if records else np.empty((0, *shape))
    return result


def evaluate_model(model, fatigue_dataset, face_dataset, pair_seed=0, n_pairs=200):
    """Both-task metrics: fatigue ACC/AUC at threshold 0.5, face one-to-one
    verification ACC/AUC over generated pairs, and their unweighted mean.
    """
    dtype = next(model.parameters()).dtype
    probs = []
    with torch.no_grad():
        for start in range(0, len(fatigue_dataset), 256):
            chunk = torch.from_numpy(
                np.ascontiguousarray(fatigue_dataset.images[start : start + 256])
            ).to(dtype)
            probs.append(torch.sigmoid(model.forward_task(chunk, "fatigue")).double().numpy())
    probs = np.concatenate(probs).reshape(-1)
    cm = confusion(probs, fatigue_dataset.labels)
    fatigue_acc = accuracy(cm)
    fatigue_roc = roc_auc(probs, fatigue_dataset.labels)

    pairs = make_verification_pairs(face_dataset, n_pairs=n_pairs, seed=pair_seed)
    verification = verify_pairs(model, pairs)

    return {
        "fatigue_acc": fatigue_acc,
        "fatigue_auc": fatigue_roc.auc,
        "fatigue_confusion": cm.to_dict(),
        "face_acc": verification.accuracy,
        "face_auc": verification.roc.auc,
        "face_threshold": verification.threshold,
        "avg_acc": (fatigue_acc + verification.accuracy) / 2.0,
    }, fatigue_roc, verification
