"""Overall accuracy, average accuracy and Cohen's kappa from a confusion matrix."""

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    """All accuracies are percentages. ``per_class`` is NaN for classes absent from the test set."""

    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray
    confusion: np.ndarray

    def to_dict(self):
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class": [None if np.isnan(v) else float(v) for v in self.per_class],
            "confusion_matrix": self.confusion.astype(int).tolist(),
        }


def confusion_matrix(y_true, y_pred, n_classes):
    """Rows are true classes, columns predictions; labels are 0-based."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def metrics_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    support = cm.sum(axis=1)
    present = support > 0
    if not present.all():
        warnings.warn(
            f"classes {np.flatnonzero(~present).tolist()} have no test samples; excluded from AA",
            stacklevel=2,
        )
    per_class = np.full(cm.shape[0], np.nan)
    per_class[present] = np.diag(cm)[present] / support[present]
    p_o = np.trace(cm) / total
    p_e = float(support @ cm.sum(axis=0)) / total**2
    kappa = (p_o - p_e) / (1.0 - p_e) if p_e < 1.0 else 1.0
    return Metrics(
        oa=100.0 * p_o,
        aa=100.0 * float(np.mean(per_class[present])),
        kappa=100.0 * kappa,
        per_class=100.0 * per_class,
        confusion=cm.astype(np.int64),
    )


def evaluate(logits, labels, test_mask, n_classes=None):
    """Metrics of ``argmax(logits)`` on the masked pixels.

    ``labels`` uses 1..K for classes and 0 for unlabeled, like the cube label mask.
    """
    scores = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels).reshape(-1)
    mask = np.asarray(test_mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("evaluation mask selects no pixels")
    if np.any(labels[mask] == 0):
        raise ValueError("evaluation mask includes unlabeled pixels")
    k = scores.shape[-1] if n_classes is None else n_classes
    pred = scores.reshape(-1, scores.shape[-1]).argmax(axis=1)
    cm = confusion_matrix(labels[mask].astype(np.intp) - 1, pred[mask], k)
    return metrics_from_confusion(cm)
