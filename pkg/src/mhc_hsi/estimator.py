"""scikit-learn style wrapper around the whole-image network.

The estimator is transductive in the usual HSI sense: ``X`` is an entire
``[H, W, C]`` cube and ``y`` the matching ``[H, W]`` label mask (0 marks
unlabeled pixels). ``fit`` trains on the labeled pixels (or on an explicit
``train_mask``) and ``predict`` labels every pixel of any cube recorded with
the same bands.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nx
from .dataio import HsiCube
from .exceptions import DataError, DimensionError
from .metrics import evaluate
from .model import ModelConfig, MHCNetwork, band_statistics, export_hres_maps, train
from .streams import check_wavelengths


def check_cube(X, wavelengths=None):
    """Return ``(reflectance [H, W, C] float64, wavelengths [C])``.

    ``X`` may be an :class:`HsiCube`, in which case its own wavelength table
    is used unless ``wavelengths`` overrides it.
    """
    if isinstance(X, HsiCube):
        wavelengths = X.wavelengths if wavelengths is None else wavelengths
        X = X.reflectance
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3:
        raise DimensionError(f"expected an [H, W, C] cube, got shape {X.shape}")
    if wavelengths is None:
        raise DimensionError("a wavelength table is required (pass an HsiCube or wavelengths=...)")
    wl = check_wavelengths(wavelengths)
    if wl.size != X.shape[2]:
        raise DimensionError(f"{wl.size} wavelengths for a cube with {X.shape[2]} bands")
    return X, wl


def check_label_mask(y, shape):
    """Validate an ``[H, W]`` integer label mask (0 = unlabeled)."""
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise DimensionError(f"label mask shape {y.shape} does not match image {tuple(shape)}")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0):
        raise DataError("labels must be non-negative integers with 0 for unlabeled")
    return y.astype(np.intp)


class MHCHSIClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Clustering-guided hyper-connection Mamba classifier for HSI cubes.

    Parameters mirror :class:`~mhc_hsi.model.ModelConfig`; ``random_state``
    seeds initialization. After ``fit``: ``network_``, ``history_``,
    ``classes_`` (labels 1..K), ``wavelengths_`` and ``n_features_in_``.
    """

    def __init__(self, hidden_dim=16, n_streams=5, blocks=6, groups=4, state_size=8, rho=0.25,
                 sinkhorn_iters=10, stream_mode="spectrum", lr=1e-3, steps=1000, random_state=0,
                 verbose=False):
        self.hidden_dim = hidden_dim
        self.n_streams = n_streams
        self.blocks = blocks
        self.groups = groups
        self.state_size = state_size
        self.rho = rho
        self.sinkhorn_iters = sinkhorn_iters
        self.stream_mode = stream_mode
        self.lr = lr
        self.steps = steps
        self.random_state = random_state
        self.verbose = verbose

    def _config(self):
        return ModelConfig(
            hidden_dim=self.hidden_dim, n_streams=self.n_streams, blocks=self.blocks,
            groups=self.groups, state_size=self.state_size, rho=self.rho,
            sinkhorn_iters=self.sinkhorn_iters, lr=self.lr, steps=self.steps,
            seed=int(self.random_state or 0), stream_mode=self.stream_mode,
        )

    def fit(self, X, y, wavelengths=None, train_mask=None, n_classes=None):
        reflectance, wl = check_cube(X, wavelengths)
        labels = check_label_mask(y, reflectance.shape[:2])
        mask = labels > 0 if train_mask is None else np.asarray(train_mask, dtype=bool)
        if mask.shape != labels.shape:
            raise DimensionError(f"train mask shape {mask.shape} does not match {labels.shape}")
        if not mask.any():
            raise DataError("no training pixels")
        if np.any(labels[mask] == 0):
            raise DataError("train mask includes unlabeled pixels")
        k = int(labels.max()) if n_classes is None else int(n_classes)
        cube = HsiCube(reflectance, wl, labels.astype(np.uint16), [f"class{i}" for i in range(1, k + 1)])
        config = self._config()
        network = MHCNetwork(config, wl, k, *band_statistics(reflectance))
        callback = None
        if self.verbose:
            def callback(row):
                if row["step"] % 50 == 0:
                    print(f"step {row['step']:5d}  loss {row['loss']:.4f}  train OA {row['train_oa']:.2f}")
        self.network_, self.history_ = train(cube, mask, config, network=network, callback=callback)
        self.classes_ = np.arange(1, k + 1)
        self.wavelengths_ = wl
        self.n_features_in_ = reflectance.shape[2]
        return self

    def _reflectance(self, X):
        check_is_fitted(self, "network_")
        reflectance, _ = check_cube(X, self.wavelengths_ if not isinstance(X, HsiCube) else None)
        if reflectance.shape[2] != self.n_features_in_:
            raise DimensionError(f"cube has {reflectance.shape[2]} bands, model expects {self.n_features_in_}")
        return reflectance

    def decision_function(self, X):
        """Logits ``[H, W, K]``."""
        reflectance = self._reflectance(X)
        with nx.no_grad():
            logits = self.network_(reflectance).data
        return logits.reshape(reflectance.shape[:2] + (logits.shape[-1],))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def predict(self, X):
        """Label map ``[H, W]`` with values in ``classes_``."""
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=-1)]

    def transform(self, X):
        """Stream-averaged features ``[H, W, D]`` fed to the classification head."""
        reflectance = self._reflectance(X)
        with nx.no_grad():
            h = self.network_.features(reflectance).data
        return h.reshape(reflectance.shape[:2] + (h.shape[-1],))

    def score(self, X, y, mask=None):
        """Overall accuracy (fraction) over labeled pixels or ``mask``."""
        labels = check_label_mask(y, np.shape(getattr(X, "reflectance", X))[:2])
        mask = labels > 0 if mask is None else np.asarray(mask, dtype=bool)
        logits = self.decision_function(X)
        return evaluate(logits, labels, mask, len(self.classes_)).oa / 100.0

    def hres_maps(self, X, layer, sublayer="cgm"):
        """Residual mixing maps ``{"SRC_to_DST": [H, W]}`` of one sublayer."""
        reflectance = self._reflectance(X)
        cube = HsiCube(reflectance, self.wavelengths_, np.zeros(reflectance.shape[:2], np.uint16),
                       [str(c) for c in self.classes_])
        return export_hres_maps(self.network_, cube, layer, sublayer)
