"""scikit-learn compatible front end for budgeted fine-tuning."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import registry
from .data import Dataset, split
from .engine import forward
from .exceptions import ConfigError


def _check_images(X, model=None):
    X = check_array(X, allow_nd=True, dtype=[np.float64, np.float32])
    if X.ndim == 2:
        if model is None:
            X = X[:, None, None, :]
        else:
            X = X.reshape((len(X),) + tuple(model.input_shape))
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W) or (N, features), got {X.shape}")
    return X


class BudgetedFineTuner(ClassifierMixin, BaseEstimator):
    """Fine-tune a network while only a budgeted subset of neurons trains.

    Parameters
    ----------
    model : Sequential, str or None
        Starting network (typically pre-trained) or a checkpoint path. It is
        copied, never modified. ``None`` builds a fresh ``arch`` network.
    policy : {"velocity", "reweighted", "random", "static", "full", "threshold"}
        How the per-epoch update mask is chosen.
    budget : int, float or None
        Maximum number of trainable parameters per epoch; a float in (0, 1]
        is a fraction of the model's parameter count.
    epochs, warmup, lr_max : schedule of plain SGD (cosine decay after a
        linear warm-up).
    mu_eq : float
        Velocity momentum.
    first_epoch : {"random", "static"}
        Mask used by velocity policies before any velocity is measured.
    reinit_head : bool
        Replace the classifier with a freshly initialised one sized to the
        classes seen in ``fit``.

    Attributes
    ----------
    model_ : Sequential
    history_ : list of EpochRecord
    masks_ : list of UpdateMask
    classes_ : ndarray
    budget_ : int or None
        Budget in parameters after resolving fractions.
    """

    def __init__(self, model=None, policy="velocity", budget=0.1, epochs=30, warmup=5,
                 lr_max=0.125, mu_eq=0.5, epsilon=0.0, eval_subset=256, val_fraction=0.1,
                 batch_size=64, pinned="classifier", fill=False, first_epoch="random",
                 static_scheme=None, reinit_head=True, arch="small_cnn", precision="f32",
                 random_state=0, weights_seed=0, selection_seed=0, dump_dir=None):
        self.model = model
        self.policy = policy
        self.budget = budget
        self.epochs = epochs
        self.warmup = warmup
        self.lr_max = lr_max
        self.mu_eq = mu_eq
        self.epsilon = epsilon
        self.eval_subset = eval_subset
        self.val_fraction = val_fraction
        self.batch_size = batch_size
        self.pinned = pinned
        self.fill = fill
        self.first_epoch = first_epoch
        self.static_scheme = static_scheme
        self.reinit_head = reinit_head
        self.arch = arch
        self.precision = precision
        self.random_state = random_state
        self.weights_seed = weights_seed
        self.selection_seed = selection_seed
        self.dump_dir = dump_dir

    def _initial_model(self, sample_shape, n_classes):
        if self.model is None:
            return registry.build_model(self.arch, sample_shape, n_classes, seed=self.weights_seed,
                                        precision=self.precision)
        if isinstance(self.model, str):
            model = registry.load_checkpoint(self.model)
        else:
            model = self.model.copy()
        out_units = model.layers[model.param_layers()[-1]].n_neurons
        if self.reinit_head:
            registry.reinit_classifier(model, self.weights_seed + 1, n_classes=n_classes)
        elif out_units != n_classes:
            raise ConfigError(f"model has {out_units} outputs but the data has {n_classes} classes")
        return model

    def make_tuner(self, X, y, X_test=None, y_test=None):
        """Validate inputs and build the underlying loop without running it."""
        from .trainer import FineTuner

        X, y = check_X_y(X, y, allow_nd=True, dtype=[np.float64, np.float32])
        X = _check_images(X, None if self.model is None or isinstance(self.model, str) else self.model)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        n_classes = len(self.classes_)
        model = self._initial_model(X.shape[1:], n_classes)
        pool = Dataset(X, y_enc, n_classes)
        uses_val = self.policy in ("velocity", "reweighted", "threshold")
        if uses_val:
            val, train = split(pool, [self.val_fraction, 1 - self.val_fraction], seed=self.random_state)
        else:
            val, train = None, pool
        test = None
        if X_test is not None:
            X_test = _check_images(check_array(X_test, allow_nd=True), model)
            y_test = np.searchsorted(self.classes_, np.asarray(y_test))
            test = Dataset(X_test, y_test, n_classes)
        return FineTuner(model, train, val, test, policy=self.policy, budget=self.budget,
                         epochs=self.epochs, warmup=self.warmup, lr_max=self.lr_max, mu_eq=self.mu_eq,
                         epsilon=self.epsilon, eval_subset=self.eval_subset,
                         batch_size=self.batch_size, data_seed=self.random_state,
                         selection_seed=self.selection_seed, pinned=self.pinned, fill=self.fill,
                         first_epoch=self.first_epoch, static_scheme=self.static_scheme,
                         dump_dir=self.dump_dir)

    def fit(self, X, y, X_test=None, y_test=None):
        """Run the full schedule on ``(X, y)``.

        A validation split is carved out of ``X`` for velocity measurement;
        ``X_test``/``y_test``, when given, are scored after every epoch.
        """
        tuner = self.make_tuner(X, y, X_test, y_test)
        tuner.run()
        self._absorb(tuner)
        return self

    def _absorb(self, tuner):
        self.tuner_ = tuner
        self.model_ = tuner.model
        self.history_ = tuner.records
        self.masks_ = tuner.masks
        self.budget_ = tuner.budget
        self.total_params_ = tuner.total_params
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, self.model_)
        out = [forward(self.model_, X[i:i + 512])[0] for i in range(0, len(X), 512)]
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
