"""Language separability of the latent space, measured by a logistic-regression probe.

Features are the model's pooled hidden vectors; the probe predicts language
ids with multinomial logistic regression (zero init, full-batch gradient
descent, L2 on the weights but not the intercept) under stratified k-fold
cross-validation.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, forward_examples, softmax
from .seeds import derive_rng

DEFAULT_L2 = 1.0
DEFAULT_MAX_ITERS = 1000
DEFAULT_TOL = 1e-6


@dataclass
class ProbeReport:
    fold_accuracies: list
    mean_accuracy: float
    n_per_language: list
    l2: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean_accuracy,
            "n_per_language": self.n_per_language,
            "l2": self.l2,
            "seed": self.seed,
        }


def extract_features(params: ModelParams, dataset):
    """One pooled vector per example -> (features (n, h), language ids (n,))."""
    if not dataset:
        raise ValueError("empty dataset")
    _, pooled = forward_examples(params, dataset)
    langs = np.array([ex.language for ex in dataset], dtype=np.int64)
    return pooled, langs


def fit_logreg(features, labels, l2: float = DEFAULT_L2, max_iters: int = DEFAULT_MAX_ITERS,
               tol: float = DEFAULT_TOL) -> np.ndarray:
    """Multinomial logistic regression by full-batch gradient descent.

    Objective: mean cross-entropy + l2/(2n) * ||W||^2 (intercept
    unregularized). Zero initialization and a Lipschitz step size make the
    fit deterministic. Returns stacked (d+1, K) weights, last row intercept.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("features/labels shape mismatch")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least 2 languages to fit the probe")
    K = int(classes.max()) + 1
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    W = np.zeros((d + 1, K))
    onehot = np.zeros((n, K))
    onehot[np.arange(n), y] = 1.0

    # Softmax CE Hessian is bounded by (1/2) X^T X / n; add the ridge term.
    smax = np.linalg.norm(Xb, ord=2)
    lipschitz = 0.5 * smax**2 / n + l2 / n
    step = 1.0 / lipschitz

    reg_mask = np.ones((d + 1, 1))
    reg_mask[d] = 0.0
    for _ in range(max_iters):
        P = softmax(Xb @ W)
        grad = Xb.T @ (P - onehot) / n + (l2 / n) * W * reg_mask
        if np.abs(grad).max() <= tol:
            break
        W -= step * grad
    return W


def predict_logreg(W: np.ndarray, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    return (Xb @ W).argmax(axis=1)


def stratified_folds(labels, k: int, seed: int = 0):
    """Deal examples into k folds, language-stratified to within one example.

    Each language's examples are shuffled by a derived stream, concatenated
    in language order and dealt round-robin, so fold sizes differ by at
    most one overall and per language.
    """
    y = np.asarray(labels, dtype=np.int64)
    n = y.shape[0]
    if not (2 <= k <= n):
        raise ValueError(f"k={k} must be in [2, n={n}]")
    order = []
    for lang in sorted(set(y.tolist())):
        idx = np.flatnonzero(y == lang)
        rng = derive_rng(seed, "probe", "fold", lang)
        order.extend(idx[rng.permutation(idx.size)].tolist())
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(idx)
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def cross_validate(features, labels, k: int = 5, seed: int = 0, l2: float = DEFAULT_L2,
                   max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> ProbeReport:
    """Stratified k-fold probe accuracy; every example is scored exactly once."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    langs, counts = np.unique(y, return_counts=True)
    if langs.size < 2:
        raise ValueError("need at least 2 languages")
    if counts.min() < 2:
        raise ValueError("every language needs at least 2 examples")
    folds = stratified_folds(y, k, seed)
    accs = []
    for f, held in enumerate(folds):
        train_idx = np.array(sorted(set(range(len(y))) - set(held.tolist())), dtype=np.int64)
        if np.unique(y[train_idx]).size < langs.size:
            raise ValueError(f"fold {f}: training folds miss a language; too few examples per language")
        W = fit_logreg(X[train_idx], y[train_idx], l2=l2, max_iters=max_iters, tol=tol)
        preds = predict_logreg(W, X[held])
        accs.append(float((preds == y[held]).mean()) if held.size else float("nan"))
    return ProbeReport(
        fold_accuracies=accs,
        mean_accuracy=float(np.mean(accs)),
        n_per_language=[int(c) for c in counts],
        l2=l2,
        seed=seed,
    )


def probe_model(params: ModelParams, dataset, k: int = 5, seed: int = 0, l2: float = DEFAULT_L2,
                max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> ProbeReport:
    """Extract pooled features from ``dataset`` and cross-validate the language probe."""
    features, langs = extract_features(params, dataset)
    return cross_validate(features, langs, k=k, seed=seed, l2=l2, max_iters=max_iters, tol=tol)


def write_probe_json(report: ProbeReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def append_probe_csv(path, model_tag: str, corpus_tag: str, report: ProbeReport, header: bool = False) -> None:
    """One row per (model, corpus, fold)."""
    mode = "w" if header else "a"
    with open(path, mode, encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if header:
            writer.writerow(["model", "corpus", "fold", "accuracy"])
        for fold, acc in enumerate(report.fold_accuracies):
            writer.writerow([model_tag, corpus_tag, fold, repr(acc)])
